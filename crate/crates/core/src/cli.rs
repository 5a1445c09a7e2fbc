//! The `gsl` command line. Every run writes its resolved config next to
//! its outputs; that file plus the inputs determine the outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::audio::{compute_mfcc, MfccConfig, Waveform};
use crate::error::{Error, Result};
use crate::experiments::{
    chi_square_2x2, gating_curve, make_synthetic_corpus, naive_baseline, random_baseline, run_gating, run_plurality,
    run_word_recognition, summarize, write_gating_plot, ConfusionTable, Corpus, GlmmTable, NamedModel,
    PluralityOptions, RecognitionOptions, SynthConfig, TrialRecord,
};
use crate::lexicon::{Exclusion, NeighbourMode};
use crate::model::{GroundingModel, ModelConfig};
use crate::seed::sub_seed;
use crate::trainer::{evaluate_retrieval, train, EpochRecord, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "gsl", version, about = "Visually grounded speech: training and word recognition experiments")]
pub struct Cli {
    /// TOML run config; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, split into per-component seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Train the VQ model after the plain one.
    #[arg(long, global = true)]
    pub vq: bool,
    /// Epochs per training phase.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    Synth,
    /// Train the plain model, then the VQ model with --vq.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Caption/image retrieval on the test split.
    Eval {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long = "model")]
        models: Vec<PathBuf>,
    },
    /// Whole-word P@10 with random and naive baselines.
    Recognize {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long = "model")]
        models: Vec<PathBuf>,
    },
    /// P@10 per phoneme gate.
    Gate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long = "model")]
        models: Vec<PathBuf>,
    },
    /// Single/multiple referent counts for singular and plural prompts.
    Plurality {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        /// Stop each word before its last phone.
        #[arg(long)]
        penultimate: bool,
        /// Continuity-corrected chi-square.
        #[arg(long)]
        yates: bool,
    },
    /// Predictor table for mixed-model fitting from trial CSVs.
    Export {
        #[arg(required = true)]
        trials: Vec<PathBuf>,
    },
    /// 39-dimensional features from 16 kHz mono WAV files.
    Mfcc {
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Recognize { .. } => "recognize",
            Command::Gate { .. } => "gate",
            Command::Plurality { .. } => "plurality",
            Command::Export { .. } => "export",
            Command::Mfcc { .. } => "mfcc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub min_positives: usize,
    pub plurality_min_single: usize,
    pub plurality_min_multiple: usize,
    pub penultimate: bool,
    pub yates: bool,
    /// Count only substitutions as neighbours.
    pub substitution_only: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            min_positives: 10,
            plurality_min_single: 10,
            plurality_min_multiple: 10,
            penultimate: false,
            yates: false,
            substitution_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    pub models: Vec<PathBuf>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiments: ExperimentConfig,
    pub mfcc: MfccConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// Seeds of every component follow from the master seed.
    pub fn expand_seeds(&mut self) {
        self.synth.seed = sub_seed(self.seed, "synth");
        self.model.seed = sub_seed(self.seed, "model");
        self.train.seed = sub_seed(self.seed, "train");
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn recognition(&self) -> RecognitionOptions {
        RecognitionOptions {
            min_positives: self.experiments.min_positives,
            neighbours: if self.experiments.substitution_only {
                NeighbourMode::SubstitutionOnly
            } else {
                NeighbourMode::EditOne
            },
        }
    }
}

/// Config file, then flags, then seed expansion.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = cli.epochs {
        cfg.train.epochs = e;
    }
    if cli.vq {
        cfg.train.vq_enabled = true;
    }
    match &cli.command {
        Command::Train { corpus } => {
            if corpus.is_some() {
                cfg.corpus = corpus.clone();
            }
        }
        Command::Eval { corpus, models } | Command::Recognize { corpus, models } | Command::Gate { corpus, models } => {
            if corpus.is_some() {
                cfg.corpus = corpus.clone();
            }
            if !models.is_empty() {
                cfg.models = models.clone();
            }
        }
        Command::Plurality {
            corpus,
            models,
            penultimate,
            yates,
        } => {
            if corpus.is_some() {
                cfg.corpus = corpus.clone();
            }
            if !models.is_empty() {
                cfg.models = models.clone();
            }
            cfg.experiments.penultimate |= penultimate;
            cfg.experiments.yates |= yates;
        }
        _ => {}
    }
    cfg.expand_seeds();
    cfg.synth.validate()?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let busy = fs::read_dir(dir)?.next().is_some();
        if busy && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn corpus_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.corpus
        .as_deref()
        .ok_or_else(|| Error::MissingInput("no corpus directory (use --corpus or `corpus` in the config)".into()))
}

fn load_models(cfg: &RunConfig) -> Result<Vec<(String, GroundingModel)>> {
    if cfg.models.is_empty() {
        return Err(Error::MissingInput("no model directory (use --model or `models` in the config)".into()));
    }
    cfg.models
        .iter()
        .map(|p| {
            let m = GroundingModel::load(p)?;
            Ok((m.config.seed.to_string(), m))
        })
        .collect()
}

fn named(models: &[(String, GroundingModel)]) -> Vec<NamedModel<'_>> {
    models.iter().map(|(id, m)| NamedModel { id, model: m }).collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_exclusions(path: &Path, ex: &[Exclusion]) -> Result<()> {
    let mut s = String::from("word\treason\n");
    for e in ex {
        s.push_str(&format!("{}\t{}\n", e.word, e.reason));
    }
    fs::write(path, s)?;
    Ok(())
}

fn write_trace(path: &Path, trace: &[EpochRecord]) -> Result<()> {
    let layers = trace.iter().map(|r| r.perplexity.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["phase", "epoch", "batches", "mean_loss", "mean_hinge", "mean_vq", "final_lr"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=layers).map(|l| format!("perplexity_{l}")));
    w.write_record(&header)?;
    for r in trace {
        let mut row = vec![
            r.phase.to_string(),
            r.epoch.to_string(),
            r.batches.to_string(),
            r.mean_loss.to_string(),
            r.mean_hinge.to_string(),
            r.mean_vq.to_string(),
            r.final_lr.to_string(),
        ];
        row.extend((0..layers).map(|l| r.perplexity.get(l).map(f64::to_string).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (corpus, book) = make_synthetic_corpus(&cfg.synth)?;
    corpus.write(out)?;
    let mut s = String::from("lemma\tsingle\tmultiple\tn/a\ttrain\n");
    let lemmas: std::collections::BTreeSet<&String> =
        book.test_positives.keys().chain(book.train_positives.keys()).collect();
    for l in lemmas {
        let t = book.test_positives.get(l).copied().unwrap_or_default();
        let tr = book.train_positives.get(l).copied().unwrap_or_default();
        s.push_str(&format!("{l}\t{}\t{}\t{}\t{tr}\n", t[0], t[1], t[2]));
    }
    fs::write(out.join("bookkeeping.tsv"), s)?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = Corpus::load(corpus_path(cfg)?)?;
    let outcome = train(&corpus.train, &cfg.model, &cfg.train)?;
    outcome.plain.save(&out.join("plain"))?;
    if let Some(vq) = &outcome.vq {
        vq.save(&out.join("vq"))?;
    }
    write_trace(&out.join("trace.csv"), &outcome.trace)
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = Corpus::load(corpus_path(cfg)?)?;
    let models = load_models(cfg)?;
    let ns = [1, 5, 10];
    let mut w = csv::Writer::from_path(out.join("retrieval.csv"))?;
    let mut header = vec!["model_id".to_string(), "vq".into(), "direction".into()];
    header.extend(ns.iter().map(|n| format!("r_at_{n}")));
    header.extend(["median_rank".to_string(), "queries".into()]);
    w.write_record(&header)?;
    for (id, m) in &models {
        let (c2i, i2c) = evaluate_retrieval(m, &corpus.test, &ns)?;
        for r in [c2i, i2c] {
            let mut row = vec![id.clone(), m.has_vq().to_string(), r.direction.as_str().to_string()];
            row.extend(ns.iter().map(|n| format!("{:.4}", r.recall_at[n])));
            row.extend([r.median_rank.to_string(), r.queries.to_string()]);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    source: String,
    vq: bool,
    morphology: String,
    trials: usize,
    mean_p10_trials: f64,
    words: usize,
    mean_p10_words: f64,
}

fn cmd_recognize(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = Corpus::load(corpus_path(cfg)?)?;
    let models = load_models(cfg)?;
    let opts = cfg.recognition();
    let (trials, excluded) = run_word_recognition(&named(&models), &corpus, &opts)?;
    let base_cfg = &models[0].1.config;
    let random = random_baseline(base_cfg, sub_seed(cfg.seed, "baseline"), &corpus, &opts)?;
    let naive = naive_baseline(&corpus, &opts)?;
    write_csv(&out.join("trials.csv"), &trials)?;
    write_csv(&out.join("random_baseline.csv"), &random)?;
    write_csv(&out.join("naive_baseline.csv"), &naive)?;
    write_exclusions(&out.join("exclusions.tsv"), &excluded)?;

    let mut rows = Vec::new();
    for (source, set) in [("model", &trials), ("random", &random)] {
        for s in summarize(set) {
            rows.push(SummaryRow {
                source: source.into(),
                vq: s.vq,
                morphology: s.morphology,
                trials: s.trials,
                mean_p10_trials: s.mean_p10_trials,
                words: s.words,
                mean_p10_words: s.mean_p10_words,
            });
        }
    }
    let mut naive_groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for n in &naive {
        naive_groups.entry(&n.morphology).or_default().push(n.p10);
    }
    for (morph, v) in naive_groups {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        rows.push(SummaryRow {
            source: "naive".into(),
            vq: false,
            morphology: morph.into(),
            trials: v.len(),
            mean_p10_trials: mean,
            words: v.len(),
            mean_p10_words: mean,
        });
    }
    write_csv(&out.join("summary.csv"), &rows)
}

fn cmd_gate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = Corpus::load(corpus_path(cfg)?)?;
    let models = load_models(cfg)?;
    let (trials, excluded) = run_gating(&named(&models), &corpus, &cfg.recognition())?;
    write_csv(&out.join("gating_trials.csv"), &trials)?;
    write_exclusions(&out.join("exclusions.tsv"), &excluded)?;
    for vq in [false, true] {
        let subset: Vec<TrialRecord> = trials.iter().filter(|t| t.vq == vq).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        let name = if vq { "gating_plot_vq.dat" } else { "gating_plot.dat" };
        write_gating_plot(fs::File::create(out.join(name))?, &gating_curve(&subset))?;
    }
    Ok(())
}

fn cmd_plurality(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = Corpus::load(corpus_path(cfg)?)?;
    let models = load_models(cfg)?;
    let e = &cfg.experiments;
    let opts = PluralityOptions {
        min_single: e.plurality_min_single,
        min_multiple: e.plurality_min_multiple,
        penultimate: e.penultimate,
    };
    let (trials, excluded) = run_plurality(&named(&models), &corpus, &opts)?;
    write_csv(&out.join("plurality_trials.csv"), &trials)?;
    write_exclusions(&out.join("exclusions.tsv"), &excluded)?;
    let mut conf = String::from("vq,prompt,single,multiple,multiple_share\n");
    let mut chi = String::from("vq,chi2,df,n,yates\n");
    for vq in [false, true] {
        let subset: Vec<_> = trials.iter().filter(|t| t.vq == vq).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        let t = ConfusionTable::from_trials(&subset);
        for (row, prompt) in ["singular", "plural"].iter().enumerate() {
            conf.push_str(&format!(
                "{vq},{prompt},{},{},{}\n",
                t.counts[row][0],
                t.counts[row][1],
                t.multiple_share(row)
            ));
        }
        let stat = chi_square_2x2(t.counts, e.yates)?;
        chi.push_str(&format!("{vq},{stat},1,{},{}\n", t.total(), e.yates));
    }
    fs::write(out.join("confusion.csv"), conf)?;
    fs::write(out.join("chi_square.csv"), chi)?;
    Ok(())
}

fn cmd_export(trial_files: &[PathBuf], out: &Path) -> Result<()> {
    let mut trials: Vec<TrialRecord> = Vec::new();
    for p in trial_files {
        let mut r = csv::Reader::from_path(p).map_err(|e| Error::MissingInput(format!("{}: {e}", p.display())))?;
        for rec in r.deserialize() {
            trials.push(rec?);
        }
    }
    let table = GlmmTable::build(&trials)?;
    table.write_csv(fs::File::create(out.join("glmm.csv"))?)
}

fn cmd_mfcc(cfg: &RunConfig, wavs: &[PathBuf], out: &Path) -> Result<()> {
    for p in wavs {
        let w = Waveform::read_wav(p)?;
        let stem = p
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("bad file name {}", p.display())))?;
        compute_mfcc(&w, &cfg.mfcc, stem)?.save(&out.join(format!("{stem}.feat")))?;
    }
    Ok(())
}

/// Runs one command and writes `config.toml` into the output directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = resolve(cli)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(format!("gsl-{}", cli.command.name())));
    prepare_out(&out, cli.force)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &out)?,
        Command::Train { .. } => cmd_train(&cfg, &out)?,
        Command::Eval { .. } => cmd_eval(&cfg, &out)?,
        Command::Recognize { .. } => cmd_recognize(&cfg, &out)?,
        Command::Gate { .. } => cmd_gate(&cfg, &out)?,
        Command::Plurality { .. } => cmd_plurality(&cfg, &out)?,
        Command::Export { trials } => cmd_export(trials, &out)?,
        Command::Mfcc { wavs } => cmd_mfcc(&cfg, wavs, &out)?,
    }
    Ok(out)
}

/// One line, tab separated: `error`, the error kind, the message.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\t'], " ");
    format!("error\t{}\t{msg}", e.kind())
}

/// Parses `args`, applies `GSL_THREADS` and runs. Returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Ok(n) = std::env::var("GSL_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("{}", error_line(&Error::Config(format!("GSL_THREADS=`{n}` is not a positive integer"))));
                return 1;
            }
        }
    }
    match run(&cli) {
        Ok(_) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "{}", error_line(&e));
            1
        }
    }
}
