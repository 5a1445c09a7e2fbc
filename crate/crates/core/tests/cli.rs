use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use groundspeech::experiments::TrialRecord;
use groundspeech::model::GroundingModel;

const SMALL: &str = r#"
seed = 3

[synth]
vocab_size = 6
n_verbs = 1
n_images = 60
distractors = 10

[model]
embed_dim = 16
conv_channels = 6
lstm_hidden = 8
attn_dim = 4

[model.vq]
codebook_sizes = [4, 6]

[train]
epochs = 1
batch_size = 8

[experiments]
min_positives = 2
"#;

fn gsl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsl")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = gsl(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(dir.path(), &["synth", "--config", "small.toml", "--out", "corpus"]);
    dir
}

#[test]
fn errors_are_one_line_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = gsl(dir.path(), &["recognize", "--corpus", "nowhere", "--model", "nothing"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error\t"));

    std::fs::write(dir.path().join("bad.toml"), "[train]\nlearning_rate = 1\n").unwrap();
    let out = gsl(dir.path(), &["synth", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error\tconfig\t"));
}

#[test]
fn existing_output_needs_force() {
    let dir = setup();
    let out = gsl(dir.path(), &["synth", "--config", "small.toml", "--out", "corpus"]);
    assert_eq!(out.status.code(), Some(1));
    ok(dir.path(), &["synth", "--config", "small.toml", "--out", "corpus", "--force"]);
}

#[test]
fn synth_is_reproducible_and_records_config() {
    let dir = setup();
    ok(dir.path(), &["synth", "--config", "small.toml", "--out", "again"]);
    for f in ["manifest.tsv", "annotations.tsv", "alignments.tsv", "dictionary.txt", "bookkeeping.tsv", "config.toml"] {
        let a = std::fs::read(dir.path().join("corpus").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("again").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let recorded = std::fs::read_to_string(dir.path().join("corpus/config.toml")).unwrap();
    assert!(recorded.contains("vocab_size = 6"));
}

#[test]
fn zero_epochs_saves_the_initial_weights() {
    let dir = setup();
    ok(dir.path(), &["train", "--config", "small.toml", "--corpus", "corpus", "--epochs", "0", "--out", "run"]);
    let saved = GroundingModel::load(&dir.path().join("run/plain")).unwrap();
    let fresh = GroundingModel::init(saved.config.clone()).unwrap();
    fresh.save(&dir.path().join("fresh")).unwrap();
    let a = std::fs::read(dir.path().join("run/plain/params.ckpt")).unwrap();
    let b = std::fs::read(dir.path().join("fresh/params.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gating_has_one_row_per_phone() {
    let dir = setup();
    ok(dir.path(), &["train", "--config", "small.toml", "--corpus", "corpus", "--out", "run"]);
    ok(dir.path(), &["gate", "--config", "small.toml", "--corpus", "corpus", "--model", "run/plain", "--out", "gate"]);
    ok(dir.path(), &["recognize", "--config", "small.toml", "--corpus", "corpus", "--model", "run/plain", "--out", "rec"]);
    let read = |p: &str| -> Vec<TrialRecord> {
        csv::Reader::from_path(dir.path().join(p)).unwrap().deserialize().map(Result::unwrap).collect()
    };
    let gates = read("gate/gating_trials.csv");
    let whole = read("rec/trials.csv");
    assert!(!whole.is_empty());
    let mut per_word: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for t in &gates {
        per_word.entry((t.word.clone(), t.speaker.clone())).or_default().push(t.gate);
    }
    for w in &whole {
        let g = &per_word[&(w.word.clone(), w.speaker.clone())];
        assert_eq!(*g, (1..=w.n_phones).collect::<Vec<_>>());
    }
    assert!(dir.path().join("gate/gating_plot.dat").exists());
}

#[test]
fn export_writes_one_row_per_trial() {
    let dir = setup();
    ok(dir.path(), &["train", "--config", "small.toml", "--corpus", "corpus", "--out", "run"]);
    ok(dir.path(), &["recognize", "--config", "small.toml", "--corpus", "corpus", "--model", "run/plain", "--out", "rec"]);
    ok(dir.path(), &["export", "rec/trials.csv", "--out", "glmm"]);
    let n_trials = csv::Reader::from_path(dir.path().join("rec/trials.csv")).unwrap().records().count();
    let mut r = csv::Reader::from_path(dir.path().join("glmm/glmm.csv")).unwrap();
    assert_eq!(r.headers().unwrap().get(0), Some("model_id"));
    assert_eq!(r.records().count(), n_trials);
}
