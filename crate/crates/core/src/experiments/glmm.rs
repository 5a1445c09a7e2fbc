use std::collections::BTreeSet;
use std::io::Write;

use super::data::Morphology;
use super::recognition::{TrialRecord, TOP_K};
use crate::error::{Error, Result};

/// Raw columns, in output order.
pub const RAW_COLUMNS: [&str; 21] = [
    "model_id",
    "vq",
    "lemma",
    "word",
    "class",
    "morphology",
    "speaker",
    "gate",
    "n_phones",
    "hits",
    "misses",
    "speaking_rate",
    "duration_frames",
    "lemma_count",
    "word_count",
    "log_lemma_count",
    "log_word_count",
    "n_vowels",
    "n_consonants",
    "density",
    "cohort",
];

/// Predictors that are z-scored (sample standard deviation).
pub const STANDARDISED: [&str; 6] = ["speaking_rate", "duration_frames", "log_lemma_count", "log_word_count", "density", "cohort"];

/// Predictors that are only centred.
pub const CENTRED: [&str; 3] = ["n_vowels", "n_consonants", "gate"];

/// Dummy-coded morphology levels; singular is the reference.
pub const MORPHOLOGY_DUMMIES: [Morphology; 4] =
    [Morphology::Plural, Morphology::Root, Morphology::Third, Morphology::Participle];

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Text(Vec<String>),
    Num(Vec<f64>),
}

/// Trial table with raw and transformed predictors. Column order: the raw
/// columns, `z_*` for each standardised predictor, `c_*` for each centred
/// one, `vq_dummy`, `morph_*` dummies, `eff_<speaker>` effect codes for
/// every speaker but the last (sorted by id), then `notes`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmmTable {
    pub columns: Vec<(String, Column)>,
    pub rows: usize,
    /// Predictors whose standardisation was skipped.
    pub notes: Vec<String>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance (n - 1 denominator); zero for a single value.
fn sample_var(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

pub fn log_count(c: usize) -> f64 {
    (1.0 + c as f64).ln()
}

impl GlmmTable {
    pub fn build(trials: &[TrialRecord]) -> Result<GlmmTable> {
        if trials.is_empty() {
            return Err(Error::invalid("no trials to export"));
        }
        let text = |f: &dyn Fn(&TrialRecord) -> String| Column::Text(trials.iter().map(f).collect());
        let num = |f: &dyn Fn(&TrialRecord) -> f64| trials.iter().map(f).collect::<Vec<f64>>();
        let mut cols: Vec<(String, Column)> = Vec::new();
        let mut push_text = |name: &str, c: Column| cols.push((name.to_string(), c));
        push_text("model_id", text(&|t| t.model_id.clone()));
        push_text("vq", text(&|t| u8::from(t.vq).to_string()));
        push_text("lemma", text(&|t| t.lemma.clone()));
        push_text("word", text(&|t| t.word.clone()));
        push_text("class", text(&|t| t.class.clone()));
        push_text("morphology", text(&|t| t.morphology.clone()));
        push_text("speaker", text(&|t| t.speaker.clone()));

        let raw_num: Vec<(&str, Vec<f64>)> = vec![
            ("gate", num(&|t| t.gate as f64)),
            ("n_phones", num(&|t| t.n_phones as f64)),
            ("hits", num(&|t| t.p10_hits as f64)),
            ("misses", num(&|t| (TOP_K - t.p10_hits) as f64)),
            ("speaking_rate", num(&|t| t.speaking_rate)),
            ("duration_frames", num(&|t| t.duration_frames as f64)),
            ("lemma_count", num(&|t| t.lemma_count as f64)),
            ("word_count", num(&|t| t.word_count as f64)),
            ("log_lemma_count", num(&|t| log_count(t.lemma_count))),
            ("log_word_count", num(&|t| log_count(t.word_count))),
            ("n_vowels", num(&|t| t.n_vowels as f64)),
            ("n_consonants", num(&|t| t.n_consonants as f64)),
            ("density", num(&|t| t.density as f64)),
            ("cohort", num(&|t| t.cohort as f64)),
        ];
        let lookup = |name: &str| &raw_num.iter().find(|(n, _)| *n == name).expect("known column").1;
        for (n, v) in &raw_num {
            cols.push((n.to_string(), Column::Num(v.clone())));
        }

        let mut notes = Vec::new();
        for name in STANDARDISED {
            let v = lookup(name);
            let (m, var) = (mean(v), sample_var(v));
            let z: Vec<f64> = if var > 0.0 {
                let sd = var.sqrt();
                v.iter().map(|x| (x - m) / sd).collect()
            } else {
                log::warn!("{name} has zero variance; left centred, not scaled");
                notes.push(format!("z_{name}:zero_variance"));
                v.iter().map(|x| x - m).collect()
            };
            cols.push((format!("z_{name}"), Column::Num(z)));
        }
        for name in CENTRED {
            let v = lookup(name);
            let m = mean(v);
            cols.push((format!("c_{name}"), Column::Num(v.iter().map(|x| x - m).collect())));
        }
        cols.push(("vq_dummy".into(), Column::Num(num(&|t| f64::from(u8::from(t.vq))))));
        for m in MORPHOLOGY_DUMMIES {
            let d = num(&|t| f64::from(u8::from(t.morphology == m.as_str())));
            cols.push((format!("morph_{m}"), Column::Num(d)));
        }
        let speakers: Vec<&str> = trials
            .iter()
            .map(|t| t.speaker.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if let Some((last, rest)) = speakers.split_last() {
            for s in rest {
                let e = num(&|t| {
                    if t.speaker == *s {
                        1.0
                    } else if t.speaker == *last {
                        -1.0
                    } else {
                        0.0
                    }
                });
                cols.push((format!("eff_{s}"), Column::Num(e)));
            }
        }
        cols.push(("notes".into(), Column::Text(vec![notes.join(";"); trials.len()])));
        Ok(GlmmTable {
            columns: cols,
            rows: trials.len(),
            notes,
        })
    }

    pub fn header(&self) -> Vec<&str> {
        self.columns.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn numeric(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).and_then(|(_, c)| match c {
            Column::Num(v) => Some(v.as_slice()),
            Column::Text(_) => None,
        })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.header())?;
        for r in 0..self.rows {
            let row: Vec<String> = self
                .columns
                .iter()
                .map(|(_, c)| match c {
                    Column::Text(v) => v[r].clone(),
                    Column::Num(v) => v[r].to_string(),
                })
                .collect();
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}
