use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use super::corpus::Corpus;
use super::data::PhoneInterval;
use super::recognition::{score_presentations, word_table, NamedModel, Presentation, RecognitionOptions, TrialRecord};
use crate::audio::{frames_for_interval, FeatureSequence};
use crate::error::{Error, Result};
use crate::lexicon::{initial_cohort_size, Exclusion};

/// Cumulative prefixes of `features`, one per aligned phone. Gate `g` keeps
/// every frame whose window centre falls before the end of phone `g`.
pub fn gate_prefixes(features: &FeatureSequence, intervals: &[PhoneInterval]) -> Result<Vec<FeatureSequence>> {
    let n = features.n_frames();
    let mut out: Vec<FeatureSequence> = Vec::with_capacity(intervals.len());
    for (g, iv) in intervals.iter().enumerate() {
        let r = frames_for_interval(n, 0.0, iv.end_s)?;
        if r.is_empty() {
            return Err(Error::invalid(format!(
                "{}: gate {} holds no frames",
                features.utterance_id,
                g + 1
            )));
        }
        out.push(features.prefix(r.last)?);
    }
    audit_prefixes(&out)?;
    Ok(out)
}

/// Each gate must be a strict row prefix of the next.
pub fn audit_prefixes(gates: &[FeatureSequence]) -> Result<()> {
    for w in gates.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.n_frames() >= b.n_frames() || b.data()[..a.data().len()] != *a.data() {
            return Err(Error::invalid(format!(
                "{}: gate of {} frames is not a strict prefix of the next ({} frames)",
                a.utterance_id,
                a.n_frames(),
                b.n_frames()
            )));
        }
    }
    Ok(())
}

/// P@10 at every gate of every usable recording. Recordings whose alignment
/// is missing or disagrees with the dictionary are skipped and reported.
pub fn run_gating(
    models: &[NamedModel],
    corpus: &Corpus,
    opts: &RecognitionOptions,
) -> Result<(Vec<TrialRecord>, Vec<Exclusion>)> {
    let (words, mut excluded) = word_table(corpus, opts)?;
    let mut items = Vec::new();
    for info in &words {
        for rec in corpus.recordings.iter().filter(|r| r.word == info.target.word) {
            let Some(iv) = corpus.alignments.get(rec.utterance_id()) else {
                log::warn!("{}: no alignment, word skipped", rec.utterance_id());
                excluded.push(Exclusion {
                    word: info.target.word.clone(),
                    reason: format!("{} has no alignment", rec.utterance_id()),
                });
                continue;
            };
            let aligned: Vec<&str> = iv.iter().map(|p| p.phone.as_str()).collect();
            if aligned != info.phones.phones() {
                log::warn!("{}: alignment {:?} does not match dictionary {}", rec.utterance_id(), aligned, info.phones);
                excluded.push(Exclusion {
                    word: info.target.word.clone(),
                    reason: format!("{} alignment disagrees with dictionary", rec.utterance_id()),
                });
                continue;
            }
            for (g, features) in gate_prefixes(&rec.features, iv)?.into_iter().enumerate() {
                items.push(Presentation {
                    info,
                    recording: rec,
                    gate: g + 1,
                    features,
                    cohort: initial_cohort_size(&info.phones.phones()[..=g], &corpus.dictionary),
                });
            }
        }
    }
    Ok((score_presentations(models, corpus, &items)?, excluded))
}

/// Mean P@10 by word length and gate, the points of the gating line plot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GatePoint {
    pub n_phones: usize,
    pub gate: usize,
    pub mean_p10: f64,
    pub n: usize,
}

pub fn gating_curve(trials: &[TrialRecord]) -> Vec<GatePoint> {
    let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for t in trials.iter().filter(|t| t.gate > 0) {
        let e = acc.entry((t.n_phones, t.gate)).or_default();
        e.0 += t.p10();
        e.1 += 1;
    }
    acc.into_iter()
        .map(|((n_phones, gate), (sum, n))| GatePoint {
            n_phones,
            gate,
            mean_p10: sum / n as f64,
            n,
        })
        .collect()
}

/// Plot data: one block per word length, blank lines between blocks.
pub fn write_gating_plot<W: Write>(mut w: W, points: &[GatePoint]) -> Result<()> {
    writeln!(w, "# n_phones gate mean_p10 n")?;
    let mut last = None;
    for p in points {
        if last.is_some_and(|l| l != p.n_phones) {
            writeln!(w)?;
            writeln!(w)?;
        }
        writeln!(w, "{} {} {} {}", p.n_phones, p.gate, p.mean_p10, p.n)?;
        last = Some(p.n_phones);
    }
    Ok(())
}

/// Mean P@10 at a gate over trials, `None` when no trial has it.
pub fn mean_at_gate(trials: &[TrialRecord], gate: usize) -> Option<f64> {
    let v: Vec<f64> = trials.iter().filter(|t| t.gate == gate).map(TrialRecord::p10).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean P@10 at each word's final gate.
pub fn mean_at_final_gate(trials: &[TrialRecord]) -> Option<f64> {
    let v: Vec<f64> = trials.iter().filter(|t| t.gate > 0 && t.gate == t.n_phones).map(TrialRecord::p10).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
