use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::corpus::Corpus;
use super::data::{Morphology, Multiplicity, TargetWord, WordClass};
use super::gating::gate_prefixes;
use super::recognition::{precision_at_10, NamedModel, TOP_K};
use crate::error::{Error, Result};
use crate::lexicon::Exclusion;
use crate::trainer::encode_images;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluralityOptions {
    /// Minimum test images showing the referent once.
    pub min_single: usize,
    /// Minimum test images showing the referent several times.
    pub min_multiple: usize,
    /// Score the prefix up to the penultimate phone instead of the whole word.
    pub penultimate: bool,
}

impl Default for PluralityOptions {
    fn default() -> Self {
        PluralityOptions {
            min_single: TOP_K,
            min_multiple: TOP_K,
            penultimate: false,
        }
    }
}

/// Correct top-10 images for one prompt, split by referent multiplicity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PluralityTrial {
    pub model_id: String,
    pub vq: bool,
    pub lemma: String,
    pub word: String,
    pub prompt: String,
    pub speaker: String,
    /// 0 for the whole word.
    pub gate: usize,
    pub single: usize,
    pub multiple: usize,
}

/// Rows: singular then plural prompt. Columns: single then multiple
/// referent among the correctly retrieved images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionTable {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionTable {
    pub fn from_trials(trials: &[PluralityTrial]) -> Self {
        let mut t = ConfusionTable::default();
        for tr in trials {
            let row = usize::from(tr.prompt == Morphology::Plural.as_str());
            t.counts[row][0] += tr.single as u64;
            t.counts[row][1] += tr.multiple as u64;
        }
        t
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Share of multiple-referent images among the correct ones for a row.
    pub fn multiple_share(&self, row: usize) -> f64 {
        let [s, m] = self.counts[row];
        m as f64 / (s + m) as f64
    }

    pub fn to_csv(&self, chi2: f64, yates: bool) -> String {
        let c = self.counts;
        format!(
            "prompt,single,multiple\nsingular,{},{}\nplural,{},{}\n# chi2,{chi2},df,1,n,{},yates,{yates}\n",
            c[0][0],
            c[0][1],
            c[1][0],
            c[1][1],
            self.total()
        )
    }
}

/// Pearson chi-square for a 2x2 table, one degree of freedom. With
/// `yates` each |O - E| is reduced by 0.5 (not below zero).
pub fn chi_square_2x2(table: [[u64; 2]; 2], yates: bool) -> Result<f64> {
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let n = (rows[0] + rows[1]) as f64;
    if rows.contains(&0) || cols.contains(&0) {
        return Err(Error::invalid(format!("2x2 table {table:?} has a zero marginal")));
    }
    let mut chi = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] as f64 * cols[j] as f64 / n;
            let mut d = (table[i][j] as f64 - e).abs();
            if yates {
                d = (d - 0.5).max(0.0);
            }
            chi += d * d / e;
        }
    }
    Ok(chi)
}

/// Nouns usable for the analysis: both forms listed, enough single and
/// multiple referent test images and, for the penultimate protocol, a
/// plural built by adding one phone to the singular.
pub fn plurality_nouns<'c>(
    corpus: &'c Corpus,
    opts: &PluralityOptions,
) -> (Vec<(&'c TargetWord, &'c TargetWord)>, Vec<Exclusion>) {
    let mut forms: BTreeMap<&str, [Option<&TargetWord>; 2]> = BTreeMap::new();
    for t in corpus.targets.iter().filter(|t| t.class == WordClass::Noun) {
        let slot = match t.morphology {
            Morphology::Singular => 0,
            Morphology::Plural => 1,
            _ => continue,
        };
        forms.entry(&t.lemma).or_default()[slot] = Some(t);
    }
    let ids = &corpus.test.image_ids;
    let mut keep = Vec::new();
    let mut excluded = Vec::new();
    let mut drop = |lemma: &str, reason: String| {
        excluded.push(Exclusion {
            word: lemma.to_string(),
            reason,
        })
    };
    for (lemma, f) in forms {
        let [Some(sg), Some(pl)] = f else {
            drop(lemma, "needs both singular and plural forms".into());
            continue;
        };
        let single = corpus.annotations.count(ids, lemma, Some(Multiplicity::Single));
        let multiple = corpus.annotations.count(ids, lemma, Some(Multiplicity::Multiple));
        if single < opts.min_single || multiple < opts.min_multiple {
            drop(lemma, format!("{single} single and {multiple} multiple referent images"));
            continue;
        }
        if opts.penultimate {
            let suffixed = match (corpus.dictionary.get(&sg.word), corpus.dictionary.get(&pl.word)) {
                (Some(s), Some(p)) => p.len() == s.len() + 1 && p.starts_with(s.phones()),
                _ => false,
            };
            if !suffixed {
                drop(lemma, "plural is not the singular plus a suffix".into());
                continue;
            }
        }
        keep.push((sg, pl));
    }
    (keep, excluded)
}

/// Per-prompt single/multiple counts for every model, noun, form and speaker.
pub fn run_plurality(
    models: &[NamedModel],
    corpus: &Corpus,
    opts: &PluralityOptions,
) -> Result<(Vec<PluralityTrial>, Vec<Exclusion>)> {
    let (nouns, mut excluded) = plurality_nouns(corpus, opts);
    let mut items = Vec::new();
    for (sg, pl) in &nouns {
        for t in [*sg, *pl] {
            for rec in corpus.recordings.iter().filter(|r| r.word == t.word) {
                if !opts.penultimate {
                    items.push((t, rec, 0, rec.features.clone()));
                    continue;
                }
                let Some(iv) = corpus.alignments.get(rec.utterance_id()).filter(|iv| iv.len() >= 2) else {
                    excluded.push(Exclusion {
                        word: t.word.clone(),
                        reason: format!("{} lacks a usable alignment", rec.utterance_id()),
                    });
                    continue;
                };
                let gate = iv.len() - 1;
                let prefix = gate_prefixes(&rec.features, iv)?.swap_remove(gate - 1);
                items.push((t, rec, gate, prefix));
            }
        }
    }
    let ids = &corpus.test.image_ids;
    let mut out = Vec::new();
    for m in models {
        let images = encode_images(m.model, &corpus.test.images)?;
        let scored: Vec<PluralityTrial> = items
            .par_iter()
            .map(|(t, rec, gate, features)| {
                let q = m.model.encode_caption(features)?.vector;
                let count = |want| precision_at_10(&q, &images, ids, &corpus.annotations, &t.lemma, Some(want));
                Ok(PluralityTrial {
                    model_id: m.id.to_string(),
                    vq: m.model.has_vq(),
                    lemma: t.lemma.clone(),
                    word: t.word.clone(),
                    prompt: t.morphology.to_string(),
                    speaker: rec.speaker.clone(),
                    gate: *gate,
                    single: count(Multiplicity::Single)?,
                    multiple: count(Multiplicity::Multiple)?,
                })
            })
            .collect::<Result<_>>()?;
        out.extend(scored);
    }
    Ok((out, excluded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::recognition::top_k;
    use crate::experiments::{make_synthetic_corpus, SynthConfig};
    use crate::model::{GroundingModel, ModelConfig};
    use proptest::prelude::*;

    const LSTM: [[u64; 2]; 2] = [[3048, 2281], [2940, 2881]];
    const LSTM_VQ: [[u64; 2]; 2] = [[2857, 2278], [2631, 2754]];

    #[test]
    fn reference_counts() {
        let a = chi_square_2x2(LSTM, false).unwrap();
        let b = chi_square_2x2(LSTM_VQ, false).unwrap();
        assert!((a - 49.8).abs() <= 1.0, "{a}");
        assert!((b - 48.1).abs() <= 1.0, "{b}");
        let ay = chi_square_2x2(LSTM, true).unwrap();
        assert!(ay < a && (ay - 49.8).abs() <= 1.0);
        assert_eq!(LSTM.iter().flatten().sum::<u64>(), 11150);
    }

    #[test]
    fn proportional_table_is_zero() {
        assert_eq!(chi_square_2x2([[10, 20], [30, 60]], false).unwrap(), 0.0);
        assert!(chi_square_2x2([[0, 0], [3, 4]], false).is_err());
        assert!(chi_square_2x2([[5, 0], [3, 0]], false).is_err());
    }

    #[test]
    fn hand_computed_value() {
        // rows 30/70, cols 40/60, n 100; expected 12 18 28 42.
        let chi = chi_square_2x2([[20, 10], [20, 50]], false).unwrap();
        let oracle = 64.0 / 12.0 + 64.0 / 18.0 + 64.0 / 28.0 + 64.0 / 42.0;
        assert!((chi - oracle).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn transpose_invariant(a in 1u64..500, b in 1u64..500, c in 1u64..500, d in 1u64..500, y in any::<bool>()) {
            let t = chi_square_2x2([[a, b], [c, d]], y).unwrap();
            let tt = chi_square_2x2([[a, c], [b, d]], y).unwrap();
            prop_assert!((t - tt).abs() <= 1e-9 * t.max(1.0));
            prop_assert!(t >= 0.0);
        }
    }

    fn corpus() -> Corpus {
        let cfg = SynthConfig {
            vocab_size: 6,
            n_verbs: 1,
            n_images: 80,
            distractors: 10,
            ..SynthConfig::default()
        };
        make_synthetic_corpus(&cfg).unwrap().0
    }

    fn model() -> GroundingModel {
        GroundingModel::init(ModelConfig {
            image_feat_dim: 64,
            ..ModelConfig::tiny()
        })
        .unwrap()
    }

    #[test]
    fn counts_match_recount_oracle() {
        let c = corpus();
        let m = model();
        let named = [NamedModel { id: "m", model: &m }];
        let opts = PluralityOptions {
            min_single: 3,
            min_multiple: 3,
            penultimate: false,
        };
        let (trials, _) = run_plurality(&named, &c, &opts).unwrap();
        assert!(!trials.is_empty());
        let images = encode_images(&m, &c.test.images).unwrap();
        let mut table = [[0u64; 2]; 2];
        for rec in &c.recordings {
            let Some(t) = trials.iter().find(|t| t.word == rec.word && t.speaker == rec.speaker) else {
                continue;
            };
            let q = m.encode_caption(&rec.features).unwrap().vector;
            let row = usize::from(t.prompt == "plural");
            for i in top_k(&q, &images, &c.test.image_ids, 10) {
                match c.annotations.get(&c.test.image_ids[i], &t.lemma) {
                    Some(Multiplicity::Single) => table[row][0] += 1,
                    Some(Multiplicity::Multiple) => table[row][1] += 1,
                    _ => {}
                }
            }
        }
        assert_eq!(ConfusionTable::from_trials(&trials).counts, table);
    }

    #[test]
    fn penultimate_gate_drops_the_suffix() {
        let c = corpus();
        let m = model();
        let named = [NamedModel { id: "m", model: &m }];
        let opts = PluralityOptions {
            min_single: 3,
            min_multiple: 3,
            penultimate: true,
        };
        let (trials, _) = run_plurality(&named, &c, &opts).unwrap();
        for t in &trials {
            let n = c.dictionary.get(&t.word).unwrap().len();
            assert_eq!(t.gate, n - 1);
        }
    }

    #[test]
    fn single_only_model_has_no_multiple_column() {
        let t = ConfusionTable::from_trials(&[PluralityTrial {
            model_id: "m".into(),
            vq: false,
            lemma: "dog".into(),
            word: "dogs".into(),
            prompt: "plural".into(),
            speaker: "s".into(),
            gate: 0,
            single: 6,
            multiple: 0,
        }]);
        assert_eq!(t.counts[1][1], 0);
        assert_eq!(t.multiple_share(1), 0.0);
    }
}
