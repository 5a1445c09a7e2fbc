use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::data::{AnnotationSet, Morphology, Multiplicity, Recording, TargetWord, WordClass};
use crate::audio::FeatureSequence;
use crate::error::{Error, Result};
use crate::lexicon::{initial_cohort_size, neighbourhood_density, word_stats, Exclusion, NeighbourMode, PhoneSeq, WordStats};
use crate::model::{GroundingModel, ModelConfig};
use crate::numerics::dot;
use crate::seed::sub_seed;
use crate::trainer::encode_images;

pub const TOP_K: usize = 10;
pub const RANDOM_BASELINE_MODELS: usize = 5;

/// Indices of the `k` images most similar to `query`. Embeddings are unit
/// length so the dot product is the cosine; ties go to the smaller id.
pub fn top_k(query: &[f64], images: &[Vec<f64>], ids: &[String], k: usize) -> Vec<usize> {
    let sims: Vec<f64> = images.iter().map(|v| dot(query, v)).collect();
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    order.truncate(k);
    order
}

/// Number of the top ten images annotated with `lemma`. `accept` narrows
/// the match to one multiplicity; `None` accepts any.
pub fn precision_at_10(
    query: &[f64],
    images: &[Vec<f64>],
    ids: &[String],
    annotations: &AnnotationSet,
    lemma: &str,
    accept: Option<Multiplicity>,
) -> Result<usize> {
    if images.len() < TOP_K || ids.len() != images.len() {
        return Err(Error::invalid(format!("need at least {TOP_K} candidate images, got {}", images.len())));
    }
    Ok(top_k(query, images, ids, TOP_K)
        .into_iter()
        .filter(|&i| match (annotations.get(&ids[i], lemma), accept) {
            (Some(_), None) => true,
            (Some(m), Some(want)) => m == want,
            (None, _) => false,
        })
        .count())
}

/// One scored presentation of a word form to a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub model_id: String,
    pub vq: bool,
    pub lemma: String,
    pub word: String,
    pub class: String,
    pub morphology: String,
    pub speaker: String,
    /// 0 for the whole word, otherwise phonemes heard so far.
    pub gate: usize,
    pub n_phones: usize,
    pub p10_hits: usize,
    pub speaking_rate: f64,
    pub duration_frames: usize,
    pub lemma_count: usize,
    pub word_count: usize,
    pub n_vowels: usize,
    pub n_consonants: usize,
    pub density: usize,
    pub cohort: usize,
}

impl TrialRecord {
    pub fn p10(&self) -> f64 {
        self.p10_hits as f64 / TOP_K as f64
    }
}

/// A frozen model under an id, usually its seed.
#[derive(Clone, Copy)]
pub struct NamedModel<'a> {
    pub id: &'a str,
    pub model: &'a GroundingModel,
}

#[derive(Debug, Clone)]
pub struct WordInfo {
    pub target: TargetWord,
    pub phones: PhoneSeq,
    pub stats: WordStats,
    pub density: usize,
    pub positives: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecognitionOptions {
    /// Targets with fewer positive test images are excluded.
    pub min_positives: usize,
    pub neighbours: NeighbourMode,
}

impl Default for RecognitionOptions {
    fn default() -> Self {
        RecognitionOptions {
            min_positives: TOP_K,
            neighbours: NeighbourMode::EditOne,
        }
    }
}

/// Predictors for every usable target, plus the targets left out and why.
pub fn word_table(corpus: &Corpus, opts: &RecognitionOptions) -> Result<(Vec<WordInfo>, Vec<Exclusion>)> {
    let words: Vec<String> = corpus.targets.iter().map(|t| t.word.clone()).collect();
    let (stats, mut excluded) = word_stats(&corpus.transcripts, &corpus.lemmas, &corpus.dictionary, &words)?;
    let by_word: BTreeMap<&str, &WordStats> = stats.iter().map(|s| (s.word.as_str(), s)).collect();
    let mut out = Vec::new();
    for t in &corpus.targets {
        let Some(s) = by_word.get(t.word.to_lowercase().as_str()) else {
            continue;
        };
        let positives = corpus.annotations.count(&corpus.test.image_ids, &t.lemma, None);
        if positives < opts.min_positives {
            excluded.push(Exclusion {
                word: t.word.clone(),
                reason: format!("{positives} positive test images, need {}", opts.min_positives),
            });
            continue;
        }
        let phones = corpus.dictionary.get(&t.word).expect("word_stats checked the dictionary").clone();
        out.push(WordInfo {
            target: t.clone(),
            density: neighbourhood_density(&phones, &corpus.dictionary, opts.neighbours),
            phones,
            stats: (*s).clone(),
            positives,
        });
    }
    Ok((out, excluded))
}

/// Recordings of `word`, in corpus order.
fn recordings_of<'c>(corpus: &'c Corpus, word: &str) -> Vec<&'c Recording> {
    corpus.recordings.iter().filter(|r| r.word == word).collect()
}

/// Whole-recording duration from the alignment when present.
fn spoken_duration(corpus: &Corpus, rec: &Recording) -> f64 {
    match corpus.alignments.get(rec.utterance_id()) {
        Some(iv) if !iv.is_empty() => iv[iv.len() - 1].end_s - iv[0].start_s,
        _ => rec.features.duration_s(),
    }
}

/// A query ready for scoring: the features a model hears and the trial
/// fields that do not depend on the model.
pub(crate) struct Presentation<'c> {
    pub info: &'c WordInfo,
    pub recording: &'c Recording,
    pub gate: usize,
    pub features: FeatureSequence,
    pub cohort: usize,
}

pub(crate) fn score_presentations(
    models: &[NamedModel],
    corpus: &Corpus,
    items: &[Presentation],
) -> Result<Vec<TrialRecord>> {
    let ids = &corpus.test.image_ids;
    let mut out = Vec::with_capacity(models.len() * items.len());
    for m in models {
        let images = encode_images(m.model, &corpus.test.images)?;
        let scored: Vec<TrialRecord> = items
            .par_iter()
            .map(|p| {
                let q = m.model.encode_caption(&p.features)?;
                let hits = precision_at_10(&q.vector, &images, ids, &corpus.annotations, &p.info.target.lemma, None)?;
                let rate = p.info.phones.len() as f64 / spoken_duration(corpus, p.recording);
                Ok(TrialRecord {
                    model_id: m.id.to_string(),
                    vq: m.model.has_vq(),
                    lemma: p.info.target.lemma.clone(),
                    word: p.info.target.word.clone(),
                    class: p.info.target.class.to_string(),
                    morphology: p.info.target.morphology.to_string(),
                    speaker: p.recording.speaker.clone(),
                    gate: p.gate,
                    n_phones: p.info.phones.len(),
                    p10_hits: hits,
                    speaking_rate: rate,
                    duration_frames: p.features.n_frames(),
                    lemma_count: p.info.stats.lemma_count,
                    word_count: p.info.stats.word_count,
                    n_vowels: p.info.stats.n_vowels,
                    n_consonants: p.info.stats.n_consonants,
                    density: p.info.density,
                    cohort: p.cohort,
                })
            })
            .collect::<Result<_>>()?;
        out.extend(scored);
    }
    Ok(out)
}

/// Whole-word P@10 for every usable target, speaker and model.
pub fn run_word_recognition(
    models: &[NamedModel],
    corpus: &Corpus,
    opts: &RecognitionOptions,
) -> Result<(Vec<TrialRecord>, Vec<Exclusion>)> {
    let (words, excluded) = word_table(corpus, opts)?;
    let mut items = Vec::new();
    for info in &words {
        let recs = recordings_of(corpus, &info.target.word);
        if recs.is_empty() {
            log::warn!("no recording of `{}`; trial skipped", info.target.word);
        }
        for r in recs {
            items.push(Presentation {
                info,
                recording: r,
                gate: 0,
                features: r.features.clone(),
                cohort: initial_cohort_size(info.phones.phones(), &corpus.dictionary),
            });
        }
    }
    Ok((score_presentations(models, corpus, &items)?, excluded))
}

/// Untrained models whose seeds derive from `seed`.
pub fn random_models(cfg: &ModelConfig, seed: u64, n: usize) -> Result<Vec<(String, GroundingModel)>> {
    (0..n)
        .map(|k| {
            let mut c = cfg.clone();
            c.vq.enabled = false;
            c.seed = sub_seed(seed, &format!("random{k}"));
            Ok((format!("random{k}"), GroundingModel::init(c)?))
        })
        .collect()
}

/// Recognition trials on five untrained models.
pub fn random_baseline(
    cfg: &ModelConfig,
    seed: u64,
    corpus: &Corpus,
    opts: &RecognitionOptions,
) -> Result<Vec<TrialRecord>> {
    let models = random_models(cfg, seed, RANDOM_BASELINE_MODELS)?;
    let named: Vec<NamedModel> = models.iter().map(|(id, m)| NamedModel { id, model: m }).collect();
    Ok(run_word_recognition(&named, corpus, opts)?.0)
}

/// Expected P@10 of a uniformly random ranking: the share of positives.
pub fn random_ranking_expectation(annotations: &AnnotationSet, image_ids: &[String], lemma: &str) -> f64 {
    annotations.count(image_ids, lemma, None) as f64 / image_ids.len() as f64
}

/// The ten images with the most annotated referents of `class`, ties by id.
pub fn naive_answer(
    annotations: &AnnotationSet,
    image_ids: &[String],
    targets: &[TargetWord],
    class: WordClass,
) -> Result<Vec<usize>> {
    if image_ids.len() < TOP_K {
        return Err(Error::invalid(format!("need at least {TOP_K} images, got {}", image_ids.len())));
    }
    let lemmas: std::collections::BTreeSet<&str> =
        targets.iter().filter(|t| t.class == class).map(|t| t.lemma.as_str()).collect();
    let counts: Vec<usize> = image_ids
        .iter()
        .map(|id| lemmas.iter().filter(|l| annotations.contains(id, l)).count())
        .collect();
    let mut order: Vec<usize> = (0..image_ids.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then_with(|| image_ids[a].cmp(&image_ids[b])));
    order.truncate(TOP_K);
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineScore {
    pub word: String,
    pub lemma: String,
    pub class: String,
    pub morphology: String,
    pub p10: f64,
}

/// Scores the class-wise fixed answer against every usable target.
pub fn naive_baseline(corpus: &Corpus, opts: &RecognitionOptions) -> Result<Vec<BaselineScore>> {
    let (words, _) = word_table(corpus, opts)?;
    let ids = &corpus.test.image_ids;
    let mut answers = BTreeMap::new();
    for class in [WordClass::Noun, WordClass::Verb] {
        answers.insert(class, naive_answer(&corpus.annotations, ids, &corpus.targets, class)?);
    }
    Ok(words
        .iter()
        .map(|w| {
            let hits = answers[&w.target.class]
                .iter()
                .filter(|&&i| corpus.annotations.contains(&ids[i], &w.target.lemma))
                .count();
            BaselineScore {
                word: w.target.word.clone(),
                lemma: w.target.lemma.clone(),
                class: w.target.class.to_string(),
                morphology: w.target.morphology.to_string(),
                p10: hits as f64 / TOP_K as f64,
            }
        })
        .collect())
}

/// Mean P@10 per (vq, morphology), both over trials and over words.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecognitionSummary {
    pub vq: bool,
    pub morphology: String,
    pub trials: usize,
    pub mean_p10_trials: f64,
    pub words: usize,
    pub mean_p10_words: f64,
}

pub fn summarize(trials: &[TrialRecord]) -> Vec<RecognitionSummary> {
    let mut groups: BTreeMap<(bool, String), BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for t in trials {
        groups
            .entry((t.vq, t.morphology.clone()))
            .or_default()
            .entry(&t.word)
            .or_default()
            .push(t.p10());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    groups
        .into_iter()
        .map(|((vq, morphology), words)| {
            let all: Vec<f64> = words.values().flatten().copied().collect();
            let per_word: Vec<f64> = words.values().map(|v| mean(v)).collect();
            RecognitionSummary {
                vq,
                morphology,
                trials: all.len(),
                mean_p10_trials: mean(&all),
                words: per_word.len(),
                mean_p10_words: mean(&per_word),
            }
        })
        .collect()
}

pub fn mean_p10(trials: &[TrialRecord]) -> f64 {
    trials.iter().map(TrialRecord::p10).sum::<f64>() / trials.len() as f64
}

/// True when the trial presented form `m`.
pub fn is_form(t: &TrialRecord, m: Morphology) -> bool {
    t.morphology == m.as_str()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{make_synthetic_corpus, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn setup(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<String>, AnnotationSet, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<Vec<f64>> = (0..n).map(|_| unit((0..4).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("i{i:03}")).collect();
        let mut ann = AnnotationSet::default();
        for id in &ids {
            if rng.random_bool(0.4) {
                ann.insert(id, "dog", Multiplicity::Single);
            }
        }
        let q = unit((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
        (images, ids, ann, q)
    }

    #[test]
    fn all_correct_and_some_correct() {
        let ids: Vec<String> = (0..12).map(|i| format!("i{i:02}")).collect();
        let images: Vec<Vec<f64>> = (0..12).map(|i| unit(vec![1.0, i as f64 * 0.1])).collect();
        let mut ann = AnnotationSet::default();
        for id in &ids[..10] {
            ann.insert(id, "dog", Multiplicity::Multiple);
        }
        let q = [1.0, 0.0];
        assert_eq!(precision_at_10(&q, &images, &ids, &ann, "dog", None).unwrap(), 10);
        assert_eq!(precision_at_10(&q, &images, &ids, &ann, "dog", Some(Multiplicity::Single)).unwrap(), 0);
        let mut ann4 = AnnotationSet::default();
        for id in [&ids[0], &ids[3], &ids[7], &ids[9], &ids[11]] {
            ann4.insert(id, "dog", Multiplicity::Single);
        }
        assert_eq!(precision_at_10(&q, &images, &ids, &ann4, "dog", None).unwrap(), 4);
        assert!(precision_at_10(&q, &images[..9], &ids[..9], &ann, "dog", None).is_err());
    }

    #[test]
    fn matches_exhaustive_sort_oracle() {
        for seed in 0..20 {
            let (images, ids, ann, q) = setup(20, seed);
            let mut scored: Vec<(f64, &String)> = images
                .iter()
                .zip(&ids)
                .map(|(v, id)| (v.iter().zip(&q).map(|(a, b)| a * b).sum(), id))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
            let oracle = scored[..10].iter().filter(|(_, id)| ann.contains(id, "dog")).count();
            assert_eq!(precision_at_10(&q, &images, &ids, &ann, "dog", None).unwrap(), oracle);
        }
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let images = vec![vec![1.0, 0.0]; 12];
        let ids: Vec<String> = (0..12).rev().map(|i| format!("i{i:02}")).collect();
        let top = top_k(&[1.0, 0.0], &images, &ids, 10);
        let got: Vec<&str> = top.iter().map(|&i| ids[i].as_str()).collect();
        assert_eq!(got[0], "i00");
        assert_eq!(got[9], "i09");
    }

    #[test]
    fn images_below_the_cut_do_not_matter() {
        let (mut images, mut ids, mut ann, q) = setup(30, 7);
        let before = precision_at_10(&q, &images, &ids, &ann, "dog", None).unwrap();
        for k in 0..10 {
            let worst: Vec<f64> = q.iter().map(|x| -x).collect();
            images.push(worst);
            ids.push(format!("z{k}"));
            ann.insert(&format!("z{k}"), "dog", Multiplicity::Single);
        }
        assert_eq!(precision_at_10(&q, &images, &ids, &ann, "dog", None).unwrap(), before);
    }

    #[test]
    fn naive_answer_contains_the_busiest_image() {
        let ids: Vec<String> = (0..15).map(|i| format!("i{i:02}")).collect();
        let targets: Vec<TargetWord> = ["a", "b", "c", "d"]
            .iter()
            .map(|w| TargetWord {
                word: w.to_string(),
                lemma: w.to_string(),
                class: WordClass::Noun,
                morphology: Morphology::Singular,
            })
            .collect();
        let mut ann = AnnotationSet::default();
        for w in ["a", "b", "c", "d"] {
            ann.insert("i13", w, Multiplicity::Single);
        }
        for id in &ids[..12] {
            ann.insert(id, "a", Multiplicity::Single);
        }
        let ans = naive_answer(&ann, &ids, &targets, WordClass::Noun).unwrap();
        assert_eq!(ans[0], 13);
        assert_eq!(ans.len(), 10);
        // Ties among single-referent images go to the smallest ids.
        assert_eq!(ans[1..], [0, 1, 2, 3, 4, 5, 6, 7, 8]);
    }

    fn corpus() -> Corpus {
        let cfg = SynthConfig {
            vocab_size: 6,
            n_verbs: 1,
            n_images: 60,
            distractors: 10,
            ..SynthConfig::default()
        };
        make_synthetic_corpus(&cfg).unwrap().0
    }

    #[test]
    fn naive_baseline_equals_hand_count() {
        let c = corpus();
        let opts = RecognitionOptions::default();
        let scores = naive_baseline(&c, &opts).unwrap();
        let ids = &c.test.image_ids;
        for s in &scores {
            let class: WordClass = s.class.parse().unwrap();
            let lemmas: Vec<&str> = c.targets.iter().filter(|t| t.class == class).map(|t| t.lemma.as_str()).collect();
            let mut ranked: Vec<(usize, &String)> = ids
                .iter()
                .map(|id| (lemmas.iter().collect::<std::collections::BTreeSet<_>>().iter().filter(|l| c.annotations.contains(id, l)).count(), id))
                .collect();
            ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
            let hits = ranked[..10].iter().filter(|(_, id)| c.annotations.contains(id, &s.lemma)).count();
            assert_eq!(s.p10, hits as f64 / 10.0);
        }
        // Same answer for every word of a class.
        assert!(!scores.is_empty());
    }

    #[test]
    fn random_baseline_is_deterministic() {
        let c = corpus();
        let cfg = ModelConfig {
            image_feat_dim: 64,
            ..ModelConfig::tiny()
        };
        let opts = RecognitionOptions::default();
        let a = random_baseline(&cfg, 3, &c, &opts).unwrap();
        let b = random_baseline(&cfg, 3, &c, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len() % RANDOM_BASELINE_MODELS, 0);
        assert!(a.iter().all(|t| t.p10_hits <= 10 && t.gate == 0));
    }

    #[test]
    fn rare_targets_are_excluded() {
        let c = corpus();
        let opts = RecognitionOptions {
            min_positives: 1000,
            ..RecognitionOptions::default()
        };
        let (words, excluded) = word_table(&c, &opts).unwrap();
        assert!(words.is_empty());
        assert_eq!(excluded.len(), c.targets.len());
    }
}
