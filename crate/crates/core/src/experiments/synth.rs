use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::data::{AlignmentTable, AnnotationSet, Morphology, Multiplicity, PhoneInterval, Recording, TargetWord, WordClass};
use crate::audio::{FeatureSequence, FEATURE_DIM, FRAME_SHIFT_S, FRAME_WINDOW_S};
use crate::error::{Error, Result};
use crate::lexicon::{parse_dictionary, phone_class, PhoneClass};
use crate::trainer::PairedData;

const CONSONANTS: [&str; 14] = ["P", "T", "K", "B", "D", "G", "M", "N", "S", "L", "R", "F", "V", "SH"];
const VOWELS: [&str; 7] = ["AA", "AE", "IY", "UW", "OW", "EH", "AY"];
const PLURAL_SUFFIX: [&str; 1] = ["Z"];
const THIRD_SUFFIX: [&str; 1] = ["Z"];
const PARTICIPLE_SUFFIX: [&str; 2] = ["IH", "NG"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub n_verbs: usize,
    pub n_images: usize,
    /// Mean frames per phone.
    pub frames_per_phone: usize,
    /// Standard deviation of frame noise.
    pub noise: f64,
    pub image_noise: f64,
    pub image_feat_dim: usize,
    pub min_referents: usize,
    pub max_referents: usize,
    /// Chance that a noun referent appears several times in an image.
    pub multiple_prob: f64,
    /// Weight of the shared visual direction added per multiple referent.
    pub many_weight: f64,
    pub test_fraction: f64,
    pub captions_per_train_image: usize,
    pub speakers: usize,
    /// Dictionary-only words that never occur in the audio.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 20,
            n_verbs: 4,
            n_images: 200,
            frames_per_phone: 4,
            noise: 0.3,
            image_noise: 0.3,
            image_feat_dim: 64,
            min_referents: 2,
            max_referents: 4,
            multiple_prob: 0.5,
            many_weight: 3.0,
            test_fraction: 0.5,
            captions_per_train_image: 2,
            speakers: 2,
            distractors: 60,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} < 5", self.vocab_size));
        }
        if self.n_images < 50 {
            return bad(format!("n_images {} < 50", self.n_images));
        }
        if self.n_verbs >= self.vocab_size {
            return bad("need at least one noun".into());
        }
        if self.min_referents == 0 || self.min_referents > self.max_referents || self.max_referents > self.vocab_size {
            return bad("need 1 <= min_referents <= max_referents <= vocab_size".into());
        }
        if self.frames_per_phone < 2 {
            return bad("frames_per_phone must be at least 2".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must be in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.multiple_prob) || self.noise < 0.0 || self.many_weight < 0.0 || self.image_noise < 0.0 {
            return bad("probabilities and noise levels out of range".into());
        }
        if self.speakers == 0 || self.captions_per_train_image == 0 || self.image_feat_dim == 0 {
            return bad("speakers, captions_per_train_image and image_feat_dim must be positive".into());
        }
        Ok(())
    }
}

/// Counts taken while the corpus is built, independent of the written
/// annotation file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthBookkeeping {
    /// lemma -> (single, multiple, n/a) referent counts over test images.
    pub test_positives: BTreeMap<String, [usize; 3]>,
    pub train_positives: BTreeMap<String, usize>,
}

fn all_stems() -> Vec<Vec<&'static str>> {
    let mut out = Vec::new();
    for c1 in CONSONANTS {
        for v1 in VOWELS {
            for c2 in CONSONANTS {
                out.push(vec![c1, v1, c2]);
            }
        }
    }
    for c1 in CONSONANTS {
        for v1 in VOWELS {
            for c2 in CONSONANTS {
                for v2 in VOWELS {
                    out.push(vec![c1, v1, c2, v2]);
                }
            }
        }
    }
    out
}

fn spelling(phones: &[&str]) -> String {
    phones.concat().to_lowercase()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * sd).collect()
}

struct Lexeme {
    lemma: String,
    class: WordClass,
    stem: Vec<&'static str>,
    /// Per stem-phone template offsets.
    offsets: Vec<Vec<f64>>,
    /// Base duration per stem phone.
    durations: Vec<usize>,
}

struct Acoustics {
    protos: BTreeMap<&'static str, Vec<f64>>,
    slopes: BTreeMap<&'static str, Vec<f64>>,
    speakers: Vec<Vec<f64>>,
    suffix_offsets: BTreeMap<&'static str, Vec<f64>>,
}

fn form_phones(lex: &Lexeme, m: Morphology) -> Vec<&'static str> {
    let suffix: &[&str] = match m {
        Morphology::Singular | Morphology::Root => &[],
        Morphology::Plural => &PLURAL_SUFFIX,
        Morphology::Third => &THIRD_SUFFIX,
        Morphology::Participle => &PARTICIPLE_SUFFIX,
    };
    lex.stem.iter().chain(suffix).copied().collect()
}

fn form_word(lex: &Lexeme, m: Morphology) -> String {
    match m {
        Morphology::Singular | Morphology::Root => lex.lemma.clone(),
        Morphology::Plural | Morphology::Third => format!("{}z", lex.lemma),
        Morphology::Participle => format!("{}ing", lex.lemma),
    }
}

/// Frames for one spoken word form plus the phone boundaries in frames.
fn render_word(
    lex: &Lexeme,
    m: Morphology,
    speaker: usize,
    ac: &Acoustics,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<(&'static str, usize)>) {
    let phones = form_phones(lex, m);
    let mut frames = Vec::new();
    let mut spans = Vec::new();
    for (i, &p) in phones.iter().enumerate() {
        let base = if i < lex.durations.len() { lex.durations[i] } else { cfg.frames_per_phone };
        let dur = (base as i64 + rng.random_range(-1..=1)).max(2) as usize;
        let offset = if i < lex.offsets.len() { &lex.offsets[i] } else { &ac.suffix_offsets[p] };
        for f in 0..dur {
            let pos = (f as f64 + 0.5) / dur as f64 - 0.5;
            let row: Vec<f64> = (0..FEATURE_DIM)
                .map(|d| {
                    ac.protos[p][d]
                        + pos * ac.slopes[p][d]
                        + offset[d]
                        + ac.speakers[speaker][d]
                        + cfg.noise * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            frames.push(row);
        }
        spans.push((p, dur));
    }
    (frames, spans)
}

/// Phone intervals whose boundaries sit half way between frame centres, so
/// `frames_for_interval` recovers exactly the frames of each phone and the
/// intervals partition `[0, duration]`.
fn intervals(spans: &[(&str, usize)]) -> Vec<PhoneInterval> {
    let total: usize = spans.iter().map(|s| s.1).sum();
    let boundary = |frame: usize| -> f64 {
        if frame == 0 {
            0.0
        } else if frame == total {
            (total - 1) as f64 * FRAME_SHIFT_S + FRAME_WINDOW_S
        } else {
            frame as f64 * FRAME_SHIFT_S + FRAME_WINDOW_S / 2.0 - FRAME_SHIFT_S / 2.0
        }
    };
    let mut at = 0;
    spans
        .iter()
        .map(|&(p, d)| {
            let iv = PhoneInterval {
                phone: p.to_string(),
                start_s: boundary(at),
                end_s: boundary(at + d),
            };
            at += d;
            iv
        })
        .collect()
}

fn dictionary_line(word: &str, phones: &[&str], stressed: &mut bool) -> String {
    let mut out = word.to_uppercase();
    out.push(' ');
    for p in phones {
        out.push(' ');
        out.push_str(p);
        if phone_class(p) == PhoneClass::Vowel {
            out.push(if *stressed { '0' } else { '1' });
            *stressed = true;
        }
    }
    out.push('\n');
    out
}

/// Builds the desk-scale stand-in corpus. Everything is a function of the
/// config, including the seed.
pub fn make_synthetic_corpus(cfg: &SynthConfig) -> Result<(Corpus, SynthBookkeeping)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let stems = all_stems();
    let needed = cfg.vocab_size + cfg.distractors;
    if needed > stems.len() {
        return Err(Error::Config(format!(
            "{needed} distinct phone strings requested, only {} available",
            stems.len()
        )));
    }
    let picked: Vec<Vec<&str>> = sample(&mut rng, stems.len(), needed).into_iter().map(|i| stems[i].clone()).collect();
    let n_nouns = cfg.vocab_size - cfg.n_verbs;
    let lexemes: Vec<Lexeme> = picked[..cfg.vocab_size]
        .iter()
        .enumerate()
        .map(|(i, stem)| Lexeme {
            lemma: spelling(stem),
            class: if i < n_nouns { WordClass::Noun } else { WordClass::Verb },
            stem: stem.clone(),
            offsets: stem.iter().map(|_| gaussian_vec(&mut rng, FEATURE_DIM, 0.3)).collect(),
            durations: stem
                .iter()
                .map(|_| (cfg.frames_per_phone as i64 + rng.random_range(-1..=1)).max(2) as usize)
                .collect(),
        })
        .collect();
    let distractors: Vec<Vec<&str>> = picked[cfg.vocab_size..].to_vec();

    let inventory: Vec<&'static str> = CONSONANTS.iter().chain(&VOWELS).chain(&["Z", "IH", "NG"]).copied().collect();
    let mut ac = Acoustics {
        protos: BTreeMap::new(),
        slopes: BTreeMap::new(),
        speakers: Vec::new(),
        suffix_offsets: BTreeMap::new(),
    };
    for &p in &inventory {
        ac.protos.insert(p, gaussian_vec(&mut rng, FEATURE_DIM, 1.0));
        ac.slopes.insert(p, gaussian_vec(&mut rng, FEATURE_DIM, 0.5));
        ac.suffix_offsets.insert(p, vec![0.0; FEATURE_DIM]);
    }
    ac.speakers = (0..cfg.speakers).map(|_| gaussian_vec(&mut rng, FEATURE_DIM, 0.2)).collect();

    // Images: one visual prototype per lemma plus a shared "many" direction.
    let d = cfg.image_feat_dim;
    let visual: Vec<Vec<f64>> = lexemes.iter().map(|_| gaussian_vec(&mut rng, d, 1.0)).collect();
    let many = gaussian_vec(&mut rng, d, 1.0);
    let image_ids: Vec<String> = (0..cfg.n_images).map(|i| format!("img{i:04}")).collect();
    let mut usage = vec![0usize; lexemes.len()];
    let mut referents: Vec<Vec<(usize, Multiplicity)>> = Vec::with_capacity(cfg.n_images);
    let mut image_feats = Vec::with_capacity(cfg.n_images);
    for _ in 0..cfg.n_images {
        let k = rng.random_range(cfg.min_referents..=cfg.max_referents);
        let mut order: Vec<(usize, u32, usize)> = (0..lexemes.len()).map(|w| (usage[w], rng.random(), w)).collect();
        order.sort_unstable();
        let mut refs: Vec<(usize, Multiplicity)> = order[..k]
            .iter()
            .map(|&(_, _, w)| {
                let m = match lexemes[w].class {
                    WordClass::Noun if rng.random_bool(cfg.multiple_prob) => Multiplicity::Multiple,
                    WordClass::Noun => Multiplicity::Single,
                    WordClass::Verb => Multiplicity::NotApplicable,
                };
                (w, m)
            })
            .collect();
        refs.sort_unstable();
        let mut feat = gaussian_vec(&mut rng, d, cfg.image_noise);
        for &(w, m) in &refs {
            usage[w] += 1;
            for j in 0..d {
                feat[j] += visual[w][j];
                if m == Multiplicity::Multiple {
                    feat[j] += cfg.many_weight * many[j];
                }
            }
        }
        referents.push(refs);
        image_feats.push(feat);
    }

    let n_test = ((cfg.n_images as f64) * cfg.test_fraction).round() as usize;
    let test_set: BTreeSet<usize> = sample(&mut rng, cfg.n_images, n_test).into_iter().collect();

    let mut annotations = AnnotationSet::default();
    let mut book = SynthBookkeeping::default();
    for (i, refs) in referents.iter().enumerate() {
        for &(w, m) in refs {
            let lemma = &lexemes[w].lemma;
            annotations.insert(&image_ids[i], lemma, m);
            if test_set.contains(&i) {
                let slot = match m {
                    Multiplicity::Single => 0,
                    Multiplicity::Multiple => 1,
                    Multiplicity::NotApplicable => 2,
                };
                book.test_positives.entry(lemma.clone()).or_insert([0; 3])[slot] += 1;
            } else {
                *book.train_positives.entry(lemma.clone()).or_default() += 1;
            }
        }
    }

    // Spoken captions.
    let mut alignments = AlignmentTable::default();
    let mut train = PairedData::default();
    let mut test = PairedData::default();
    let mut transcripts = Vec::new();
    let mut caption_no = 0usize;
    for (i, refs) in referents.iter().enumerate() {
        let is_test = test_set.contains(&i);
        let (split, n_caps) = if is_test {
            (&mut test, 1)
        } else {
            (&mut train, cfg.captions_per_train_image)
        };
        let img_index = split.images.len();
        split.image_ids.push(image_ids[i].clone());
        split.images.push(image_feats[i].clone());
        for c in 0..n_caps {
            let speaker = caption_no % cfg.speakers;
            caption_no += 1;
            let mut words = refs.clone();
            words.shuffle(&mut rng);
            let mut frames = Vec::new();
            let mut spans = Vec::new();
            let mut text = Vec::new();
            for (w, m) in words {
                let morph = match m {
                    Multiplicity::Single => Morphology::Singular,
                    Multiplicity::Multiple => Morphology::Plural,
                    Multiplicity::NotApplicable => {
                        *[Morphology::Root, Morphology::Third, Morphology::Third, Morphology::Participle, Morphology::Participle]
                            .choose(&mut rng)
                            .expect("nonempty")
                    }
                };
                let (f, s) = render_word(&lexemes[w], morph, speaker, &ac, cfg, &mut rng);
                frames.extend(f);
                spans.extend(s);
                text.push(form_word(&lexemes[w], morph));
            }
            let id = format!("cap_{}_{c}", image_ids[i]);
            alignments.insert(&id, intervals(&spans));
            split.captions.push(FeatureSequence::from_rows(id, &frames)?);
            split.caption_image.push(img_index);
            if !is_test {
                transcripts.push(text.join(" "));
            }
        }
    }

    // Isolated words: every form of every target, once per speaker.
    let mut targets = Vec::new();
    let mut recordings = Vec::new();
    for lex in &lexemes {
        let forms: &[Morphology] = match lex.class {
            WordClass::Noun => &[Morphology::Singular, Morphology::Plural],
            WordClass::Verb => &[Morphology::Root, Morphology::Third, Morphology::Participle],
        };
        for &m in forms {
            let word = form_word(lex, m);
            targets.push(TargetWord {
                word: word.clone(),
                lemma: lex.lemma.clone(),
                class: lex.class,
                morphology: m,
            });
            for spk in 0..cfg.speakers {
                let (frames, spans) = render_word(lex, m, spk, &ac, cfg, &mut rng);
                let id = format!("rec_{word}_spk{}", spk + 1);
                alignments.insert(&id, intervals(&spans));
                recordings.push(Recording {
                    word: word.clone(),
                    speaker: format!("spk{}", spk + 1),
                    features: FeatureSequence::from_rows(id, &frames)?,
                });
            }
        }
    }

    // Dictionary with stress marks, a comment header and one alternate
    // pronunciation, so the parser's conventions are exercised.
    let mut dict_text = String::from(";;; synthetic pronouncing dictionary\n");
    let mut lemmas = BTreeMap::new();
    for t in &targets {
        let lex = lexemes.iter().find(|l| l.lemma == t.lemma).expect("target lexeme");
        dict_text.push_str(&dictionary_line(&t.word, &form_phones(lex, t.morphology), &mut false));
        lemmas.insert(t.word.clone(), t.lemma.clone());
    }
    if let Some(t) = targets.first() {
        dict_text.push_str(&format!("{}(2)  AH0 {}\n", t.word.to_uppercase(), "T"));
    }
    for stem in &distractors {
        let w = spelling(stem);
        dict_text.push_str(&dictionary_line(&w, stem, &mut false));
        lemmas.insert(w.clone(), w);
    }
    let dictionary = parse_dictionary(&dict_text, "<synthetic>")?;

    let corpus = Corpus {
        train,
        test,
        annotations,
        alignments,
        dictionary,
        dictionary_text: dict_text,
        lemmas,
        targets,
        recordings,
        transcripts,
    };
    Ok((corpus, book))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::frames_for_interval;

    fn small() -> SynthConfig {
        SynthConfig {
            vocab_size: 8,
            n_verbs: 2,
            n_images: 60,
            distractors: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let (a, _) = make_synthetic_corpus(&small()).unwrap();
        let (b, _) = make_synthetic_corpus(&small()).unwrap();
        assert_eq!(a.test.captions, b.test.captions);
        assert_eq!(a.train.images, b.train.images);
        assert_eq!(a.recordings, b.recordings);
        assert_eq!(a.dictionary_text, b.dictionary_text);
        let (c, _) = make_synthetic_corpus(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.test.captions, c.test.captions);
    }

    #[test]
    fn alignments_partition_each_utterance() {
        let (c, _) = make_synthetic_corpus(&small()).unwrap();
        let seqs = c.train.captions.iter().chain(&c.test.captions).chain(c.recordings.iter().map(|r| &r.features));
        for fs in seqs {
            let iv = c.alignments.get(&fs.utterance_id).unwrap();
            assert_eq!(iv[0].start_s, 0.0);
            assert!((iv.last().unwrap().end_s - fs.duration_s()).abs() < 1e-12);
            assert!(iv.windows(2).all(|w| w[0].end_s == w[1].start_s));
            let mut next = 0;
            for p in iv {
                let r = frames_for_interval(fs.n_frames(), p.start_s, p.end_s).unwrap();
                assert_eq!(r.first, next);
                assert!(r.len() >= 2);
                next = r.last;
            }
            assert_eq!(next, fs.n_frames());
        }
    }

    #[test]
    fn annotation_counts_match_bookkeeping() {
        let (c, book) = make_synthetic_corpus(&small()).unwrap();
        for (lemma, counts) in &book.test_positives {
            assert_eq!(c.annotations.count(&c.test.image_ids, lemma, Some(Multiplicity::Single)), counts[0]);
            assert_eq!(c.annotations.count(&c.test.image_ids, lemma, Some(Multiplicity::Multiple)), counts[1]);
            assert_eq!(c.annotations.count(&c.test.image_ids, lemma, Some(Multiplicity::NotApplicable)), counts[2]);
        }
    }

    #[test]
    fn infeasible_vocabulary_is_an_error() {
        let cfg = SynthConfig { distractors: 100_000, ..small() };
        assert!(matches!(make_synthetic_corpus(&cfg), Err(Error::Config(_))));
        assert!(make_synthetic_corpus(&SynthConfig { vocab_size: 4, n_verbs: 1, ..small() }).is_err());
    }

    #[test]
    fn forms_and_dictionary_agree() {
        let (c, _) = make_synthetic_corpus(&small()).unwrap();
        assert_eq!(c.targets.len(), 6 * 2 + 2 * 3);
        for t in &c.targets {
            let p = c.dictionary.get(&t.word).unwrap();
            let stem = c.dictionary.get(&t.lemma).unwrap();
            assert!(p.starts_with(stem.phones()));
            assert_eq!(c.lemmas[&t.word], t.lemma);
        }
        assert_eq!(c.recordings.len(), c.targets.len() * 2);
    }
}
