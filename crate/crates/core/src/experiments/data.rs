use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::audio::FeatureSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Multiplicity {
    Single,
    Multiple,
    /// Verbs and other referents without a count.
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WordClass {
    Noun,
    Verb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Morphology {
    Singular,
    Plural,
    Root,
    Third,
    Participle,
}

macro_rules! text_enum {
    ($t:ty, $what:literal, $($v:path => $s:literal),+ $(,)?) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $($v => $s),+ }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(format!("unknown {} `{other}`", $what)),
                }
            }
        }
    };
}

text_enum!(Multiplicity, "multiplicity",
    Multiplicity::Single => "single",
    Multiplicity::Multiple => "multiple",
    Multiplicity::NotApplicable => "n/a");
text_enum!(WordClass, "word class", WordClass::Noun => "noun", WordClass::Verb => "verb");
text_enum!(Morphology, "morphology",
    Morphology::Singular => "singular",
    Morphology::Plural => "plural",
    Morphology::Root => "root",
    Morphology::Third => "third",
    Morphology::Participle => "participle");

fn parse_err(source: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_string(),
        line,
        msg: msg.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))
}

/// Splits a TSV body into rows of exactly `n` fields, skipping blank lines,
/// `#` comments and a header row whose first field equals `header`.
fn tsv_rows<'a>(text: &'a str, n: usize, header: &str, source: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if i == 0 && cols[0] == header {
            continue;
        }
        if cols.len() != n {
            return Err(parse_err(source, i + 1, format!("expected {n} tab-separated fields, found {}", cols.len())));
        }
        rows.push((i + 1, cols));
    }
    Ok(rows)
}

/// Image id to annotated referents (keyed by lemma).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    pub images: BTreeMap<String, BTreeMap<String, Multiplicity>>,
}

impl AnnotationSet {
    pub fn insert(&mut self, image_id: &str, lemma: &str, m: Multiplicity) {
        self.images.entry(image_id.to_string()).or_default().insert(lemma.to_string(), m);
    }

    pub fn get(&self, image_id: &str, lemma: &str) -> Option<Multiplicity> {
        self.images.get(image_id).and_then(|r| r.get(lemma)).copied()
    }

    pub fn contains(&self, image_id: &str, lemma: &str) -> bool {
        self.get(image_id, lemma).is_some()
    }

    /// Annotated images among `image_ids` with the given referent.
    pub fn count(&self, image_ids: &[String], lemma: &str, m: Option<Multiplicity>) -> usize {
        image_ids
            .iter()
            .filter(|id| match (self.get(id, lemma), m) {
                (Some(_), None) => true,
                (Some(a), Some(b)) => a == b,
                _ => false,
            })
            .count()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("image_id\tword\tmultiplicity\n");
        for (img, refs) in &self.images {
            for (w, m) in refs {
                s.push_str(&format!("{img}\t{w}\t{m}\n"));
            }
        }
        s
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut set = AnnotationSet::default();
        for (line, c) in tsv_rows(text, 3, "image_id", source)? {
            let m: Multiplicity = c[2].parse().map_err(|e: String| parse_err(source, line, e))?;
            set.insert(c[0], c[1], m);
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, &path.display().to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhoneInterval {
    pub phone: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// Utterance id to its ordered phone intervals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentTable {
    pub utterances: BTreeMap<String, Vec<PhoneInterval>>,
}

impl AlignmentTable {
    pub fn get(&self, utterance_id: &str) -> Option<&[PhoneInterval]> {
        self.utterances.get(utterance_id).map(Vec::as_slice)
    }

    pub fn insert(&mut self, utterance_id: &str, intervals: Vec<PhoneInterval>) {
        self.utterances.insert(utterance_id.to_string(), intervals);
    }

    /// Intervals must be nonempty, ordered and non-overlapping.
    pub fn validate(&self) -> Result<()> {
        for (utt, iv) in &self.utterances {
            for p in iv {
                if !(p.start_s >= 0.0 && p.start_s < p.end_s) {
                    return Err(Error::invalid(format!("{utt}: bad interval for {}", p.phone)));
                }
            }
            if iv.windows(2).any(|w| w[1].start_s < w[0].end_s) {
                return Err(Error::invalid(format!("{utt}: overlapping or unordered intervals")));
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("utterance_id\tphone\tstart_s\tend_s\n");
        for (utt, iv) in &self.utterances {
            for p in iv {
                s.push_str(&format!("{utt}\t{}\t{}\t{}\n", p.phone, p.start_s, p.end_s));
            }
        }
        s
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut t = AlignmentTable::default();
        for (line, c) in tsv_rows(text, 4, "utterance_id", source)? {
            let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(source, line, format!("bad time `{s}`")));
            t.utterances.entry(c[0].to_string()).or_default().push(PhoneInterval {
                phone: c[1].to_string(),
                start_s: num(c[2])?,
                end_s: num(c[3])?,
            });
        }
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, &path.display().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TargetWord {
    pub word: String,
    pub lemma: String,
    pub class: WordClass,
    pub morphology: Morphology,
}

pub fn targets_to_tsv(targets: &[TargetWord]) -> String {
    let mut s = String::from("word\tlemma\tclass\tmorphology\n");
    for t in targets {
        s.push_str(&format!("{}\t{}\t{}\t{}\n", t.word, t.lemma, t.class, t.morphology));
    }
    s
}

pub fn parse_targets(text: &str, source: &str) -> Result<Vec<TargetWord>> {
    tsv_rows(text, 4, "word", source)?
        .into_iter()
        .map(|(line, c)| {
            Ok(TargetWord {
                word: c[0].to_string(),
                lemma: c[1].to_string(),
                class: c[2].parse().map_err(|e: String| parse_err(source, line, e))?,
                morphology: c[3].parse().map_err(|e: String| parse_err(source, line, e))?,
            })
        })
        .collect()
}

pub fn load_targets(path: &Path) -> Result<Vec<TargetWord>> {
    parse_targets(&read_text(path)?, &path.display().to_string())
}

/// An isolated-word recording with its features.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub word: String,
    pub speaker: String,
    pub features: FeatureSequence,
}

impl Recording {
    pub fn utterance_id(&self) -> &str {
        &self.features.utterance_id
    }
}
