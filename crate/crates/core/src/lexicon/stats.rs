use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::dict::{PhoneSeq, PronDict};
use crate::error::{Error, Result};

/// Which one-phoneme edits count as neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeighbourMode {
    /// Substitution, insertion or deletion.
    #[default]
    EditOne,
    SubstitutionOnly,
}

/// Dictionary words whose pronunciation starts with `prefix`.
pub fn initial_cohort_size(prefix: &[String], dict: &PronDict) -> usize {
    dict.iter().filter(|(_, p)| p.starts_with(prefix)).count()
}

fn one_edit_apart(a: &[String], b: &[String], mode: NeighbourMode) -> bool {
    match a.len() as isize - b.len() as isize {
        0 => a.iter().zip(b).filter(|(x, y)| x != y).count() == 1,
        1 | -1 if mode == NeighbourMode::EditOne => {
            let (long, short) = if a.len() > b.len() { (a, b) } else { (b, a) };
            let k = long.iter().zip(short).take_while(|(x, y)| x == y).count();
            long[k + 1..] == short[k..]
        }
        _ => false,
    }
}

/// Dictionary words exactly one phoneme edit away from `word`.
pub fn neighbourhood_density(word: &PhoneSeq, dict: &PronDict, mode: NeighbourMode) -> usize {
    dict.iter()
        .filter(|(_, p)| one_edit_apart(word.phones(), p.phones(), mode))
        .count()
}

/// Phonemes per second.
pub fn speaking_rate(word: &PhoneSeq, duration_s: f64) -> Result<f64> {
    if !(duration_s > 0.0) {
        return Err(Error::invalid(format!("nonpositive duration {duration_s}")));
    }
    Ok(word.len() as f64 / duration_s)
}

/// Lowercased word tokens of a caption line.
pub fn tokenize(line: &str) -> impl Iterator<Item = String> + '_ {
    line.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordStats {
    pub word: String,
    pub lemma: String,
    pub word_count: usize,
    pub lemma_count: usize,
    pub n_vowels: usize,
    pub n_consonants: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub word: String,
    pub reason: String,
}

/// Raw training-set counts for each target word and its lemma.
///
/// Tokens missing from the lemma map count as their own lemma. Targets
/// without a dictionary entry are returned as exclusions.
pub fn word_stats<S: AsRef<str>>(
    transcripts: &[S],
    lemma_map: &BTreeMap<String, String>,
    dict: &PronDict,
    targets: &[String],
) -> Result<(Vec<WordStats>, Vec<Exclusion>)> {
    let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in transcripts {
        for tok in tokenize(line.as_ref()) {
            *word_counts.entry(tok).or_default() += 1;
        }
    }
    let mut lemma_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (w, &c) in &word_counts {
        let lemma = lemma_map.get(w).map(String::as_str).unwrap_or(w);
        *lemma_counts.entry(lemma).or_default() += c;
    }
    let mut stats = Vec::new();
    let mut excluded = Vec::new();
    for t in targets {
        let key = t.to_lowercase();
        let lemma = lemma_map
            .get(&key)
            .ok_or_else(|| Error::invalid(format!("lemma map has no entry for target `{t}`")))?;
        let Some(p) = dict.get(&key) else {
            excluded.push(Exclusion {
                word: key,
                reason: "not in pronouncing dictionary".into(),
            });
            continue;
        };
        stats.push(WordStats {
            word: key.clone(),
            lemma: lemma.clone(),
            word_count: word_counts.get(&key).copied().unwrap_or(0),
            lemma_count: lemma_counts.get(lemma.as_str()).copied().unwrap_or(0),
            n_vowels: p.n_vowels(),
            n_consonants: p.n_consonants(),
        });
    }
    Ok((stats, excluded))
}

/// Two-column TSV `word<TAB>lemma`; `#` lines are comments.
pub fn parse_lemma_map(text: &str, source: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != 2 || cols.iter().any(|c| c.is_empty()) {
            return Err(Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg: "expected `word<TAB>lemma`".into(),
            });
        }
        map.insert(cols[0].to_lowercase(), cols[1].to_lowercase());
    }
    Ok(map)
}

pub fn load_lemma_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    parse_lemma_map(&text, &path.display().to_string())
}
