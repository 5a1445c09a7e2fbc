use std::fmt;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// ARPAbet vowel symbols (without stress digits).
pub const ARPABET_VOWELS: [&str; 15] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhoneClass {
    Vowel,
    Consonant,
}

pub fn phone_class(phone: &str) -> PhoneClass {
    if ARPABET_VOWELS.contains(&phone) {
        PhoneClass::Vowel
    } else {
        PhoneClass::Consonant
    }
}

/// Removes a trailing ARPAbet stress digit.
pub fn strip_stress(phone: &str) -> &str {
    phone.trim_end_matches(|c: char| c.is_ascii_digit())
}

/// Nonempty phoneme sequence, stress digits removed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhoneSeq(Vec<String>);

impl PhoneSeq {
    pub fn new<S: AsRef<str>>(phones: &[S]) -> Result<Self> {
        if phones.is_empty() {
            return Err(Error::invalid("empty phone sequence"));
        }
        Ok(PhoneSeq(phones.iter().map(|p| strip_stress(p.as_ref()).to_string()).collect()))
    }

    /// Parses whitespace-separated symbols such as `"D AO1 G"`.
    pub fn parse(s: &str) -> Result<Self> {
        Self::new(&s.split_whitespace().collect::<Vec<_>>())
    }

    pub fn phones(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn classes(&self) -> Vec<PhoneClass> {
        self.0.iter().map(|p| phone_class(p)).collect()
    }

    pub fn n_vowels(&self) -> usize {
        self.classes().iter().filter(|&&c| c == PhoneClass::Vowel).count()
    }

    pub fn n_consonants(&self) -> usize {
        self.len() - self.n_vowels()
    }

    pub fn starts_with(&self, prefix: &[String]) -> bool {
        self.0.starts_with(prefix)
    }
}

impl fmt::Display for PhoneSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

/// Word to primary pronunciation. Words are stored lowercase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PronDict {
    entries: IndexMap<String, PhoneSeq>,
}

fn valid_phone(p: &str) -> bool {
    let base = strip_stress(p);
    let digits = &p[base.len()..];
    !base.is_empty() && base.chars().all(|c| c.is_ascii_uppercase()) && digits.len() <= 1
}

/// CMUdict plain-text format: `WORD  PH1 PH2 ...`. Lines starting with
/// `;;;` are comments, as is anything after `#` on an entry line.
/// Alternate pronunciations (`WORD(2)`) and repeated headwords are ignored
/// so the first entry wins.
pub fn parse_dictionary(text: &str, source: &str) -> Result<PronDict> {
    let mut entries = IndexMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with(";;;") {
            continue;
        }
        let fail = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let mut parts = line.split_whitespace();
        let head = parts.next().expect("nonempty line");
        let phones: Vec<&str> = parts.collect();
        if phones.is_empty() {
            return Err(fail(format!("entry `{head}` has no phones")));
        }
        if let Some(bad) = phones.iter().find(|p| !valid_phone(p)) {
            return Err(fail(format!("bad phone symbol `{bad}`")));
        }
        let (word, variant) = match head.find('(') {
            Some(k) => {
                let tag = &head[k..];
                if !(tag.len() > 2 && tag.ends_with(')') && tag[1..tag.len() - 1].chars().all(|c| c.is_ascii_digit())) {
                    return Err(fail(format!("bad variant marker in `{head}`")));
                }
                (&head[..k], true)
            }
            None => (head, false),
        };
        if word.is_empty() {
            return Err(fail("empty headword".into()));
        }
        let key = word.to_lowercase();
        if variant || entries.contains_key(&key) {
            continue;
        }
        entries.insert(key, PhoneSeq::new(&phones)?);
    }
    Ok(PronDict { entries })
}

impl PronDict {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        parse_dictionary(&text, &path.display().to_string())
    }

    pub fn from_entries<I: IntoIterator<Item = (String, PhoneSeq)>>(it: I) -> Self {
        PronDict {
            entries: it.into_iter().map(|(w, p)| (w.to_lowercase(), p)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&PhoneSeq> {
        self.entries.get(&word.to_lowercase())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PhoneSeq)> {
        self.entries.iter().map(|(w, p)| (w.as_str(), p))
    }

    /// CMUdict-style text, one entry per line, no stress marks.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(w, p)| format!("{}  {}\n", w.to_uppercase(), p))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dog_entry() {
        let d = parse_dictionary("DOG  D AO1 G\n", "t").unwrap();
        let p = d.get("dog").unwrap();
        assert_eq!(p.phones(), &["D", "AO", "G"]);
        assert_eq!(p.classes(), vec![PhoneClass::Consonant, PhoneClass::Vowel, PhoneClass::Consonant]);
    }

    #[test]
    fn first_variant_wins_and_comments_skipped() {
        let d = parse_dictionary(";;; header\nA  AH0\nA(2)  EY1\n\nAB  AE1 B\n", "t").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.get("a").unwrap().phones(), &["AH"]);
    }

    #[test]
    fn trailing_hash_comment_is_ignored() {
        let d = parse_dictionary("aalen AE1 L AH0 N # place, german\n", "t").unwrap();
        assert_eq!(d.get("AALEN").unwrap().to_string(), "AE L AH N");
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse_dictionary("DOG  D AO1 G\nCAT\n", "dict.txt").unwrap_err();
        assert_eq!(err.to_string(), "dict.txt:2: entry `CAT` has no phones");
        let err = parse_dictionary("DOG  D ao G\n", "dict.txt").unwrap_err();
        assert!(err.to_string().starts_with("dict.txt:1:"));
    }

    #[test]
    fn text_round_trip() {
        let d = parse_dictionary("DOG  D AO1 G\nCAT  K AE1 T\n", "t").unwrap();
        assert_eq!(parse_dictionary(&d.to_text(), "t").unwrap(), d);
    }
}
