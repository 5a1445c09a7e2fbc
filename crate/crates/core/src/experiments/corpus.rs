use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::data::{load_targets, targets_to_tsv, AlignmentTable, AnnotationSet, Recording, TargetWord};
use crate::audio::FeatureSequence;
use crate::error::{Error, Result};
use crate::lexicon::{load_lemma_map, parse_dictionary, PronDict};
use crate::trainer::PairedData;

/// Everything the experiments read, in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: PairedData,
    pub test: PairedData,
    pub annotations: AnnotationSet,
    pub alignments: AlignmentTable,
    pub dictionary: PronDict,
    /// Dictionary as written to disk, stress marks included.
    pub dictionary_text: String,
    pub lemmas: BTreeMap<String, String>,
    pub targets: Vec<TargetWord>,
    pub recordings: Vec<Recording>,
    /// Training caption transcripts, one per line.
    pub transcripts: Vec<String>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))
}

fn write_image(path: &Path, v: &[f64]) -> Result<()> {
    let text: Vec<String> = v.iter().map(f64::to_string).collect();
    fs::write(path, text.join(" ") + "\n")?;
    Ok(())
}

fn read_image(path: &Path) -> Result<Vec<f64>> {
    read(path)?
        .split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                msg: format!("bad number `{t}`"),
            })
        })
        .collect()
}

impl Corpus {
    /// Lays the corpus out as plain files under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("features"))?;
        fs::create_dir_all(dir.join("images"))?;
        let mut manifest = String::from("caption_id\tcaption_file\timage_id\timage_file\tsplit\n");
        for (split, data) in [("train", &self.train), ("test", &self.test)] {
            for (id, img) in data.image_ids.iter().zip(&data.images) {
                write_image(&dir.join(format!("images/{id}.txt")), img)?;
            }
            for (cap, &img) in data.captions.iter().zip(&data.caption_image) {
                let file = format!("features/{}.feat", cap.utterance_id);
                cap.save(&dir.join(&file))?;
                let image_id = &data.image_ids[img];
                manifest.push_str(&format!(
                    "{}\t{file}\t{image_id}\timages/{image_id}.txt\t{split}\n",
                    cap.utterance_id
                ));
            }
        }
        fs::write(dir.join("manifest.tsv"), manifest)?;

        let mut recs = String::from("utterance_id\tword\tspeaker\tfeature_file\n");
        for r in &self.recordings {
            let file = format!("features/{}.feat", r.utterance_id());
            r.features.save(&dir.join(&file))?;
            recs.push_str(&format!("{}\t{}\t{}\t{file}\n", r.utterance_id(), r.word, r.speaker));
        }
        fs::write(dir.join("recordings.tsv"), recs)?;

        let lemmas: String = self.lemmas.iter().map(|(w, l)| format!("{w}\t{l}\n")).collect();
        fs::write(dir.join("lemmas.tsv"), lemmas)?;
        fs::write(dir.join("annotations.tsv"), self.annotations.to_tsv())?;
        fs::write(dir.join("alignments.tsv"), self.alignments.to_tsv())?;
        fs::write(dir.join("dictionary.txt"), &self.dictionary_text)?;
        fs::write(dir.join("targets.tsv"), targets_to_tsv(&self.targets))?;
        fs::write(dir.join("transcripts.txt"), self.transcripts.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let manifest_path = dir.join("manifest.tsv");
        let manifest = read(&manifest_path)?;
        let mut train = PairedData::default();
        let mut test = PairedData::default();
        let mut image_index: [BTreeMap<String, usize>; 2] = Default::default();
        for (i, line) in manifest.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let c: Vec<&str> = line.split('\t').collect();
            let bad = |msg: String| Error::Parse {
                path: manifest_path.display().to_string(),
                line: i + 1,
                msg,
            };
            if c.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", c.len())));
            }
            let (k, data) = match c[4] {
                "train" => (0, &mut train),
                "test" => (1, &mut test),
                other => return Err(bad(format!("unknown split `{other}`"))),
            };
            let img = match image_index[k].get(c[2]) {
                Some(&j) => j,
                None => {
                    data.image_ids.push(c[2].to_string());
                    data.images.push(read_image(&dir.join(c[3]))?);
                    image_index[k].insert(c[2].to_string(), data.images.len() - 1);
                    data.images.len() - 1
                }
            };
            let fs = FeatureSequence::load(&dir.join(c[1]))?;
            if fs.utterance_id != c[0] {
                return Err(bad(format!("feature file holds `{}`", fs.utterance_id)));
            }
            data.captions.push(fs);
            data.caption_image.push(img);
        }

        let rec_path = dir.join("recordings.tsv");
        let mut recordings = Vec::new();
        for (i, line) in read(&rec_path)?.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let c: Vec<&str> = line.split('\t').collect();
            if c.len() != 4 {
                return Err(Error::Parse {
                    path: rec_path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected 4 fields, found {}", c.len()),
                });
            }
            recordings.push(Recording {
                word: c[1].to_string(),
                speaker: c[2].to_string(),
                features: FeatureSequence::load(&dir.join(c[3]))?,
            });
        }

        let dict_path = dir.join("dictionary.txt");
        let dictionary_text = read(&dict_path)?;
        Ok(Corpus {
            train,
            test,
            annotations: AnnotationSet::load(&dir.join("annotations.tsv"))?,
            alignments: AlignmentTable::load(&dir.join("alignments.tsv"))?,
            dictionary: parse_dictionary(&dictionary_text, &dict_path.display().to_string())?,
            dictionary_text,
            lemmas: load_lemma_map(&dir.join("lemmas.tsv"))?,
            targets: load_targets(&dir.join("targets.tsv"))?,
            recordings,
            transcripts: read(&dir.join("transcripts.txt"))?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{make_synthetic_corpus, SynthConfig};

    #[test]
    fn write_then_load_is_lossless() {
        let cfg = SynthConfig {
            vocab_size: 6,
            n_verbs: 1,
            n_images: 50,
            distractors: 5,
            ..SynthConfig::default()
        };
        let (c, _) = make_synthetic_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.train.images, c.train.images);
        assert_eq!(back.train.image_ids, c.train.image_ids);
        assert_eq!(back.test.captions, c.test.captions);
        assert_eq!(back.test.caption_image, c.test.caption_image);
        assert_eq!(back.annotations, c.annotations);
        assert_eq!(back.alignments, c.alignments);
        assert_eq!(back.dictionary, c.dictionary);
        assert_eq!(back.lemmas, c.lemmas);
        assert_eq!(back.targets, c.targets);
        assert_eq!(back.recordings, c.recordings);
        assert_eq!(back.transcripts, c.transcripts);
    }

    #[test]
    fn missing_directory_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Corpus::load(&dir.path().join("nope")), Err(Error::MissingInput(_))));
    }
}
