use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use super::train::PairedData;
use crate::audio::FeatureSequence;
use crate::error::{Error, Result};
use crate::model::GroundingModel;
use crate::numerics::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    CaptionToImage,
    ImageToCaption,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::CaptionToImage => "caption_to_image",
            Direction::ImageToCaption => "image_to_caption",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    /// N -> percentage of queries with the correct item in the top N.
    pub recall_at: BTreeMap<usize, f64>,
    pub median_rank: f64,
    pub queries: usize,
}

/// 1-based rank of `correct` when candidates are sorted by descending
/// similarity, ties going to the lower candidate index.
pub fn rank_of(sims: &[f64], correct: usize) -> usize {
    let s = sims[correct];
    1 + sims
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < correct))
        .count()
}

/// Median of a nonempty list; the mean of the two middle values for even
/// lengths.
pub fn median(values: &[usize]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

fn report(direction: Direction, ranks: &[usize], ns: &[usize]) -> RetrievalReport {
    let q = ranks.len() as f64;
    let recall_at = ns
        .iter()
        .map(|&n| (n, 100.0 * ranks.iter().filter(|&&r| r <= n).count() as f64 / q))
        .collect();
    RetrievalReport {
        direction,
        recall_at,
        median_rank: median(ranks),
        queries: ranks.len(),
    }
}

/// Both retrieval directions for aligned lists: caption `i` matches image `i`.
pub fn retrieval_from_embeddings(
    captions: &[Vec<f64>],
    images: &[Vec<f64>],
    ns: &[usize],
) -> Result<(RetrievalReport, RetrievalReport)> {
    if captions.is_empty() || captions.len() != images.len() {
        return Err(Error::invalid(format!(
            "retrieval needs equal nonempty caption and image lists, got {} and {}",
            captions.len(),
            images.len()
        )));
    }
    let n = captions.len();
    let sim: Vec<Vec<f64>> = captions.iter().map(|c| images.iter().map(|v| dot(c, v)).collect()).collect();
    let c2i: Vec<usize> = (0..n).map(|i| rank_of(&sim[i], i)).collect();
    let i2c: Vec<usize> = (0..n)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| sim[i][j]).collect();
            rank_of(&col, j)
        })
        .collect();
    Ok((
        report(Direction::CaptionToImage, &c2i, ns),
        report(Direction::ImageToCaption, &i2c, ns),
    ))
}

/// Encodes captions in parallel; the output order follows the input.
pub fn encode_captions(model: &GroundingModel, captions: &[FeatureSequence]) -> Result<Vec<Vec<f64>>> {
    captions
        .par_iter()
        .map(|fs| model.encode_caption(fs).map(|e| e.vector))
        .collect()
}

pub fn encode_images(model: &GroundingModel, images: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .map(|v| model.encode_image(v).map(|e| e.vector))
        .collect()
}

/// Retrieval on a test set where every image has exactly one caption.
pub fn evaluate_retrieval(model: &GroundingModel, test: &PairedData, ns: &[usize]) -> Result<(RetrievalReport, RetrievalReport)> {
    test.check(&model.config)?;
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let mut seen = vec![false; test.images.len()];
    for &i in &test.caption_image {
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid("test set must pair each image with exactly one caption"));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::invalid("test set has an image without a caption"));
    }
    let caps = encode_captions(model, &test.captions)?;
    let imgs_all = encode_images(model, &test.images)?;
    let imgs: Vec<Vec<f64>> = test.caption_image.iter().map(|&i| imgs_all[i].clone()).collect();
    retrieval_from_embeddings(&caps, &imgs, ns)
}

/// CSV with one row per direction: `direction,r_at_<N>...,median_rank`.
pub fn write_retrieval_csv<W: Write>(w: W, reports: &[&RetrievalReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let ns: Vec<usize> = reports.first().map(|r| r.recall_at.keys().copied().collect()).unwrap_or_default();
    let mut header = vec!["direction".to_string()];
    header.extend(ns.iter().map(|n| format!("r_at_{n}")));
    header.push("median_rank".into());
    header.push("queries".into());
    out.write_record(&header)?;
    for r in reports {
        let mut row = vec![r.direction.as_str().to_string()];
        row.extend(ns.iter().map(|n| format!("{:.4}", r.recall_at.get(n).copied().unwrap_or(f64::NAN))));
        row.push(format!("{}", r.median_rank));
        row.push(r.queries.to_string());
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
