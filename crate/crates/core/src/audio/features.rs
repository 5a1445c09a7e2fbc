use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_DIM: usize = 39;
pub const FRAME_SHIFT_S: f64 = 0.010;
pub const FRAME_WINDOW_S: f64 = 0.025;

const MAGIC: &[u8; 8] = b"GSLFEAT1";

/// `T x dim` acoustic feature matrix for one utterance, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub utterance_id: String,
    n_frames: usize,
    dim: usize,
    data: Vec<f64>,
}

/// Half-open frame range `[first, last)` for a time interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRange {
    pub first: usize,
    pub last: usize,
    /// Set when the interval ran past the end of the utterance.
    pub clamped: bool,
}

impl FrameRange {
    pub fn len(&self) -> usize {
        self.last - self.first
    }

    pub fn is_empty(&self) -> bool {
        self.first == self.last
    }
}

impl FeatureSequence {
    pub fn new(utterance_id: impl Into<String>, n_frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if n_frames == 0 || dim == 0 || data.len() != n_frames * dim {
            return Err(Error::shape("feature_sequence", &[n_frames, dim], &[data.len()]));
        }
        Ok(FeatureSequence {
            utterance_id: utterance_id.into(),
            n_frames,
            dim,
            data,
        })
    }

    pub fn from_rows(utterance_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("ragged feature rows"));
        }
        Self::new(utterance_id, rows.len(), dim, rows.concat())
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.n_frames, self.dim, self.data.clone()).expect("consistent shape")
    }

    pub fn duration_s(&self) -> f64 {
        (self.n_frames - 1) as f64 * FRAME_SHIFT_S + FRAME_WINDOW_S
    }

    /// The first `n` frames.
    pub fn prefix(&self, n: usize) -> Result<FeatureSequence> {
        if n == 0 || n > self.n_frames {
            return Err(Error::invalid(format!(
                "prefix of {n} frames from a {}-frame utterance",
                self.n_frames
            )));
        }
        Self::new(self.utterance_id.clone(), n, self.dim, self.data[..n * self.dim].to_vec())
    }

    /// Frames whose window centre lies in `[start_s, end_s)`.
    pub fn frames_for_interval(&self, start_s: f64, end_s: f64) -> Result<FrameRange> {
        frames_for_interval(self.n_frames, start_s, end_s)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.utterance_id.len() as u32).to_le_bytes())?;
        w.write_all(self.utterance_id.as_bytes())?;
        w.write_all(&(self.n_frames as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format {
                path: "<features>".into(),
                msg: "not a feature file".into(),
            });
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let mut id = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| Error::invalid("utterance id is not utf-8"))?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n_frames = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let dim = u64::from_le_bytes(b8) as usize;
        let mut data = Vec::with_capacity(n_frames * dim);
        for _ in 0..n_frames * dim {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Self::new(id, n_frames, dim, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f)).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }
}

/// Frame index range for `[start_s, end_s)` in an utterance of `n_frames`
/// frames (25 ms windows, 10 ms shift). Frame `k` belongs to the interval
/// when its centre `0.0125 + 0.010 k` lies inside it.
pub fn frames_for_interval(n_frames: usize, start_s: f64, end_s: f64) -> Result<FrameRange> {
    if !(start_s >= 0.0 && start_s < end_s) {
        return Err(Error::invalid(format!("bad interval [{start_s}, {end_s})")));
    }
    let first_center_at_or_after = |t: f64| -> usize {
        let k = ((t - FRAME_WINDOW_S / 2.0) / FRAME_SHIFT_S - 1e-9).ceil();
        if k <= 0.0 {
            0
        } else {
            k as usize
        }
    };
    let first = first_center_at_or_after(start_s);
    let last = first_center_at_or_after(end_s);
    let utterance_end = (n_frames.max(1) - 1) as f64 * FRAME_SHIFT_S + FRAME_WINDOW_S;
    let clamped = end_s > utterance_end + 1e-9;
    Ok(FrameRange {
        first: first.min(n_frames),
        last: last.min(n_frames),
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_utterance_maps_to_all_frames() {
        // 98 frames span 97 * 10 ms + 25 ms
        let r = frames_for_interval(98, 0.0, 0.995).unwrap();
        assert_eq!((r.first, r.last, r.clamped), (0, 98, false));
    }

    #[test]
    fn phone_interval_by_enumerated_centres() {
        // centres 0.0125 + 0.01k in [0.10, 0.18): k = 9 (0.1025) .. 16 (0.1725)
        let expected: Vec<usize> = (0..100)
            .filter(|&k| {
                let c = 0.0125 + 0.010 * k as f64;
                (0.10..0.18).contains(&c)
            })
            .collect();
        let r = frames_for_interval(100, 0.10, 0.18).unwrap();
        assert_eq!((r.first..r.last).collect::<Vec<_>>(), expected);
        assert_eq!((r.first, r.last), (9, 17));
    }

    #[test]
    fn consecutive_phones_partition_frames() {
        let bounds = [0.0, 0.07, 0.13, 0.2, 0.31, 0.45];
        let mut next = 0;
        for w in bounds.windows(2) {
            let r = frames_for_interval(43, w[0], w[1]).unwrap();
            assert_eq!(r.first, next);
            next = r.last;
        }
        assert_eq!(next, 43);
    }

    #[test]
    fn overlong_interval_is_clamped_and_flagged() {
        let r = frames_for_interval(10, 0.05, 2.0).unwrap();
        assert_eq!(r.last, 10);
        assert!(r.clamped);
    }

    #[test]
    fn empty_or_negative_interval_rejected() {
        assert!(frames_for_interval(10, 0.2, 0.2).is_err());
        assert!(frames_for_interval(10, -0.1, 0.2).is_err());
    }

    #[test]
    fn cache_file_round_trip() {
        let fs = FeatureSequence::new("utt-1", 2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, -0.0]).unwrap();
        let mut buf = Vec::new();
        fs.write_to(&mut buf).unwrap();
        assert_eq!(FeatureSequence::read_from(&buf[..]).unwrap(), fs);
    }

    #[test]
    fn prefix_is_row_prefix() {
        let fs = FeatureSequence::new("u", 3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = fs.prefix(2).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(fs.prefix(0).is_err());
        assert!(fs.prefix(4).is_err());
    }
}
