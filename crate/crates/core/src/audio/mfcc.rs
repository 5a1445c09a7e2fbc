//! MFCC front end: 25 ms Hamming windows every 10 ms, 40 mel filters,
//! 12 cepstra plus log energy, first and second deltas, per-utterance CMVN.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::features::FeatureSequence;
use super::wave::Waveform;
use crate::error::{Error, Result};

/// Log-domain floor for energies.
const ENERGY_FLOOR: f64 = 1e-10;
/// Columns with variance below this are only mean-subtracted.
pub const CMVN_VAR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfccConfig {
    pub window_ms: f64,
    pub shift_ms: f64,
    pub n_mel_filters: usize,
    pub n_cepstra: usize,
    pub include_log_energy: bool,
    pub deltas: usize,
    pub delta_window: usize,
    pub preemphasis: f64,
    pub cmvn: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            window_ms: 25.0,
            shift_ms: 10.0,
            n_mel_filters: 40,
            n_cepstra: 12,
            include_log_energy: true,
            deltas: 2,
            delta_window: 2,
            preemphasis: 0.97,
            cmvn: true,
        }
    }
}

impl MfccConfig {
    pub fn output_dim(&self) -> usize {
        (self.n_cepstra + usize::from(self.include_log_energy)) * (1 + self.deltas)
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, sample_rate: u32) -> usize {
        (self.shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn fft_size(&self, sample_rate: u32) -> usize {
        self.window_samples(sample_rate).next_power_of_two()
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the mel scale from 0 Hz to Nyquist.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `[n_filters][n_bins]` weights over the one-sided power spectrum.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_filters: usize, fft_size: usize, sample_rate: u32) -> Self {
        let n_bins = fft_size / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
        let points: Vec<f64> = (0..n_filters + 2)
            .map(|i| lo + (hi - lo) * i as f64 / (n_filters + 1) as f64)
            .collect();
        let mut weights = vec![vec![0.0; n_bins]; n_filters];
        for (m, w) in weights.iter_mut().enumerate() {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            for (k, wk) in w.iter_mut().enumerate() {
                let mel = hz_to_mel(k as f64 * sample_rate as f64 / fft_size as f64);
                if mel > left && mel < right {
                    *wk = if mel <= center {
                        (mel - left) / (center - left)
                    } else {
                        (right - mel) / (right - center)
                    };
                }
            }
        }
        let centers_hz = points[1..=n_filters].iter().map(|&m| mel_to_hz(m)).collect();
        MelFilterbank { weights, centers_hz }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Orthonormal DCT-II of `x`, keeping coefficients `1..=n_keep`.
fn dct2_orthonormal(x: &[f64], n_keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (1..=n_keep)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (i as f64 + 0.5) / n).cos())
                .sum();
            s * (2.0 / n).sqrt()
        })
        .collect()
}

struct Framer {
    emphasized: Vec<f64>,
    window: Vec<f64>,
    win: usize,
    shift: usize,
    n_frames: usize,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    fft_size: usize,
}

impl Framer {
    fn new(w: &Waveform, cfg: &MfccConfig) -> Result<Self> {
        let sr = w.sample_rate();
        let win = cfg.window_samples(sr);
        let shift = cfg.shift_samples(sr);
        let n = w.samples().len();
        if n < win {
            return Err(Error::invalid(format!(
                "utterance of {n} samples is shorter than one {win}-sample window"
            )));
        }
        let s = w.samples();
        let mut emphasized = Vec::with_capacity(n);
        emphasized.push(s[0]);
        for i in 1..n {
            emphasized.push(s[i] - cfg.preemphasis * s[i - 1]);
        }
        let window = (0..win)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (win - 1) as f64).cos())
            .collect();
        let fft_size = cfg.fft_size(sr);
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Ok(Framer {
            emphasized,
            window,
            win,
            shift,
            n_frames: (n - win) / shift + 1,
            fft,
            fft_size,
        })
    }

    /// Log energy and one-sided power spectrum of frame `t`.
    fn frame(&self, t: usize) -> (f64, Vec<f64>) {
        let seg = &self.emphasized[t * self.shift..t * self.shift + self.win];
        let energy: f64 = seg.iter().map(|v| v * v).sum();
        let mut buf: Vec<Complex<f64>> = seg
            .iter()
            .zip(&self.window)
            .map(|(v, w)| Complex::new(v * w, 0.0))
            .collect();
        buf.resize(self.fft_size, Complex::new(0.0, 0.0));
        self.fft.process(&mut buf);
        let power = buf[..self.fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        (energy.max(ENERGY_FLOOR).ln(), power)
    }
}

/// Log mel filterbank energies per frame, before the DCT.
pub fn log_mel_energies(w: &Waveform, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    let framer = Framer::new(w, cfg)?;
    let bank = MelFilterbank::new(cfg.n_mel_filters, framer.fft_size, w.sample_rate());
    Ok((0..framer.n_frames)
        .map(|t| {
            let (_, power) = framer.frame(t);
            bank.apply(&power).into_iter().map(|e| e.max(ENERGY_FLOOR).ln()).collect()
        })
        .collect())
}

/// Static features per frame: cepstra `c1..c12` followed by log energy.
pub fn base_features(w: &Waveform, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    let framer = Framer::new(w, cfg)?;
    let bank = MelFilterbank::new(cfg.n_mel_filters, framer.fft_size, w.sample_rate());
    Ok((0..framer.n_frames)
        .map(|t| {
            let (log_e, power) = framer.frame(t);
            let log_mel: Vec<f64> = bank.apply(&power).into_iter().map(|e| e.max(ENERGY_FLOOR).ln()).collect();
            let mut row = dct2_orthonormal(&log_mel, cfg.n_cepstra);
            if cfg.include_log_energy {
                row.push(log_e);
            }
            row
        })
        .collect())
}

/// Regression deltas over `±window` frames; edges repeat the boundary frame.
pub fn deltas(rows: &[Vec<f64>], window: usize) -> Vec<Vec<f64>> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let dim = rows[0].len();
    let denom: f64 = 2.0 * (1..=window).map(|k| (k * k) as f64).sum::<f64>();
    (0..n)
        .map(|t| {
            (0..dim)
                .map(|d| {
                    (1..=window)
                        .map(|k| {
                            let fwd = rows[(t + k).min(n - 1)][d];
                            let back = rows[t.saturating_sub(k)][d];
                            k as f64 * (fwd - back)
                        })
                        .sum::<f64>()
                        / denom
                })
                .collect()
        })
        .collect()
}

/// Per-column mean and variance normalisation in place.
pub fn cmvn(rows: &mut [Vec<f64>]) {
    let n = rows.len();
    if n == 0 {
        return;
    }
    let dim = rows[0].len();
    for d in 0..dim {
        // shifted by the first value so constant columns come out exactly zero
        let x0 = rows[0][d];
        let mean = x0 + rows.iter().map(|r| r[d] - x0).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var < CMVN_VAR_FLOOR { 1.0 } else { var.sqrt() };
        for r in rows.iter_mut() {
            r[d] = (r[d] - mean) / scale;
        }
    }
}

/// Full pipeline: static features, stacked deltas, then CMVN.
pub fn compute_mfcc(w: &Waveform, cfg: &MfccConfig, utterance_id: &str) -> Result<FeatureSequence> {
    let base = base_features(w, cfg)?;
    let mut stacked = base.clone();
    let mut prev = base;
    for _ in 0..cfg.deltas {
        let d = deltas(&prev, cfg.delta_window);
        for (row, extra) in stacked.iter_mut().zip(&d) {
            row.extend_from_slice(extra);
        }
        prev = d;
    }
    if cfg.cmvn {
        cmvn(&mut stacked);
    }
    FeatureSequence::from_rows(utterance_id, &stacked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::wave::SAMPLE_RATE;

    fn tone(freq: f64, secs: f64, amp: f64) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn output_dim_is_39() {
        assert_eq!(MfccConfig::default().output_dim(), 39);
    }

    #[test]
    fn one_second_gives_98_frames() {
        let fs = compute_mfcc(&tone(440.0, 1.0, 0.3), &MfccConfig::default(), "u").unwrap();
        assert_eq!(fs.n_frames(), 98);
        assert_eq!(fs.dim(), 39);
    }

    #[test]
    fn too_short_is_an_error() {
        let w = Waveform::new(vec![0.0; 399], SAMPLE_RATE).unwrap();
        assert!(compute_mfcc(&w, &MfccConfig::default(), "u").is_err());
    }

    #[test]
    fn silence_gives_zero_features() {
        let w = Waveform::new(vec![0.0; 8000], SAMPLE_RATE).unwrap();
        let fs = compute_mfcc(&w, &MfccConfig::default(), "u").unwrap();
        assert!(fs.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cmvn_columns_are_standardised() {
        let mut w = tone(300.0, 0.5, 0.2).samples().to_vec();
        for (i, v) in w.iter_mut().enumerate() {
            *v += 0.3 * (2.0 * PI * 2500.0 * i as f64 / 16000.0).sin() * (i as f64 / 8000.0);
        }
        let fs = compute_mfcc(&Waveform::new(w, SAMPLE_RATE).unwrap(), &MfccConfig::default(), "u").unwrap();
        let n = fs.n_frames() as f64;
        for d in 0..39 {
            let col: Vec<f64> = (0..fs.n_frames()).map(|t| fs.frame(t)[d]).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6, "col {d} mean {mean}");
            assert!(var < CMVN_VAR_FLOOR || (var - 1.0).abs() < 1e-6, "col {d} var {var}");
        }
    }

    #[test]
    fn cmvn_is_idempotent() {
        let mut rows: Vec<Vec<f64>> = (0..50)
            .map(|t| vec![t as f64 * 0.3, (t as f64).sin() * 5.0 + 2.0, 7.0])
            .collect();
        cmvn(&mut rows);
        let once = rows.clone();
        cmvn(&mut rows);
        for (a, b) in once.iter().flatten().zip(rows.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn deltas_of_constant_are_zero() {
        let rows = vec![vec![3.0, -1.0]; 9];
        assert!(deltas(&rows, 2).iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn deltas_of_ramp_are_slope_in_interior() {
        let rows: Vec<Vec<f64>> = (0..10).map(|t| vec![2.0 * t as f64]).collect();
        let d = deltas(&rows, 2);
        for row in &d[2..8] {
            assert!((row[0] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_bit_identical() {
        let w = tone(700.0, 0.3, 0.4);
        let a = compute_mfcc(&w, &MfccConfig::default(), "u").unwrap();
        let b = compute_mfcc(&w, &MfccConfig::default(), "u").unwrap();
        assert_eq!(a, b);
    }

    /// Direct O(N^2) DFT and independently built triangular weights.
    fn oracle_log_mel(frame: &[f64], n_filters: usize) -> Vec<f64> {
        let n_fft = 512;
        let win: Vec<f64> = (0..400).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / 399.0).cos()).collect();
        let power: Vec<f64> = (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, (x, w)) in frame.iter().zip(&win).enumerate() {
                    let ang = -2.0 * PI * (k * i) as f64 / n_fft as f64;
                    re += x * w * ang.cos();
                    im += x * w * ang.sin();
                }
                re * re + im * im
            })
            .collect();
        let top = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        (0..n_filters)
            .map(|m| {
                let l = top * m as f64 / (n_filters + 1) as f64;
                let c = top * (m + 1) as f64 / (n_filters + 1) as f64;
                let r = top * (m + 2) as f64 / (n_filters + 1) as f64;
                let e: f64 = power
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let mel = 2595.0 * (1.0 + k as f64 * 16000.0 / 512.0 / 700.0).log10();
                        let w = if mel > l && mel <= c {
                            (mel - l) / (c - l)
                        } else if mel > c && mel < r {
                            (r - mel) / (r - c)
                        } else {
                            0.0
                        };
                        w * p
                    })
                    .sum();
                e.max(1e-10).ln()
            })
            .collect()
    }

    #[test]
    fn one_khz_tone_peaks_in_bracketing_filter() {
        let w = tone(1000.0, 0.1, 0.5);
        let cfg = MfccConfig::default();
        let lm = log_mel_energies(&w, &cfg).unwrap();
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
                .0
        };
        let got = argmax(&lm[3]);

        let mut frame: Vec<f64> = w.samples()[3 * 160..3 * 160 + 400].to_vec();
        let raw = w.samples();
        for i in 0..400 {
            let src = 3 * 160 + i;
            frame[i] = raw[src] - 0.97 * raw[src - 1];
        }
        let oracle = oracle_log_mel(&frame, 40);
        assert_eq!(got, argmax(&oracle));
        for (a, b) in lm[3].iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6 * a.abs().max(1.0));
        }

        let bank = MelFilterbank::new(40, 512, SAMPLE_RATE);
        let c = bank.centers_hz();
        let nearest = (0..40)
            .min_by(|&a, &b| (c[a] - 1000.0).abs().total_cmp(&(c[b] - 1000.0).abs()))
            .unwrap();
        assert_eq!(got, nearest);
        assert!(c[got - 1] < 1000.0 && c[got + 1] > 1000.0);
    }
}
