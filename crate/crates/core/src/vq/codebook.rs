use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::argmin_distance;

/// `n x d` code vectors with EMA decay and per-code usage tallies.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    n: usize,
    d: usize,
    gamma: f64,
    codes: Vec<f64>,
    usage: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UsageStats {
    pub perplexity: f64,
    pub active_codes: usize,
    pub total: u64,
    /// Perplexity below 5% of the codebook size.
    pub collapsed: bool,
}

pub const COLLAPSE_FRACTION: f64 = 0.05;

impl Codebook {
    pub fn new(n: usize, d: usize, gamma: f64, codes: Vec<f64>) -> Result<Self> {
        if n < 2 || d == 0 || codes.len() != n * d {
            return Err(Error::shape("codebook", &[n, d], &[codes.len()]));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("decay {gamma} outside (0, 1)")));
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite code vector"));
        }
        Ok(Codebook {
            n,
            d,
            gamma,
            codes,
            usage: vec![0; n],
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], gamma: f64) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("ragged code rows"));
        }
        Self::new(rows.len(), d, gamma, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn codes(&self) -> &[f64] {
        &self.codes
    }

    pub fn code(&self, k: usize) -> &[f64] {
        &self.codes[k * self.d..(k + 1) * self.d]
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    /// Nearest code index without touching the usage counters.
    pub fn nearest(&self, x: &[f64]) -> Result<usize> {
        argmin_distance(x, &self.codes, self.d).map(|(k, _)| k)
    }

    /// Nearest code and its vector; counts the hit.
    pub fn quantize(&mut self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        let k = self.nearest(x)?;
        self.usage[k] += 1;
        Ok((k, self.code(k).to_vec()))
    }

    pub fn record_usage(&mut self, k: usize) {
        self.usage[k] += 1;
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    /// `e_k <- gamma e_k + (1 - gamma) mean(inputs)` for every key with at
    /// least one input. Other codes stay as they are.
    pub fn ema_update(&mut self, activations: &BTreeMap<usize, Vec<Vec<f64>>>) -> Result<()> {
        for (&k, xs) in activations {
            if k >= self.n {
                return Err(Error::invalid(format!("code {k} out of range for {} codes", self.n)));
            }
            if xs.is_empty() {
                continue;
            }
            if xs.iter().any(|x| x.len() != self.d) {
                return Err(Error::shape("ema_update", &[self.d], &[]));
            }
            let m = xs.len() as f64;
            let g = self.gamma;
            let d = self.d;
            for (j, e) in self.codes[k * d..(k + 1) * d].iter_mut().enumerate() {
                let mean = xs.iter().map(|x| x[j]).sum::<f64>() / m;
                *e = g * *e + (1.0 - g) * mean;
            }
        }
        Ok(())
    }

    pub fn usage_stats(&self) -> Result<UsageStats> {
        let total: u64 = self.usage.iter().sum();
        if total == 0 {
            return Err(Error::invalid("no codebook usage since last reset"));
        }
        let t = total as f64;
        let entropy: f64 = self
            .usage
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / t;
                -p * p.ln()
            })
            .sum();
        let perplexity = entropy.exp();
        Ok(UsageStats {
            perplexity,
            active_codes: self.usage.iter().filter(|&&c| c > 0).count(),
            total,
            collapsed: perplexity < COLLAPSE_FRACTION * self.n as f64,
        })
    }

    /// Text dump: `n d gamma`, then one line per code, then the usage line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.n, self.d, self.gamma);
        for k in 0..self.n {
            let row: Vec<String> = self.code(k).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        let usage: Vec<String> = self.usage.iter().map(|u| u.to_string()).collect();
        let _ = writeln!(s, "{}", usage.join(" "));
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let fail = |line: usize, msg: &str| Error::Parse {
            path: path.display().to_string(),
            line,
            msg: msg.to_string(),
        };
        let lines: Vec<&str> = text.lines().collect();
        let header: Vec<&str> = lines.first().ok_or_else(|| fail(1, "empty file"))?.split_whitespace().collect();
        if header.len() != 3 {
            return Err(fail(1, "expected `n d gamma`"));
        }
        let n: usize = header[0].parse().map_err(|_| fail(1, "bad n"))?;
        let d: usize = header[1].parse().map_err(|_| fail(1, "bad d"))?;
        let gamma: f64 = header[2].parse().map_err(|_| fail(1, "bad gamma"))?;
        if lines.len() != n + 2 {
            return Err(fail(lines.len(), "wrong number of lines"));
        }
        let mut codes = Vec::with_capacity(n * d);
        for (i, line) in lines[1..=n].iter().enumerate() {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| fail(i + 2, "bad code value"))?;
            if row.len() != d {
                return Err(fail(i + 2, "wrong code width"));
            }
            codes.extend(row);
        }
        let usage: Vec<u64> = lines[n + 1]
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| fail(n + 2, "bad usage count"))?;
        if usage.len() != n {
            return Err(fail(n + 2, "wrong usage width"));
        }
        let mut cb = Codebook::new(n, d, gamma, codes)?;
        cb.usage = usage;
        Ok(cb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        Self::from_text(&text, path)
    }
}

/// Mean over inputs and dimensions of `(x - e_k(x))^2`.
pub fn vq_loss(inputs: &[Vec<f64>], cb: &Codebook) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::invalid("vq loss over an empty batch"));
    }
    let mut s = 0.0;
    for x in inputs {
        let (_, dist) = argmin_distance(x, cb.codes(), cb.d())?;
        s += dist;
    }
    Ok(s / (inputs.len() * cb.d()) as f64)
}
