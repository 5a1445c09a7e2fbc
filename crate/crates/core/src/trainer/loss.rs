use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{dot, hinge_rank_value};

/// Bidirectional batch hinge loss on unit-norm embeddings.
///
/// Caption `i` matches image `i`. For every ordered pair `(i, j)` with
/// `i != j` both `max(0, cos(c_i, v_j) - cos(c_i, v_i) + margin)` and
/// `max(0, cos(c_j, v_i) - cos(c_i, v_i) + margin)` are added.
pub fn batch_hinge_loss(captions: &[Vec<f64>], images: &[Vec<f64>], margin: f64) -> Result<f64> {
    let b = captions.len();
    if b != images.len() {
        return Err(Error::shape("batch_hinge_loss", &[b], &[images.len()]));
    }
    if b < 2 {
        return Err(Error::invalid("hinge loss needs a batch of at least 2"));
    }
    let mut sim = Vec::with_capacity(b * b);
    for c in captions {
        for v in images {
            sim.push(dot(c, v));
        }
    }
    Ok(hinge_rank_value(&sim, b, margin))
}

/// Cosine-smoothed cyclic schedule: `lr_min` at the start of each cycle,
/// `lr_max` half way through.
pub fn cyclic_lr(step: usize, cycle_len: usize, lr_min: f64, lr_max: f64) -> Result<f64> {
    if cycle_len < 2 {
        return Err(Error::invalid(format!("cycle length {cycle_len} < 2")));
    }
    let pos = (step % cycle_len) as f64 / cycle_len as f64;
    Ok(lr_min + (lr_max - lr_min) * (1.0 - (2.0 * PI * pos).cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn satisfied_margins_give_zero() {
        let c = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert_eq!(batch_hinge_loss(&c, &c, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn identical_pair_of_two_gives_four_margins() {
        let e = vec![vec![0.6, 0.8]; 2];
        assert!((batch_hinge_loss(&e, &e, 0.2).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn singleton_batch_rejected() {
        assert!(batch_hinge_loss(&[vec![1.0]], &[vec![1.0]], 0.2).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cyclic_lr(0, 100, 1e-6, 2e-4).unwrap(), 1e-6);
        assert!((cyclic_lr(50, 100, 1e-6, 2e-4).unwrap() - 2e-4).abs() < 1e-18);
        assert_eq!(cyclic_lr(100, 100, 1e-6, 2e-4).unwrap(), 1e-6);
        assert!(cyclic_lr(0, 1, 1e-6, 2e-4).is_err());
    }

    #[test]
    fn schedule_rises_then_falls() {
        let lrs: Vec<f64> = (0..=40).map(|s| cyclic_lr(s, 40, 1e-6, 2e-4).unwrap()).collect();
        assert!(lrs[..=20].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[20..].windows(2).all(|w| w[0] >= w[1]));
    }

    proptest! {
        #[test]
        fn periodic(step in 0usize..10_000, len in 2usize..500) {
            prop_assert_eq!(cyclic_lr(step, len, 1e-6, 2e-4).unwrap(), cyclic_lr(step + len, len, 1e-6, 2e-4).unwrap());
        }
    }
}
