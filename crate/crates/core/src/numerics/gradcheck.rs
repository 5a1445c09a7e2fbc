use super::graph::{reverse_accumulate, Graph, NodeId};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Worst relative error found for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn coordinates_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `objective` against central differences
/// `(f(p + h) - f(p - h)) / 2h` for every scalar of every parameter.
///
/// `objective` records a forward pass on the given graph and returns the
/// scalar loss node.
pub fn finite_difference_check<F>(store: &ParamStore, step: f64, tolerance: f64, objective: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = objective(&mut g, s)?;
        g.value(loss).item()
    };

    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut analytic_store = store.clone();
    let mut g = Graph::new();
    let loss = objective(&mut g, store)?;
    let analytic = reverse_accumulate(&g, loss, &mut analytic_store)?;

    let mut work = store.clone();
    let mut report = GradCheckReport {
        params: Vec::new(),
        tolerance,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.get(&name)?.len();
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..n {
            let orig = store.get(&name)?.values()[k];
            work.get_mut(&name)?.values_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(&name)?.values_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(&name)?.values_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[&name][k];
            let err = relative_error(a, numeric);
            check.checked += 1;
            if err > check.max_rel_error || k == 0 {
                check.max_rel_error = err;
                check.worst_index = k;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;
    use std::cell::Cell;

    fn quadratic(g: &mut Graph, s: &ParamStore) -> Result<NodeId> {
        let w = g.param(s, "w")?;
        let sq = g.mul(w, w)?;
        let lin = g.scale(w, 3.0);
        let sum = g.add(sq, lin)?;
        Ok(g.sum_all(sum))
    }

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row(vec![0.3, -1.2, 2.5, 0.0])).unwrap();
        let r = finite_difference_check(&s, 1e-4, 1e-6, quadratic).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.coordinates_checked(), 4);
    }

    #[test]
    fn zero_step_is_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row(vec![1.0])).unwrap();
        assert!(finite_difference_check(&s, 0.0, 1e-6, quadratic).is_err());
    }

    #[test]
    fn nondeterministic_objective_is_detected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row(vec![1.0])).unwrap();
        let calls = Cell::new(0.0);
        let r = finite_difference_check(&s, 1e-4, 1e-6, |g, st| {
            calls.set(calls.get() + 1.0);
            let w = g.param(st, "w")?;
            let shifted = g.scale(w, calls.get());
            Ok(g.sum_all(shifted))
        });
        assert!(matches!(r, Err(Error::NonDeterministic { .. })));
    }
}
