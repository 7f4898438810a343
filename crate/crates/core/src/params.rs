//! Trainable tensors: relevance projections, merge map and scoring head.

use std::ops::{Deref, DerefMut};

use crate::error::{MhstError, Result};
use crate::linalg::Matrix;
use crate::rng::DeterministicRng;

/// Field names in storage order.
pub const PARAM_NAMES: [&str; 6] = ["W1", "W2", "W3", "b", "w_s", "b_s"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Projects node features for linguistic relevance.
    pub w1: Matrix,
    /// Projects the query for linguistic relevance.
    pub w2: Matrix,
    /// Shared merge map applied to both children.
    pub w3: Matrix,
    pub b: Vec<f64>,
    pub w_s: Vec<f64>,
    pub b_s: f64,
}

impl ModelParams {
    pub fn zeros(d: usize) -> Self {
        ModelParams {
            w1: Matrix::zeros(d, d),
            w2: Matrix::zeros(d, d),
            w3: Matrix::zeros(d, d),
            b: vec![0.0; d],
            w_s: vec![0.0; d],
            b_s: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Checks shapes against `d` and that every entry is finite.
    pub fn validate(&self, d: usize) -> Result<()> {
        for m in [&self.w1, &self.w2, &self.w3] {
            if m.rows() != d || m.cols() != d {
                return Err(MhstError::Shape {
                    expected: d,
                    actual: if m.rows() != d { m.rows() } else { m.cols() },
                });
            }
        }
        for v in [&self.b, &self.w_s] {
            if v.len() != d {
                return Err(MhstError::Shape {
                    expected: d,
                    actual: v.len(),
                });
            }
        }
        if self.tensors().iter().any(|(_, t)| t.iter().any(|x| !x.is_finite())) {
            return Err(MhstError::InvalidInput("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    /// Every tensor as a flat slice, in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("W1", self.w1.as_slice()),
            ("W2", self.w2.as_slice()),
            ("W3", self.w3.as_slice()),
            ("b", &self.b),
            ("w_s", &self.w_s),
            ("b_s", std::slice::from_ref(&self.b_s)),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 6] {
        [
            ("W1", self.w1.as_mut_slice()),
            ("W2", self.w2.as_mut_slice()),
            ("W3", self.w3.as_mut_slice()),
            ("b", &mut self.b),
            ("w_s", &mut self.w_s),
            ("b_s", std::slice::from_mut(&mut self.b_s)),
        ]
    }

    pub fn num_entries(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `θ ← θ − rate · g`
    pub fn descend(&mut self, rate: f64, grads: &GradientSet) {
        for ((_, p), (_, g)) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            for (x, gx) in p.iter_mut().zip(g) {
                *x -= rate * gx;
            }
        }
    }
}

/// `W1`, `W2`, `W3` and `w_s` uniform in `[-1/√d, 1/√d]`; `b` and `b_s` zero.
pub fn init_params(d: usize, rng: &mut DeterministicRng) -> Result<ModelParams> {
    if d == 0 {
        return Err(MhstError::InvalidDimension("d must be at least 1".into()));
    }
    let bound = 1.0 / (d as f64).sqrt();
    let mut draw = |_, _| rng.uniform(-bound, bound);
    let w1 = Matrix::from_fn(d, d, &mut draw);
    let w2 = Matrix::from_fn(d, d, &mut draw);
    let w3 = Matrix::from_fn(d, d, &mut draw);
    let w_s = (0..d).map(|i| draw(0, i)).collect();
    Ok(ModelParams {
        w1,
        w2,
        w3,
        b: vec![0.0; d],
        w_s,
        b_s: 0.0,
    })
}

/// Gradient of a scalar loss with respect to every [`ModelParams`] entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub ModelParams);

impl GradientSet {
    pub fn zeros(d: usize) -> Self {
        GradientSet(ModelParams::zeros(d))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for ((_, a), (_, b)) in self.0.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

impl Deref for GradientSet {
    type Target = ModelParams;

    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl DerefMut for GradientSet {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::new_rng;

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(
            init_params(0, &mut new_rng(0)),
            Err(MhstError::InvalidDimension(_))
        ));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(4, &mut new_rng(7)).unwrap();
        let b = init_params(4, &mut new_rng(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_respects_ranges() {
        let p = init_params(4, &mut new_rng(7)).unwrap();
        for (name, t) in p.tensors() {
            assert!(t.iter().all(|x| x.abs() <= 0.5), "{name}");
        }
        assert!(p.b.iter().all(|&x| x == 0.0));
        assert_eq!(p.b_s, 0.0);
        assert!(p.w_s.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn init_entries_pass_uniformity_ks_test() {
        // Pool 10k draws from repeated d=16 initializations and compare the
        // empirical CDF against U[-1/4, 1/4].
        let mut rng = new_rng(3);
        let mut draws = Vec::new();
        while draws.len() < 10_000 {
            let p = init_params(16, &mut rng).unwrap();
            draws.extend_from_slice(p.w1.as_slice());
        }
        draws.truncate(10_000);
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        let mut d_stat: f64 = 0.0;
        for (i, &x) in draws.iter().enumerate() {
            let cdf = ((x + 0.25) / 0.5).clamp(0.0, 1.0);
            d_stat = d_stat.max((cdf - i as f64 / n).abs()).max(((i + 1) as f64 / n - cdf).abs());
        }
        // Asymptotic Kolmogorov critical value for p = 0.01.
        assert!(d_stat < 1.628 / n.sqrt(), "KS statistic {d_stat}");
    }

    #[test]
    fn validate_catches_shape_and_nan() {
        let mut p = ModelParams::zeros(3);
        assert!(p.validate(3).is_ok());
        assert!(p.validate(4).is_err());
        p.b_s = f64::NAN;
        assert!(p.validate(3).is_err());
    }
}
