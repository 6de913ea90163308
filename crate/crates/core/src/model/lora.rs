//! Low-rank additive weight updates, `W̃ = W + B·A`, with no extra scaling.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{OvtError, Result};
use crate::linalg::Matrix;
use crate::seeding::Rng;

/// Standard deviation of the initial `A` entries.
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `r × n`.
    pub a: Matrix,
    /// `m × r`.
    pub b: Matrix,
    /// Name of the wrapped base weight, e.g. `visual.w`.
    pub target: String,
}

impl LoraAdapter {
    /// Adapter for an `m × n` base weight. `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn new(target: &str, m: usize, n: usize, rank: usize, rng: &mut Rng) -> Result<Self> {
        check_rank(rank, m, n)?;
        let normal = Normal::new(0.0, LORA_INIT_STD).expect("valid std");
        let a = Matrix::from_fn(rank, n, |_, _| normal.sample(rng));
        Ok(Self {
            a,
            b: Matrix::zeros(m, rank),
            target: target.to_string(),
        })
    }

    pub fn from_parts(target: &str, a: Matrix, b: Matrix) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(OvtError::dims(
                "LoraAdapter",
                format!("A {}", a.shape_str()),
                format!("B {}", b.shape_str()),
            ));
        }
        check_rank(a.rows(), b.rows(), a.cols())?;
        Ok(Self {
            a,
            b,
            target: target.to_string(),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn delta(&self) -> Result<Matrix> {
        self.b.matmul(&self.a)
    }

    pub fn num_params(&self) -> usize {
        self.a.data().len() + self.b.data().len()
    }

    /// Maps `∂L/∂W̃` onto `(∂L/∂A, ∂L/∂B)`.
    pub fn backward(&self, grad_weight: &Matrix) -> Result<(Matrix, Matrix)> {
        let grad_a = self.b.transpose().matmul(grad_weight)?;
        let grad_b = grad_weight.matmul(&self.a.transpose())?;
        Ok((grad_a, grad_b))
    }
}

fn check_rank(rank: usize, m: usize, n: usize) -> Result<()> {
    if rank == 0 || rank >= m.min(n) {
        return Err(OvtError::Config(format!(
            "LoRA rank {rank} must satisfy 1 <= r < min({m}, {n})"
        )));
    }
    Ok(())
}

/// `base + B·A`.
pub fn lora_effective_weight(base: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    if base.rows() != adapter.b.rows() || base.cols() != adapter.a.cols() {
        return Err(OvtError::dims(
            "lora_effective_weight",
            format!("base {}", base.shape_str()),
            format!("B {} / A {}", adapter.b.shape_str(), adapter.a.shape_str()),
        ));
    }
    base.add(&adapter.delta()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::finite_difference_check;
    use crate::seeding;
    use rand::Rng as _;

    #[test]
    fn zero_b_leaves_base_untouched() {
        let mut rng = seeding::stream(1, "t");
        let base = Matrix::from_fn(5, 6, |_, _| rng.random_range(-1.0..1.0));
        let ad = LoraAdapter::new("w", 5, 6, 2, &mut rng).unwrap();
        let eff = lora_effective_weight(&base, &ad).unwrap();
        for (a, b) in eff.data().iter().zip(base.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn hand_case() {
        // I₂ + [[2],[0]]·[[1,1]] = [[3,2],[0,1]]; rank 1 on a 2x2 is the largest allowed.
        let ad = LoraAdapter {
            a: Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            b: Matrix::from_rows(&[vec![2.0], vec![0.0]]).unwrap(),
            target: "w".into(),
        };
        let eff = lora_effective_weight(&Matrix::identity(2), &ad).unwrap();
        assert_eq!(eff, Matrix::from_rows(&[vec![3.0, 2.0], vec![0.0, 1.0]]).unwrap());
    }

    #[test]
    fn rank_bounds_enforced() {
        let mut rng = seeding::stream(1, "t");
        assert!(LoraAdapter::new("w", 4, 8, 4, &mut rng).is_err());
        assert!(LoraAdapter::new("w", 4, 8, 0, &mut rng).is_err());
        assert!(LoraAdapter::new("w", 4, 8, 3, &mut rng).is_ok());
        assert!(LoraAdapter::from_parts("w", Matrix::zeros(2, 2), Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = seeding::stream(1, "t");
        let ad = LoraAdapter::new("w", 4, 6, 2, &mut rng).unwrap();
        assert!(lora_effective_weight(&Matrix::zeros(4, 5), &ad).is_err());
    }

    #[test]
    fn backward_matches_differences() {
        // L = Σ G ⊙ (W + BA) for a fixed G; ∂L/∂W̃ = G.
        let mut rng = seeding::stream(2, "t");
        let g = Matrix::from_fn(4, 5, |_, _| rng.random_range(-1.0..1.0));
        let a = Matrix::from_fn(2, 5, |_, _| rng.random_range(-1.0..1.0));
        let b = Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let ad = LoraAdapter::from_parts("w", a, b).unwrap();
        let (ga, gb) = ad.backward(&g).unwrap();
        let mut params = ad.a.data().to_vec();
        params.extend_from_slice(ad.b.data());
        let mut analytic = ga.data().to_vec();
        analytic.extend_from_slice(gb.data());
        let report = finite_difference_check(
            |p| {
                let a = Matrix::from_vec(2, 5, p[..10].to_vec())?;
                let b = Matrix::from_vec(4, 2, p[10..].to_vec())?;
                let d = b.matmul(&a)?;
                Ok(d.data().iter().zip(g.data()).map(|(x, y)| x * y).sum())
            },
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(1e-7), "{}", report.max_relative_error);
    }
}
