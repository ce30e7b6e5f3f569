//! Small dense linear algebra: Cholesky factorization and triangular solves.
//!
//! Matrices are square, row-major `Vec<f64>`. Dimensions here are the feature
//! width of the backbone (tens of channels), so no blocking is attempted.

use crate::error::{Error, Result};

/// Pivots below `PIVOT_RTOL * max(diag)` are treated as zero. Rounding in a
/// rank-deficient sample covariance leaves pivots around `1e-16 * scale`, so
/// this separates "singular" from "badly conditioned but usable".
const PIVOT_RTOL: f64 = 1e-12;

/// Lower-triangular factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factorizes a symmetric positive definite matrix. Only the lower
    /// triangle of `a` is read.
    pub fn factor(a: &[f64], dim: usize) -> Result<Self> {
        if a.len() != dim * dim {
            return Err(Error::Input(format!(
                "expected a {dim}x{dim} matrix, got {} entries",
                a.len()
            )));
        }
        let scale = (0..dim).map(|i| a[i * dim + i].abs()).fold(0.0, f64::max);
        let floor = PIVOT_RTOL * scale;
        let mut l = vec![0.0; dim * dim];
        for j in 0..dim {
            let mut d = a[j * dim + j];
            for k in 0..j {
                d -= l[j * dim + k] * l[j * dim + k];
            }
            if !d.is_finite() || d <= floor || d <= 0.0 {
                return Err(Error::Numeric(format!(
                    "matrix is not positive definite (pivot {j} = {d:e})"
                )));
            }
            let djj = d.sqrt();
            l[j * dim + j] = djj;
            for i in j + 1..dim {
                let mut s = a[i * dim + j];
                for k in 0..j {
                    s -= l[i * dim + k] * l[j * dim + k];
                }
                l[i * dim + j] = s / djj;
            }
        }
        Ok(Self { dim, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// Solves `L z = b` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut z = b.to_vec();
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let s: f64 = row.iter().zip(&z[..i]).map(|(l, z)| l * z).sum();
            z[i] = (z[i] - s) / self.lower[i * n + i];
        }
        z
    }

    /// Solves `Lᵀ x = z` by back substitution.
    pub fn solve_upper(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut x = z.to_vec();
        for i in (0..n).rev() {
            let mut s = 0.0;
            for k in i + 1..n {
                s += self.lower[k * n + i] * x[k];
            }
            x[i] = (x[i] - s) / self.lower[i * n + i];
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `bᵀ A⁻¹ b`, computed as `‖L⁻¹ b‖²`.
    pub fn inverse_quadratic_form(&self, b: &[f64]) -> f64 {
        self.solve_lower(b).iter().map(|z| z * z).sum()
    }
}
