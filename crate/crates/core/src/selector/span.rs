//! Regularized projection onto the span of selected vectors.
//!
//! The factor kept here is the lower Cholesky factor `L` of `UᵀU + εI`,
//! grown by one row per insertion. The new diagonal entry squared is the
//! regularized Schur complement `ε + xᵀ(I − P^ε)x`, which is also the
//! log-det marginal gain of `x` after taking its logarithm.

use crate::error::{Error, Result};
use crate::kvcore::{dot, sq_norm, Matrix};

#[derive(Debug, Clone)]
pub struct SpanState {
    eps: f64,
    /// Selected vectors, one per row.
    basis: Matrix,
    /// Packed lower-triangular factor; row `i` holds `i + 1` entries.
    chol: Vec<f64>,
}

impl SpanState {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self {
            eps,
            basis: Matrix::empty(dim),
            chol: Vec::new(),
        }
    }

    /// Rebuilds the factorization from `rows` with a dense Cholesky.
    pub fn from_rows(rows: &Matrix, eps: f64) -> Result<Self> {
        let t = rows.rows();
        let mut gram = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..=i {
                let g = dot(rows.row(i), rows.row(j));
                gram[i * t + j] = g;
                gram[j * t + i] = g;
            }
            gram[i * t + i] += eps;
        }
        let mut chol = Vec::with_capacity(t * (t + 1) / 2);
        for i in 0..t {
            let row_start = chol.len();
            for j in 0..=i {
                let mut s = gram[i * t + j];
                let rj = j * (j + 1) / 2;
                for m in 0..j {
                    s -= chol[row_start + m] * chol[rj + m];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::Invariant(format!(
                            "regularized Gram matrix not positive definite at pivot {i}"
                        )));
                    }
                    chol.push(s.sqrt());
                } else {
                    chol.push(s / chol[rj + j]);
                }
            }
        }
        Ok(Self {
            eps,
            basis: rows.clone(),
            chol,
        })
    }

    pub fn len(&self) -> usize {
        self.basis.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    #[inline]
    fn l_row(&self, i: usize) -> &[f64] {
        let s = i * (i + 1) / 2;
        &self.chol[s..s + i + 1]
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "vector of length {} against span of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `L⁻¹ Uᵀ x`.
    fn whitened(&self, x: &[f64]) -> Vec<f64> {
        let t = self.len();
        let mut z = Vec::with_capacity(t);
        for i in 0..t {
            let row = self.l_row(i);
            let mut s = dot(self.basis.row(i), x);
            for m in 0..i {
                s -= row[m] * z[m];
            }
            z.push(s / row[i]);
        }
        z
    }

    /// `(UᵀU + εI)⁻¹ Uᵀ x`.
    pub fn coefficients(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut c = self.whitened(x);
        let t = self.len();
        for i in (0..t).rev() {
            let mut s = c[i];
            for m in i + 1..t {
                s -= self.l_row(m)[i] * c[m];
            }
            c[i] = s / self.l_row(i)[i];
        }
        Ok(c)
    }

    /// `P^ε x = U (UᵀU + εI)⁻¹ Uᵀ x`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let c = self.coefficients(x)?;
        let mut p = vec![0.0; self.dim()];
        for (j, cj) in c.iter().enumerate() {
            for (pi, u) in p.iter_mut().zip(self.basis.row(j)) {
                *pi += cj * u;
            }
        }
        Ok(p)
    }

    /// `ε + xᵀ(I − P^ε)x`, never below `ε`.
    pub fn schur_complement(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let z = self.whitened(x);
        Ok((self.eps + sq_norm(x) - sq_norm(&z)).max(self.eps))
    }

    /// Appends `x` and returns its regularized Schur complement.
    pub fn push(&mut self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut z = self.whitened(x);
        let s = (self.eps + sq_norm(x) - sq_norm(&z)).max(self.eps);
        z.push(s.sqrt());
        self.chol.extend_from_slice(&z);
        self.basis.push_row(x)?;
        Ok(s)
    }

    /// `log det(UᵀU + εI)`; zero for the empty span.
    pub fn logdet(&self) -> f64 {
        (0..self.len()).map(|i| 2.0 * self.l_row(i)[i].ln()).sum()
    }
}

/// `(I − P^ε)x` for the span's regularized projector.
pub fn exact_residual(span: &SpanState, x: &[f64]) -> Result<Vec<f64>> {
    let p = span.project(x)?;
    Ok(x.iter().zip(&p).map(|(a, b)| a - b).collect())
}

/// `η‖r_K‖² + (1 − η)‖r_V‖²` with exact residuals.
pub fn orth_score_exact(
    span_keys: &SpanState,
    span_values: &SpanState,
    key: &[f64],
    value: &[f64],
    eta: f64,
) -> Result<f64> {
    let rk = sq_norm(&exact_residual(span_keys, key)?);
    let rv = sq_norm(&exact_residual(span_values, value)?);
    Ok(eta * rk + (1.0 - eta) * rv)
}
