//! Log-determinant coverage of selected keys, `F(S) = log det(UᵀU + εI)`.

use super::span::SpanState;
use crate::error::{Error, Result};
use crate::kvcore::{dot, sq_norm, Matrix};

fn check(rows: &Matrix, eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Domain(format!("regularizer {eps} must be positive")));
    }
    if !rows.all_finite() {
        return Err(Error::Validation("non-finite key entries".into()));
    }
    Ok(())
}

/// `F(S)` for the keys stored one per row; `F(∅) = 0`.
pub fn logdet_coverage(selected_keys: &Matrix, eps: f64) -> Result<f64> {
    check(selected_keys, eps)?;
    Ok(SpanState::from_rows(selected_keys, eps)?.logdet())
}

/// `F(S ∪ {k}) − F(S)` as a difference of two factorizations.
pub fn logdet_marginal_gain(selected_keys: &Matrix, candidate: &[f64], eps: f64) -> Result<f64> {
    if candidate.len() != selected_keys.cols() {
        return Err(Error::Shape(format!(
            "candidate of length {} against keys of dimension {}",
            candidate.len(),
            selected_keys.cols()
        )));
    }
    let mut grown = selected_keys.clone();
    grown.push_row(candidate)?;
    Ok(logdet_coverage(&grown, eps)? - logdet_coverage(selected_keys, eps)?)
}

/// `log(ε + kᵀ(I − P^ε)k)` with the projector applied explicitly.
pub fn logdet_gain_closed_form(selected_keys: &Matrix, candidate: &[f64], eps: f64) -> Result<f64> {
    check(selected_keys, eps)?;
    let span = SpanState::from_rows(selected_keys, eps)?;
    let projected = span.project(candidate)?;
    let quad = sq_norm(candidate) - dot(candidate, &projected);
    Ok((eps + quad).ln())
}

/// Pure orthogonal greedy: repeatedly take the key with the largest
/// regularized residual `kᵀ(I − P^ε)k`, i.e. the largest log-det gain.
///
/// Per-candidate whitened projections are extended by one coordinate per
/// step, so a step costs `O(N·(d + t))`.
pub fn greedy_residual_select(keys: &Matrix, budget: usize, eps: f64) -> Result<Vec<usize>> {
    check(keys, eps)?;
    let n = keys.rows();
    if budget == 0 || budget > n {
        return Err(Error::Budget { budget, pool: n });
    }
    let mut residual: Vec<f64> = keys.iter_rows().map(sq_norm).collect();
    let mut whitened: Vec<Vec<f64>> = vec![Vec::with_capacity(budget); n];
    let mut taken = vec![false; n];
    let mut span = SpanState::new(keys.cols(), eps);
    let mut selected = Vec::with_capacity(budget);

    for _ in 0..budget {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| residual[i] > residual[b]) {
                best = Some(i);
            }
        }
        let w = best.expect("budget <= pool size leaves a candidate");
        let x = keys.row(w);
        let mut l_new = whitened[w].clone();
        let s = span.push(x)?;
        let diag = s.sqrt();
        l_new.push(diag);
        taken[w] = true;
        selected.push(w);

        for i in 0..n {
            if taken[i] {
                continue;
            }
            let mut z = dot(x, keys.row(i));
            for (lm, zm) in l_new.iter().zip(&whitened[i]) {
                z -= lm * zm;
            }
            z /= diag;
            whitened[i].push(z);
            residual[i] = (residual[i] - z * z).max(0.0);
        }
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_set_has_zero_coverage() {
        assert_eq!(logdet_coverage(&Matrix::empty(4), 1e-6).unwrap(), 0.0);
    }

    #[test]
    fn single_key_coverage() {
        let m = Matrix::from_rows(2, &[[2.0, 0.0]]).unwrap();
        let f = logdet_coverage(&m, 1e-6).unwrap();
        assert!((f - (4.0f64 + 1e-6).ln()).abs() < 1e-12);
    }

    #[test]
    fn first_gain_is_log_eps_plus_norm() {
        let g = logdet_marginal_gain(&Matrix::empty(3), &[1.0, 2.0, 2.0], 1e-3).unwrap();
        assert!((g - (1e-3f64 + 9.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn in_span_gain_approaches_log_eps() {
        let eps = 1e-8;
        let s = Matrix::from_rows(2, &[[1.0, 0.0]]).unwrap();
        let g = logdet_marginal_gain(&s, &[3.0, 0.0], eps).unwrap();
        // ε + 9ε/(1+ε) ≈ 10ε
        assert!((g - (10.0 * eps).ln()).abs() < 1e-5);
        assert!(g < -15.0);
    }

    #[test]
    fn near_duplicate_is_skipped() {
        let pool = Matrix::from_rows(2, &[[1.0, 0.0], [0.999, 0.01], [0.0, 1.0]]).unwrap();
        assert_eq!(greedy_residual_select(&pool, 2, 1e-6).unwrap(), vec![0, 2]);
    }

    #[test]
    fn orthonormal_pool_gains_are_uniform() {
        let eps = 1e-6;
        let d = 4;
        let mut pool = Matrix::zeros(d, d);
        for i in 0..d {
            pool.row_mut(i)[i] = 1.0;
        }
        let sel = greedy_residual_select(&pool, d, eps).unwrap();
        assert_eq!(sel, vec![0, 1, 2, 3]);
        let mut prefix = Matrix::empty(d);
        for &i in &sel {
            let g = logdet_marginal_gain(&prefix, pool.row(i), eps).unwrap();
            assert!((g - (1.0 + eps).ln()).abs() < 1e-12);
            prefix.push_row(pool.row(i)).unwrap();
        }
    }

    #[test]
    fn errors() {
        let m = Matrix::from_rows(2, &[[1.0, 0.0]]).unwrap();
        assert!(logdet_coverage(&m, 0.0).is_err());
        assert!(logdet_marginal_gain(&m, &[1.0], 1e-6).is_err());
        assert!(greedy_residual_select(&m, 2, 1e-6).is_err());
        let bad = Matrix::from_vec(1, 2, vec![f64::INFINITY, 0.0]).unwrap();
        assert!(logdet_coverage(&bad, 1e-6).is_err());
    }
}
