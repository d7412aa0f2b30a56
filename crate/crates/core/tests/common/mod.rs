#![allow(dead_code)]

//! Reference implementations and fixtures shared by the integration tests.
//! The references recompute everything from scratch at every step and share
//! no code with the library beyond its matrix type.

use kvcoreset::{CacheSnapshot, LayerCache, Matrix, OrthMode, SelectorConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn layer(keys: Matrix, values: Matrix) -> LayerCache {
    let n = keys.rows();
    LayerCache::new(keys, values, vec![0; n], (0..n as u64).collect()).unwrap()
}

fn sqd(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sqn(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Joint-norm seed, strictly-greater comparison so ties stay at the lowest index.
pub fn naive_seed(keys: &Matrix, values: &Matrix) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..keys.rows() {
        let n = sqn(keys.row(i)) + sqn(values.row(i));
        if n > best.1 {
            best = (i, n);
        }
    }
    best.0
}

pub fn naive_dalpha(keys: &Matrix, values: &Matrix, i: usize, sel: &[usize], alpha: f64) -> f64 {
    sel.iter()
        .map(|&j| alpha * sqd(keys.row(i), keys.row(j)) + (1.0 - alpha) * sqd(values.row(i), values.row(j)))
        .fold(f64::INFINITY, f64::min)
}

fn argmax(cands: &[usize], score: impl Fn(usize) -> f64) -> usize {
    let mut best = (cands[0], f64::NEG_INFINITY);
    for &i in cands {
        let s = score(i);
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

fn unselected(n: usize, sel: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| !sel.contains(i)).collect()
}

/// Farthest-first trace starting from `seed`.
pub fn naive_d2_from(keys: &Matrix, values: &Matrix, alpha: f64, b: usize, seed: usize) -> Vec<usize> {
    let mut sel = vec![seed];
    while sel.len() < b {
        let cands = unselected(keys.rows(), &sel);
        let w = argmax(&cands, |i| naive_dalpha(keys, values, i, &sel, alpha));
        sel.push(w);
    }
    sel
}

pub fn naive_d2(keys: &Matrix, values: &Matrix, alpha: f64, b: usize) -> Vec<usize> {
    naive_d2_from(keys, values, alpha, b, naive_seed(keys, values))
}

fn cos2(x: &[f64], y: &[f64]) -> f64 {
    let (xx, yy) = (sqn(x), sqn(y));
    if xx == 0.0 || yy == 0.0 {
        return 0.0;
    }
    let d: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (d * d / (xx * yy)).min(1.0)
}

pub fn naive_maxcos(keys: &Matrix, values: &Matrix, i: usize, sel: &[usize], eta: f64) -> f64 {
    let mk = sel.iter().map(|&j| cos2(keys.row(i), keys.row(j))).fold(0.0, f64::max);
    let mv = sel.iter().map(|&j| cos2(values.row(i), values.row(j))).fold(0.0, f64::max);
    eta * sqn(keys.row(i)) * (1.0 - mk) + (1.0 - eta) * sqn(values.row(i)) * (1.0 - mv)
}

/// `‖x − U(UᵀU + εI)⁻¹Uᵀx‖²` with the rows of `m` at `sel` as columns of
/// `U`, evaluated through the identity `x − P^ε x = ε(UUᵀ + εI)⁻¹x`, which
/// avoids the cancellation of the direct form.
pub fn naive_residual_sq(m: &Matrix, sel: &[usize], x: &[f64], eps: f64) -> f64 {
    let d = m.cols();
    let u = DMatrix::from_fn(d, sel.len(), |r, c| m.row(sel[c])[r]);
    let a = &u * u.transpose() + DMatrix::identity(d, d) * eps;
    let r = a.cholesky().expect("UUᵀ + εI is positive definite").solve(&DVector::from_column_slice(x)) * eps;
    r.norm_squared()
}

pub fn naive_exact(keys: &Matrix, values: &Matrix, i: usize, sel: &[usize], eta: f64, eps: f64) -> f64 {
    eta * naive_residual_sq(keys, sel, keys.row(i), eps) + (1.0 - eta) * naive_residual_sq(values, sel, values.row(i), eps)
}

/// Full-recompute coverage-plus-novelty greedy.
pub fn naive_cords(keys: &Matrix, values: &Matrix, cfg: &SelectorConfig, b: usize) -> Vec<usize> {
    if cfg.lambda == 0.0 {
        return naive_d2(keys, values, cfg.alpha, b);
    }
    let mut sel = vec![naive_seed(keys, values)];
    while sel.len() < b {
        let cands = unselected(keys.rows(), &sel);
        let d: Vec<f64> = cands.iter().map(|&i| naive_dalpha(keys, values, i, &sel, cfg.alpha)).collect();
        let o: Vec<f64> = cands
            .iter()
            .map(|&i| match cfg.orth_mode {
                OrthMode::MaxCosine => naive_maxcos(keys, values, i, &sel, cfg.eta),
                OrthMode::ExactSpan => naive_exact(keys, values, i, &sel, cfg.eta, cfg.eps_logdet),
            })
            .collect();
        let norm = |s: &[f64]| {
            let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            s.iter().map(|x| (x - lo) / (hi - lo + cfg.eps0)).collect::<Vec<_>>()
        };
        let (nd, no) = (norm(&d), norm(&o));
        let pos: Vec<usize> = (0..cands.len()).collect();
        let w = argmax(&pos, |p| nd[p] + cfg.lambda * no[p]);
        sel.push(cands[w]);
    }
    sel
}

/// `log det(G + εI)` through an LU factorization.
pub fn lu_logdet(m: &Matrix, eps: f64) -> f64 {
    let t = m.rows();
    if t == 0 {
        return 0.0;
    }
    let u = DMatrix::from_fn(t, m.cols(), |r, c| m.row(r)[c]);
    let g = &u * u.transpose() + DMatrix::identity(t, t) * eps;
    g.lu().determinant().ln()
}

/// Multi-layer stream source with frames of `tokens_per_frame` tokens.
pub fn stream_source(spec_seed: u64, layers: usize, frames: usize, tokens_per_frame: usize, dim: usize) -> CacheSnapshot {
    kvcoreset::io::generate_synthetic(&kvcoreset::io::SyntheticSpec {
        clusters: 12,
        tokens_per_frame,
        frames,
        duplicate_rate: 0.1,
        noise_scale: 0.2,
        d_k: dim,
        d_v: dim,
        layers,
        rng_seed: spec_seed,
    })
    .unwrap()
}
