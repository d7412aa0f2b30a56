//! Reference selectors for comparisons under identical budgets.
//!
//! Every selector returns exactly `b` distinct in-range indices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcore::{sq_dist, sq_norm, Matrix};
use crate::selector::{d2_select, CandidatePool};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    UniformStride,
    Random,
    ValueNormTopK,
    KMeansRepresentative,
    /// Interpretation: joint-norm shortlist of `m·b` candidates, then D².
    GreedyShortlist,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub shortlist_multiplier: usize,
    pub kmeans_max_iters: usize,
    /// Stop when the relative inertia change falls below this.
    pub kmeans_tol: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            shortlist_multiplier: 4,
            kmeans_max_iters: 25,
            kmeans_tol: 1e-4,
        }
    }
}

fn check_budget(n: usize, b: usize) -> Result<()> {
    if b == 0 || b > n {
        return Err(Error::Budget { budget: b, pool: n });
    }
    Ok(())
}

/// `⌊j·N/b⌋` for `j = 0..b`.
pub fn uniform_select(n: usize, b: usize) -> Result<Vec<usize>> {
    check_budget(n, b)?;
    let mut out: Vec<usize> = (0..b).map(|j| j * n / b).collect();
    out.dedup();
    // Stride >= 1 whenever b <= N, so this only runs on pathological input.
    let mut tail = n;
    while out.len() < b {
        tail -= 1;
        if !out.contains(&tail) {
            out.push(tail);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// `b` distinct indices drawn without replacement, ascending.
pub fn random_select(n: usize, b: usize, seed: u64) -> Result<Vec<usize>> {
    check_budget(n, b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = rand::seq::index::sample(&mut rng, n, b).into_vec();
    out.sort_unstable();
    Ok(out)
}

/// Rows ranked by `score` descending, ties by lowest index.
fn top_by(n: usize, k: usize, score: impl Fn(usize) -> f64) -> Vec<usize> {
    let scores: Vec<f64> = (0..n).map(score).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// The `b` largest `‖v_i‖²`, ascending by index.
pub fn value_norm_topk(values: &Matrix, b: usize) -> Result<Vec<usize>> {
    check_budget(values.rows(), b)?;
    let mut out = top_by(values.rows(), b, |i| sq_norm(values.row(i)));
    out.sort_unstable();
    Ok(out)
}

/// Norm shortlist of `min(m·b, N)` candidates followed by D² inside it.
/// Returned in D² insertion order.
pub fn greedy_shortlist(keys: &Matrix, values: &Matrix, b: usize, multiplier: usize, alpha: f64) -> Result<Vec<usize>> {
    check_budget(keys.rows(), b)?;
    if multiplier == 0 {
        return Err(Error::Config("shortlist multiplier must be >= 1".into()));
    }
    let n = keys.rows();
    let size = multiplier.saturating_mul(b).min(n);
    let mut shortlist = top_by(n, size, |i| sq_norm(keys.row(i)) + sq_norm(values.row(i)));
    shortlist.sort_unstable();
    let sk = keys.select_rows(&shortlist)?;
    let sv = values.select_rows(&shortlist)?;
    let mut pool = CandidatePool::new(&sk, &sv, alpha)?;
    let res = d2_select(&mut pool, b)?;
    Ok(res.selected.into_iter().map(|i| shortlist[i]).collect())
}

/// Result of a Lloyd run.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Matrix,
    pub assignment: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd iterations from the given initial centroids. Empty clusters keep
/// their previous centroid.
pub fn kmeans_lloyd(points: &Matrix, init: Matrix, max_iters: usize, tol: f64) -> Result<KMeansFit> {
    if init.cols() != points.cols() || init.rows() == 0 {
        return Err(Error::Shape("initial centroids do not match the points".into()));
    }
    let k = init.rows();
    let mut centroids = init;
    let mut assignment = vec![0; points.rows()];
    let mut inertia = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut total = 0.0;
        for (i, p) in points.iter_rows().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignment[i] = c;
            total += d;
        }
        let converged = inertia
            .last()
            .is_some_and(|&prev: &f64| (prev - total).abs() <= tol * prev.abs().max(f64::MIN_POSITIVE));
        inertia.push(total);
        if converged {
            break;
        }
        let mut sums = Matrix::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter_rows().enumerate() {
            counts[assignment[i]] += 1;
            for (s, x) in sums.row_mut(assignment[i]).iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                let (src, dst) = (sums.row(c).to_vec(), centroids.row_mut(c));
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s / n;
                }
            }
        }
    }
    Ok(KMeansFit {
        centroids,
        assignment,
        inertia,
    })
}

/// Joint-feature k-means with `k = b`, seeded by the D² trace; returns the
/// pool element nearest to each centroid, ascending.
pub fn kmeans_representative(keys: &Matrix, values: &Matrix, b: usize, config: &BaselineConfig) -> Result<Vec<usize>> {
    let n = keys.rows();
    check_budget(n, b)?;
    let mut joint = Matrix::empty(keys.cols() + values.cols());
    for i in 0..n {
        let mut row = keys.row(i).to_vec();
        row.extend_from_slice(values.row(i));
        joint.push_row(&row)?;
    }
    // α = 1/2 makes d_α half the joint squared distance: same argmax.
    let mut pool = CandidatePool::new(keys, values, 0.5)?;
    let seeds = d2_select(&mut pool, b)?.selected;
    let fit = kmeans_lloyd(&joint, joint.select_rows(&seeds)?, config.kmeans_max_iters, config.kmeans_tol)?;

    let mut used = vec![false; n];
    let mut out = Vec::with_capacity(b);
    for c in fit.centroids.iter_rows() {
        let mut order: Vec<(f64, usize)> = joint.iter_rows().map(|p| sq_dist(p, c)).zip(0..).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let pick = order
            .into_iter()
            .map(|(_, i)| i)
            .find(|&i| !used[i])
            .expect("b <= N leaves an unused point");
        used[pick] = true;
        out.push(pick);
    }
    out.sort_unstable();
    Ok(out)
}
