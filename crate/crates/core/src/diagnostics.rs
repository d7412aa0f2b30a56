//! Measurements on a compressed cache.
//!
//! - attention output of the full cache against the cluster-weighted
//!   compressed attention, with the value-space and `d_α` error bounds;
//! - the coverage objective `Σ d_α(i, S)`;
//! - coverage CDFs of nearest-retained cosine distances;
//! - an audit of the log-det marginal-gain identity, submodularity and
//!   the greedy `(1 − 1/e)` ratio.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcore::{dot, sq_dist, sq_norm, LayerCache, Matrix, SelectorConfig};
use crate::selector::{greedy_residual_select, logdet_coverage, logdet_gain_closed_form, logdet_marginal_gain, CandidatePool};

/// Softmax of `q·k_i/√d_k` over the cache.
pub fn attention_weights(q: &[f64], cache: &LayerCache) -> Result<Vec<f64>> {
    if q.len() != cache.d_k() {
        return Err(Error::Shape(format!(
            "query of length {} against keys of dimension {}",
            q.len(),
            cache.d_k()
        )));
    }
    if cache.is_empty() {
        return Err(Error::EmptyInput("attention over an empty cache"));
    }
    let scale = 1.0 / (cache.d_k() as f64).sqrt();
    let logits: Vec<f64> = cache.keys().iter_rows().map(|k| dot(q, k) * scale).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
    Ok(w)
}

fn weighted_sum<'a>(dim: usize, terms: impl Iterator<Item = (f64, &'a [f64])>) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (w, row) in terms {
        for (o, x) in out.iter_mut().zip(row) {
            *o += w * x;
        }
    }
    out
}

/// `Σ_i a_i(q) v_i`.
pub fn full_attention(q: &[f64], cache: &LayerCache) -> Result<Vec<f64>> {
    let a = attention_weights(q, cache)?;
    Ok(weighted_sum(
        cache.d_v(),
        a.iter().copied().zip(cache.values().iter_rows()),
    ))
}

fn sorted_selection(cache: &LayerCache, selected: &[usize]) -> Result<Vec<usize>> {
    if selected.is_empty() {
        return Err(Error::EmptyInput("compressed attention needs a non-empty selection"));
    }
    let mut s = selected.to_vec();
    s.sort_unstable();
    s.dedup();
    if let Some(&i) = s.last().filter(|&&i| i >= cache.len()) {
        return Err(Error::OutOfBounds {
            index: i,
            len: cache.len(),
        });
    }
    Ok(s)
}

/// For every token, the selected row nearest in the unnormalized joint
/// space `[k; v]` (lowest index on ties).
pub fn nearest_representatives(cache: &LayerCache, selected: &[usize]) -> Result<Vec<usize>> {
    let sel = sorted_selection(cache, selected)?;
    Ok((0..cache.len())
        .map(|i| {
            let (ki, vi) = (cache.keys().row(i), cache.values().row(i));
            let mut best = (sel[0], f64::INFINITY);
            for &j in &sel {
                let d = sq_dist(ki, cache.keys().row(j)) + sq_dist(vi, cache.values().row(j));
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect())
}

/// Per-representative cluster weights `w_j(q) = Σ_{i∈C_j} a_i(q)`,
/// aligned with the ascending selection.
pub fn cluster_weights(q: &[f64], cache: &LayerCache, selected: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
    let sel = sorted_selection(cache, selected)?;
    let a = attention_weights(q, cache)?;
    let assign = nearest_representatives(cache, &sel)?;
    let mut w = vec![0.0; sel.len()];
    for (i, j) in assign.into_iter().enumerate() {
        let slot = sel.binary_search(&j).expect("assignment within selection");
        w[slot] += a[i];
    }
    Ok((sel, w))
}

/// `Σ_{j∈S} w_j(q) v_j` with each token's attention mass moved to its
/// nearest representative.
pub fn compressed_attention_weighted(q: &[f64], cache: &LayerCache, selected: &[usize]) -> Result<Vec<f64>> {
    let (sel, w) = cluster_weights(q, cache, selected)?;
    Ok(weighted_sum(
        cache.d_v(),
        sel.iter().zip(&w).map(|(&j, &wj)| (wj, cache.values().row(j))),
    ))
}

/// Error of the compressed attention together with its two upper bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionErrorRecord {
    pub query: usize,
    pub error: f64,
    /// `sqrt(Σ a_i min_j ‖v_i − v_j‖²)`.
    pub bound_v: f64,
    /// `sqrt(Σ a_i d_α(i, S) / (1 − α))`.
    pub bound_dalpha: f64,
}

pub fn attention_error_and_bounds(
    q: &[f64],
    cache: &LayerCache,
    selected: &[usize],
    alpha: f64,
) -> Result<(f64, f64, f64)> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Domain(format!(
            "the d_alpha bound needs alpha in [0, 1), got {alpha}"
        )));
    }
    let sel = sorted_selection(cache, selected)?;
    let full = full_attention(q, cache)?;
    let comp = compressed_attention_weighted(q, cache, &sel)?;
    let error = sq_dist(&full, &comp).sqrt();

    let a = attention_weights(q, cache)?;
    let sel_v = cache.values().select_rows(&sel)?;
    let mut bound_v = 0.0;
    for (i, ai) in a.iter().enumerate() {
        let vi = cache.values().row(i);
        let m = sel_v.iter_rows().map(|vj| sq_dist(vi, vj)).fold(f64::INFINITY, f64::min);
        bound_v += ai * m;
    }
    let pool = CandidatePool::new(cache.keys(), cache.values(), alpha)?;
    let dalpha = pool.recompute(&sel)?;
    let bound_d: f64 = a.iter().zip(&dalpha).map(|(ai, d)| ai * d).sum::<f64>() / (1.0 - alpha);
    Ok((error, bound_v.sqrt(), bound_d.sqrt()))
}

/// `Σ_{i∈O} d_α(i, S)`.
pub fn quantization_error(cache: &LayerCache, selected: &[usize], alpha: f64) -> Result<f64> {
    if selected.is_empty() {
        return Err(Error::EmptyInput("quantization error needs a non-empty selection"));
    }
    let pool = CandidatePool::new(cache.keys(), cache.values(), alpha)?;
    Ok(pool.recompute(selected)?.iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMetric {
    /// Keys and values normalized separately, then concatenated.
    JointKv,
    KOnly,
    VOnly,
}

impl CoverageMetric {
    pub const ALL: [CoverageMetric; 3] = [CoverageMetric::JointKv, CoverageMetric::KOnly, CoverageMetric::VOnly];

    pub fn name(self) -> &'static str {
        match self {
            CoverageMetric::JointKv => "joint_kv",
            CoverageMetric::KOnly => "k_only",
            CoverageMetric::VOnly => "v_only",
        }
    }
}

fn unit(x: &[f64]) -> Vec<f64> {
    let n = sq_norm(x).sqrt();
    if n == 0.0 {
        x.to_vec()
    } else {
        x.iter().map(|v| v / n).collect()
    }
}

fn metric_features(cache: &LayerCache, metric: CoverageMetric) -> Vec<Vec<f64>> {
    (0..cache.len())
        .map(|i| match metric {
            CoverageMetric::KOnly => cache.keys().row(i).to_vec(),
            CoverageMetric::VOnly => cache.values().row(i).to_vec(),
            CoverageMetric::JointKv => {
                let mut f = unit(cache.keys().row(i));
                f.extend(unit(cache.values().row(i)));
                f
            }
        })
        .collect()
}

fn cosine_distance(x: &[f64], x_sq: f64, y: &[f64], y_sq: f64) -> f64 {
    if x_sq == 0.0 || y_sq == 0.0 {
        return 1.0;
    }
    (1.0 - dot(x, y) / (x_sq * y_sq).sqrt()).clamp(0.0, 2.0)
}

/// Sorted nearest-retained cosine distances of every token.
pub fn coverage_cdf(cache: &LayerCache, retained: &[usize], metric: CoverageMetric) -> Result<Vec<f64>> {
    let ret = sorted_selection(cache, retained)?;
    let feats = metric_features(cache, metric);
    let norms: Vec<f64> = feats.iter().map(|f| sq_norm(f)).collect();
    let zero = norms.iter().filter(|&&n| n == 0.0).count();
    if zero > 0 {
        tracing::warn!(zero, metric = metric.name(), "zero-norm tokens scored at cosine distance 1");
    }
    let mut out: Vec<f64> = (0..cache.len())
        .map(|i| {
            if ret.binary_search(&i).is_ok() && norms[i] > 0.0 {
                return 0.0;
            }
            ret.iter()
                .map(|&j| cosine_distance(&feats[i], norms[i], &feats[j], norms[j]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

fn ecdf(sorted: &[f64], x: f64) -> f64 {
    sorted.partition_point(|&s| s <= x) as f64 / sorted.len() as f64
}

/// Largest `CDF_a(d) − CDF_b(d)` and where it occurs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfGap {
    pub delta: f64,
    pub at: f64,
}

pub fn max_cdf_gap(a: &[f64], b: &[f64]) -> CdfGap {
    let mut best = CdfGap {
        delta: f64::NEG_INFINITY,
        at: 0.0,
    };
    for &x in a.iter().chain(b) {
        let g = ecdf(a, x) - ecdf(b, x);
        if g > best.delta || (g == best.delta && x < best.at) {
            best = CdfGap { delta: g, at: x };
        }
    }
    best
}

/// CDF evaluated at `bins` evenly spaced points over `[0, max]`.
pub fn quantized_cdf(sorted: &[f64], bins: usize) -> Vec<(f64, f64)> {
    let hi = sorted.last().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    (1..=bins)
        .map(|b| {
            let x = hi * b as f64 / bins as f64;
            (x, ecdf(sorted, x))
        })
        .collect()
}

/// Gaussian probes rescaled to the mean key norm of `cache`.
pub fn gaussian_queries(cache: &LayerCache, count: usize, seed: u64) -> Matrix {
    let mean_norm = if cache.is_empty() {
        1.0
    } else {
        cache.keys().iter_rows().map(|k| sq_norm(k).sqrt()).sum::<f64>() / cache.len() as f64
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Matrix::empty(cache.d_k());
    for _ in 0..count {
        let z: Vec<f64> = (0..cache.d_k()).map(|_| rng.sample(StandardNormal)).collect();
        let n = sq_norm(&z).sqrt().max(f64::MIN_POSITIVE);
        out.push_row(&z.iter().map(|x| x / n * mean_norm).collect::<Vec<_>>())
            .expect("query width matches d_k");
    }
    out
}

/// Randomized log-det audit settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSpec {
    pub dim: usize,
    pub max_selected: usize,
    /// Regularizers, cycled across trials.
    pub eps: Vec<f64>,
    pub seed: u64,
    /// Largest pool used for the exhaustive greedy-ratio comparison.
    pub exhaustive_pool: usize,
    pub exhaustive_budget: usize,
    pub identity_tol: f64,
    pub submodularity_tol: f64,
}

impl Default for AuditSpec {
    fn default() -> Self {
        Self {
            dim: 8,
            max_selected: 6,
            eps: vec![1e-4, 1e-6],
            seed: 0,
            exhaustive_pool: 10,
            exhaustive_budget: 3,
            identity_tol: 1e-8,
            submodularity_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub trial: usize,
    pub eps: f64,
    pub selected: usize,
    pub gain_direct: f64,
    pub gain_closed_form: f64,
    pub abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub records: Vec<AuditRecord>,
    pub max_abs_diff: f64,
    pub submodularity_checks: usize,
    pub submodularity_violations: usize,
    /// `F(A) ≤ F(B)` spot checks; informational, since adding a key whose
    /// regularized residual is below `1 − ε` lowers `F`.
    pub monotonicity_checks: usize,
    pub monotonicity_violations: usize,
    pub exhaustive_instances: usize,
    pub exhaustive_failures: usize,
    /// Smallest greedy / optimum ratio over instances with positive optimum.
    pub min_greedy_ratio: Option<f64>,
}

impl AuditReport {
    /// Identity, submodularity and greedy-ratio checks all within tolerance.
    pub fn passed(&self, spec: &AuditSpec) -> bool {
        self.max_abs_diff <= spec.identity_tol && self.submodularity_violations == 0 && self.exhaustive_failures == 0
    }
}

/// Random keys with norms in `[1, 2]`.
fn random_keys(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Matrix {
    let mut m = Matrix::empty(dim);
    for _ in 0..n {
        let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let scale = rng.random_range(1.0..=2.0) / sq_norm(&z).sqrt().max(f64::MIN_POSITIVE);
        m.push_row(&z.iter().map(|x| x * scale).collect::<Vec<_>>())
            .expect("width matches");
    }
    m
}

fn combinations(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), &mut f);
}

/// Best `F` over all `k`-subsets of the pool.
pub fn exhaustive_logdet_optimum(keys: &Matrix, k: usize, eps: f64) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    let mut err = None;
    combinations(keys.rows(), k, |s| match keys.select_rows(s).and_then(|m| logdet_coverage(&m, eps)) {
        Ok(f) => best = best.max(f),
        Err(e) => err = Some(e),
    });
    match err {
        Some(e) => Err(e),
        None => Ok(best),
    }
}

pub fn logdet_audit(spec: &AuditSpec, trials: usize) -> Result<AuditReport> {
    if trials == 0 {
        return Err(Error::Validation("audit needs at least one trial".into()));
    }
    if spec.eps.is_empty() || spec.dim == 0 {
        return Err(Error::Validation("audit needs a dimension and at least one regularizer".into()));
    }
    let mut report = AuditReport {
        records: Vec::with_capacity(trials),
        max_abs_diff: 0.0,
        submodularity_checks: 0,
        submodularity_violations: 0,
        monotonicity_checks: 0,
        monotonicity_violations: 0,
        exhaustive_instances: 0,
        exhaustive_failures: 0,
        min_greedy_ratio: None,
    };
    let ratio = 1.0 - (-1.0f64).exp();
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let eps = spec.eps[trial % spec.eps.len()];
        let t = rng.random_range(0..=spec.max_selected);
        let pool_size = (t + 1).max(spec.exhaustive_pool.min(t + 1 + rng.random_range(0..=3)));
        let keys = random_keys(&mut rng, pool_size, spec.dim);

        // identity on B = first t rows, candidate = row t
        let b_rows: Vec<usize> = (0..t).collect();
        let b = keys.select_rows(&b_rows)?;
        let cand = keys.row(t);
        let direct = logdet_marginal_gain(&b, cand, eps)?;
        let closed = logdet_gain_closed_form(&b, cand, eps)?;
        let diff = (direct - closed).abs();
        report.max_abs_diff = report.max_abs_diff.max(diff);
        report.records.push(AuditRecord {
            trial,
            eps,
            selected: t,
            gain_direct: direct,
            gain_closed_form: closed,
            abs_diff: diff,
        });

        // A ⊆ B: a random prefix of a shuffled B
        let a_len = rng.random_range(0..=t);
        let mut shuffled = b_rows.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = keys.select_rows(&shuffled[..a_len])?;
        let gain_a = logdet_marginal_gain(&a, cand, eps)?;
        report.submodularity_checks += 1;
        if gain_a < direct - spec.submodularity_tol {
            report.submodularity_violations += 1;
        }
        report.monotonicity_checks += 1;
        if logdet_coverage(&a, eps)? > logdet_coverage(&b, eps)? + spec.submodularity_tol {
            report.monotonicity_violations += 1;
        }

        if pool_size <= spec.exhaustive_pool {
            let k = rng.random_range(1..=spec.exhaustive_budget.min(pool_size));
            let greedy = greedy_residual_select(&keys, k, eps)?;
            let f_greedy = logdet_coverage(&keys.select_rows(&greedy)?, eps)?;
            let f_opt = exhaustive_logdet_optimum(&keys, k, eps)?;
            report.exhaustive_instances += 1;
            if f_greedy < ratio * f_opt - spec.submodularity_tol {
                report.exhaustive_failures += 1;
            }
            if f_opt > 0.0 {
                let r = f_greedy / f_opt;
                report.min_greedy_ratio = Some(report.min_greedy_ratio.map_or(r, |m| m.min(r)));
            }
        }
    }
    Ok(report)
}

/// Everything `diagnose` measures on one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub layer: usize,
    pub selector: String,
    pub config: SelectorConfig,
    pub query_seed: u64,
    pub tokens: usize,
    pub retained: usize,
    pub queries: Vec<AttentionErrorRecord>,
    pub quantization_error: f64,
    pub bound_violations: usize,
    /// Max CDF gap over the random baseline per metric.
    pub coverage_gaps: Vec<(CoverageMetric, CdfGap)>,
    /// The same gaps with the samples of every layer pooled, each layer
    /// selected independently.
    pub pooled_coverage_gaps: Vec<(CoverageMetric, CdfGap)>,
}

/// Attention error records for every query row; `(error, bound_v,
/// bound_dalpha)` ordering is checked with `slack`.
pub fn attention_report(
    cache: &LayerCache,
    selected: &[usize],
    queries: &Matrix,
    alpha: f64,
    slack: f64,
) -> Result<(Vec<AttentionErrorRecord>, usize)> {
    let mut recs = Vec::with_capacity(queries.rows());
    let mut violations = 0;
    for (qi, q) in queries.iter_rows().enumerate() {
        let (error, bound_v, bound_dalpha) = attention_error_and_bounds(q, cache, selected, alpha)?;
        if error > bound_v + slack || bound_v > bound_dalpha + slack {
            violations += 1;
        }
        recs.push(AttentionErrorRecord {
            query: qi,
            error,
            bound_v,
            bound_dalpha,
        });
    }
    Ok((recs, violations))
}
