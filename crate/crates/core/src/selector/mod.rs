//! Budgeted coreset selection over joint key/value features.
//!
//! The backbone is a deterministic farthest-first (D²) trace under the
//! bicriteria distance
//!
//! ```text
//! d_α(i, S) = min_{j∈S} α‖k_i − k_j‖² + (1 − α)‖v_i − v_j‖²
//! ```
//!
//! [`cords_select`] adds a min-max normalized orthogonal novelty bonus on top
//! of it. All argmax ties resolve to the lowest candidate index.

mod logdet;
mod span;

pub use logdet::{greedy_residual_select, logdet_coverage, logdet_gain_closed_form, logdet_marginal_gain};
pub use span::{exact_residual, orth_score_exact, SpanState};

use crate::error::{Error, Result};
use crate::kvcore::{dot, sq_dist, sq_norm, Matrix, OrthMode, SelectionResult, SelectorConfig, StepRecord};

#[inline]
fn pair_dalpha(ki: &[f64], vi: &[f64], kj: &[f64], vj: &[f64], alpha: f64) -> f64 {
    alpha * sq_dist(ki, kj) + (1.0 - alpha) * sq_dist(vi, vj)
}

/// Squared cosine; zero when either vector has zero norm.
#[inline]
fn cos2(x: &[f64], x_sq: f64, y: &[f64], y_sq: f64) -> f64 {
    if x_sq == 0.0 || y_sq == 0.0 {
        return 0.0;
    }
    let d = dot(x, y);
    (d * d / (x_sq * y_sq)).min(1.0)
}

#[inline]
fn surrogate_component(x_sq: f64, max_cos2: f64) -> f64 {
    x_sq * (1.0 - max_cos2)
}

/// `d_α(i, S)` against the selected rows `(sel_keys[j], sel_values[j])`.
pub fn bicriteria_distance(
    key: &[f64],
    value: &[f64],
    sel_keys: &Matrix,
    sel_values: &Matrix,
    alpha: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha = {alpha} outside [0, 1]")));
    }
    if sel_keys.rows() == 0 {
        return Err(Error::EmptyInput("bicriteria distance needs a non-empty selected set"));
    }
    if sel_keys.rows() != sel_values.rows() || key.len() != sel_keys.cols() || value.len() != sel_values.cols() {
        return Err(Error::Shape("candidate and selected set disagree".into()));
    }
    Ok(sel_keys
        .iter_rows()
        .zip(sel_values.iter_rows())
        .map(|(kj, vj)| pair_dalpha(key, value, kj, vj, alpha))
        .fold(f64::INFINITY, f64::min))
}

/// Max-cosine redundancy surrogate of the orthogonal novelty score:
/// `η‖k‖²(1 − max_j cos²(k, k_j)) + (1 − η)‖v‖²(1 − max_j cos²(v, v_j))`.
pub fn orth_score_surrogate(
    sel_keys: &Matrix,
    sel_values: &Matrix,
    key: &[f64],
    value: &[f64],
    eta: f64,
) -> Result<f64> {
    if sel_keys.rows() == 0 {
        return Err(Error::EmptyInput("surrogate needs a non-empty selected set"));
    }
    if sel_keys.rows() != sel_values.rows() || key.len() != sel_keys.cols() || value.len() != sel_values.cols() {
        return Err(Error::Shape("candidate and selected set disagree".into()));
    }
    let (k_sq, v_sq) = (sq_norm(key), sq_norm(value));
    let mk = sel_keys
        .iter_rows()
        .map(|kj| cos2(key, k_sq, kj, sq_norm(kj)))
        .fold(0.0, f64::max);
    let mv = sel_values
        .iter_rows()
        .map(|vj| cos2(value, v_sq, vj, sq_norm(vj)))
        .fold(0.0, f64::max);
    Ok(eta * surrogate_component(k_sq, mk) + (1.0 - eta) * surrogate_component(v_sq, mv))
}

/// `(s − min) / (max − min + ε₀)`.
pub fn min_max_normalize(scores: &[f64], eps0: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("nothing to normalize"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Validation("scores must be finite".into()));
    }
    let (lo, hi) = min_max(scores.iter().copied());
    let denom = hi - lo + eps0;
    Ok(scores.iter().map(|s| (s - lo) / denom).collect())
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)))
}

/// Candidate rows plus the running nearest-selected bicriteria distance.
#[derive(Debug, Clone)]
pub struct CandidatePool<'a> {
    keys: &'a Matrix,
    values: &'a Matrix,
    alpha: f64,
    nearest_dist: Vec<f64>,
}

impl<'a> CandidatePool<'a> {
    pub fn new(keys: &'a Matrix, values: &'a Matrix, alpha: f64) -> Result<Self> {
        if keys.rows() != values.rows() {
            return Err(Error::Shape(format!(
                "{} key rows vs {} value rows",
                keys.rows(),
                values.rows()
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Domain(format!("alpha = {alpha} outside [0, 1]")));
        }
        Ok(Self {
            keys,
            values,
            alpha,
            nearest_dist: vec![f64::INFINITY; keys.rows()],
        })
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> &'a Matrix {
        self.keys
    }

    pub fn values(&self) -> &'a Matrix {
        self.values
    }

    /// `d_α(i, S)` for every candidate; infinite before the first insert.
    pub fn nearest_dist(&self) -> &[f64] {
        &self.nearest_dist
    }

    /// Folds one newly selected row into `nearest_dist`.
    pub fn insert(&mut self, j: usize) {
        let (kj, vj) = (self.keys.row(j), self.values.row(j));
        for (i, d) in self.nearest_dist.iter_mut().enumerate() {
            let dij = pair_dalpha(self.keys.row(i), self.values.row(i), kj, vj, self.alpha);
            if dij < *d {
                *d = dij;
            }
        }
    }

    /// From-scratch `d_α(·, S)` for auditing the incremental state.
    pub fn recompute(&self, selected: &[usize]) -> Result<Vec<f64>> {
        let sk = self.keys.select_rows(selected)?;
        let sv = self.values.select_rows(selected)?;
        (0..self.len())
            .map(|i| bicriteria_distance(self.keys.row(i), self.values.row(i), &sk, &sv, self.alpha))
            .collect()
    }
}

/// Index of the largest joint norm `‖[k; v]‖²`.
pub fn seed_token(pool: &CandidatePool<'_>) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::EmptyInput("cannot seed an empty pool"));
    }
    let mut best = 0;
    let mut best_norm = f64::NEG_INFINITY;
    for i in 0..pool.len() {
        let n = sq_norm(pool.keys.row(i)) + sq_norm(pool.values.row(i));
        if n > best_norm {
            best = i;
            best_norm = n;
        }
    }
    Ok(best)
}

fn check_budget(pool: &CandidatePool<'_>, budget: usize) -> Result<()> {
    if budget == 0 || budget > pool.len() {
        return Err(Error::Budget {
            budget,
            pool: pool.len(),
        });
    }
    Ok(())
}

/// Lowest-index argmax of `score` over unselected candidates.
fn argmax_unselected(taken: &[bool], score: impl Fn(usize) -> f64) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, &t) in taken.iter().enumerate() {
        if t {
            continue;
        }
        let s = score(i);
        match best {
            Some((_, bs)) if s <= bs => {}
            _ => best = Some((i, s)),
        }
    }
    best.expect("at least one unselected candidate").0
}

/// Farthest-first trace under `d_α`, `O(N)` per step.
pub fn d2_select(pool: &mut CandidatePool<'_>, budget: usize) -> Result<SelectionResult> {
    check_budget(pool, budget)?;
    let n = pool.len();
    let seed = seed_token(pool)?;
    let mut taken = vec![false; n];
    let mut selected = Vec::with_capacity(budget);
    let mut records = Vec::with_capacity(budget.saturating_sub(1));
    taken[seed] = true;
    selected.push(seed);
    pool.insert(seed);
    for step in 1..budget {
        let w = argmax_unselected(&taken, |i| pool.nearest_dist[i]);
        let d = pool.nearest_dist[w];
        records.push(StepRecord {
            pool_size: n - step,
            winner: w,
            raw_dalpha: d,
            raw_orth: 0.0,
            norm_dalpha: d,
            norm_orth: 0.0,
            score: d,
        });
        taken[w] = true;
        selected.push(w);
        pool.insert(w);
    }
    Ok(SelectionResult {
        selected,
        step_records: records,
    })
}

/// Per-candidate novelty state, updated once per insertion.
enum Novelty {
    MaxCosine {
        key_sq: Vec<f64>,
        value_sq: Vec<f64>,
        max_cos2_k: Vec<f64>,
        max_cos2_v: Vec<f64>,
    },
    Exact {
        keys: SpanState,
        values: SpanState,
    },
}

impl Novelty {
    fn new(pool: &CandidatePool<'_>, config: &SelectorConfig) -> Self {
        match config.orth_mode {
            OrthMode::MaxCosine => Novelty::MaxCosine {
                key_sq: pool.keys.iter_rows().map(sq_norm).collect(),
                value_sq: pool.values.iter_rows().map(sq_norm).collect(),
                max_cos2_k: vec![0.0; pool.len()],
                max_cos2_v: vec![0.0; pool.len()],
            },
            OrthMode::ExactSpan => Novelty::Exact {
                keys: SpanState::new(pool.keys.cols(), config.eps_logdet),
                values: SpanState::new(pool.values.cols(), config.eps_logdet),
            },
        }
    }

    fn insert(&mut self, pool: &CandidatePool<'_>, taken: &[bool], j: usize) -> Result<()> {
        match self {
            Novelty::MaxCosine {
                key_sq,
                value_sq,
                max_cos2_k,
                max_cos2_v,
            } => {
                let (kj, vj) = (pool.keys.row(j), pool.values.row(j));
                for i in 0..pool.len() {
                    if taken[i] {
                        continue;
                    }
                    let ck = cos2(pool.keys.row(i), key_sq[i], kj, key_sq[j]);
                    let cv = cos2(pool.values.row(i), value_sq[i], vj, value_sq[j]);
                    max_cos2_k[i] = max_cos2_k[i].max(ck);
                    max_cos2_v[i] = max_cos2_v[i].max(cv);
                }
            }
            Novelty::Exact { keys, values } => {
                keys.push(pool.keys.row(j))?;
                values.push(pool.values.row(j))?;
            }
        }
        Ok(())
    }

    fn score(&self, pool: &CandidatePool<'_>, i: usize, eta: f64) -> Result<f64> {
        match self {
            Novelty::MaxCosine {
                key_sq,
                value_sq,
                max_cos2_k,
                max_cos2_v,
            } => Ok(eta * surrogate_component(key_sq[i], max_cos2_k[i])
                + (1.0 - eta) * surrogate_component(value_sq[i], max_cos2_v[i])),
            Novelty::Exact { keys, values } => {
                orth_score_exact(keys, values, pool.keys.row(i), pool.values.row(i), eta)
            }
        }
    }
}

/// Coverage-plus-novelty greedy selection.
///
/// After the seed, each step scores every unselected candidate by
/// `d̃_α + λ·Orth̃`, where both terms are min-max normalized over the
/// unselected candidates of that step. With `λ = 0` the trace is exactly
/// [`d2_select`].
pub fn cords_select(
    pool: &mut CandidatePool<'_>,
    budget: usize,
    config: &SelectorConfig,
) -> Result<SelectionResult> {
    config.validate()?;
    if (config.alpha - pool.alpha).abs() > 0.0 {
        return Err(Error::Config(format!(
            "pool built for alpha {} but config has alpha {}",
            pool.alpha, config.alpha
        )));
    }
    check_budget(pool, budget)?;
    let n = pool.len();
    let use_orth = config.lambda > 0.0;
    let seed = seed_token(pool)?;
    let mut taken = vec![false; n];
    let mut selected = Vec::with_capacity(budget);
    let mut records = Vec::with_capacity(budget.saturating_sub(1));
    let mut novelty = Novelty::new(pool, config);

    taken[seed] = true;
    selected.push(seed);
    pool.insert(seed);
    if use_orth {
        novelty.insert(pool, &taken, seed)?;
    }

    let mut orth = vec![0.0; n];
    for step in 1..budget {
        let remaining = || (0..n).filter(|&i| !taken[i]);
        if use_orth {
            for i in remaining() {
                orth[i] = novelty.score(pool, i, config.eta)?;
            }
        }
        let (d_lo, d_hi) = min_max(remaining().map(|i| pool.nearest_dist[i]));
        let (o_lo, o_hi) = min_max(remaining().map(|i| orth[i]));
        let d_den = d_hi - d_lo + config.eps0;
        let o_den = o_hi - o_lo + config.eps0;
        let norm_d = |i: usize| (pool.nearest_dist[i] - d_lo) / d_den;
        let norm_o = |i: usize| (orth[i] - o_lo) / o_den;
        let combined = |i: usize| norm_d(i) + config.lambda * norm_o(i);

        let w = if use_orth {
            argmax_unselected(&taken, combined)
        } else {
            argmax_unselected(&taken, |i| pool.nearest_dist[i])
        };
        records.push(StepRecord {
            pool_size: n - step,
            winner: w,
            raw_dalpha: pool.nearest_dist[w],
            raw_orth: orth[w],
            norm_dalpha: norm_d(w),
            norm_orth: norm_o(w),
            score: combined(w),
        });
        taken[w] = true;
        selected.push(w);
        pool.insert(w);
        if use_orth && step + 1 < budget {
            novelty.insert(pool, &taken, w)?;
        }
    }
    Ok(SelectionResult {
        selected,
        step_records: records,
    })
}

/// `Σ_i d_α(i, S)` over the pool: the coverage objective being minimized.
pub fn quantization_objective(keys: &Matrix, values: &Matrix, selected: &[usize], alpha: f64) -> Result<f64> {
    let pool = CandidatePool::new(keys, values, alpha)?;
    Ok(pool.recompute(selected)?.iter().sum())
}
