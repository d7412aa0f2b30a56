//! Data model for multi-layer KV caches.
//!
//! Keys and values for one decoder layer live in a [`LayerCache`], with heads
//! flattened into the feature dimension. Every row carries the frame it came
//! from and its original stream position, so callers can re-apply positional
//! encodings after eviction. All arithmetic is `f64`, regardless of the
//! storage dtype used on disk.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// An empty matrix with a fixed column count, ready for `push_row`.
    pub fn empty(cols: usize) -> Self {
        Self::zeros(0, cols)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut m = Self::empty(cols);
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::Shape(format!(
                "row of length {} pushed into matrix with {} columns",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Copies the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::OutOfBounds {
                    index: i,
                    len: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn append(&mut self, other: &Matrix) -> Result<()> {
        if other.cols != self.cols {
            return Err(Error::Shape(format!(
                "cannot append {} columns to {} columns",
                other.cols, self.cols
            )));
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Keys and values of one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    keys: Matrix,
    values: Matrix,
    frame_ids: Vec<u64>,
    positions: Vec<u64>,
}

impl LayerCache {
    pub fn new(keys: Matrix, values: Matrix, frame_ids: Vec<u64>, positions: Vec<u64>) -> Result<Self> {
        let n = keys.rows();
        if values.rows() != n || frame_ids.len() != n || positions.len() != n {
            return Err(Error::Shape(format!(
                "row counts disagree: keys {n}, values {}, frame_ids {}, positions {}",
                values.rows(),
                frame_ids.len(),
                positions.len()
            )));
        }
        if !keys.all_finite() || !values.all_finite() {
            return Err(Error::Validation("cache contains non-finite entries".into()));
        }
        if frame_ids.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Validation("frame ids must be non-decreasing".into()));
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("positions must be strictly increasing".into()));
        }
        Ok(Self {
            keys,
            values,
            frame_ids,
            positions,
        })
    }

    pub fn empty(d_k: usize, d_v: usize) -> Self {
        Self {
            keys: Matrix::empty(d_k),
            values: Matrix::empty(d_v),
            frame_ids: Vec::new(),
            positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_k(&self) -> usize {
        self.keys.cols()
    }

    pub fn d_v(&self) -> usize {
        self.values.cols()
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn frame_ids(&self) -> &[u64] {
        &self.frame_ids
    }

    pub fn positions(&self) -> &[u64] {
        &self.positions
    }

    /// Rows at `indices`, which must be strictly ascending so the result is
    /// itself a valid cache.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("row selection must be strictly ascending".into()));
        }
        if let Some(&last) = indices.last() {
            if last >= self.len() {
                return Err(Error::OutOfBounds {
                    index: last,
                    len: self.len(),
                });
            }
        }
        Ok(Self {
            keys: self.keys.select_rows(indices)?,
            values: self.values.select_rows(indices)?,
            frame_ids: indices.iter().map(|&i| self.frame_ids[i]).collect(),
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
        })
    }

    /// Appends `other` after `self`; positions and frames must continue.
    pub fn concat(&self, other: &LayerCache) -> Result<Self> {
        if other.d_k() != self.d_k() || other.d_v() != self.d_v() {
            return Err(Error::Shape(format!(
                "cannot concatenate ({}, {}) with ({}, {})",
                self.d_k(),
                self.d_v(),
                other.d_k(),
                other.d_v()
            )));
        }
        if let (Some(a), Some(b)) = (self.positions.last(), other.positions.first()) {
            if b <= a {
                return Err(Error::Validation(format!(
                    "position {b} does not continue the stream after {a}"
                )));
            }
        }
        if let (Some(a), Some(b)) = (self.frame_ids.last(), other.frame_ids.first()) {
            if b < a {
                return Err(Error::Validation(format!("frame id {b} precedes frame id {a}")));
            }
        }
        let mut out = self.clone();
        out.keys.append(&other.keys)?;
        out.values.append(&other.values)?;
        out.frame_ids.extend_from_slice(&other.frame_ids);
        out.positions.extend_from_slice(&other.positions);
        Ok(out)
    }

    /// Rows `range`, as an owned cache.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        let idx: Vec<usize> = range.collect();
        self.select(&idx)
    }
}

/// All layers of a cache at one point in the stream, token-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheSnapshot {
    layers: Vec<LayerCache>,
}

impl CacheSnapshot {
    pub fn new(layers: Vec<LayerCache>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or(Error::EmptyInput("snapshot needs at least one layer"))?;
        for (l, layer) in layers.iter().enumerate().skip(1) {
            if layer.len() != first.len() || layer.d_k() != first.d_k() || layer.d_v() != first.d_v() {
                return Err(Error::Shape(format!("layer {l} shape differs from layer 0")));
            }
            if layer.frame_ids != first.frame_ids || layer.positions != first.positions {
                return Err(Error::Validation(format!(
                    "layer {l} is not token-aligned with layer 0"
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<LayerCache> {
        self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.layers[0].len()
    }

    pub fn d_k(&self) -> usize {
        self.layers[0].d_k()
    }

    pub fn d_v(&self) -> usize {
        self.layers[0].d_v()
    }

    pub fn frame_ids(&self) -> &[u64] {
        self.layers[0].frame_ids()
    }

    pub fn positions(&self) -> &[u64] {
        self.layers[0].positions()
    }

    /// Token rows `range` of every layer.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| l.slice(range.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrthMode {
    /// Regularized projection onto the span of the selected rows.
    ExactSpan,
    /// `‖x‖²(1 − max cos²)` against the selected rows.
    #[default]
    MaxCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Token,
    Frame,
}

/// Scalar hyperparameters of the selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    /// Key weight in the bicriteria distance.
    pub alpha: f64,
    /// Key weight in the orthogonal novelty score.
    pub eta: f64,
    /// Weight of the normalized novelty bonus.
    pub lambda: f64,
    /// Min-max normalization regularizer.
    pub eps0: f64,
    /// Gram-matrix regularizer for projections and log-det.
    pub eps_logdet: f64,
    pub orth_mode: OrthMode,
    pub granularity: Granularity,
    pub rng_seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            eta: 0.25,
            lambda: 0.25,
            eps0: 1e-6,
            eps_logdet: 1e-6,
            orth_mode: OrthMode::MaxCosine,
            granularity: Granularity::Token,
            rng_seed: 0,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {x} must lie in [0, 1]")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("eta", self.eta)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda = {} must be >= 0", self.lambda)));
        }
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return Err(Error::Config(format!("eps0 = {} must be > 0", self.eps0)));
        }
        if !(self.eps_logdet > 0.0 && self.eps_logdet.is_finite()) {
            return Err(Error::Config(format!(
                "eps_logdet = {} must be > 0",
                self.eps_logdet
            )));
        }
        Ok(())
    }
}

/// Token budget `|M|` and how it is split between history and recent tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub total_budget: usize,
    pub recent_fraction: f64,
    pub block_tokens: usize,
}

impl BudgetConfig {
    /// Defaults: recent tail `⌊|M|/4⌋`, compression block `⌊|M|/4⌋`.
    pub fn new(total_budget: usize) -> Self {
        Self {
            total_budget,
            recent_fraction: 0.25,
            block_tokens: (total_budget / 4).max(1),
        }
    }

    pub fn recent_len(&self) -> usize {
        (self.recent_fraction * self.total_budget as f64).floor() as usize
    }

    /// Tokens available for the selected history, `|M| − |R|`.
    pub fn history_budget(&self) -> usize {
        self.total_budget - self.recent_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_budget == 0 {
            return Err(Error::Config("total budget must be positive".into()));
        }
        if !(self.recent_fraction > 0.0 && self.recent_fraction < 1.0) {
            return Err(Error::Config(format!(
                "recent fraction {} must lie in (0, 1)",
                self.recent_fraction
            )));
        }
        if self.block_tokens == 0 {
            return Err(Error::Config("block size must be positive".into()));
        }
        let recent = self.recent_len();
        if recent < 1 {
            return Err(Error::Config(format!(
                "recent tail of budget {} is empty",
                self.total_budget
            )));
        }
        if recent >= self.total_budget {
            return Err(Error::Config("recent tail must be smaller than the budget".into()));
        }
        Ok(())
    }
}

/// Frame-level view of a layer: one centroid per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameView {
    pub centroid_keys: Matrix,
    pub centroid_values: Matrix,
    pub frame_token_ranges: Vec<Range<usize>>,
}

impl FrameView {
    pub fn num_frames(&self) -> usize {
        self.frame_token_ranges.len()
    }
}

/// Score decomposition of one greedy step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Candidates still unselected when the step ran.
    pub pool_size: usize,
    pub winner: usize,
    pub raw_dalpha: f64,
    pub raw_orth: f64,
    pub norm_dalpha: f64,
    pub norm_orth: f64,
    pub score: f64,
}

/// Selected indices in insertion order, plus one record per greedy step
/// (the seed has no record).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<usize>,
    pub step_records: Vec<StepRecord>,
}

/// `[k_i; v_i]`.
pub fn joint_feature(cache: &LayerCache, i: usize) -> Result<Vec<f64>> {
    if i >= cache.len() {
        return Err(Error::OutOfBounds {
            index: i,
            len: cache.len(),
        });
    }
    let mut out = Vec::with_capacity(cache.d_k() + cache.d_v());
    out.extend_from_slice(cache.keys.row(i));
    out.extend_from_slice(cache.values.row(i));
    Ok(out)
}

/// Groups maximal runs of equal frame id and averages each run.
pub fn frame_centroids(cache: &LayerCache) -> Result<FrameView> {
    if cache.is_empty() {
        return Err(Error::EmptyInput("cannot build frame centroids of an empty cache"));
    }
    let ids = cache.frame_ids();
    let mut ranges = Vec::new();
    let mut start = 0;
    for i in 1..=ids.len() {
        if i == ids.len() || ids[i] != ids[start] {
            ranges.push(start..i);
            start = i;
        }
    }
    let mean = |m: &Matrix, r: &Range<usize>| {
        let mut acc = vec![0.0; m.cols()];
        for i in r.clone() {
            for (a, x) in acc.iter_mut().zip(m.row(i)) {
                *a += x;
            }
        }
        let n = r.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    };
    let mut centroid_keys = Matrix::empty(cache.d_k());
    let mut centroid_values = Matrix::empty(cache.d_v());
    for r in &ranges {
        centroid_keys.push_row(&mean(&cache.keys, r))?;
        centroid_values.push_row(&mean(&cache.values, r))?;
    }
    Ok(FrameView {
        centroid_keys,
        centroid_values,
        frame_token_ranges: ranges,
    })
}

/// Token indices covered by `selected_frames`, ascending.
pub fn expand_frames(view: &FrameView, selected_frames: &[usize]) -> Result<Vec<usize>> {
    let mut frames = selected_frames.to_vec();
    frames.sort_unstable();
    if frames.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Validation("duplicate frame index in selection".into()));
    }
    let mut out = Vec::new();
    for f in frames {
        let r = view.frame_token_ranges.get(f).ok_or(Error::OutOfBounds {
            index: f,
            len: view.num_frames(),
        })?;
        out.extend(r.clone());
    }
    Ok(out)
}
