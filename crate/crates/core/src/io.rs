//! KVD1 cache files, synthetic caches and JSON-lines result files.
//!
//! KVD1 layout, all little-endian:
//!
//! ```text
//! 0   "KVD1"
//! 4   u32 version (1)
//! 8   u32 L   12  u32 N   16  u32 d_k   20  u32 d_v   24  u32 F
//! 28  u8 dtype (0 = f32, 1 = f64), 3 bytes padding
//! 32  per layer: keys N×d_k, then values N×d_v, row-major
//!     frame table: F+1 u64 token boundaries (0 = b_0 < ... < b_F = N)
//!     positions: N u64
//! ```
//!
//! Frame ids are not stored; a file read back numbers its frames `0..F`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcore::{CacheSnapshot, LayerCache, Matrix};

pub const KVD_MAGIC: &[u8; 4] = b"KVD1";
pub const KVD_VERSION: u32 = 1;
pub const KVD_HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Decoded KVD1 header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvdHeader {
    pub layers: u32,
    pub tokens: u32,
    pub d_k: u32,
    pub d_v: u32,
    pub frames: u32,
    pub dtype: Dtype,
}

impl KvdHeader {
    /// Total file length implied by the header.
    pub fn file_len(&self) -> u64 {
        let (l, n) = (self.layers as u64, self.tokens as u64);
        let payload = l * n * (self.d_k as u64 + self.d_v as u64) * self.dtype.width() as u64;
        KVD_HEADER_LEN as u64 + payload + 8 * (self.frames as u64 + 1) + 8 * n
    }
}

/// Start offsets of the runs of equal frame id.
fn frame_boundaries(frame_ids: &[u64]) -> Vec<u64> {
    let mut b = vec![0u64];
    for i in 1..frame_ids.len() {
        if frame_ids[i] != frame_ids[i - 1] {
            b.push(i as u64);
        }
    }
    if frame_ids.is_empty() {
        return b;
    }
    b.push(frame_ids.len() as u64);
    b
}

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Validation(format!("{what} = {x} does not fit the KVD1 header")))
}

pub fn encode_kvd(snapshot: &CacheSnapshot, dtype: Dtype) -> Result<Vec<u8>> {
    let bounds = frame_boundaries(snapshot.frame_ids());
    let header = KvdHeader {
        layers: to_u32(snapshot.num_layers(), "L")?,
        tokens: to_u32(snapshot.num_tokens(), "N")?,
        d_k: to_u32(snapshot.d_k(), "d_k")?,
        d_v: to_u32(snapshot.d_v(), "d_v")?,
        frames: to_u32(bounds.len() - 1, "F")?,
        dtype,
    };
    let mut out = Vec::with_capacity(header.file_len() as usize);
    out.extend_from_slice(KVD_MAGIC);
    for x in [KVD_VERSION, header.layers, header.tokens, header.d_k, header.d_v, header.frames] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&[dtype.code(), 0, 0, 0]);
    for layer in snapshot.layers() {
        for m in [layer.keys(), layer.values()] {
            for &x in m.as_slice() {
                match dtype {
                    Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
    }
    for b in bounds {
        out.extend_from_slice(&b.to_le_bytes());
    }
    for &p in snapshot.positions() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    debug_assert_eq!(out.len() as u64, header.file_len());
    Ok(out)
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"))
}

fn u64_at(bytes: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"))
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<KvdHeader> {
    if bytes.len() < KVD_HEADER_LEN {
        return Err(Error::Truncated {
            expected: KVD_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[0..4] != KVD_MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32_at(bytes, 4);
    if version != KVD_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_code(bytes[28]).ok_or_else(|| format_err(28, format!("unknown dtype code {}", bytes[28])))?;
    if bytes[29..32] != [0, 0, 0] {
        return Err(format_err(29, "non-zero header padding"));
    }
    let header = KvdHeader {
        layers: u32_at(bytes, 8),
        tokens: u32_at(bytes, 12),
        d_k: u32_at(bytes, 16),
        d_v: u32_at(bytes, 20),
        frames: u32_at(bytes, 24),
        dtype,
    };
    if header.layers == 0 {
        return Err(format_err(8, "layer count is zero"));
    }
    if header.d_k == 0 || header.d_v == 0 {
        return Err(format_err(16, "zero head dimension"));
    }
    if header.frames > header.tokens || (header.tokens > 0 && header.frames == 0) {
        return Err(format_err(
            24,
            format!("{} frames cannot partition {} tokens", header.frames, header.tokens),
        ));
    }
    Ok(header)
}

pub fn decode_kvd(bytes: &[u8]) -> Result<CacheSnapshot> {
    let h = decode_header(bytes)?;
    let expected = h.file_len();
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    if bytes.len() as u64 > expected {
        return Err(format_err(
            expected as usize,
            format!("{} trailing bytes after the position table", bytes.len() as u64 - expected),
        ));
    }
    let (n, dk, dv, w) = (h.tokens as usize, h.d_k as usize, h.d_v as usize, h.dtype.width());
    let mut off = KVD_HEADER_LEN;
    let read_matrix = |off: &mut usize, cols: usize| -> Result<Matrix> {
        let data = bytes[*off..*off + n * cols * w]
            .chunks_exact(w)
            .map(|c| match h.dtype {
                Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect::<Vec<_>>();
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(format_err(*off + bad * w, "non-finite entry"));
        }
        *off += n * cols * w;
        Matrix::from_vec(n, cols, data)
    };
    let mut mats = Vec::with_capacity(h.layers as usize);
    for _ in 0..h.layers {
        let k = read_matrix(&mut off, dk)?;
        let v = read_matrix(&mut off, dv)?;
        mats.push((k, v));
    }

    let mut frame_ids = Vec::with_capacity(n);
    let first = u64_at(bytes, off);
    if first != 0 {
        return Err(format_err(off, format!("frame table starts at {first}, expected 0")));
    }
    let mut prev = first;
    for f in 1..=h.frames as usize {
        let at = off + 8 * f;
        let b = u64_at(bytes, at);
        if b <= prev || b > n as u64 {
            return Err(format_err(at, format!("frame boundary {b} after {prev} is not increasing within {n}")));
        }
        frame_ids.extend(std::iter::repeat_n((f - 1) as u64, (b - prev) as usize));
        prev = b;
    }
    if prev != n as u64 {
        return Err(format_err(
            off + 8 * h.frames as usize,
            format!("frame table ends at {prev}, expected {n}"),
        ));
    }
    off += 8 * (h.frames as usize + 1);

    let mut positions = Vec::with_capacity(n);
    for i in 0..n {
        let p = u64_at(bytes, off + 8 * i);
        if positions.last().is_some_and(|&q| p <= q) {
            return Err(format_err(off + 8 * i, format!("position {p} is not increasing")));
        }
        positions.push(p);
    }

    let layers = mats
        .into_iter()
        .map(|(k, v)| LayerCache::new(k, v, frame_ids.clone(), positions.clone()))
        .collect::<Result<Vec<_>>>()?;
    CacheSnapshot::new(layers)
}

pub fn write_kvd(snapshot: &CacheSnapshot, path: &Path, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_kvd(snapshot, dtype)?)?;
    Ok(())
}

pub fn read_kvd(path: &Path) -> Result<CacheSnapshot> {
    decode_kvd(&fs::read(path)?)
}

/// Parameters of a synthetic clustered cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub tokens_per_frame: usize,
    pub frames: usize,
    /// Fraction of frames after the first that re-emit an earlier frame.
    pub duplicate_rate: f64,
    /// Standard deviation of the per-token noise around a cluster center.
    pub noise_scale: f64,
    pub d_k: usize,
    pub d_v: usize,
    pub layers: usize,
    pub rng_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clusters: 20,
            tokens_per_frame: 20,
            frames: 100,
            duplicate_rate: 0.1,
            noise_scale: 0.1,
            d_k: 16,
            d_v: 16,
            layers: 4,
            rng_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("clusters", self.clusters),
            ("tokens_per_frame", self.tokens_per_frame),
            ("frames", self.frames),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("layers", self.layers),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, c)| *c == 0) {
            return Err(Error::Validation(format!("{name} must be positive")));
        }
        if !(0.0..=1.0).contains(&self.duplicate_rate) {
            return Err(Error::Validation(format!(
                "duplicate_rate must lie in [0, 1], got {}",
                self.duplicate_rate
            )));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::Validation("noise_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Per-layer cluster centers `(keys, values)` drawn from a unit Gaussian.
pub fn synthetic_centers(spec: &SyntheticSpec) -> Result<Vec<(Matrix, Matrix)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut out = Vec::with_capacity(spec.layers);
    for _ in 0..spec.layers {
        let mut k = Matrix::empty(spec.d_k);
        let mut v = Matrix::empty(spec.d_v);
        for _ in 0..spec.clusters {
            k.push_row(&gaussian(&mut rng, spec.d_k, 1.0))?;
            v.push_row(&gaussian(&mut rng, spec.d_v, 1.0))?;
        }
        out.push((k, v));
    }
    Ok(out)
}

/// Token cluster labels and duplicate sources, shared by every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLayout {
    pub labels: Vec<usize>,
    /// For each frame, the original frame it re-emits.
    pub duplicate_of: Vec<Option<usize>>,
}

/// Gaussian mixture cache with Zipf cluster weights (`∝ 1/(c+1)`), so a few
/// clusters dominate. Each frame has a home cluster that half of its tokens
/// come from; the rest are drawn from the mixture weights. A `duplicate_rate`
/// share of frames after the first are noisy copies of an earlier
/// original frame.
pub fn generate_synthetic_with_layout(spec: &SyntheticSpec) -> Result<(CacheSnapshot, SyntheticLayout)> {
    let centers = synthetic_centers(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ 0x5EED_F00D);
    let (tpf, frames) = (spec.tokens_per_frame, spec.frames);
    let weights = WeightedIndex::new((0..spec.clusters).map(|c| 1.0 / (c + 1) as f64))
        .map_err(|e| Error::Invariant(format!("cluster weights: {e}")))?;

    let n_dup = ((spec.duplicate_rate * (frames - 1) as f64).round() as usize).min(frames - 1);
    let mut later: Vec<usize> = (1..frames).collect();
    later.shuffle(&mut rng);
    let mut is_dup = vec![false; frames];
    for &f in &later[..n_dup] {
        is_dup[f] = true;
    }
    let mut duplicate_of = vec![None; frames];
    let mut originals = Vec::new();
    let mut labels = Vec::with_capacity(spec.num_tokens());
    for f in 0..frames {
        if is_dup[f] {
            let src = originals[rng.random_range(0..originals.len())];
            duplicate_of[f] = Some(src);
            for t in 0..tpf {
                labels.push(labels[src * tpf + t]);
            }
        } else {
            originals.push(f);
            let home = weights.sample(&mut rng);
            for _ in 0..tpf {
                let c = if rng.random_bool(0.5) {
                    home
                } else {
                    weights.sample(&mut rng)
                };
                labels.push(c);
            }
        }
    }

    let n = spec.num_tokens();
    let frame_ids: Vec<u64> = (0..n).map(|i| (i / tpf) as u64).collect();
    let positions: Vec<u64> = (0..n as u64).collect();
    let mut layers = Vec::with_capacity(spec.layers);
    for (ck, cv) in &centers {
        let mut keys = Matrix::zeros(n, spec.d_k);
        let mut values = Matrix::zeros(n, spec.d_v);
        for f in 0..frames {
            for t in 0..tpf {
                let i = f * tpf + t;
                let (bk, bv) = match duplicate_of[f] {
                    Some(src) => {
                        let j = src * tpf + t;
                        (keys.row(j).to_vec(), values.row(j).to_vec())
                    }
                    None => (ck.row(labels[i]).to_vec(), cv.row(labels[i]).to_vec()),
                };
                let nk = gaussian(&mut rng, spec.d_k, spec.noise_scale);
                let nv = gaussian(&mut rng, spec.d_v, spec.noise_scale);
                for ((o, b), e) in keys.row_mut(i).iter_mut().zip(&bk).zip(&nk) {
                    *o = b + e;
                }
                for ((o, b), e) in values.row_mut(i).iter_mut().zip(&bv).zip(&nv) {
                    *o = b + e;
                }
            }
        }
        layers.push(LayerCache::new(keys, values, frame_ids.clone(), positions.clone())?);
    }
    Ok((CacheSnapshot::new(layers)?, SyntheticLayout { labels, duplicate_of }))
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<CacheSnapshot> {
    Ok(generate_synthetic_with_layout(spec)?.0)
}

/// Version tag written in the first line of every results file.
pub const RESULTS_SCHEMA: &str = "kvcoreset-results/1";

/// First line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsMeta {
    pub schema: String,
    pub command: String,
    /// Command parameters; keys serialize in sorted order.
    pub params: serde_json::Map<String, serde_json::Value>,
}

impl ResultsMeta {
    pub fn new(command: &str, params: serde_json::Map<String, serde_json::Value>) -> Self {
        Self {
            schema: RESULTS_SCHEMA.to_string(),
            command: command.to_string(),
            params,
        }
    }
}

/// Retained tokens of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResult {
    pub layer: usize,
    pub selector: String,
    pub budget: usize,
    pub retained: Vec<usize>,
    pub positions: Vec<u64>,
    pub trace: Option<crate::kvcore::SelectionResult>,
    pub frames: Option<Vec<usize>>,
}

/// One JSON line after the metadata block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResultRecord {
    Layer(LayerResult),
    Compression(crate::streaming::CompressionRecord),
    Diagnostics(crate::diagnostics::DiagnosticsReport),
    Audit(AuditSummary),
    Sweep(SweepRow),
}

/// Audit totals without the per-trial records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub trials: usize,
    pub max_abs_diff: f64,
    pub submodularity_checks: usize,
    pub submodularity_violations: usize,
    pub monotonicity_checks: usize,
    pub monotonicity_violations: usize,
    pub exhaustive_instances: usize,
    pub exhaustive_failures: usize,
    pub min_greedy_ratio: Option<f64>,
    pub passed: bool,
}

/// One cell of a hyperparameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub eta: f64,
    pub lambda: f64,
    pub budget: usize,
    pub layer: usize,
    pub quantization_error: f64,
    pub mean_attention_error: f64,
    pub mean_bound_v: f64,
    pub coverage_gap_joint_kv: f64,
}

pub fn write_results(path: &Path, meta: &ResultsMeta, records: &[ResultRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, meta)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<(ResultsMeta, Vec<ResultRecord>)> {
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let first = lines
        .next()
        .ok_or(Error::EmptyInput("results file has no metadata line"))??;
    let meta: ResultsMeta = serde_json::from_str(&first)?;
    if meta.schema != RESULTS_SCHEMA {
        return Err(Error::Validation(format!("unsupported results schema '{}'", meta.schema)));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok((meta, records))
}
