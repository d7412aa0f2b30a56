//! Bounded online cache manager.
//!
//! Blocks are appended to a pending buffer. Once persistent plus pending
//! tokens exceed `|M| + block_tokens`, every compressed layer group is cut
//! back to `|M|` tokens: the newest `⌊recent_fraction·|M|⌋` tokens are kept
//! as the recent tail, and the anchor layer of the group selects the rest
//! from the older history. Follower layers keep their own rows at the
//! anchor's positions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::error::{Error, Result};
use crate::kvcore::{BudgetConfig, CacheSnapshot, Granularity, LayerCache, SelectorConfig};
use crate::policy::{select_layer, SelectorKind};

/// Which layers select, and which anchor each layer copies indices from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchedule {
    active_layers: BTreeSet<usize>,
    anchors: BTreeSet<usize>,
    /// `None` marks a layer that is never compressed.
    follower_map: Vec<Option<usize>>,
}

impl LayerSchedule {
    /// Active layers are the bottom quarter (at least one); the lowest active
    /// layer is the only anchor and every layer follows it.
    pub fn bottom_quarter(num_layers: usize) -> Result<Self> {
        let count = (num_layers / 4).max(1);
        Self::new(num_layers, (0..count).collect(), None, true)
    }

    /// Every layer active, anchored at layer 0.
    pub fn all_layers(num_layers: usize) -> Result<Self> {
        Self::new(num_layers, (0..num_layers).collect(), None, true)
    }

    /// Builds a schedule. Without explicit anchors the lowest active layer
    /// anchors. Each layer follows the nearest anchor at or below it (the
    /// lowest anchor if none is below). With `compress_inactive = false`,
    /// layers outside the active set are left uncompressed.
    pub fn new(
        num_layers: usize,
        active: Vec<usize>,
        anchors: Option<Vec<usize>>,
        compress_inactive: bool,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("schedule needs at least one layer".into()));
        }
        let active_layers: BTreeSet<usize> = active.into_iter().collect();
        if active_layers.is_empty() {
            return Err(Error::Config("no active layers".into()));
        }
        if let Some(&l) = active_layers.iter().next_back().filter(|&&l| l >= num_layers) {
            return Err(Error::Config(format!("active layer {l} out of range for {num_layers} layers")));
        }
        let anchors: BTreeSet<usize> = match anchors {
            Some(a) => a.into_iter().collect(),
            None => active_layers.iter().take(1).copied().collect(),
        };
        if anchors.is_empty() {
            return Err(Error::Config("no anchor layers".into()));
        }
        if let Some(a) = anchors.iter().find(|a| !active_layers.contains(a)) {
            return Err(Error::Config(format!("anchor {a} is not an active layer")));
        }
        let lowest = *anchors.iter().next().expect("non-empty");
        let follower_map = (0..num_layers)
            .map(|l| {
                if !compress_inactive && !active_layers.contains(&l) {
                    return None;
                }
                Some(anchors.range(..=l).next_back().copied().unwrap_or(lowest))
            })
            .collect();
        Ok(Self {
            active_layers,
            anchors,
            follower_map,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.follower_map.len()
    }

    pub fn active_layers(&self) -> &BTreeSet<usize> {
        &self.active_layers
    }

    pub fn anchors(&self) -> &BTreeSet<usize> {
        &self.anchors
    }

    pub fn anchor_of(&self, layer: usize) -> Option<usize> {
        self.follower_map.get(layer).copied().flatten()
    }

    pub fn follower_map(&self) -> &[Option<usize>] {
        &self.follower_map
    }
}

/// What the anchor of one layer group kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub anchor: usize,
    /// Size of the compressible history before selection.
    pub old_size: usize,
    pub recent_size: usize,
    /// Stream positions kept from the history, ascending.
    pub selected_positions: Vec<u64>,
    /// Stream positions kept overall (history selection plus recent tail).
    pub retained_positions: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionRecord {
    /// Newest stream position at the time compression fired.
    pub trigger_position: u64,
    /// Tokens held by the largest compressed layer before compression.
    pub tokens_before: usize,
    pub total_budget: usize,
    pub block_tokens: usize,
    pub anchors: Vec<AnchorRecord>,
}

/// Keeps `follower`'s own rows at `indices` (sorted, deduplicated).
pub fn cascade_apply(indices: &[usize], follower: &LayerCache) -> Result<LayerCache> {
    let mut idx = indices.to_vec();
    idx.sort_unstable();
    idx.dedup();
    if let Some(&i) = idx.iter().find(|&&i| i >= follower.len()) {
        return Err(Error::OutOfBounds {
            index: i,
            len: follower.len(),
        });
    }
    follower.select(&idx)
}

#[derive(Debug, Clone)]
pub struct StreamState {
    persistent: Vec<LayerCache>,
    pending: Vec<LayerCache>,
    budget: BudgetConfig,
    schedule: LayerSchedule,
    config: SelectorConfig,
    selector: SelectorKind,
    baseline: BaselineConfig,
    last_position: Option<u64>,
    last_frame: Option<u64>,
    compression_log: Vec<CompressionRecord>,
}

impl StreamState {
    pub fn new(
        d_k: usize,
        d_v: usize,
        budget: BudgetConfig,
        schedule: LayerSchedule,
        config: SelectorConfig,
    ) -> Result<Self> {
        budget.validate()?;
        config.validate()?;
        let l = schedule.num_layers();
        Ok(Self {
            persistent: vec![LayerCache::empty(d_k, d_v); l],
            pending: vec![LayerCache::empty(d_k, d_v); l],
            budget,
            schedule,
            config,
            selector: SelectorKind::Cords,
            baseline: BaselineConfig::default(),
            last_position: None,
            last_frame: None,
            compression_log: Vec::new(),
        })
    }

    /// Replaces the anchor selector (CoRDS-style selection by default).
    pub fn with_selector(mut self, selector: SelectorKind, baseline: BaselineConfig) -> Self {
        self.selector = selector;
        self.baseline = baseline;
        self
    }

    pub fn persistent(&self) -> &[LayerCache] {
        &self.persistent
    }

    pub fn pending(&self) -> &[LayerCache] {
        &self.pending
    }

    pub fn budget(&self) -> &BudgetConfig {
        &self.budget
    }

    pub fn schedule(&self) -> &LayerSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.config
    }

    pub fn compression_log(&self) -> &[CompressionRecord] {
        &self.compression_log
    }

    /// Persistent plus pending rows of each layer.
    pub fn current(&self) -> Result<Vec<LayerCache>> {
        self.persistent
            .iter()
            .zip(&self.pending)
            .map(|(p, q)| p.concat(q))
            .collect()
    }

    /// Current cache as a snapshot, when all layers hold the same tokens.
    pub fn snapshot(&self) -> Result<CacheSnapshot> {
        CacheSnapshot::new(self.current()?)
    }

    /// Appends a block to the pending buffer.
    pub fn ingest_block(&mut self, block: &CacheSnapshot) -> Result<()> {
        if block.num_layers() != self.schedule.num_layers() {
            return Err(Error::Validation(format!(
                "block has {} layers, stream has {}",
                block.num_layers(),
                self.schedule.num_layers()
            )));
        }
        let (d_k, d_v) = (self.persistent[0].d_k(), self.persistent[0].d_v());
        if block.d_k() != d_k || block.d_v() != d_v {
            return Err(Error::Validation(format!(
                "block dims ({}, {}) differ from stream dims ({d_k}, {d_v})",
                block.d_k(),
                block.d_v()
            )));
        }
        if block.num_tokens() == 0 {
            return Ok(());
        }
        let first_pos = block.positions()[0];
        if let Some(last) = self.last_position.filter(|&last| first_pos <= last) {
            return Err(Error::Validation(format!(
                "block starts at position {first_pos}, stream is already at {last}"
            )));
        }
        let first_frame = block.frame_ids()[0];
        if let Some(last) = self.last_frame.filter(|&last| first_frame < last) {
            return Err(Error::Validation(format!(
                "block starts at frame {first_frame}, stream is already at frame {last}"
            )));
        }
        let appended = self
            .pending
            .iter()
            .zip(block.layers())
            .map(|(p, b)| p.concat(b))
            .collect::<Result<Vec<_>>>()?;
        self.pending = appended;
        self.last_position = block.positions().last().copied();
        self.last_frame = block.frame_ids().last().copied();
        Ok(())
    }

    fn group_len(&self, layer: usize) -> usize {
        self.persistent[layer].len() + self.pending[layer].len()
    }

    /// Start of the recent tail in a cache of `n` rows.
    fn recent_start(&self, cache: &LayerCache) -> usize {
        let n = cache.len();
        let mut start = n.saturating_sub(self.budget.recent_len());
        if self.config.granularity == Granularity::Frame {
            let ids = cache.frame_ids();
            while start > 0 && start < n && ids[start - 1] == ids[start] {
                start += 1;
            }
        }
        start
    }

    /// Compresses when the cache has outgrown `|M| + block_tokens`.
    pub fn maybe_compress(&mut self) -> Result<Option<CompressionRecord>> {
        let m = self.budget.total_budget;
        let anchors: Vec<usize> = self.schedule.anchors().iter().copied().collect();
        let tokens_before = anchors.iter().map(|&a| self.group_len(a)).max().unwrap_or(0);
        if tokens_before <= m + self.budget.block_tokens {
            return Ok(None);
        }

        let full = self.current()?;
        let mut next = full.clone();
        let mut records = Vec::with_capacity(anchors.len());
        for &a in &anchors {
            let cache = &full[a];
            if cache.len() <= m {
                continue;
            }
            let start = self.recent_start(cache);
            let recent_size = cache.len() - start;
            let history_budget = m - recent_size;
            let old = cache.slice(0..start)?;
            let mut keep = if history_budget == 0 {
                Vec::new()
            } else if old.len() <= history_budget {
                (0..old.len()).collect()
            } else {
                select_layer(&old, history_budget, self.selector, &self.config, &self.baseline)?.tokens
            };
            let selected_positions = keep.iter().map(|&i| cache.positions()[i]).collect();
            keep.extend(start..cache.len());

            for (layer, anchor) in self.schedule.follower_map().iter().enumerate() {
                if *anchor != Some(a) {
                    continue;
                }
                if full[layer].positions() != cache.positions() {
                    return Err(Error::Invariant(format!(
                        "layer {layer} drifted from its anchor {a}"
                    )));
                }
                next[layer] = cascade_apply(&keep, &full[layer])?;
            }
            records.push(AnchorRecord {
                anchor: a,
                old_size: old.len(),
                recent_size,
                selected_positions,
                retained_positions: next[a].positions().to_vec(),
            });
        }

        for (layer, cache) in next.iter().enumerate() {
            if self.schedule.anchor_of(layer).is_some() && cache.len() > m {
                return Err(Error::Invariant(format!(
                    "layer {layer} holds {} tokens after compression, budget {m}",
                    cache.len()
                )));
            }
        }
        let (d_k, d_v) = (full[0].d_k(), full[0].d_v());
        self.persistent = next;
        self.pending = vec![LayerCache::empty(d_k, d_v); self.schedule.num_layers()];
        let record = CompressionRecord {
            trigger_position: self.last_position.unwrap_or(0),
            tokens_before,
            total_budget: m,
            block_tokens: self.budget.block_tokens,
            anchors: records,
        };
        self.compression_log.push(record.clone());
        Ok(Some(record))
    }
}

/// Folds `ingest_block` and `maybe_compress` over `blocks`.
pub fn run_stream(
    blocks: &[CacheSnapshot],
    budget: BudgetConfig,
    schedule: LayerSchedule,
    config: SelectorConfig,
) -> Result<StreamState> {
    let first = blocks
        .first()
        .ok_or(Error::EmptyInput("stream needs at least one block"))?;
    let mut state = StreamState::new(first.d_k(), first.d_v(), budget, schedule, config)?;
    for block in blocks {
        state.ingest_block(block)?;
        state.maybe_compress()?;
    }
    Ok(state)
}
