//! Single entry point for picking `b` tokens out of one layer, for any
//! selector and either granularity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineConfig};
use crate::error::{Error, Result};
use crate::kvcore::{expand_frames, frame_centroids, Granularity, LayerCache, Matrix, SelectionResult, SelectorConfig};
use crate::selector::{cords_select, d2_select, CandidatePool};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    #[default]
    Cords,
    D2,
    Uniform,
    Random,
    Vnorm,
    Kmeans,
    Shortlist,
}

impl SelectorKind {
    pub const ALL: [SelectorKind; 7] = [
        SelectorKind::Cords,
        SelectorKind::D2,
        SelectorKind::Uniform,
        SelectorKind::Random,
        SelectorKind::Vnorm,
        SelectorKind::Kmeans,
        SelectorKind::Shortlist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectorKind::Cords => "cords",
            SelectorKind::D2 => "d2",
            SelectorKind::Uniform => "uniform",
            SelectorKind::Random => "random",
            SelectorKind::Vnorm => "vnorm",
            SelectorKind::Kmeans => "kmeans",
            SelectorKind::Shortlist => "shortlist",
        }
    }
}

impl fmt::Display for SelectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SelectorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown selector '{s}'")))
    }
}

/// Outcome of selecting inside one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSelection {
    /// Retained token rows, ascending.
    pub tokens: Vec<usize>,
    /// Greedy trace over the candidate pool (tokens or frames), when the
    /// selector produces one.
    pub trace: Option<SelectionResult>,
    /// Selected frame indices in selection order, at frame granularity.
    pub frames: Option<Vec<usize>>,
}

fn run_selector(
    keys: &Matrix,
    values: &Matrix,
    budget: usize,
    kind: SelectorKind,
    config: &SelectorConfig,
    baseline: &BaselineConfig,
) -> Result<(Vec<usize>, Option<SelectionResult>)> {
    Ok(match kind {
        SelectorKind::Cords => {
            let mut pool = CandidatePool::new(keys, values, config.alpha)?;
            let r = cords_select(&mut pool, budget, config)?;
            (r.selected.clone(), Some(r))
        }
        SelectorKind::D2 => {
            let mut pool = CandidatePool::new(keys, values, config.alpha)?;
            let r = d2_select(&mut pool, budget)?;
            (r.selected.clone(), Some(r))
        }
        SelectorKind::Uniform => (baselines::uniform_select(keys.rows(), budget)?, None),
        SelectorKind::Random => (baselines::random_select(keys.rows(), budget, config.rng_seed)?, None),
        SelectorKind::Vnorm => (baselines::value_norm_topk(values, budget)?, None),
        SelectorKind::Kmeans => (baselines::kmeans_representative(keys, values, budget, baseline)?, None),
        SelectorKind::Shortlist => (
            baselines::greedy_shortlist(keys, values, budget, baseline.shortlist_multiplier, config.alpha)?,
            None,
        ),
    })
}

/// Picks at most `budget` rows of `cache`.
///
/// At token granularity exactly `budget` rows are returned. At frame
/// granularity `⌊budget / median frame size⌋` frames are selected over the
/// frame centroids and expanded; tokens of the most recently selected
/// frames are trimmed if the expansion overshoots.
pub fn select_layer(
    cache: &LayerCache,
    budget: usize,
    kind: SelectorKind,
    config: &SelectorConfig,
    baseline: &BaselineConfig,
) -> Result<LayerSelection> {
    config.validate()?;
    match config.granularity {
        Granularity::Token => {
            let (mut tokens, trace) = run_selector(cache.keys(), cache.values(), budget, kind, config, baseline)?;
            tokens.sort_unstable();
            Ok(LayerSelection {
                tokens,
                trace,
                frames: None,
            })
        }
        Granularity::Frame => {
            if budget == 0 || budget > cache.len() {
                return Err(Error::Budget {
                    budget,
                    pool: cache.len(),
                });
            }
            let view = frame_centroids(cache)?;
            let mut sizes: Vec<usize> = view.frame_token_ranges.iter().map(|r| r.len()).collect();
            sizes.sort_unstable();
            let median = sizes[(sizes.len() - 1) / 2];
            let n_frames = (budget / median).min(view.num_frames());
            if n_frames == 0 {
                return Err(Error::Config(format!(
                    "budget {budget} is smaller than one frame of {median} tokens"
                )));
            }
            let (frames, trace) = run_selector(
                &view.centroid_keys,
                &view.centroid_values,
                n_frames,
                kind,
                config,
                baseline,
            )?;
            let mut tokens = Vec::with_capacity(budget);
            for &f in &frames {
                let expanded = expand_frames(&view, &[f])?;
                let room = budget - tokens.len();
                tokens.extend(expanded.into_iter().take(room));
                if tokens.len() == budget {
                    break;
                }
            }
            tokens.sort_unstable();
            Ok(LayerSelection {
                tokens,
                trace,
                frames: Some(frames),
            })
        }
    }
}
