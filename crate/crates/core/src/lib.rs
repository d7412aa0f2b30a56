//! Query-agnostic KV-cache compression by coreset selection.
//!
//! The crate consumes pre-computed key/value caches and keeps a
//! budget-bounded, representative subset of them:
//!
//! - [`kvcore`]: cache data model, frame centroids, configuration.
//! - [`selector`]: bicriteria farthest-first selection with an orthogonal
//!   novelty bonus, plus the log-det machinery behind that bonus.
//! - [`baselines`]: reference selectors under identical budgets.
//! - [`policy`]: one entry point dispatching selectors at token or frame
//!   granularity.
//! - [`streaming`]: bounded online cache with an anchor/follower cascade.
//! - [`diagnostics`]: attention error against its bounds, coverage CDFs and
//!   the log-det audit.
//! - [`io`]: the `KVD1` binary cache format, synthetic caches, and result
//!   records.

pub mod baselines;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod kvcore;
pub mod policy;
pub mod selector;
pub mod streaming;

pub use error::{Error, Result};
pub use kvcore::{
    BudgetConfig, CacheSnapshot, FrameView, Granularity, LayerCache, Matrix, OrthMode, SelectionResult,
    SelectorConfig, StepRecord,
};
