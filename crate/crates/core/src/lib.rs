//! Training-free chunk-selective attention for long inputs.
//!
//! A pretrained causal transformer only understands positions below its
//! pretraining length `L`. This crate lets it read much longer inputs: each
//! head keeps its history as fixed-size chunks, scores them against the
//! current query through a compact per-chunk key representation, attends only
//! to the best `k` chunks (the first and the most recent always included), and
//! relabels their positions so the window never exceeds `L`.

pub mod analysis;
pub mod chunker;
pub mod config;
pub mod engine;
pub mod error;
pub mod harness;
pub mod kv_cache;
pub(crate) mod linalg;
pub mod model;
pub mod remap;
pub mod repr;
pub mod rotary;
pub mod selector;
pub mod trace;

pub use chunker::ChunkLayout;
pub use config::{EngineConfig, HeadConstraint, ModelConfig, PolicyTag, ResidencyPolicy, SelectionPolicy};
pub use engine::{Engine, EngineOptions};
pub use error::{Error, Result};
pub use kv_cache::{CacheCounters, ChunkStore};
pub use model::HostModel;
pub use repr::ChunkRepr;
pub use rotary::RotaryTable;
pub use selector::SelectionSet;
pub use trace::{Phase, SelectionTrace, TraceRecord};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/chunks.md")]
    mod chunks {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/positions.md")]
    mod positions {}
    #[doc = include_str!("../../../book/src/cache.md")]
    mod cache {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
