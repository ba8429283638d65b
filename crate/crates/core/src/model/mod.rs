//! Causal decoder-only transformer over interleaved text tokens and frame
//! slots, with an incremental key/value cache.

mod checkpoint;
mod config;
mod params;
mod scripted;
pub mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use params::{ForwardGraph, KvCache, ModelParams};
pub use scripted::{peaked, ScriptedModel};
pub use vocab::Vocabulary;

use crate::error::Result;

/// One input element: a text token or a frame feature vector that expands to
/// `tokens_per_frame` positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StreamItem<'a> {
    Token(u32),
    Frame(&'a [f32]),
}

impl StreamItem<'_> {
    /// Number of positions this item occupies.
    pub fn width(&self, tokens_per_frame: usize) -> usize {
        match self {
            StreamItem::Token(_) => 1,
            StreamItem::Frame(_) => tokens_per_frame,
        }
    }
}

/// Expanded length of a mixed sequence.
pub fn expanded_len(items: &[StreamItem<'_>], tokens_per_frame: usize) -> usize {
    items.iter().map(|i| i.width(tokens_per_frame)).sum()
}

/// Anything that can be driven incrementally over a stream. Implemented by
/// the transformer and by scripted models in tests.
pub trait StreamModel {
    type Cache: Clone;

    fn vocab_size(&self) -> usize;
    fn tokens_per_frame(&self) -> usize;
    fn max_context(&self) -> usize;
    fn new_cache(&self) -> Self::Cache;
    fn cache_len(&self, cache: &Self::Cache) -> usize;

    /// Appends `items` to the cache and returns row-major logits, one row of
    /// `vocab_size` per expanded position.
    fn step(&self, cache: &mut Self::Cache, items: &[StreamItem<'_>]) -> Result<Vec<f64>>;
}
