use std::fmt;
use std::sync::Arc;

use super::vocab::FRAME;
use super::{StreamItem, StreamModel};
use crate::error::{Error, Result};

type Rule = dyn Fn(&[u32]) -> Vec<f64> + Send + Sync;

/// A model whose logits are a fixed function of the token history (frame
/// slots appear as [`FRAME`]). Used to build fixtures with known outputs.
#[derive(Clone)]
pub struct ScriptedModel {
    vocab_size: usize,
    tokens_per_frame: usize,
    max_context: usize,
    rule: Arc<Rule>,
}

impl fmt::Debug for ScriptedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedModel")
            .field("vocab_size", &self.vocab_size)
            .field("tokens_per_frame", &self.tokens_per_frame)
            .field("max_context", &self.max_context)
            .finish_non_exhaustive()
    }
}

impl ScriptedModel {
    /// `rule(history)` gives the logits at the last position of `history`.
    pub fn new(
        vocab_size: usize,
        tokens_per_frame: usize,
        max_context: usize,
        rule: impl Fn(&[u32]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { vocab_size, tokens_per_frame, max_context, rule: Arc::new(rule) }
    }

    /// Same logits everywhere.
    pub fn constant(vocab_size: usize, tokens_per_frame: usize, max_context: usize, logits: Vec<f64>) -> Self {
        Self::new(vocab_size, tokens_per_frame, max_context, move |_| logits.clone())
    }

    /// Frames seen in `history`.
    pub fn frames_in(history: &[u32], tokens_per_frame: usize) -> usize {
        history.iter().filter(|&&t| t == FRAME).count() / tokens_per_frame
    }
}

/// Logits putting probability `p` on `id` and spreading the rest evenly.
pub fn peaked(vocab_size: usize, id: u32, p: f64) -> Vec<f64> {
    let rest = (1.0 - p) / (vocab_size - 1) as f64;
    (0..vocab_size).map(|i| if i == id as usize { p.ln() } else { rest.ln() }).collect()
}

impl StreamModel for ScriptedModel {
    type Cache = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    fn max_context(&self) -> usize {
        self.max_context
    }

    fn new_cache(&self) -> Vec<u32> {
        Vec::new()
    }

    fn cache_len(&self, cache: &Vec<u32>) -> usize {
        cache.len()
    }

    fn step(&self, cache: &mut Vec<u32>, items: &[StreamItem<'_>]) -> Result<Vec<f64>> {
        let width: usize = items.iter().map(|i| i.width(self.tokens_per_frame)).sum();
        if cache.len() + width > self.max_context {
            return Err(Error::ContextOverflow { needed: cache.len() + width, max: self.max_context });
        }
        let mut out = Vec::with_capacity(width * self.vocab_size);
        for item in items {
            let ids = match *item {
                StreamItem::Token(t) => vec![t],
                StreamItem::Frame(_) => vec![FRAME; self.tokens_per_frame],
            };
            for id in ids {
                if id as usize >= self.vocab_size {
                    return Err(Error::UnknownToken(format!("id {id}")));
                }
                cache.push(id);
                let row = (self.rule)(cache);
                if row.len() != self.vocab_size {
                    return Err(Error::Config(format!("scripted rule returned {} logits", row.len())));
                }
                out.extend(row);
            }
        }
        Ok(out)
    }
}
