use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a stream model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Maximum number of positions (text tokens plus frame slots).
    pub max_context: usize,
    /// Embedding slots each frame occupies.
    pub tokens_per_frame: usize,
    pub frame_feature_dim: usize,
    /// Hidden width of the two-layer frame projector.
    pub projector_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            max_context: 2048,
            tokens_per_frame: 1,
            frame_feature_dim: 16,
            projector_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_context", self.max_context),
            ("tokens_per_frame", self.tokens_per_frame),
            ("frame_feature_dim", self.frame_feature_dim),
            ("projector_hidden", self.projector_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model {name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_context < self.tokens_per_frame {
            return Err(Error::Config("max_context cannot hold a single frame".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every parameter tensor with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, h, c) = (self.vocab_size, self.d_model, self.projector_hidden, self.frame_feature_dim);
        let pd = self.tokens_per_frame * d;
        let mut shapes = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_context, d]),
            ("proj.w1".to_string(), vec![c, h]),
            ("proj.b1".to_string(), vec![h]),
            ("proj.w2".to_string(), vec![h, pd]),
            ("proj.b2".to_string(), vec![pd]),
        ];
        for i in 0..self.n_layers {
            for (name, shape) in [
                ("attn_norm", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("mlp_norm", vec![d]),
                ("w1", vec![d, 4 * d]),
                ("w2", vec![4 * d, d]),
            ] {
                shapes.push((format!("layers.{i}.{name}"), shape));
            }
        }
        shapes.push(("final_norm".to_string(), vec![d]));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}
