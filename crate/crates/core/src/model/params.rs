use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{expanded_len, ModelConfig, StreamItem, StreamModel};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, matmul};
use crate::tensor::{Float, Graph, InputSource, NodeId, Tensor};

const INIT_STD: f64 = 0.02;

/// Named parameter tensors of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Float> {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> InputSource<T> for ModelParams<T> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }
}

/// A differentiable forward pass, ready for loss nodes to be attached.
pub struct ForwardGraph<T: Float> {
    pub graph: Graph<T>,
    /// `[len, vocab_size]` logits.
    pub logits: NodeId,
    /// Non-parameter inputs (frame features) the graph reads.
    pub inputs: BTreeMap<String, Tensor<T>>,
    pub len: usize,
}

/// Per-layer keys and values of every position seen so far. Append-only.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    layers: Vec<(Vec<T>, Vec<T>)>,
    len: usize,
}

impl<T: Float> KvCache<T> {
    pub fn new(n_layers: usize) -> Self {
        Self { layers: vec![(Vec::new(), Vec::new()); n_layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Keys and values of one layer, row-major `[len, d_model]`.
    pub fn layer(&self, i: usize) -> (&[T], &[T]) {
        let (k, v) = &self.layers[i];
        (k, v)
    }
}

fn row<T: Float>(t: &Tensor<T>, r: usize) -> &[T] {
    let c = t.shape()[1];
    &t.data()[r * c..(r + 1) * c]
}

impl<T: Float> ModelParams<T> {
    /// Scaled-normal initialization. Each block's closing projections (`wo`,
    /// `w2`) and all biases start at zero; norm gains start at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let data: Vec<T> = match leaf {
                "wo" | "w2" if name.starts_with("layers.") => vec![T::zero(); n],
                "b1" | "b2" => vec![T::zero(); n],
                "attn_norm" | "mlp_norm" | "final_norm" => vec![T::one(); n],
                _ => (0..n).map(|_| T::of(normal.sample(&mut rng))).collect(),
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config: config.clone(), tensors })
    }

    /// Wraps existing tensors, checking names and shapes against the config.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!("expected {} tensors, got {}", expected.len(), tensors.len())));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => return Err(Error::Config(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "tensor `{name}` has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    fn check_feature(&self, feature: &[f32]) -> Result<()> {
        if feature.len() != self.config.frame_feature_dim {
            return Err(Error::FeatureDim { expected: self.config.frame_feature_dim, got: feature.len() });
        }
        Ok(())
    }

    fn check_items(&self, items: &[StreamItem<'_>], already: usize) -> Result<usize> {
        for item in items {
            match item {
                StreamItem::Token(t) if *t as usize >= self.config.vocab_size => {
                    return Err(Error::Config(format!("token id {t} outside vocabulary of {}", self.config.vocab_size)))
                }
                StreamItem::Frame(f) => self.check_feature(f)?,
                _ => {}
            }
        }
        let needed = already + expanded_len(items, self.config.tokens_per_frame);
        if needed > self.config.max_context {
            return Err(Error::ContextOverflow { needed, max: self.config.max_context });
        }
        Ok(needed - already)
    }

    /// Projects one frame feature to `tokens_per_frame` row-major embeddings.
    pub fn embed_frame(&self, feature: &[f32]) -> Result<Vec<T>> {
        self.check_feature(feature)?;
        let (c, h) = (self.config.frame_feature_dim, self.config.projector_hidden);
        let pd = self.config.tokens_per_frame * self.config.d_model;
        let x: Vec<T> = feature.iter().map(|&v| T::of(v as f64)).collect();
        let mut hid = matmul(&x, self.get("proj.w1").data(), 1, c, h, false);
        for (v, &b) in hid.iter_mut().zip(self.get("proj.b1").data()) {
            *v = kernels::silu(*v + b);
        }
        let mut out = matmul(&hid, self.get("proj.w2").data(), 1, h, pd, false);
        for (v, &b) in out.iter_mut().zip(self.get("proj.b2").data()) {
            *v += b;
        }
        Ok(out)
    }

    /// Builds the differentiable forward pass over a full sequence.
    pub fn build_graph(&self, items: &[StreamItem<'_>]) -> Result<ForwardGraph<T>> {
        let len = self.check_items(items, 0)?;
        let cfg = &self.config;
        let (d, p) = (cfg.d_model, cfg.tokens_per_frame);
        let mut g = Graph::new();
        let param = |g: &mut Graph<T>, name: &str| g.param(name, self.get(name).shape());

        let mut token_ids = Vec::new();
        let mut features = Vec::new();
        // position -> (is_frame, row within its kind)
        let mut order = Vec::with_capacity(len);
        for item in items {
            match item {
                StreamItem::Token(t) => {
                    order.push((false, token_ids.len()));
                    token_ids.push(*t as usize);
                }
                StreamItem::Frame(f) => {
                    let base = features.len() / cfg.frame_feature_dim * p;
                    for s in 0..p {
                        order.push((true, base + s));
                    }
                    features.extend(f.iter().map(|&v| T::of(v as f64)));
                }
            }
        }
        let n_frames = features.len() / cfg.frame_feature_dim;
        let tok_emb = param(&mut g, "tok_emb");
        let text = if token_ids.is_empty() { None } else { Some(g.gather_rows(tok_emb, token_ids.clone())?) };
        let mut inputs = BTreeMap::new();
        let frames = if n_frames == 0 {
            None
        } else {
            let fin = g.input("frames", &[n_frames, cfg.frame_feature_dim]);
            inputs.insert("frames".to_string(), Tensor::new(vec![n_frames, cfg.frame_feature_dim], features)?);
            let (w1, b1) = (param(&mut g, "proj.w1"), param(&mut g, "proj.b1"));
            let (w2, b2) = (param(&mut g, "proj.w2"), param(&mut g, "proj.b2"));
            let h = g.matmul(fin, w1)?;
            let h = g.add_row(h, b1)?;
            let h = g.silu(h)?;
            let o = g.matmul(h, w2)?;
            let o = g.add_row(o, b2)?;
            Some(g.reshape(o, &[n_frames * p, d])?)
        };
        let n_text = token_ids.len();
        let x = match (text, frames) {
            (Some(t), None) => t,
            (None, Some(f)) => f,
            (Some(t), Some(f)) => {
                let both = g.concat_rows(t, f)?;
                let index = order.iter().map(|&(is_frame, r)| if is_frame { n_text + r } else { r }).collect();
                g.gather_rows(both, index)?
            }
            (None, None) => return Err(Error::Config("cannot run a forward pass over an empty sequence".into())),
        };
        let pos_emb = param(&mut g, "pos_emb");
        let pos = g.gather_rows(pos_emb, (0..len).collect())?;
        let mut x = g.add(x, pos)?;
        for i in 0..cfg.n_layers {
            let name = |s: &str| format!("layers.{i}.{s}");
            let attn_norm = param(&mut g, &name("attn_norm"));
            let h = g.rms_norm(x, attn_norm)?;
            let (wq, wk, wv, wo) =
                (param(&mut g, &name("wq")), param(&mut g, &name("wk")), param(&mut g, &name("wv")), param(&mut g, &name("wo")));
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let a = g.causal_attention(q, k, v, cfg.n_heads)?;
            let o = g.matmul(a, wo)?;
            x = g.add(x, o)?;
            let mlp_norm = param(&mut g, &name("mlp_norm"));
            let h = g.rms_norm(x, mlp_norm)?;
            let (w1, w2) = (param(&mut g, &name("w1")), param(&mut g, &name("w2")));
            let u = g.matmul(h, w1)?;
            let u = g.silu(u)?;
            let m = g.matmul(u, w2)?;
            x = g.add(x, m)?;
        }
        let final_norm = param(&mut g, "final_norm");
        let x = g.rms_norm(x, final_norm)?;
        let logits = g.matmul_nt(x, tok_emb)?;
        Ok(ForwardGraph { graph: g, logits, inputs, len })
    }

    /// Logits `[len, vocab_size]` for a full sequence, recomputed from scratch.
    pub fn forward_full(&self, items: &[StreamItem<'_>]) -> Result<Tensor<T>> {
        let mut fg = self.build_graph(items)?;
        fg.graph.forward(&(self, &fg.inputs))?;
        let data = fg.graph.value(fg.logits).expect("logits evaluated").to_vec();
        Ok(Tensor::new(vec![fg.len, self.config.vocab_size], data)?)
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache::new(self.config.n_layers)
    }

    /// Appends `items` to `cache` and returns logits `[m, vocab_size]` for
    /// the `m` new positions. On error the cache is left untouched.
    pub fn forward_step(&self, cache: &mut KvCache<T>, items: &[StreamItem<'_>]) -> Result<Vec<T>> {
        let m = self.check_items(items, cache.len)?;
        if m == 0 {
            return Ok(Vec::new());
        }
        let cfg = &self.config;
        let d = cfg.d_model;
        let tok_emb = self.get("tok_emb");
        let pos_emb = self.get("pos_emb");
        let mut x = Vec::with_capacity(m * d);
        for item in items {
            match item {
                StreamItem::Token(t) => x.extend_from_slice(row(tok_emb, *t as usize)),
                StreamItem::Frame(f) => x.extend(self.embed_frame(f)?),
            }
        }
        for (i, v) in x.iter_mut().enumerate() {
            *v += pos_emb.data()[(cache.len + i / d) * d + i % d];
        }
        let total = cache.len + m;
        for (i, (kc, vc)) in cache.layers.iter_mut().enumerate() {
            let w = |s: &str| self.get(&format!("layers.{i}.{s}")).data();
            let (h, _) = kernels::rms_norm(&x, w("attn_norm"), d);
            let q = matmul(&h, w("wq"), m, d, d, false);
            kc.extend(matmul(&h, w("wk"), m, d, d, false));
            vc.extend(matmul(&h, w("wv"), m, d, d, false));
            let a = kernels::attention_with_offset(&q, kc, vc, m, total, d, cfg.n_heads);
            let o = matmul(&a, w("wo"), m, d, d, false);
            x.iter_mut().zip(&o).for_each(|(x, o)| *x += *o);
            let (h, _) = kernels::rms_norm(&x, w("mlp_norm"), d);
            let mut u = matmul(&h, w("w1"), m, d, 4 * d, false);
            u.iter_mut().for_each(|v| *v = kernels::silu(*v));
            let o = matmul(&u, w("w2"), m, 4 * d, d, false);
            x.iter_mut().zip(&o).for_each(|(x, o)| *x += *o);
        }
        cache.len = total;
        let (h, _) = kernels::rms_norm(&x, self.get("final_norm").data(), d);
        Ok(matmul(&h, tok_emb.data(), m, d, cfg.vocab_size, true))
    }
}

impl<T: Float> StreamModel for ModelParams<T> {
    type Cache = KvCache<T>;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn tokens_per_frame(&self) -> usize {
        self.config.tokens_per_frame
    }

    fn max_context(&self) -> usize {
        self.config.max_context
    }

    fn new_cache(&self) -> KvCache<T> {
        ModelParams::new_cache(self)
    }

    fn cache_len(&self, cache: &KvCache<T>) -> usize {
        cache.len()
    }

    fn step(&self, cache: &mut KvCache<T>, items: &[StreamItem<'_>]) -> Result<Vec<f64>> {
        Ok(self.forward_step(cache, items)?.into_iter().map(Float::as_f64).collect())
    }
}
