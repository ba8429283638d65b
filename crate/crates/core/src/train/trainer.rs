use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::assemble::{assemble, compute_masks, next_tokens, AssembledSequence, LossMask, Scheme, SeqItem};
use super::loss::attach_loss;
use super::optim::{Adam, AdamConfig};
use crate::data::{derive_seed, StreamSample};
use crate::error::{Error, Result};
use crate::model::{ModelParams, StreamItem, Vocabulary};
use crate::tensor::{Float, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Scheme,
    /// Weight of the silence term relative to language modelling.
    pub stream_loss_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            scheme: Scheme::Streaming,
            stream_loss_weight: 1.0,
            learning_rate: 1e-3,
            epochs: 2,
            batch_size: 1,
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            grad_clip: adam.grad_clip,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stream_loss_weight >= 0.0 && self.stream_loss_weight.is_finite()) {
            return Err(Error::Config(format!("stream_loss_weight must be >= 0, got {}", self.stream_loss_weight)));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning_rate and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            grad_clip: self.grad_clip,
        }
    }
}

/// An assembled sample with everything a training step needs.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub seq: AssembledSequence,
    pub mask: LossMask,
    pub next: Vec<Option<u32>>,
    pub features: Vec<Vec<f32>>,
}

impl TrainExample {
    pub fn items(&self) -> Vec<StreamItem<'_>> {
        self.seq
            .items
            .iter()
            .map(|it| match *it {
                SeqItem::Token(t) => StreamItem::Token(t),
                SeqItem::Frame(f) => StreamItem::Frame(&self.features[f]),
            })
            .collect()
    }
}

/// Assembles every sample for `scheme`. Errors name the offending sample.
pub fn prepare(
    samples: &[StreamSample],
    vocab: &Vocabulary,
    tokens_per_frame: usize,
    max_context: usize,
    scheme: Scheme,
) -> Result<Vec<TrainExample>> {
    samples
        .iter()
        .map(|s| {
            let wrap = |e: Error| e.context(format!("sample `{}`", s.id));
            let seq = assemble(s, vocab, tokens_per_frame, scheme, max_context).map_err(wrap)?;
            let mask = compute_masks(&seq);
            let next = next_tokens(&seq);
            Ok(TrainExample { id: s.id.clone(), seq, mask, next, features: s.frame_features().map_err(wrap)? })
        })
        .collect()
}

/// One optimizer step as written to the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lm_loss: f64,
    pub eos_loss: f64,
    pub total: f64,
    pub lr: f64,
    pub tokens: usize,
}

pub const LOG_HEADER: &str = "step,lm_loss,eos_loss,total,lr,tokens";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!("{},{:.8},{:.8},{:.8},{:e},{}", self.step, self.lm_loss, self.eos_loss, self.total, self.lr, self.tokens)
    }
}

pub fn write_log(rows: &[StepLog], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Batches of example indices for one epoch: a seeded shuffle, then pools of
/// eight batches sorted by length so each batch holds similar lengths, then
/// a shuffle of the batch order.
pub fn epoch_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for pool in order.chunks(batch_size * 8) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| (lengths[i], i));
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Optimization state of one run.
pub struct Trainer<T: Float> {
    pub config: TrainConfig,
    pub params: ModelParams<T>,
    pub adam: Adam<T>,
    pub epochs_done: usize,
    stream_eos: u32,
}

impl<T: Float> Trainer<T> {
    pub fn new(config: TrainConfig, params: ModelParams<T>, stream_eos: u32) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam());
        Ok(Self { config, params, adam, epochs_done: 0, stream_eos })
    }

    /// Continues from saved weights and optimizer state.
    pub fn resume(config: TrainConfig, params: ModelParams<T>, adam: Adam<T>, epochs_done: usize, stream_eos: u32) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params, adam, epochs_done, stream_eos })
    }

    /// One optimizer step over `batch`. The loss is normalized by the active
    /// positions of the whole batch.
    pub fn train_step(&mut self, examples: &[TrainExample], batch: &[usize]) -> Result<StepLog> {
        let step = self.adam.steps_taken() + 1;
        let normalizer: usize = batch.iter().map(|&i| examples[i].mask.active()).sum::<usize>().max(1);
        let w = self.config.stream_loss_weight;
        let mut grads: BTreeMap<String, Vec<T>> = BTreeMap::new();
        let (mut lm, mut eos, mut tokens) = (0.0, 0.0, 0);
        let diverged = |detail: String| Error::Divergence { step: step as usize, detail };
        for &i in batch {
            let ex = &examples[i];
            let mut fg = self.params.build_graph(&ex.items())?;
            let nodes = attach_loss(&mut fg.graph, fg.logits, &ex.next, &ex.mask, self.stream_eos, w, normalizer)?;
            match fg.graph.forward(&(&self.params, &fg.inputs)) {
                Err(TensorError::NonFinite { node, op }) => {
                    return Err(diverged(format!("sample `{}`: non-finite output of node {node} ({op})", ex.id)))
                }
                other => other?,
            };
            fg.graph.backward(nodes.total)?;
            lm += fg.graph.value(nodes.lm).expect("evaluated")[0].as_f64();
            eos += fg.graph.value(nodes.eos).expect("evaluated")[0].as_f64();
            tokens += ex.seq.len();
            for (name, g) in fg.graph.take_grads() {
                match grads.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        let (lm, eos) = (lm / normalizer as f64, eos / normalizer as f64);
        let total = lm + w * eos;
        if !total.is_finite() {
            return Err(diverged(format!("loss is {total}")));
        }
        let norm = self.adam.step(&mut self.params, grads)?;
        if !norm.is_finite() {
            return Err(diverged(format!("gradient norm is {norm}")));
        }
        Ok(StepLog { step, lm_loss: lm, eos_loss: eos, total, lr: self.config.learning_rate, tokens })
    }

    /// Runs the next epoch; returns the mean step loss.
    pub fn run_epoch(&mut self, examples: &[TrainExample], on_step: &mut dyn FnMut(&StepLog)) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let lengths: Vec<usize> = examples.iter().map(|e| e.seq.len()).collect();
        let batches = epoch_batches(&lengths, self.config.batch_size, self.config.seed, self.epochs_done);
        let mut sum = 0.0;
        for batch in &batches {
            let log = self.train_step(examples, batch)?;
            sum += log.total;
            on_step(&log);
        }
        self.epochs_done += 1;
        Ok(sum / batches.len() as f64)
    }

    /// Runs epochs until `config.epochs` have been completed. Returns the
    /// mean loss of each epoch run here.
    pub fn run(&mut self, examples: &[TrainExample], on_step: &mut dyn FnMut(&StepLog)) -> Result<Vec<f64>> {
        let mut means = Vec::new();
        while self.epochs_done < self.config.epochs {
            means.push(self.run_epoch(examples, on_step)?);
        }
        Ok(means)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{grammar, DataConfig, WorldConfig};
    use crate::model::ModelConfig;

    fn setup(scheme: Scheme) -> (Vec<TrainExample>, ModelConfig, Vocabulary) {
        let world = WorldConfig { num_frames: 30, min_duration: 4, max_duration: 8, feature_dim: 4, ..Default::default() };
        let data = DataConfig { world, num_samples: 4, ..Default::default() };
        let samples = crate::data::generate_dataset(&data, 1).unwrap();
        let vocab = grammar::vocabulary(false);
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_context: 512,
            tokens_per_frame: 1,
            frame_feature_dim: 4,
            projector_hidden: 8,
        };
        let ex = prepare(&samples, &vocab, 1, cfg.max_context, scheme).unwrap();
        (ex, cfg, vocab)
    }

    #[test]
    fn batches_cover_every_example_once() {
        let lengths = [5, 3, 9, 1, 7, 2, 8];
        let batches = epoch_batches(&lengths, 2, 3, 0);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert_eq!(batches, epoch_batches(&lengths, 2, 3, 0));
        assert_ne!(batches, epoch_batches(&lengths, 2, 3, 1));
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let (ex, cfg, vocab) = setup(Scheme::Streaming);
        let tc = TrainConfig { epochs: 4, batch_size: 2, learning_rate: 3e-3, ..Default::default() };
        let run = || {
            let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
            let mut t = Trainer::new(tc.clone(), params, vocab.stream_eos()).unwrap();
            let mut logs = Vec::new();
            let means = t.run(&ex, &mut |l| logs.push(*l)).unwrap();
            (t.params, logs, means)
        };
        let (p1, l1, means) = run();
        let (p2, l2, _) = run();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
        assert!(means.last().unwrap() < &means[0], "{means:?}");
        assert!(l1.iter().all(|l| (l.total - (l.lm_loss + l.eos_loss)).abs() < 1e-9));
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let (ex, cfg, vocab) = setup(Scheme::PerFrame);
        let tc = TrainConfig { epochs: 2, batch_size: 2, ..Default::default() };
        let mut full = Trainer::new(tc.clone(), ModelParams::<f64>::init(&cfg, 5).unwrap(), vocab.stream_eos()).unwrap();
        full.run(&ex, &mut |_| {}).unwrap();
        let mut first = Trainer::new(TrainConfig { epochs: 1, ..tc.clone() }, ModelParams::<f64>::init(&cfg, 5).unwrap(), vocab.stream_eos()).unwrap();
        first.run(&ex, &mut |_| {}).unwrap();
        let mut second = Trainer::resume(tc, first.params, first.adam, 1, vocab.stream_eos()).unwrap();
        second.run(&ex, &mut |_| {}).unwrap();
        assert_eq!(second.params, full.params);
    }
}
