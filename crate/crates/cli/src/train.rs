use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use streamdial::data::{grammar, read_jsonl};
use streamdial::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ModelParams};
use streamdial::tensor::Float;
use streamdial::train::{prepare, write_log, Adam, Scheme, StepLog, TrainConfig, Trainer, LOG_HEADER};

use crate::run::{config_diff, load_config, require_file, sha256_file, usage, Precision, RunDir};
use crate::Global;

/// Model shape; the vocabulary size follows from the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_context: usize,
    pub tokens_per_frame: usize,
    pub frame_feature_dim: usize,
    pub projector_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            max_context: m.max_context,
            tokens_per_frame: m.tokens_per_frame,
            frame_feature_dim: m.frame_feature_dim,
            projector_hidden: m.projector_hidden,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_context: self.max_context,
            tokens_per_frame: self.tokens_per_frame,
            frame_feature_dim: self.frame_feature_dim,
            projector_hidden: self.projector_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    /// Seeds weight initialization.
    pub seed: u64,
    pub precision: Precision,
    /// Training samples (JSONL).
    pub data: PathBuf,
    /// Use the turn-end EOS as the silence token instead of a dedicated id.
    pub shared_stream_eos: bool,
    pub model: ModelSection,
    pub train: TrainConfig,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training samples (JSONL).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    stream_loss_weight: Option<f64>,
    #[arg(long)]
    max_context: Option<usize>,
    /// Continue a previous train run; its config must match apart from epochs.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub steps: u64,
    pub examples: usize,
    pub positions: usize,
    pub epoch_mean_loss: Vec<f64>,
}

fn apply_flags(cfg: &mut TrainRunConfig, args: &TrainArgs, global: &Global) {
    if let Some(s) = global.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(p) = global.precision {
        cfg.precision = p;
    }
    if let Some(d) = &args.data {
        cfg.data = d.clone();
    }
    if let Some(s) = args.scheme {
        cfg.train.scheme = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(w) = args.stream_loss_weight {
        cfg.train.stream_loss_weight = w;
    }
    if let Some(m) = args.max_context {
        cfg.model.max_context = m;
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn run(args: TrainArgs, global: &Global) -> Result<()> {
    let previous: Option<(PathBuf, TrainRunConfig, TrainState)> = match &args.resume {
        None => None,
        Some(dir) => {
            let cfg: TrainRunConfig = read_toml(&dir.join("config.resolved.toml"))?;
            let state_path = dir.join("train_state.json");
            let state: TrainState = serde_json::from_str(
                &std::fs::read_to_string(&state_path).map_err(|e| usage(format!("cannot resume: {}: {e}", state_path.display())))?,
            )?;
            Some((dir.clone(), cfg, state))
        }
    };
    let mut cfg = match (&args.config, &previous) {
        (Some(p), _) => load_config(Some(p))?,
        (None, Some((_, prev, _))) => prev.clone(),
        (None, None) => TrainRunConfig::default(),
    };
    apply_flags(&mut cfg, &args, global);
    if let Some((dir, prev, _)) = &previous {
        let diff = config_diff(prev, &cfg, &["train.epochs"]);
        if !diff.is_empty() {
            return Err(usage(format!(
                "refusing to resume {}: config differs from the original run\n  {}",
                dir.display(),
                diff.join("\n  ")
            )));
        }
    }
    require_file(&cfg.data, "training data")?;
    cfg.train.validate()?;
    match cfg.precision {
        Precision::F32 => train::<f32>(&cfg, &args, global, previous.as_ref()),
        Precision::F64 => train::<f64>(&cfg, &args, global, previous.as_ref()),
    }
}

fn train<T: Float>(
    cfg: &TrainRunConfig,
    args: &TrainArgs,
    global: &Global,
    previous: Option<&(PathBuf, TrainRunConfig, TrainState)>,
) -> Result<()> {
    let vocab = grammar::vocabulary(cfg.shared_stream_eos);
    let model_cfg = cfg.model.with_vocab(vocab.len());
    model_cfg.validate()?;
    let samples = read_jsonl(&cfg.data)?;
    let examples = prepare(&samples, &vocab, model_cfg.tokens_per_frame, model_cfg.max_context, cfg.train.scheme)?;
    let positions = examples.iter().map(|e| e.seq.len()).sum();
    let (mut trainer, mut log_text) = match previous {
        None => {
            let params = ModelParams::<T>::init(&model_cfg, cfg.seed)?;
            (Trainer::new(cfg.train.clone(), params, vocab.stream_eos())?, format!("{LOG_HEADER}\n"))
        }
        Some((dir, _, state)) => {
            let ckpt: Checkpoint<T> = load_checkpoint(&dir.join("checkpoint.sdck"))?;
            let adam = Adam::load(&dir.join("optimizer.bin"), cfg.train.adam())?;
            let log = std::fs::read_to_string(dir.join("train_log.csv")).context("reading previous training log")?;
            (Trainer::resume(cfg.train.clone(), ckpt.params, adam, state.epochs_done, vocab.stream_eos())?, log)
        }
    };
    let out = RunDir::create(args.out.as_deref(), &global.output_root, "train", cfg.seed)?;
    out.snapshot(cfg)?;
    eprintln!(
        "training {} on {} samples ({} positions), {} parameters",
        cfg.train.scheme,
        examples.len(),
        positions,
        trainer.params.param_count()
    );
    let mut logs: Vec<StepLog> = Vec::new();
    let result = trainer.run(&examples, &mut |l| {
        if l.step % 25 == 0 {
            eprintln!("step {:>6}  lm {:.4}  eos {:.4}  total {:.4}", l.step, l.lm_loss, l.eos_loss, l.total);
        }
        logs.push(*l);
    });
    let mut buf = Vec::new();
    write_log(&logs, &mut buf)?;
    let rows = String::from_utf8(buf)?;
    log_text.push_str(rows.strip_prefix(&format!("{LOG_HEADER}\n")).unwrap_or(&rows));
    out.write("train_log.csv", &log_text)?;
    let means = result.context("training failed")?;
    let mut epoch_mean_loss = previous.map(|p| p.2.epoch_mean_loss.clone()).unwrap_or_default();
    epoch_mean_loss.extend(means);
    let meta: BTreeMap<String, String> = [
        ("scheme", cfg.train.scheme.name().to_string()),
        ("seed", cfg.seed.to_string()),
        ("epochs", trainer.epochs_done.to_string()),
        ("data_sha256", sha256_file(&cfg.data)?),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    save_checkpoint(&out.file("checkpoint.sdck"), &Checkpoint { params: trainer.params.clone(), vocab, meta })?;
    trainer.adam.save(&out.file("optimizer.bin"))?;
    let state = TrainState {
        epochs_done: trainer.epochs_done,
        steps: trainer.adam.steps_taken(),
        examples: examples.len(),
        positions,
        epoch_mean_loss,
    };
    out.write_json("train_state.json", &state)?;
    println!("{}", out.path.display());
    Ok(())
}
