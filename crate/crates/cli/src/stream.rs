use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde::{Deserialize, Serialize};
use streamdial::data::{read_jsonl, StreamSample};
use streamdial::infer::{run_stream, run_stream_concurrent, ClockMode, InferenceConfig, SkipPolicy};
use streamdial::model::{load_checkpoint, Checkpoint};
use streamdial::tensor::Float;
use streamdial::train::Scheme;

use crate::eval::checkpoint_scheme;
use crate::run::{load_config, require_file, usage, Precision, RunDir};
use crate::Global;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamRunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub checkpoint: PathBuf,
    /// JSONL file holding the stream.
    pub sample: PathBuf,
    /// Line of `sample` to replay.
    pub index: usize,
    pub mode: ClockMode,
    /// Wall-clock seconds per simulated second in concurrent mode.
    pub time_scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    pub inference: InferenceConfig,
}

impl Default for StreamRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            checkpoint: PathBuf::new(),
            sample: PathBuf::new(),
            index: 0,
            mode: ClockMode::Simulated,
            time_scale: 1.0,
            scheme: None,
            inference: InferenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    Simulated,
    Concurrent,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SkipArg {
    DropOldest,
    Block,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// JSONL file holding the stream.
    #[arg(long)]
    sample: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    theta: Option<f64>,
    /// Input frame rate (defaults to the sample's).
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long)]
    decode_ms: Option<f64>,
    #[arg(long)]
    encode_ms: Option<f64>,
    #[arg(long)]
    queue_capacity: Option<usize>,
    #[arg(long, value_enum)]
    skip_policy: Option<SkipArg>,
    #[arg(long)]
    max_response_tokens: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    time_scale: Option<f64>,
}

pub fn pick_sample(path: &std::path::Path, index: usize) -> Result<StreamSample> {
    let mut samples = read_jsonl(path)?;
    if index >= samples.len() {
        return Err(usage(format!("{} has {} samples, index {index} is out of range", path.display(), samples.len())));
    }
    Ok(samples.swap_remove(index))
}

pub fn run(args: StreamArgs, global: &Global) -> Result<()> {
    let mut cfg: StreamRunConfig = load_config(args.config.as_deref())?;
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(p) = global.precision {
        cfg.precision = p;
    }
    if let Some(c) = &args.checkpoint {
        cfg.checkpoint = c.clone();
    }
    if let Some(s) = &args.sample {
        cfg.sample = s.clone();
    }
    if let Some(i) = args.index {
        cfg.index = i;
    }
    if args.scheme.is_some() {
        cfg.scheme = args.scheme;
    }
    let inf = &mut cfg.inference;
    if let Some(t) = args.theta {
        inf.theta = t;
    }
    if args.fps.is_some() {
        inf.fps = args.fps;
    }
    if let Some(d) = args.decode_ms {
        inf.decode_ms_per_token = d;
    }
    if let Some(e) = args.encode_ms {
        inf.encode_ms_per_frame = e;
    }
    if let Some(q) = args.queue_capacity {
        inf.queue_capacity = q;
    }
    if let Some(s) = args.skip_policy {
        inf.skip_policy = match s {
            SkipArg::DropOldest => SkipPolicy::DropOldest,
            SkipArg::Block => SkipPolicy::Block,
        };
    }
    if let Some(m) = args.max_response_tokens {
        inf.max_response_tokens = m;
    }
    if let Some(m) = args.mode {
        cfg.mode = match m {
            ModeArg::Simulated => ClockMode::Simulated,
            ModeArg::Concurrent => ClockMode::Concurrent,
        };
    }
    if let Some(t) = args.time_scale {
        cfg.time_scale = t;
    }
    cfg.inference.validate()?;
    require_file(&cfg.checkpoint, "checkpoint")?;
    require_file(&cfg.sample, "sample file")?;
    match cfg.precision {
        Precision::F32 => stream::<f32>(&cfg, &args, global),
        Precision::F64 => stream::<f64>(&cfg, &args, global),
    }
}

fn stream<T: Float>(cfg: &StreamRunConfig, args: &StreamArgs, global: &Global) -> Result<()> {
    let ckpt: Checkpoint<T> = load_checkpoint(&cfg.checkpoint)?;
    let scheme = match cfg.scheme {
        Some(s) => s,
        None => checkpoint_scheme(&ckpt, &cfg.checkpoint)?,
    };
    let sample = pick_sample(&cfg.sample, cfg.index)?;
    let out = RunDir::create(args.out.as_deref(), &global.output_root, "stream", cfg.seed)?;
    out.snapshot(cfg)?;
    let t = match cfg.mode {
        ClockMode::Simulated => run_stream(&ckpt.params, &ckpt.vocab, &sample, scheme, &cfg.inference)?,
        ClockMode::Concurrent => {
            run_stream_concurrent(&ckpt.params, &ckpt.vocab, &sample, scheme, &cfg.inference, cfg.time_scale)?
        }
    };
    t.save(&out.path)?;
    let s = &t.summary;
    println!(
        "{}: {} frames, {} processed, {} spoken, {} skipped, peak cache {} tokens, {:.3} fps",
        s.sample_id, s.frames, s.processed, s.spoken, s.frames_skipped, s.peak_cache_tokens, s.processed_fps
    );
    println!("{}", out.path.display());
    Ok(())
}
