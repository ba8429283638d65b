use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde::{Deserialize, Serialize};
use streamdial::data::read_jsonl;
use streamdial::eval::{run_ablation, train_tokens, AblationEntry, Check};
use streamdial::infer::{run_stream, run_stream_concurrent, InferenceConfig, SkipPolicy};
use streamdial::model::{load_checkpoint, Checkpoint, ModelParams, Vocabulary};
use streamdial::tensor::Float;
use streamdial::train::Scheme;

use crate::run::{load_config, require_file, usage, Precision, RunDir};
use crate::stream::pick_sample;
use crate::Global;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchRunConfig {
    /// Seeds the untrained baseline.
    pub seed: u64,
    pub precision: Precision,
    /// Held-out samples (JSONL).
    pub data: PathBuf,
    /// Samples the token counts refer to; `data` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub streaming: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_frame: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interleaved: Option<PathBuf>,
    /// Add a freshly initialized model shaped like the first checkpoint.
    pub untrained: bool,
    /// Line of `data` replayed for throughput.
    pub stream_index: usize,
    pub check_concurrent: bool,
    /// decode_ms_per_token values for the FPS curve.
    pub latency_sweep: Vec<f64>,
    pub inference: InferenceConfig,
}

impl Default for BenchRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            data: PathBuf::new(),
            train_data: None,
            streaming: None,
            per_frame: None,
            interleaved: None,
            untrained: false,
            stream_index: 0,
            check_concurrent: false,
            latency_sweep: Vec::new(),
            inference: InferenceConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    streaming: Option<PathBuf>,
    #[arg(long)]
    per_frame: Option<PathBuf>,
    #[arg(long)]
    interleaved: Option<PathBuf>,
    /// Include an untrained baseline row.
    #[arg(long)]
    untrained: bool,
    /// Held-out samples (JSONL).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training samples for the token counts.
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    stream_index: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long)]
    decode_ms: Option<f64>,
    #[arg(long)]
    encode_ms: Option<f64>,
    #[arg(long)]
    queue_capacity: Option<usize>,
    /// Check simulated and concurrent clocks agree on every decision.
    #[arg(long)]
    check_concurrent: bool,
    /// Comma-separated decode_ms_per_token values, e.g. 0,10,20,30.
    #[arg(long, value_delimiter = ',')]
    latency_sweep: Option<Vec<f64>>,
}

pub fn run(args: BenchArgs, global: &Global) -> Result<bool> {
    let mut cfg: BenchRunConfig = load_config(args.config.as_deref())?;
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(p) = global.precision {
        cfg.precision = p;
    }
    for (slot, flag) in [
        (&mut cfg.streaming, &args.streaming),
        (&mut cfg.per_frame, &args.per_frame),
        (&mut cfg.interleaved, &args.interleaved),
        (&mut cfg.train_data, &args.train_data),
    ] {
        if flag.is_some() {
            *slot = flag.clone();
        }
    }
    if let Some(d) = &args.data {
        cfg.data = d.clone();
    }
    cfg.untrained |= args.untrained;
    cfg.check_concurrent |= args.check_concurrent;
    if let Some(i) = args.stream_index {
        cfg.stream_index = i;
    }
    if let Some(v) = &args.latency_sweep {
        cfg.latency_sweep = v.clone();
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
    cfg.inference.validate()?;
    require_file(&cfg.data, "evaluation data")?;
    if let Some(p) = &cfg.train_data {
        require_file(p, "training data")?;
    }
    let named = [(Scheme::Streaming, &cfg.streaming), (Scheme::PerFrame, &cfg.per_frame), (Scheme::Interleaved, &cfg.interleaved)];
    if named.iter().all(|(_, p)| p.is_none()) {
        return Err(usage("bench needs at least one of --streaming, --per-frame, --interleaved"));
    }
    for (s, p) in &named {
        if let Some(p) = p {
            require_file(p, &format!("{s} checkpoint"))?;
        }
    }
    match cfg.precision {
        Precision::F32 => bench::<f32>(&cfg, &args, global),
        Precision::F64 => bench::<f64>(&cfg, &args, global),
    }
}

fn bench<T: Float>(cfg: &BenchRunConfig, args: &BenchArgs, global: &Global) -> Result<bool> {
    let mut models: Vec<(String, Scheme, ModelParams<T>)> = Vec::new();
    let mut vocab: Option<Vocabulary> = None;
    for (scheme, path) in [(Scheme::Streaming, &cfg.streaming), (Scheme::PerFrame, &cfg.per_frame), (Scheme::Interleaved, &cfg.interleaved)] {
        let Some(path) = path else { continue };
        let ckpt: Checkpoint<T> = load_checkpoint(path)?;
        match &vocab {
            Some(v) if *v != ckpt.vocab => return Err(usage(format!("{} uses a different vocabulary", path.display()))),
            _ => vocab = Some(ckpt.vocab),
        }
        models.push((scheme.name().to_string(), scheme, ckpt.params));
    }
    let vocab = vocab.expect("at least one checkpoint");
    if cfg.untrained {
        let shape = models[0].2.config().clone();
        models.push(("untrained".into(), Scheme::Streaming, ModelParams::init(&shape, cfg.seed)?));
    }
    let samples = read_jsonl(&cfg.data)?;
    let token_source = match &cfg.train_data {
        Some(p) => read_jsonl(p)?,
        None => samples.clone(),
    };
    let stream = pick_sample(&cfg.data, cfg.stream_index)?;
    let out = RunDir::create(args.out.as_deref(), &global.output_root, "bench", cfg.seed)?;
    out.snapshot(cfg)?;

    let mut entries = Vec::new();
    for (label, scheme, params) in &models {
        let tokens = if label == "untrained" {
            0
        } else {
            train_tokens(&token_source, &vocab, params.config().tokens_per_frame, *scheme)?
        };
        entries.push(AblationEntry { label: label.clone(), scheme: *scheme, model: params, train_tokens: tokens });
    }
    eprintln!("evaluating {} models on {} samples", entries.len(), samples.len());
    let table = run_ablation(&entries, &vocab, &samples, &stream, &cfg.inference)?;
    table.write(&out.path)?;
    print!("{}", table.to_markdown());
    let mut checks = table.ordering_checks();

    if cfg.check_concurrent {
        let exact = InferenceConfig {
            encode_ms_per_frame: 0.0,
            decode_ms_per_token: 0.0,
            skip_policy: SkipPolicy::Block,
            ..cfg.inference.clone()
        };
        for e in &entries {
            let sim = run_stream(e.model, &vocab, &stream, e.scheme, &exact)?;
            let conc = run_stream_concurrent(e.model, &vocab, &stream, e.scheme, &exact, 0.0)?;
            let (a, b) = (sim.decisions(), conc.decisions());
            let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len());
            checks.push(Check {
                name: format!("concurrent_equivalence_{}", e.label),
                passed: differing == 0,
                detail: format!("{differing} of {} decisions differ", a.len()),
            });
        }
    }

    if !cfg.latency_sweep.is_empty() {
        let mut csv = String::from("method,decode_ms_per_token,input_fps,processed_fps,frames_skipped,peak_cache_tokens\n");
        for &ms in &cfg.latency_sweep {
            let c = InferenceConfig { decode_ms_per_token: ms, ..cfg.inference.clone() };
            c.validate()?;
            for e in &entries {
                let s = run_stream(e.model, &vocab, &stream, e.scheme, &c)?.summary;
                csv += &format!(
                    "{},{ms},{},{:.6},{},{}\n",
                    e.label, s.input_fps, s.processed_fps, s.frames_skipped, s.peak_cache_tokens
                );
            }
        }
        out.write("latency_sweep.csv", csv)?;
    }

    out.write_json("checks.json", &checks)?;
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{}", out.path.display());
    Ok(checks.iter().all(|c| c.passed))
}
