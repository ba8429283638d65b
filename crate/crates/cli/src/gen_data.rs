use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde::{Deserialize, Serialize};
use streamdial::data::{generate_dataset, write_jsonl, DataConfig, Source};

use crate::run::{load_config, sha256_file, usage, RunDir};
use crate::Global;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub seed: u64,
    /// Share of samples held out for validation.
    pub val_fraction: f64,
    pub data: DataConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self { seed: 0, val_fraction: 0.1, data: DataConfig::default() }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (must not exist); defaults to a timestamped run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    num_samples: Option<usize>,
    #[arg(long)]
    num_frames: Option<usize>,
    #[arg(long, value_parser = ["narration", "dialogue"])]
    source: Option<String>,
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Serialize)]
struct Split {
    file: &'static str,
    count: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    source: Source,
    num_frames: usize,
    val_fraction: f64,
    train: Split,
    val: Split,
}

pub fn resolve(args: &GenDataArgs, global: &Global) -> Result<GenDataConfig> {
    let mut cfg: GenDataConfig = load_config(args.config.as_deref())?;
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.num_samples {
        cfg.data.num_samples = n;
    }
    if let Some(n) = args.num_frames {
        cfg.data.world.num_frames = n;
    }
    if let Some(s) = &args.source {
        cfg.data.source = if s == "dialogue" { Source::Dialogue } else { Source::Narration };
    }
    if let Some(v) = args.val_fraction {
        cfg.val_fraction = v;
    }
    if !(0.0..=1.0).contains(&cfg.val_fraction) {
        return Err(usage(format!("val_fraction must lie in [0, 1], got {}", cfg.val_fraction)));
    }
    cfg.data.validate()?;
    Ok(cfg)
}

pub fn run(args: GenDataArgs, global: &Global) -> Result<()> {
    let cfg = resolve(&args, global)?;
    let dir = RunDir::create(args.out.as_deref(), &global.output_root, "gen-data", cfg.seed)?;
    dir.snapshot(&cfg)?;
    let samples = generate_dataset(&cfg.data, cfg.seed)?;
    let n_val = (cfg.val_fraction * samples.len() as f64).round() as usize;
    if n_val == 0 {
        eprintln!("warning: validation split is empty (val_fraction = {})", cfg.val_fraction);
    }
    let (train, val) = samples.split_at(samples.len() - n_val);
    let split = |file: &'static str, part: &[_]| -> Result<Split> {
        let p = dir.file(file);
        write_jsonl(part, &p)?;
        Ok(Split { file, count: part.len(), sha256: sha256_file(&p)? })
    };
    let manifest = Manifest {
        seed: cfg.seed,
        source: cfg.data.source,
        num_frames: cfg.data.world.num_frames,
        val_fraction: cfg.val_fraction,
        train: split("train.jsonl", train)?,
        val: split("val.jsonl", val)?,
    };
    dir.write_json("manifest.json", &manifest)?;
    println!("train: {} samples, val: {} samples", manifest.train.count, manifest.val.count);
    println!("{}", dir.path.display());
    Ok(())
}
