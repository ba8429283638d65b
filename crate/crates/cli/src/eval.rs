use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use serde::{Deserialize, Serialize};
use streamdial::data::read_jsonl;
use streamdial::eval::{evaluate_thetas, theta_range, MetricsReport};
use streamdial::model::{load_checkpoint, Checkpoint};
use streamdial::tensor::Float;
use streamdial::train::Scheme;

use crate::run::{load_config, require_file, usage, Precision, RunDir};
use crate::Global;

pub const DEFAULT_THETA: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub theta: f64,
    /// `from:to:step`; replaces `theta` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_sweep: Option<String>,
    /// Evaluation layout; the checkpoint's training scheme when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            checkpoint: PathBuf::new(),
            data: PathBuf::new(),
            theta: DEFAULT_THETA,
            theta_sweep: None,
            scheme: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluation samples (JSONL).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Silence threshold.
    #[arg(long)]
    theta: Option<f64>,
    /// Threshold sweep `from:to:step`, e.g. 0.5:0.8:0.1.
    #[arg(long)]
    theta_sweep: Option<String>,
    #[arg(long)]
    scheme: Option<Scheme>,
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    scheme: Scheme,
    theta: f64,
    reports: &'a [MetricsReport],
}

pub fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let nums: Option<Vec<f64>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
    match nums.as_deref() {
        Some(&[a, b, c]) => theta_range(a, b, c).map_err(|e| usage(e.to_string())),
        _ => Err(usage(format!("theta sweep must look like from:to:step, got `{s}`"))),
    }
}

/// Scheme recorded in a checkpoint's metadata.
pub fn checkpoint_scheme<T: Float>(ckpt: &Checkpoint<T>, path: &Path) -> Result<Scheme> {
    let name = ckpt.meta.get("scheme").ok_or_else(|| usage(format!("{} records no scheme; pass --scheme", path.display())))?;
    Ok(name.parse()?)
}

pub fn run(args: EvalArgs, global: &Global) -> Result<()> {
    let mut cfg: EvalRunConfig = load_config(args.config.as_deref())?;
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(p) = global.precision {
        cfg.precision = p;
    }
    if let Some(c) = &args.checkpoint {
        cfg.checkpoint = c.clone();
    }
    if let Some(d) = &args.data {
        cfg.data = d.clone();
    }
    if let Some(t) = args.theta {
        cfg.theta = t;
    }
    if let Some(s) = &args.theta_sweep {
        cfg.theta_sweep = Some(s.clone());
    }
    if args.scheme.is_some() {
        cfg.scheme = args.scheme;
    }
    require_file(&cfg.checkpoint, "checkpoint")?;
    require_file(&cfg.data, "evaluation data")?;
    match cfg.precision {
        Precision::F32 => eval::<f32>(&cfg, &args, global),
        Precision::F64 => eval::<f64>(&cfg, &args, global),
    }
}

fn eval<T: Float>(cfg: &EvalRunConfig, args: &EvalArgs, global: &Global) -> Result<()> {
    let thetas = match &cfg.theta_sweep {
        Some(s) => parse_sweep(s)?,
        None => {
            streamdial::infer::check_theta(cfg.theta)?;
            vec![cfg.theta]
        }
    };
    let ckpt: Checkpoint<T> = load_checkpoint(&cfg.checkpoint)?;
    let scheme = match cfg.scheme {
        Some(s) => s,
        None => checkpoint_scheme(&ckpt, &cfg.checkpoint)?,
    };
    let samples = read_jsonl(&cfg.data)?;
    let out = RunDir::create(args.out.as_deref(), &global.output_root, "eval", cfg.seed)?;
    out.snapshot(cfg)?;
    let (reports, _) = evaluate_thetas(&ckpt.params, &ckpt.vocab, &samples, scheme, &thetas)?;
    out.write_json("metrics.json", &EvalOutput { scheme, theta: thetas[0], reports: &reports })?;
    let mut csv = String::from("scheme,theta,lm_ppl,lg_match,time_diff_seconds,fluency,n_samples,n_turns\n");
    for r in &reports {
        csv += &format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.scheme, r.theta, r.lm_ppl, r.lg_match, r.time_diff_seconds, r.fluency, r.n_samples, r.n_turns
        );
        println!(
            "{} theta={:.2} ppl={:.4} lg_match={:.4} time_diff={:.4}s fluency={:.4}",
            r.scheme, r.theta, r.lm_ppl, r.lg_match, r.time_diff_seconds, r.fluency
        );
    }
    out.write("metrics.csv", csv)?;
    println!("{}", out.path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parses_inclusive_range() {
        assert_eq!(parse_sweep("0.5:0.8:0.1").unwrap(), vec![0.5, 0.6, 0.7, 0.8]);
        assert!(parse_sweep("0.5:0.8").is_err());
        assert!(parse_sweep("a:b:c").is_err());
        assert!(parse_sweep("0.5:1.5:0.5").is_err());
    }
}
