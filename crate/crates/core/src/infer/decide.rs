use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::vocab::{FRAME, PAD, STREAM_EOS};

/// Outcome of the per-frame silence check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Silent,
    /// Start a response with this token.
    Speak(u32),
}

pub fn check_theta(theta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Config(format!("threshold {theta} outside [0, 1]")));
    }
    Ok(())
}

/// Numerically stable softmax in f64.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Ids never produced by greedy decoding.
pub fn never_generated(id: u32) -> bool {
    matches!(id, PAD | STREAM_EOS | FRAME)
}

/// Highest-scoring id not excluded; ties go to the lowest id.
pub fn argmax_excluding(scores: &[f64], exclude: impl Fn(u32) -> bool) -> u32 {
    let mut best: Option<(u32, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        let id = i as u32;
        if exclude(id) {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((id, s));
        }
    }
    best.expect("vocabulary has a generatable token").0
}

/// Greedy next token.
pub fn greedy(scores: &[f64]) -> u32 {
    argmax_excluding(scores, never_generated)
}

/// Silent iff `probs[eos] >= theta`; otherwise speak with the most likely
/// other token.
pub fn decide_eos(probs: &[f64], eos: u32, theta: f64) -> Result<Decision> {
    check_theta(theta)?;
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::Unnormalized(sum));
    }
    if probs[eos as usize] >= theta {
        return Ok(Decision::Silent);
    }
    Ok(Decision::Speak(argmax_excluding(probs, |id| id == eos || never_generated(id))))
}
