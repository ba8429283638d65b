use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 3e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, grad_clip: 1.0 }
    }
}

/// Adam with bias correction. Moments are kept per named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut BTreeMap<String, Vec<T>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

const OPT_MAGIC: &[u8; 8] = b"SDIALOPT";
const OPT_VERSION: u32 = 1;

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clips, then applies one update. Returns the unclipped gradient norm.
    pub fn step(&mut self, params: &mut ModelParams<T>, mut grads: BTreeMap<String, Vec<T>>) -> Result<f64> {
        let norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, eps) = (c.learning_rate, c.eps);
        for (name, g) in grads {
            let p = params.get_mut(&name).ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            let (m, v) = self.moments.entry(name).or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * *g;
                *v = b2 * *v + (T::one() - b2) * *g * *g;
                let mhat = m.as_f64() / bc1;
                let vhat = v.as_f64() / bc2;
                *p -= T::of(lr * mhat / (vhat.sqrt() + eps));
            }
        }
        Ok(norm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(OPT_MAGIC);
        out.extend_from_slice(&OPT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.moments.len() as u32).to_le_bytes());
        for (name, (m, v)) in &self.moments {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            for x in m.iter().chain(v) {
                x.as_f64().write_le(&mut out);
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, config: AdamConfig) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |what: &str| Error::CorruptCheckpoint(format!("optimizer state: {what}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| corrupt("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != OPT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4"));
        if version != OPT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: OPT_VERSION });
        }
        let step = u64::from_le_bytes(take(8)?.try_into().expect("8"));
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4"));
        let mut moments = BTreeMap::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| corrupt("bad name"))?;
            let n = u64::from_le_bytes(take(8)?.try_into().expect("8")) as usize;
            let raw = take(n.checked_mul(16).ok_or_else(|| corrupt("bad length"))?)?;
            let vals: Vec<T> = raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect();
            let (m, v) = vals.split_at(n);
            moments.insert(name, (m.to_vec(), v.to_vec()));
        }
        Ok(Self { config, step, moments })
    }
}
