use crate::error::{Error, Result};
use crate::tensor::kernels::log_softmax_at;
use crate::tensor::{Float, Graph, NodeId};

use super::assemble::LossMask;

/// Loss split into its two parts. `total = lm + w * eos`; both parts are
/// already divided by `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub lm: f64,
    pub eos: f64,
    pub total: f64,
    /// Positions with an active term.
    pub n: usize,
}

/// Streaming objective on plain logits (`[len, vocab]`, row-major):
/// the mean over active positions of `l_j * -log P_j(next_j)` plus
/// `w * f_j * -log P_j(stream_eos)`. Zero when no position is active.
pub fn live_loss(
    logits: &[f64],
    vocab_size: usize,
    next: &[Option<u32>],
    mask: &LossMask,
    stream_eos: u32,
    w: f64,
) -> Result<LossTerms> {
    let len = next.len();
    if mask.l.len() != len || mask.f.len() != len || logits.len() != len * vocab_size {
        return Err(Error::Config(format!(
            "loss inputs disagree: {} logits rows, {} targets, {}/{} mask entries",
            logits.len() / vocab_size.max(1),
            len,
            mask.l.len(),
            mask.f.len()
        )));
    }
    let (mut lm, mut eos) = (0.0, 0.0);
    for j in 0..len {
        let row = &logits[j * vocab_size..(j + 1) * vocab_size];
        if mask.l[j] {
            let t = next[j].ok_or_else(|| Error::Config(format!("position {j} has an LM term but no next token")))?;
            lm -= log_softmax_at(row, t as usize);
        }
        if mask.f[j] {
            eos -= log_softmax_at(row, stream_eos as usize);
        }
    }
    let n = mask.active();
    if n == 0 {
        return Ok(LossTerms { lm: 0.0, eos: 0.0, total: 0.0, n });
    }
    let (lm, eos) = (lm / n as f64, eos / n as f64);
    Ok(LossTerms { lm, eos, total: lm + w * eos, n })
}

/// Loss nodes added to a forward graph.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    /// Sum of LM negative log-likelihoods, unscaled.
    pub lm: NodeId,
    /// Sum of silence negative log-likelihoods, unscaled.
    pub eos: NodeId,
    /// `(lm + w * eos) / normalizer`; the node to differentiate.
    pub total: NodeId,
}

/// Attaches the streaming objective to `logits`. `normalizer` is the number
/// of active positions across the whole batch the sequence belongs to.
pub fn attach_loss<T: Float>(
    graph: &mut Graph<T>,
    logits: NodeId,
    next: &[Option<u32>],
    mask: &LossMask,
    stream_eos: u32,
    w: f64,
    normalizer: usize,
) -> Result<LossNodes> {
    let lm_targets = (0..next.len())
        .map(|j| if mask.l[j] { next[j].map(|t| (t as usize, T::one())) } else { None })
        .collect();
    let eos_targets = mask.f.iter().map(|&f| f.then_some((stream_eos as usize, T::one()))).collect();
    let lm = graph.cross_entropy(logits, lm_targets)?;
    let eos = graph.cross_entropy(logits, eos_targets)?;
    let weighted = graph.scale(eos, T::of(w))?;
    let sum = graph.add(lm, weighted)?;
    let total = graph.scale(sum, T::of(1.0 / normalizer.max(1) as f64))?;
    Ok(LossNodes { lm, eos, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};
    use std::collections::BTreeMap;

    fn mask(l: &[u8], f: &[u8]) -> LossMask {
        LossMask { l: l.iter().map(|&b| b == 1).collect(), f: f.iter().map(|&b| b == 1).collect() }
    }

    #[test]
    fn no_terms_no_loss() {
        let m = mask(&[0, 0], &[0, 0]);
        let t = live_loss(&[0.3; 8], 4, &[Some(1), None], &m, 2, 0.0).unwrap();
        assert_eq!(t.total, 0.0);
    }

    #[test]
    fn uniform_single_silence_position() {
        let m = mask(&[0], &[1]);
        for w in [0.5, 1.0, 2.0] {
            let t = live_loss(&[0.0; 16], 16, &[None], &m, 2, w).unwrap();
            assert!((t.total - w * 16f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn four_position_hand_example() {
        // vocab 3; rows chosen so log-softmax is easy to write out
        let logits = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 5.0, 5.0, 5.0];
        let next = [Some(1), Some(0), Some(2), None];
        let m = mask(&[1, 0, 1, 0], &[0, 1, 0, 0]);
        let t = live_loss(&logits, 3, &next, &m, 2, 1.5).unwrap();
        let lse = |r: [f64; 3]| r.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        let nll_row0 = lse([0.0, 0.0, 0.0]) - 0.0;
        let eos_row1 = lse([1.0, 0.0, 0.0]) - 0.0;
        let nll_row2 = lse([0.0, 2.0, 0.0]) - 0.0;
        let expected_lm = (nll_row0 + nll_row2) / 3.0;
        let expected_eos = eos_row1 / 3.0;
        assert!((t.lm - expected_lm).abs() < 1e-12);
        assert!((t.eos - expected_eos).abs() < 1e-12);
        assert!((t.total - (expected_lm + 1.5 * expected_eos)).abs() < 1e-6);
        assert_eq!(t.n, 3);
        // hand values: ln 3, ln(e + 2), ln(e^2 + 2)
        assert!((nll_row0 - 3f64.ln()).abs() < 1e-15);
        assert!((eos_row1 - (1f64.exp() + 2.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn graph_loss_matches_reference() {
        let logits = vec![0.2, -0.1, 0.7, 1.1, 0.0, -0.4, 0.3, 0.3, 0.9, -2.0, 0.5, 0.1];
        let next = [Some(1), Some(0), Some(2), None];
        let m = mask(&[1, 0, 1, 0], &[0, 1, 0, 1]);
        let reference = live_loss(&logits, 3, &next, &m, 2, 0.7).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.param("x", &[4, 3]);
        let nodes = attach_loss(&mut g, x, &next, &m, 2, 0.7, m.active()).unwrap();
        let inputs = BTreeMap::from([("x".to_string(), Tensor::new(vec![4, 3], logits).unwrap())]);
        g.forward(&inputs).unwrap();
        assert!((g.value(nodes.total).unwrap()[0] - reference.total).abs() < 1e-12);
        assert!((g.value(nodes.lm).unwrap()[0] / 4.0 - reference.lm).abs() < 1e-12);
    }
}
