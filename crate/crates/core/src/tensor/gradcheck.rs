use std::collections::BTreeMap;

use super::{Graph, NodeId, Tensor, TensorError};

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares backward against central differences for every element of every
/// trainable input. Returns the largest relative error seen.
pub fn grad_check(
    graph: &mut Graph<f64>,
    loss: NodeId,
    point: &BTreeMap<String, Tensor<f64>>,
    eps: f64,
) -> Result<f64, TensorError> {
    graph.forward(point)?;
    graph.backward(loss)?;
    let analytic = graph.take_grads();
    let names: Vec<String> = graph.param_names().into_iter().map(str::to_string).collect();
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for name in names {
        let n = probe.get(&name).ok_or_else(|| TensorError::MissingInput(name.clone()))?.numel();
        for i in 0..n {
            let original = probe[&name].data()[i];
            let mut eval_at = |x: f64, probe: &mut BTreeMap<String, Tensor<f64>>| -> Result<f64, TensorError> {
                probe.get_mut(&name).expect("checked above").data_mut()[i] = x;
                graph.forward(&*probe)?;
                Ok(graph.value(loss).expect("loss evaluated")[0])
            };
            let plus = eval_at(original + eps, &mut probe)?;
            let minus = eval_at(original - eps, &mut probe)?;
            eval_at(original, &mut probe)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(&name).map_or(0.0, |g| g[i]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_loss_is_exact() {
        let mut g = Graph::new();
        let x = g.param("x", &[1]);
        let point = BTreeMap::from([("x".to_string(), Tensor::new(vec![1], vec![0.3]).unwrap())]);
        assert!(grad_check(&mut g, x, &point, 1e-5).unwrap() < 1e-10);
    }

    fn two_layer_net(g: &mut Graph<f64>) -> NodeId {
        let x = g.input("x", &[4, 3]);
        let w1 = g.param("w1", &[3, 5]);
        let b1 = g.param("b1", &[5]);
        let w2 = g.param("w2", &[5, 6]);
        let h = g.matmul(x, w1).unwrap();
        let h = g.add_row(h, b1).unwrap();
        let h = g.silu(h).unwrap();
        let o = g.matmul(h, w2).unwrap();
        g.cross_entropy(o, vec![Some((1, 1.0)), None, Some((5, 0.5)), Some((0, 2.0))]).unwrap()
    }

    fn point(seed: u64) -> BTreeMap<String, Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [("x", vec![4, 3]), ("w1", vec![3, 5]), ("b1", vec![5]), ("w2", vec![5, 6])]
            .into_iter()
            .map(|(n, s)| (n.to_string(), random(&mut rng, &s)))
            .collect()
    }

    #[test]
    fn two_layer_net_agrees_with_differences() {
        let mut g = Graph::new();
        let loss = two_layer_net(&mut g);
        assert!(grad_check(&mut g, loss, &point(7), 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn corrupted_matmul_backward_is_detected() {
        let mut g = Graph::new();
        let loss = two_layer_net(&mut g);
        g.inject_matmul_backward_fault();
        assert!(grad_check(&mut g, loss, &point(7), 1e-5).unwrap() > 1e-2);
    }

    #[test]
    fn every_op_agrees_with_differences() {
        let (l, d) = (70, 4);
        let mut g = Graph::new();
        let table = g.param("table", &[6, d]);
        let gain = g.param("gain", &[d]);
        let extra = g.param("extra", &[2, d]);
        let wq = g.param("wq", &[d, d]);
        let rows = g.gather_rows(table, (0..l - 2).map(|i| (i * 5) % 6).collect()).unwrap();
        let rows = g.concat_rows(extra, rows).unwrap();
        let n = g.rms_norm(rows, gain).unwrap();
        let q = g.matmul(n, wq).unwrap();
        let k = g.scale(n, 0.7).unwrap();
        let a = g.causal_attention(q, k, n, 2).unwrap();
        let a = g.add(a, rows).unwrap();
        let s = g.row_softmax(a).unwrap();
        let r = g.reshape(s, &[l * d / 8, 8]).unwrap();
        let logits = g.matmul_nt(r, r).unwrap();
        let targets = (0..l * d / 8).map(|i| if i % 3 == 0 { None } else { Some((i % 7, 0.3)) }).collect();
        let loss = g.cross_entropy(logits, targets).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let point = BTreeMap::from([
            ("table".to_string(), random(&mut rng, &[6, d])),
            ("gain".to_string(), random(&mut rng, &[d])),
            ("extra".to_string(), random(&mut rng, &[2, d])),
            ("wq".to_string(), random(&mut rng, &[d, d])),
        ]);
        assert!(grad_check(&mut g, loss, &point, 1e-5).unwrap() < 1e-4);
    }
}
