use std::collections::BTreeMap;
use std::collections::HashMap;

use super::kernels::{self, gemm, View};
use super::{Float, Tensor, TensorError};

/// Index of a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Anything that can hand named tensors to [`Graph::forward`].
pub trait InputSource<T> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>>;
}

impl<T> InputSource<T> for BTreeMap<String, Tensor<T>> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name)
    }
}

impl<T> InputSource<T> for HashMap<String, Tensor<T>> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name)
    }
}

impl<T, A: InputSource<T>, B: InputSource<T>> InputSource<T> for (&A, &B) {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.tensor(name).or_else(|| self.1.tensor(name))
    }
}

const ATTN_BLOCK: usize = 64;

#[derive(Debug, Clone)]
enum Op<T> {
    Input { name: String, trainable: bool },
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Silu { a: usize },
    Scale { a: usize, factor: T },
    RowSoftmax { a: usize },
    RmsNorm { x: usize, gain: usize },
    Gather { table: usize, index: Vec<usize> },
    ConcatRows { a: usize, b: usize },
    Reshape { a: usize },
    CausalAttention { q: usize, k: usize, v: usize, heads: usize },
    CrossEntropy { logits: usize, targets: Vec<Option<(usize, T)>> },
    Sum { a: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Silu { .. } => "silu",
            Op::Scale { .. } => "scale",
            Op::RowSoftmax { .. } => "row_softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Gather { .. } => "gather_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Reshape { .. } => "reshape",
            Op::CausalAttention { .. } => "causal_attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    requires_grad: bool,
}

#[derive(Debug)]
enum Saved<T> {
    InvRms(Vec<T>),
    Probs(Vec<T>),
    AttnProbs(Vec<Vec<T>>),
}

/// Topologically ordered tape of primitive operations.
///
/// Nodes are declared first (shapes are checked at declaration), then
/// [`Graph::forward`] evaluates every node in order against named inputs and
/// caches what backward needs. [`Graph::backward`] walks the tape in exact
/// reverse order.
#[derive(Debug)]
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    values: Vec<Option<Vec<T>>>,
    saved: Vec<Option<Saved<T>>>,
    grads: BTreeMap<String, Vec<T>>,
    outputs: Vec<(String, usize)>,
    forwarded: bool,
    matmul_fault: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(mismatch(op, format!("expected a matrix, got shape {other:?}"))),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            saved: Vec::new(),
            grads: BTreeMap::new(),
            outputs: Vec::new(),
            forwarded: false,
            matmul_fault: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Scales the input gradient of every matmul backward by 1.5. Exists only
    /// so gradient checks can be shown to catch a broken backward rule.
    #[doc(hidden)]
    pub fn inject_matmul_backward_fault(&mut self) {
        self.matmul_fault = true;
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        let requires_grad = match &op {
            Op::Input { trainable, .. } => *trainable,
            other => parents(other).iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node { op, shape, requires_grad });
        self.forwarded = false;
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&[usize], TensorError> {
        self.nodes.get(id.0).map(|n| n.shape.as_slice()).ok_or(TensorError::UnknownNode(id.0))
    }

    /// Declares a trainable input; its gradient is reported by backward.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input { name: name.to_string(), trainable: true }, shape.to_vec())
    }

    /// Declares a constant input.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input { name: name.to_string(), trainable: false }, shape.to_vec())
    }

    /// Registers a node whose value [`Graph::forward`] returns under `name`.
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id.0));
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = as_matrix("matmul", self.check(a)?)?;
        let (k2, n) = as_matrix("matmul", self.check(b)?)?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        Ok(self.push(Op::MatMul { a: a.0, b: b.0, trans_b: false }, vec![m, n]))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = as_matrix("matmul_nt", self.check(a)?)?;
        let (n, k2) = as_matrix("matmul_nt", self.check(b)?)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        Ok(self.push(Op::MatMul { a: a.0, b: b.0, trans_b: true }, vec![m, n]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.check(a)?.to_vec();
        let sb = self.check(b)?;
        if sa != sb {
            return Err(mismatch("add", format!("{sa:?} + {sb:?}")));
        }
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, sa))
    }

    /// Adds a `[n]` row vector to every row of an `[m,n]` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = as_matrix("add_row", self.check(a)?)?;
        let sr = self.check(row)?;
        if sr != [n] {
            return Err(mismatch("add_row", format!("[{m},{n}] + row {sr:?}")));
        }
        Ok(self.push(Op::AddRow { a: a.0, row: row.0 }, vec![m, n]))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s = self.check(a)?.to_vec();
        Ok(self.push(Op::Silu { a: a.0 }, s))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId, TensorError> {
        let s = self.check(a)?.to_vec();
        Ok(self.push(Op::Scale { a: a.0, factor }, s))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s = self.check(a)?.to_vec();
        as_matrix("row_softmax", &s)?;
        Ok(self.push(Op::RowSoftmax { a: a.0 }, s))
    }

    /// Row-wise RMS normalization with a learned `[n]` gain and no bias.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = as_matrix("rms_norm", self.check(x)?)?;
        let sg = self.check(gain)?;
        if sg != [n] {
            return Err(mismatch("rms_norm", format!("[{m},{n}] with gain {sg:?}")));
        }
        Ok(self.push(Op::RmsNorm { x: x.0, gain: gain.0 }, vec![m, n]))
    }

    /// Selects rows of `table` (embedding lookup and row permutation).
    pub fn gather_rows(&mut self, table: NodeId, index: Vec<usize>) -> Result<NodeId, TensorError> {
        let (r, c) = as_matrix("gather_rows", self.check(table)?)?;
        if let Some(bad) = index.iter().find(|&&i| i >= r) {
            return Err(mismatch("gather_rows", format!("row {bad} out of range for table of {r} rows")));
        }
        let len = index.len();
        Ok(self.push(Op::Gather { table: table.0, index }, vec![len, c]))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ra, ca) = as_matrix("concat_rows", self.check(a)?)?;
        let (rb, cb) = as_matrix("concat_rows", self.check(b)?)?;
        if ca != cb {
            return Err(mismatch("concat_rows", format!("[{ra},{ca}] over [{rb},{cb}]")));
        }
        Ok(self.push(Op::ConcatRows { a: a.0, b: b.0 }, vec![ra + rb, ca]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let s = self.check(a)?;
        let (from, to): (usize, usize) = (s.iter().product(), shape.iter().product());
        if from != to {
            return Err(mismatch("reshape", format!("{s:?} -> {shape:?}")));
        }
        Ok(self.push(Op::Reshape { a: a.0 }, shape.to_vec()))
    }

    /// Fused causal multi-head attention over `[L,d]` projections.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId, TensorError> {
        let sq = self.check(q)?.to_vec();
        let (l, d) = as_matrix("causal_attention", &sq)?;
        if self.check(k)? != sq.as_slice() || self.check(v)? != sq.as_slice() {
            return Err(mismatch("causal_attention", "q, k, v must share a shape".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(mismatch("causal_attention", format!("width {d} not divisible by {heads} heads")));
        }
        Ok(self.push(Op::CausalAttention { q: q.0, k: k.0, v: v.0, heads }, vec![l, d]))
    }

    /// Weighted sum over rows of `-log softmax(logits)[target]`. Rows with
    /// `None` contribute nothing. Produces a scalar.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<Option<(usize, T)>>) -> Result<NodeId, TensorError> {
        let (m, v) = as_matrix("cross_entropy", self.check(logits)?)?;
        if targets.len() != m {
            return Err(mismatch("cross_entropy", format!("{} targets for {m} rows", targets.len())));
        }
        if let Some((t, _)) = targets.iter().flatten().find(|(t, _)| *t >= v) {
            return Err(mismatch("cross_entropy", format!("target {t} outside vocabulary of {v}")));
        }
        Ok(self.push(Op::CrossEntropy { logits: logits.0, targets }, Vec::new()))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        Ok(self.push(Op::Sum { a: a.0 }, Vec::new()))
    }

    /// Value of a node after the last forward pass.
    pub fn value(&self, id: NodeId) -> Option<&[T]> {
        self.values.get(id.0).and_then(|v| v.as_deref())
    }

    /// Gradient of a trainable input after backward.
    pub fn grad(&self, name: &str) -> Option<&[T]> {
        self.grads.get(name).map(|g| g.as_slice())
    }

    pub fn take_grads(&mut self) -> BTreeMap<String, Vec<T>> {
        std::mem::take(&mut self.grads)
    }

    /// Names of trainable inputs, in declaration order.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input { name, trainable: true } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Evaluates every node. Returns the values of nodes registered with
    /// [`Graph::mark_output`].
    pub fn forward(&mut self, inputs: &impl InputSource<T>) -> Result<BTreeMap<String, Tensor<T>>, TensorError> {
        self.values = Vec::with_capacity(self.nodes.len());
        self.saved = Vec::with_capacity(self.nodes.len());
        self.grads.clear();
        self.forwarded = false;
        for i in 0..self.nodes.len() {
            let (value, saved) = self.eval(i, inputs)?;
            if !value.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite { node: i, op: self.nodes[i].op.name() });
            }
            self.values.push(Some(value));
            self.saved.push(saved);
        }
        self.forwarded = true;
        let mut out = BTreeMap::new();
        for (name, id) in &self.outputs {
            let data = self.values[*id].clone().expect("forward value");
            out.insert(name.clone(), Tensor::new(self.nodes[*id].shape.clone(), data)?);
        }
        Ok(out)
    }

    fn val(&self, i: usize) -> &[T] {
        self.values[i].as_deref().expect("parent evaluated before child")
    }

    fn eval(&self, i: usize, inputs: &impl InputSource<T>) -> Result<(Vec<T>, Option<Saved<T>>), TensorError> {
        let node = &self.nodes[i];
        let shape = &node.shape;
        Ok(match &node.op {
            Op::Input { name, .. } => {
                let t = inputs.tensor(name).ok_or_else(|| TensorError::MissingInput(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(mismatch("input", format!("`{name}` declared {shape:?}, got {:?}", t.shape())));
                }
                (t.data().to_vec(), None)
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = shape[1];
                (kernels::matmul(self.val(*a), self.val(*b), m, k, n, *trans_b), None)
            }
            Op::Add { a, b } => (self.val(*a).iter().zip(self.val(*b)).map(|(&x, &y)| x + y).collect(), None),
            Op::AddRow { a, row } => {
                let n = shape[1];
                let r = self.val(*row);
                (self.val(*a).iter().enumerate().map(|(j, &x)| x + r[j % n]).collect(), None)
            }
            Op::Silu { a } => (self.val(*a).iter().map(|&x| kernels::silu(x)).collect(), None),
            Op::Scale { a, factor } => (self.val(*a).iter().map(|&x| x * *factor).collect(), None),
            Op::RowSoftmax { a } => {
                let n = shape[1];
                let mut out = self.val(*a).to_vec();
                for row in out.chunks_mut(n.max(1)) {
                    kernels::softmax_prefix(row, n);
                }
                (out, None)
            }
            Op::RmsNorm { x, gain } => {
                let (out, inv) = kernels::rms_norm(self.val(*x), self.val(*gain), shape[1]);
                (out, Some(Saved::InvRms(inv)))
            }
            Op::Gather { table, index } => {
                let c = shape[1];
                let t = self.val(*table);
                let mut out = Vec::with_capacity(index.len() * c);
                for &r in index {
                    out.extend_from_slice(&t[r * c..(r + 1) * c]);
                }
                (out, None)
            }
            Op::ConcatRows { a, b } => {
                let mut out = self.val(*a).to_vec();
                out.extend_from_slice(self.val(*b));
                (out, None)
            }
            Op::Reshape { a } => (self.val(*a).to_vec(), None),
            Op::CausalAttention { q, k, v, heads } => {
                let (out, probs) = attention_forward(self.val(*q), self.val(*k), self.val(*v), shape[0], shape[1], *heads);
                (out, Some(Saved::AttnProbs(probs)))
            }
            Op::CrossEntropy { logits, targets } => {
                let v = self.nodes[*logits].shape[1];
                let x = self.val(*logits);
                let mut probs = vec![T::zero(); x.len()];
                let mut total = T::zero();
                for (r, target) in targets.iter().enumerate() {
                    let Some((t, w)) = target else { continue };
                    let row = &mut probs[r * v..(r + 1) * v];
                    row.copy_from_slice(&x[r * v..(r + 1) * v]);
                    kernels::softmax_prefix(row, v);
                    total += -*w * kernels::log_softmax_at(&x[r * v..(r + 1) * v], *t);
                }
                (vec![total], Some(Saved::Probs(probs)))
            }
            Op::Sum { a } => (vec![self.val(*a).iter().copied().sum()], None),
        })
    }

    /// Backpropagates from a scalar node, filling gradients of all trainable
    /// inputs (see [`Graph::grad`]). Intermediate gradients are dropped as
    /// soon as they have been propagated.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if !self.forwarded {
            return Err(TensorError::BackwardBeforeForward);
        }
        let shape = self.check(loss)?.to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        self.grads.clear();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], target: usize, delta: Vec<T>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let shape = self.nodes[i].shape.clone();
        match &self.nodes[i].op {
            Op::Input { name, trainable } => {
                if *trainable {
                    let name = name.clone();
                    match self.grads.get_mut(&name) {
                        // the same input declared twice accumulates
                        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, d)| *e += d),
                        None => {
                            self.grads.insert(name, g);
                        }
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = shape[1];
                let (av, bv) = (self.val(a), self.val(b));
                let gv = View::row_major(m, n);
                if self.nodes[a].requires_grad {
                    // dA = dC * B^T  (or dC * B when B was transposed)
                    let b_t = if trans_b { View::row_major(n, k) } else { View::row_major(k, n).t() };
                    let mut da = vec![T::zero(); m * k];
                    let alpha = if self.matmul_fault { T::of(1.5) } else { T::one() };
                    gemm(alpha, &g, gv, bv, b_t, T::zero(), &mut da, View::row_major(m, k));
                    self.accumulate(grads, a, da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![T::zero(); k * n];
                    if trans_b {
                        // dB[n,k] = dC^T * A
                        gemm(T::one(), &g, gv.t(), av, View::row_major(m, k), T::zero(), &mut db, View::row_major(n, k));
                    } else {
                        gemm(T::one(), av, View::row_major(m, k).t(), &g, gv, T::zero(), &mut db, View::row_major(k, n));
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g);
            }
            Op::AddRow { a, row } => {
                let (a, row) = (*a, *row);
                let n = shape[1];
                let mut dr = vec![T::zero(); n];
                for (j, &v) in g.iter().enumerate() {
                    dr[j % n] += v;
                }
                self.accumulate(grads, a, g);
                self.accumulate(grads, row, dr);
            }
            Op::Silu { a } => {
                let a = *a;
                let d = self.val(a).iter().zip(&g).map(|(&x, &gy)| gy * kernels::silu_grad(x)).collect();
                self.accumulate(grads, a, d);
            }
            Op::Scale { a, factor } => {
                let (a, f) = (*a, *factor);
                self.accumulate(grads, a, g.iter().map(|&v| v * f).collect());
            }
            Op::RowSoftmax { a } => {
                let a = *a;
                let n = shape[1];
                let y = self.values[i].as_deref().expect("softmax value");
                let mut d = vec![T::zero(); y.len()];
                for r in 0..shape[0] {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        d[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::RmsNorm { x, gain } => {
                let (x, gain) = (*x, *gain);
                let n = shape[1];
                let Some(Saved::InvRms(inv)) = &self.saved[i] else { unreachable!("rms_norm saves inverse rms") };
                let (xv, gv) = (self.val(x), self.val(gain));
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); n];
                let nf = T::of(n as f64);
                for r in 0..shape[0] {
                    let ir = inv[r];
                    let xr = &xv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut dot = T::zero();
                    for j in 0..n {
                        dg[j] += gr[j] * xr[j] * ir;
                        dot += gr[j] * gv[j] * xr[j];
                    }
                    let c = ir * ir * ir * dot / nf;
                    for j in 0..n {
                        dx[r * n + j] = ir * gv[j] * gr[j] - c * xr[j];
                    }
                }
                self.accumulate(grads, x, dx);
                self.accumulate(grads, gain, dg);
            }
            Op::Gather { table, index } => {
                let table = *table;
                if self.nodes[table].requires_grad {
                    let c = shape[1];
                    let mut dt = vec![T::zero(); self.nodes[table].shape.iter().product()];
                    for (k, &r) in index.iter().enumerate() {
                        for j in 0..c {
                            dt[r * c + j] += g[k * c + j];
                        }
                    }
                    self.accumulate(grads, table, dt);
                }
            }
            Op::ConcatRows { a, b } => {
                let (a, b) = (*a, *b);
                let split: usize = self.nodes[a].shape.iter().product();
                let mut ga = g;
                let gb = ga.split_off(split);
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::Reshape { a } => {
                let a = *a;
                self.accumulate(grads, a, g);
            }
            Op::CausalAttention { q, k, v, heads } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let Some(Saved::AttnProbs(probs)) = &self.saved[i] else { unreachable!("attention saves probabilities") };
                let (dq, dk, dv) = attention_backward(self.val(q), self.val(k), self.val(v), probs, &g, shape[0], shape[1], heads);
                self.accumulate(grads, q, dq);
                self.accumulate(grads, k, dk);
                self.accumulate(grads, v, dv);
            }
            Op::CrossEntropy { logits, targets } => {
                let logits = *logits;
                let v = self.nodes[logits].shape[1];
                let Some(Saved::Probs(p)) = &self.saved[i] else { unreachable!("cross entropy saves probabilities") };
                let scale = g[0];
                let mut d = vec![T::zero(); p.len()];
                for (r, target) in targets.iter().enumerate() {
                    let Some((t, w)) = target else { continue };
                    let ws = *w * scale;
                    for j in 0..v {
                        d[r * v + j] = ws * p[r * v + j];
                    }
                    d[r * v + t] -= ws;
                }
                self.accumulate(grads, logits, d);
            }
            Op::Sum { a } => {
                let a = *a;
                let n = self.nodes[a].shape.iter().product();
                self.accumulate(grads, a, vec![g[0]; n]);
            }
        }
    }
}

fn parents<T>(op: &Op<T>) -> Vec<usize> {
    match op {
        Op::Input { .. } => vec![],
        Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::ConcatRows { a, b } => vec![*a, *b],
        Op::AddRow { a, row } => vec![*a, *row],
        Op::Silu { a } | Op::Scale { a, .. } | Op::RowSoftmax { a } | Op::Reshape { a } | Op::Sum { a } => vec![*a],
        Op::RmsNorm { x, gain } => vec![*x, *gain],
        Op::Gather { table, .. } => vec![*table],
        Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

/// Row blocks of the causal attention: `(r0, r1)` attends to keys `0..r1`.
fn attn_blocks(l: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..l).step_by(ATTN_BLOCK).map(move |r0| (r0, (r0 + ATTN_BLOCK).min(l)))
}

fn attention_forward<T: Float>(q: &[T], k: &[T], v: &[T], l: usize, d: usize, heads: usize) -> (Vec<T>, Vec<Vec<T>>) {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let full = View::row_major(l, d);
    let mut out = vec![T::zero(); l * d];
    let mut saved = Vec::new();
    for h in 0..heads {
        for (r0, r1) in attn_blocks(l) {
            let (nb, nk) = (r1 - r0, r1);
            let mut p = vec![T::zero(); nb * nk];
            gemm(scale, q, full.sub(r0, h * dh, nb, dh), k, full.sub(0, h * dh, nk, dh).t(), T::zero(), &mut p, View::row_major(nb, nk));
            for ii in 0..nb {
                kernels::softmax_prefix(&mut p[ii * nk..(ii + 1) * nk], r0 + ii + 1);
            }
            gemm(T::one(), &p, View::row_major(nb, nk), v, full.sub(0, h * dh, nk, dh), T::zero(), &mut out, full.sub(r0, h * dh, nb, dh));
            saved.push(p);
        }
    }
    (out, saved)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[Vec<T>],
    dout: &[T],
    l: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let full = View::row_major(l, d);
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); l * d], vec![T::zero(); l * d], vec![T::zero(); l * d]);
    let mut blocks = probs.iter();
    for h in 0..heads {
        for (r0, r1) in attn_blocks(l) {
            let (nb, nk) = (r1 - r0, r1);
            let p = blocks.next().expect("one saved block per head and row block");
            let pv = View::row_major(nb, nk);
            let dov = full.sub(r0, h * dh, nb, dh);
            // dV += P^T dO
            gemm(T::one(), p, pv.t(), dout, dov, T::one(), &mut dv, full.sub(0, h * dh, nk, dh));
            // dP = dO V^T
            let mut ds = vec![T::zero(); nb * nk];
            gemm(T::one(), dout, dov, v, full.sub(0, h * dh, nk, dh).t(), T::zero(), &mut ds, pv);
            for ii in 0..nb {
                let valid = r0 + ii + 1;
                let pr = &p[ii * nk..ii * nk + valid];
                let dr = &mut ds[ii * nk..ii * nk + valid];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &pj) in dr.iter_mut().zip(pr) {
                    *x = pj * (*x - dot) * scale;
                }
                for x in ds[ii * nk + valid..(ii + 1) * nk].iter_mut() {
                    *x = T::zero();
                }
            }
            // dQ = dS K ; dK += dS^T Q
            gemm(T::one(), &ds, pv, k, full.sub(0, h * dh, nk, dh), T::one(), &mut dq, full.sub(r0, h * dh, nb, dh));
            gemm(T::one(), &ds, pv.t(), q, full.sub(r0, h * dh, nb, dh), T::one(), &mut dk, full.sub(0, h * dh, nk, dh));
        }
    }
    (dq, dk, dv)
}
