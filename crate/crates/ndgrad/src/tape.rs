//! Dynamic tape: every forward call appends a node; [`Tape::backward`]
//! walks the nodes once in reverse.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, GradError, Result};
use crate::ops::reduce::{self, Reduction};
use crate::ops::{attention, conv, norm, resample};
use crate::{Grid, Real};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias(Var, Var),
    Silu(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var, Reduction),
    Linear(Var, Var, Option<Var>),
    Conv2d(Var, Var, Var),
    TemporalConv(Var, Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        saved: norm::GnSaved<T>,
    },
    Upsample(Var, usize),
    AvgPool(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
    },
    Concat(Var, Var),
    PairwiseDiff(Var),
    EmbedRow(Var, usize),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Grid<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so inputs always precede outputs.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every grad-requiring leaf.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Grid<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Grid<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Grid<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(GradError::Usage("variable belongs to a different tape".into()));
        }
        Ok(&self.nodes[v.idx])
    }

    pub fn value(&self, v: Var) -> Result<&Grid<T>> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    fn push(&mut self, value: Grid<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(GradError::Usage("tape already consumed by backward".into()));
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.idx].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    /// Records an input. Gradients are returned only for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Grid<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Grid<T>) -> Var {
        self.leaf(value, false)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let out = self.node(a)?.value.zip_map(&self.node(b)?.value, f)?;
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Multiplies every element by a scalar constant.
    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.node(x)?.value.map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Adds a scalar constant to every element.
    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.node(x)?.value.map(|v| v + s);
        self.push(out, Op::AddScalar(x), &[x])
    }

    /// `x[..., C] + b[C]`, broadcasting `b` over all leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.node(x)?.value, &self.node(b)?.value);
        let c = bv.len();
        if bv.rank() != 1 || xv.shape().last() != Some(&c) {
            return shape_err(format!(
                "bias {:?} does not match trailing axis of {:?}",
                bv.shape(),
                xv.shape()
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    /// Sigmoid-weighted linear unit `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.map(|v| v / (T::one() + (-v).exp()));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(x)?.value.clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Sum of all elements as a rank-0 grid.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Grid::scalar(self.node(x)?.value.sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Arithmetic mean over `axes`; the remaining axes keep their order.
    /// An empty axis list returns the input unchanged.
    pub fn mean_over_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        if axes.is_empty() {
            self.node(x)?;
            return Ok(x);
        }
        let (out, red) = reduce::mean(&self.node(x)?.value, axes)?;
        self.push(out, Op::Mean(x, red), &[x])
    }

    /// Dense layer over the trailing axis: `x[..., Din] * w[Din, Dout] + b[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let wv = &self.node(w)?.value;
        let din = *xv.shape().last().unwrap_or(&1);
        let [wi, dout] = *wv.shape() else {
            return shape_err(format!("linear weight must be [Din, Dout], got {:?}", wv.shape()));
        };
        if xv.rank() == 0 || wi != din {
            return shape_err(format!("linear: input {:?} vs weight {:?}", xv.shape(), wv.shape()));
        }
        let rows = xv.len() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = &self.node(b)?.value;
            if bv.shape() != [dout] {
                return shape_err(format!("linear bias must be [{dout}], got {:?}", bv.shape()));
            }
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        T::gemm(rows, din, dout, xv.data(), false, wv.data(), false, &mut out, T::one());
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank checked") = dout;
        let out = Grid::from_parts(shape, out);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Linear(x, w, b), &inputs)
    }

    /// Spatial convolution applied to every frame of `x[F,H,W,Cin]` with
    /// `w[k,k,Cin,Cout]`, reflect padding and stride 1.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = conv::conv2d_forward(&self.node(x)?.value, &self.node(w)?.value, &self.node(b)?.value)?;
        self.push(out, Op::Conv2d(x, w, b), &[x, w, b])
    }

    /// Convolution along the frame axis at every spatial location,
    /// `w[k,C,Cout]`, reflect padding over frames.
    pub fn temporal_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = conv::temporal_forward(&self.node(x)?.value, &self.node(w)?.value)?;
        self.push(out, Op::TemporalConv(x, w), &[x, w])
    }

    /// Group normalization over each leading-axis slice; `gamma`/`beta` are `[C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (out, saved) = norm::forward(
            &self.node(x)?.value,
            &self.node(gamma)?.value,
            &self.node(beta)?.value,
            groups,
        )?;
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved,
            },
            &[x, gamma, beta],
        )
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = resample::upsample(&self.node(x)?.value, factor)?;
        self.push(out, Op::Upsample(x, factor), &[x])
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = resample::avg_pool(&self.node(x)?.value, factor)?;
        self.push(out, Op::AvgPool(x, factor), &[x])
    }

    /// Scaled dot-product attention across frames for already-projected
    /// `q`, `k`, `v` of shape `[F,H,W,C]`.
    pub fn frame_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (out, probs) = attention::forward(&self.node(q)?.value, &self.node(k)?.value, &self.node(v)?.value)?;
        self.push(out, Op::Attention { q, k, v, probs }, &[q, k, v])
    }

    /// Temporal self-attention over the frame axis at each spatial location:
    /// projections `wq`, `wk`, `wv`, `wo` are `[C, C]`.
    pub fn temporal_self_attention(&mut self, x: Var, wq: Var, wk: Var, wv: Var, wo: Var) -> Result<Var> {
        let q = self.linear(x, wq, None)?;
        let k = self.linear(x, wk, None)?;
        let v = self.linear(x, wv, None)?;
        let a = self.frame_attention(q, k, v)?;
        self.linear(a, wo, None)
    }

    /// Concatenation along the trailing (channel) axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return shape_err(format!("cannot concatenate {sa:?} and {sb:?} on channels"));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks_exact(ca).zip(bv.data().chunks_exact(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("nonempty") = ca + cb;
        self.push(Grid::from_parts(shape, out), Op::Concat(a, b), &[a, b])
    }

    /// `[F, D] -> [F, F, D]` with entry `(i, j)` equal to `x[i] - x[j]`.
    pub fn pairwise_diff(&mut self, x: Var) -> Result<Var> {
        let out = reduce::pairwise_diff(&self.node(x)?.value)?;
        self.push(out, Op::PairwiseDiff(x), &[x])
    }

    /// Row `row` of a `[R, E]` table as an `[E]` vector. Backward touches only that row.
    pub fn embed_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let tv = &self.node(table)?.value;
        let [r, e] = *tv.shape() else {
            return shape_err(format!("embedding table must be [R, E], got {:?}", tv.shape()));
        };
        if row >= r {
            return shape_err(format!("row {row} out of range for {r} rows"));
        }
        let out = Grid::from_parts(vec![e], tv.data()[row * e..][..e].to_vec());
        self.push(out, Op::EmbedRow(table, row), &[table])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits[N, K])`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = &self.node(logits)?.value;
        let [n, k] = *lv.shape() else {
            return shape_err(format!("logits must be [N, K], got {:?}", lv.shape()));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return shape_err(format!("need {n} labels in 0..{k}"));
        }
        let probs = softmax_rows(lv.data(), k);
        let nll: T = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * k + l].max(T::min_positive_value()).ln())
            .sum();
        let out = Grid::scalar(nll / T::from_usize(n));
        self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape: further forward
    /// calls or a second backward are usage errors.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(GradError::Usage("backward called twice on the same tape".into()));
        }
        let lv = &self.node(loss)?.value;
        if lv.len() != 1 {
            return Err(GradError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let seed = lv.map(|_| T::one());
        self.consumed = true;
        let mut grads: Vec<Option<Grid<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(seed);
        for i in (0..=loss.idx).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gin) in self.input_grads(node, &g) {
                accumulate(&self.nodes, &mut grads, input, gin);
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn val(&self, v: Var) -> &Grid<T> {
        &self.nodes[v.idx].value
    }

    fn input_grads(&self, node: &Node<T>, g: &Grid<T>) -> Vec<(Var, Grid<T>)> {
        let mut out = Vec::new();
        let mut emit = |v: Var, grad: Option<Grid<T>>| {
            if let Some(grad) = grad {
                out.push((v, grad));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, self.needs(*a).then(|| g.clone()));
                emit(*b, self.needs(*b).then(|| g.clone()));
            }
            Op::Sub(a, b) => {
                emit(*a, self.needs(*a).then(|| g.clone()));
                emit(*b, self.needs(*b).then(|| g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                emit(*a, self.needs(*a).then(|| g.zip_map(bv, |x, y| x * y).expect("same shape")));
                emit(*b, self.needs(*b).then(|| g.zip_map(av, |x, y| x * y).expect("same shape")));
            }
            Op::Scale(x, s) => emit(*x, Some(g.map(|v| v * *s))),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.val(*x).shape();
                emit(*x, Some(Grid::from_parts(shape.to_vec(), g.data().to_vec())));
            }
            Op::AddBias(x, b) => {
                emit(*x, self.needs(*x).then(|| g.clone()));
                if self.needs(*b) {
                    let c = self.val(*b).len();
                    let mut gb = vec![T::zero(); c];
                    for row in g.data().chunks_exact(c) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    emit(*b, Some(Grid::from_parts(vec![c], gb)));
                }
            }
            Op::Silu(x) => {
                let gx = g
                    .zip_map(self.val(*x), |gv, xv| {
                        let s = T::one() / (T::one() + (-xv).exp());
                        gv * (s + xv * s * (T::one() - s))
                    })
                    .expect("same shape");
                emit(*x, Some(gx));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                emit(*x, Some(self.val(*x).map(|_| gv)));
            }
            Op::Mean(x, red) => emit(*x, Some(reduce::mean_backward(self.val(*x), red, g))),
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let [din, dout] = [wv.shape()[0], wv.shape()[1]];
                let rows = xv.len() / din;
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); xv.len()];
                    T::gemm(rows, dout, din, g.data(), false, wv.data(), true, &mut gx, T::zero());
                    emit(*x, Some(Grid::from_parts(xv.shape().to_vec(), gx)));
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); din * dout];
                    T::gemm(din, rows, dout, xv.data(), true, g.data(), false, &mut gw, T::zero());
                    emit(*w, Some(Grid::from_parts(vec![din, dout], gw)));
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    let mut gb = vec![T::zero(); dout];
                    for row in g.data().chunks_exact(dout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    emit(b, Some(Grid::from_parts(vec![dout], gb)));
                }
            }
            Op::Conv2d(x, w, b) => {
                let need = [self.needs(*x), self.needs(*w), self.needs(*b)];
                let (gx, gw, gb) = conv::conv2d_backward(self.val(*x), self.val(*w), self.val(*b), g, need);
                emit(*x, gx);
                emit(*w, gw);
                emit(*b, gb);
            }
            Op::TemporalConv(x, w) => {
                let need = [self.needs(*x), self.needs(*w)];
                let (gx, gw) = conv::temporal_backward(self.val(*x), self.val(*w), g, need);
                emit(*x, gx);
                emit(*w, gw);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved,
            } => {
                let need = [self.needs(*x), self.needs(*gamma), self.needs(*beta)];
                let (gx, gg, gb) = norm::backward(
                    self.val(*x),
                    self.val(*gamma),
                    self.val(*beta),
                    *groups,
                    saved,
                    g,
                    need,
                );
                emit(*x, gx);
                emit(*gamma, gg);
                emit(*beta, gb);
            }
            Op::Upsample(x, r) => emit(*x, Some(resample::upsample_backward(self.val(*x), *r, g))),
            Op::AvgPool(x, r) => emit(*x, Some(resample::avg_pool_backward(self.val(*x), *r, g))),
            Op::Attention { q, k, v, probs } => {
                let need = [self.needs(*q), self.needs(*k), self.needs(*v)];
                let (gq, gk, gv) =
                    attention::backward(self.val(*q), self.val(*k), self.val(*v), probs, g, need);
                emit(*q, gq);
                emit(*k, gk);
                emit(*v, gv);
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (
                    *self.val(*a).shape().last().expect("rank >= 1"),
                    *self.val(*b).shape().last().expect("rank >= 1"),
                );
                let mut ga = Vec::with_capacity(self.val(*a).len());
                let mut gb = Vec::with_capacity(self.val(*b).len());
                for row in g.data().chunks_exact(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                emit(*a, Some(Grid::from_parts(self.val(*a).shape().to_vec(), ga)));
                emit(*b, Some(Grid::from_parts(self.val(*b).shape().to_vec(), gb)));
            }
            Op::PairwiseDiff(x) => emit(*x, Some(reduce::pairwise_diff_backward(self.val(*x), g))),
            Op::EmbedRow(table, row) => {
                let tv = self.val(*table);
                let e = tv.shape()[1];
                let mut gt = tv.zeros_like();
                gt.data_mut()[row * e..][..e].copy_from_slice(g.data());
                emit(*table, Some(gt));
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let lv = self.val(*logits);
                let (n, k) = (lv.shape()[0], lv.shape()[1]);
                let scale = g.data()[0] / T::from_usize(n);
                let mut gl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * k + l] -= T::one();
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                emit(*logits, Some(Grid::from_parts(vec![n, k], gl)));
            }
        }
        out
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Grid<T>>], v: Var, g: Grid<T>) {
    if !nodes[v.idx].requires_grad {
        return;
    }
    match &mut grads[v.idx] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Row-wise softmax of a row-major `[N, K]` buffer.
pub fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}
