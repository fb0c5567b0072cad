//! Define-by-run tape with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; `backward` walks
//! the nodes in exact reverse creation order, which is a reverse topological
//! order by construction. All kernels reduce in fixed order, so forward and
//! backward values are bitwise reproducible for identical inputs regardless
//! of thread count.

use rayon::prelude::*;

use crate::tensor::{stable_sum, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Rows below this count run dgemm single-threaded; larger calls split row
/// ranges across the rayon pool (chunk boundaries are fixed, so values do not
/// depend on thread count).
const MATMUL_PAR_ROWS: usize = 256;
const MATMUL_CHUNK: usize = 128;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul { a: usize, b: usize },
    Bmm { a: usize, b: usize, transpose_b: bool },
    AddBias { x: usize, bias: usize },
    Softmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Concat { a: usize, b: usize, axis: usize },
    Transpose2d { x: usize },
    Reshape { x: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    GatherTime { x: usize, idx: Vec<usize> },
    RepeatTime { x: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    /// Recorded in inference mode instead of the real op; backward refuses it.
    NoGrad,
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. Create one per forward pass; parameters enter as leaves.
pub struct Tape {
    nodes: Vec<Node>,
    no_grad: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), no_grad: false }
    }

    /// A tape that records values but no backward information; `backward`
    /// panics on it. Use for inference.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), no_grad: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated for `v` by `backward`, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Drop all accumulated gradients.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input: backward does not propagate into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let op = if self.no_grad && !matches!(op, Op::Leaf) { Op::NoGrad } else { op };
        let needs_grad = needs_grad && !self.no_grad;
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ---- elementwise ----

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        assert_eq!(sa, sb, "{name} shape mismatch: {sa:?} vs {sb:?}");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let value = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::Add(a.0, b.0), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let value = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::Sub(a.0, b.0), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let value = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::Mul(a.0, b.0), needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = map(&self.nodes[a.0].value, |x| -x);
        let needs = self.needs(&[a.0]);
        self.push(value, Op::Neg(a.0), needs)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = map(&self.nodes[a.0].value, |x| s * x);
        let needs = self.needs(&[a.0]);
        self.push(value, Op::Scale(a.0, s), needs)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = map(&self.nodes[a.0].value, |x| x + s);
        let needs = self.needs(&[a.0]);
        self.push(value, Op::AddScalar(a.0), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = map(&self.nodes[a.0].value, gelu_fwd);
        let needs = self.needs(&[a.0]);
        self.push(value, Op::Gelu(a.0), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = map(&self.nodes[a.0].value, sigmoid_fwd);
        let needs = self.needs(&[a.0]);
        self.push(value, Op::Sigmoid(a.0), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = map(&self.nodes[a.0].value, f64::tanh);
        let needs = self.needs(&[a.0]);
        self.push(value, Op::Tanh(a.0), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = map(&self.nodes[a.0].value, f64::exp);
        let needs = self.needs(&[a.0]);
        self.push(value, Op::Exp(a.0), needs)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = map(&self.nodes[a.0].value, f64::ln);
        let needs = self.needs(&[a.0]);
        self.push(value, Op::Log(a.0), needs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp bounds inverted: {lo} > {hi}");
        let value = map(&self.nodes[a.0].value, |x| x.clamp(lo, hi));
        let needs = self.needs(&[a.0]);
        self.push(value, Op::Clamp { x: a.0, lo, hi }, needs)
    }

    // ---- linear algebra ----

    /// 2D matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shape mismatch: {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(
            &mut out,
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
            false,
            false,
        );
        let needs = self.needs(&[a.0, b.0]);
        self.push(Tensor::new(vec![m, n], out), Op::Matmul { a: a.0, b: b.0 }, needs)
    }

    /// Batched product [B,m,k] x [B,k,n] -> [B,m,n]; with `transpose_b` the
    /// second operand is [B,n,k] and used as its per-batch transpose. Inner
    /// accumulation is strictly ascending in k, so padded operands reproduce
    /// unpadded results bit-for-bit where they overlap.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shape mismatch: {sa:?} x {sb:?}");
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b {
            assert_eq!(sb[2], k, "bmm shape mismatch: {sa:?} x {sb:?}^T");
            sb[1]
        } else {
            assert_eq!(sb[1], k, "bmm shape mismatch: {sa:?} x {sb:?}");
            sb[2]
        };
        let a_data = self.nodes[a.0].value.data();
        let b_data = self.nodes[b.0].value.data();
        let mut out = vec![0.0; batch * m * n];
        out.par_chunks_mut(m * n).enumerate().for_each(|(bi, c)| {
            let a_slab = &a_data[bi * m * k..(bi + 1) * m * k];
            let b_slab = &b_data[bi * sb[1] * sb[2]..(bi + 1) * sb[1] * sb[2]];
            naive_mm_acc(c, a_slab, b_slab, m, k, n, false, transpose_b);
        });
        let needs = self.needs(&[a.0, b.0]);
        self.push(
            Tensor::new(vec![batch, m, n], out),
            Op::Bmm { a: a.0, b: b.0, transpose_b },
            needs,
        )
    }

    /// Broadcast-add a [d] bias over the last axis of x.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sb = self.nodes[bias.0].value.shape().to_vec();
        let d = *sx.last().expect("add_bias on rank-0 tensor");
        assert!(sb.len() == 1 && sb[0] == d, "add_bias shape mismatch: {sx:?} + {sb:?}");
        let b_data = self.nodes[bias.0].value.data();
        let mut out = self.nodes[x.0].value.data().to_vec();
        out.par_chunks_mut(d).for_each(|row| {
            for (v, bv) in row.iter_mut().zip(b_data) {
                *v += bv;
            }
        });
        let needs = self.needs(&[x.0, bias.0]);
        self.push(Tensor::new(sx, out), Op::AddBias { x: x.0, bias: bias.0 }, needs)
    }

    /// Row-wise softmax over the last axis (max-subtracted, stable).
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let d = *shape.last().expect("softmax on rank-0 tensor");
        let mut out = self.nodes[x.0].value.data().to_vec();
        out.par_chunks_mut(d).for_each(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                denom += *v;
            }
            let inv = 1.0 / denom;
            for v in row.iter_mut() {
                *v *= inv;
            }
        });
        let needs = self.needs(&[x.0]);
        self.push(Tensor::new(shape, out), Op::Softmax { x: x.0 }, needs)
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let d = *shape.last().expect("layer_norm on rank-0 tensor");
        let sg = self.nodes[gamma.0].value.shape();
        let sb = self.nodes[beta.0].value.shape();
        assert!(
            sg == [d] && sb == [d],
            "layer_norm affine shape mismatch: x {shape:?}, gamma {sg:?}, beta {sb:?}"
        );
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let rows = self.nodes[x.0].value.numel() / d;
        let mut out = self.nodes[x.0].value.data().to_vec();
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        out.par_chunks_mut(d)
            .zip(mean.par_iter_mut())
            .zip(rstd.par_iter_mut())
            .for_each(|((row, mean), rstd)| {
                let m = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
                let r = 1.0 / (var + eps).sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - m) * r * g[j] + b[j];
                }
                *mean = m;
                *rstd = r;
            });
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        if self.no_grad {
            // Tape::push drops the op anyway; avoid carrying the stats.
            mean.clear();
            rstd.clear();
        }
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, mean, rstd },
            needs,
        )
    }

    // ---- reductions & shape ----

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = stable_sum(self.nodes[x.0].value.data());
        let needs = self.needs(&[x.0]);
        self.push(Tensor::scalar(total), Op::Sum(x.0), needs)
    }

    /// Mean of all elements -> scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        assert!(n > 0, "mean of empty tensor");
        let total = stable_sum(self.nodes[x.0].value.data());
        let needs = self.needs(&[x.0]);
        self.push(Tensor::scalar(total / n as f64), Op::Mean(x.0), needs)
    }

    /// Sum over one axis, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.nodes[x.0].value.shape().to_vec();
        assert!(axis < shape.len(), "sum_axis axis {axis} out of range for {shape:?}");
        let (outer, mid, inner) = split_axis(&shape, axis);
        let data = self.nodes[x.0].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = (o * mid + m) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    out[dst + i] += data[src + i];
                }
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let needs = self.needs(&[x.0]);
        self.push(Tensor::new(new_shape, out), Op::SumAxis { x: x.0, axis }, needs)
    }

    /// Contiguous slice along one axis.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.nodes[x.0].value.shape().to_vec();
        assert!(axis < shape.len(), "slice axis {axis} out of range for {shape:?}");
        assert!(
            start + len <= shape[axis],
            "slice {start}..{} out of range for axis {axis} of {shape:?}",
            start + len
        );
        let (outer, mid, inner) = split_axis(&shape, axis);
        let data = self.nodes[x.0].value.data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for m in 0..len {
                let src = (o * mid + start + m) * inner;
                let dst = (o * len + m) * inner;
                out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
            }
        }
        let mut new_shape = shape.clone();
        new_shape[axis] = len;
        let needs = self.needs(&[x.0]);
        self.push(Tensor::new(new_shape, out), Op::Slice { x: x.0, axis, start }, needs)
    }

    /// Concatenate two tensors along one axis.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        assert_eq!(sa.len(), sb.len(), "concat rank mismatch: {sa:?} vs {sb:?}");
        for (i, (x, y)) in sa.iter().zip(&sb).enumerate() {
            assert!(i == axis || x == y, "concat shape mismatch on axis {i}: {sa:?} vs {sb:?}");
        }
        let (outer, mid_a, inner) = split_axis(&sa, axis);
        let mid_b = sb[axis];
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let mid = mid_a + mid_b;
        let mut out = vec![0.0; outer * mid * inner];
        for o in 0..outer {
            let dst = o * mid * inner;
            let sa_off = o * mid_a * inner;
            let sb_off = o * mid_b * inner;
            out[dst..dst + mid_a * inner].copy_from_slice(&da[sa_off..sa_off + mid_a * inner]);
            out[dst + mid_a * inner..dst + mid * inner]
                .copy_from_slice(&db[sb_off..sb_off + mid_b * inner]);
        }
        let mut new_shape = sa.clone();
        new_shape[axis] = mid;
        let needs = self.needs(&[a.0, b.0]);
        self.push(Tensor::new(new_shape, out), Op::Concat { a: a.0, b: b.0, axis }, needs)
    }

    /// 2D transpose (materialized).
    pub fn transpose2d(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(shape.len(), 2, "transpose2d on tensor of shape {shape:?}");
        let (m, n) = (shape[0], shape[1]);
        let data = self.nodes[x.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = data[i * n + j];
            }
        }
        let needs = self.needs(&[x.0]);
        self.push(Tensor::new(vec![n, m], out), Op::Transpose2d { x: x.0 }, needs)
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let value = self.nodes[x.0].value.reshaped(shape);
        let needs = self.needs(&[x.0]);
        self.push(value, Op::Reshape { x: x.0 }, needs)
    }

    /// Pick rows of a [R, inner...] tensor by index; repetition allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let shape = self.nodes[x.0].value.shape().to_vec();
        assert!(!shape.is_empty(), "gather_rows on rank-0 tensor");
        let rows = shape[0];
        let inner: usize = shape[1..].iter().product();
        for &i in idx {
            assert!(i < rows, "gather_rows index {i} out of range for {shape:?}");
        }
        let data = self.nodes[x.0].value.data();
        let mut out = vec![0.0; idx.len() * inner];
        for (o, &i) in idx.iter().enumerate() {
            out[o * inner..(o + 1) * inner].copy_from_slice(&data[i * inner..(i + 1) * inner]);
        }
        let mut new_shape = shape.clone();
        new_shape[0] = idx.len();
        let needs = self.needs(&[x.0]);
        self.push(Tensor::new(new_shape, out), Op::GatherRows { x: x.0, idx: idx.to_vec() }, needs)
    }

    /// From [B,T,d], pick one time step per batch element -> [B,d].
    pub fn gather_time(&mut self, x: Var, idx: &[usize]) -> Var {
        let shape = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(shape.len(), 3, "gather_time on tensor of shape {shape:?}");
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(idx.len(), b, "gather_time needs one index per batch element");
        for &i in idx {
            assert!(i < t, "gather_time index {i} out of range for {shape:?}");
        }
        let data = self.nodes[x.0].value.data();
        let mut out = vec![0.0; b * d];
        for (bi, &ti) in idx.iter().enumerate() {
            let src = (bi * t + ti) * d;
            out[bi * d..(bi + 1) * d].copy_from_slice(&data[src..src + d]);
        }
        let needs = self.needs(&[x.0]);
        self.push(Tensor::new(vec![b, d], out), Op::GatherTime { x: x.0, idx: idx.to_vec() }, needs)
    }

    /// Broadcast [B,d] across a new time axis -> [B,t,d].
    pub fn repeat_time(&mut self, x: Var, t: usize) -> Var {
        let shape = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(shape.len(), 2, "repeat_time on tensor of shape {shape:?}");
        let (b, d) = (shape[0], shape[1]);
        let data = self.nodes[x.0].value.data();
        let mut out = vec![0.0; b * t * d];
        for bi in 0..b {
            for ti in 0..t {
                let dst = (bi * t + ti) * d;
                out[dst..dst + d].copy_from_slice(&data[bi * d..(bi + 1) * d]);
            }
        }
        let needs = self.needs(&[x.0]);
        self.push(Tensor::new(vec![b, t, d], out), Op::RepeatTime { x: x.0 }, needs)
    }

    // ---- backward ----

    /// Accumulate gradients of a scalar loss into every reachable node. Each
    /// call computes one fresh pass in scratch storage and adds it to the
    /// stored gradients, so calling twice without `zero_grad` exactly doubles
    /// them; with `zero_grad` between, results are identical.
    pub fn backward(&mut self, loss: Var) {
        assert!(!self.no_grad, "backward on an inference tape");
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let mut scratch: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        scratch[loss.0] = Some(Tensor::new(self.nodes[loss.0].value.shape().to_vec(), vec![1.0]));
        for id in (0..=loss.0).rev() {
            if scratch[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            self.step_backward(id, &mut scratch);
        }
        for (node, s) in self.nodes.iter_mut().zip(scratch) {
            if let Some(s) = s {
                if node.needs_grad {
                    match &mut node.grad {
                        Some(g) => g.add_scaled(&s, 1.0),
                        slot @ None => *slot = Some(s),
                    }
                }
            }
        }
    }

    fn step_backward(&self, id: usize, scratch: &mut [Option<Tensor>]) {
        let dy_owned = scratch[id].take().expect("caller checked presence");
        let dy = &dy_owned;
        let nodes = &self.nodes;
        let y = &nodes[id].value;
        match &nodes[id].op {
            Op::Leaf | Op::NoGrad => {}
            Op::Add(a, b) => {
                acc_into(nodes, scratch, *a, |g| g.add_scaled(dy, 1.0));
                acc_into(nodes, scratch, *b, |g| g.add_scaled(dy, 1.0));
            }
            Op::Sub(a, b) => {
                acc_into(nodes, scratch, *a, |g| g.add_scaled(dy, 1.0));
                acc_into(nodes, scratch, *b, |g| g.add_scaled(dy, -1.0));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                acc_into(nodes, scratch, a, |g| {
                    let vb = nodes[b].value.data();
                    for ((g, d), v) in g.data_mut().iter_mut().zip(dy.data()).zip(vb) {
                        *g += d * v;
                    }
                });
                acc_into(nodes, scratch, b, |g| {
                    let va = nodes[a].value.data();
                    for ((g, d), v) in g.data_mut().iter_mut().zip(dy.data()).zip(va) {
                        *g += d * v;
                    }
                });
            }
            Op::Neg(a) => acc_into(nodes, scratch, *a, |g| g.add_scaled(dy, -1.0)),
            Op::Scale(a, s) => {
                let s = *s;
                acc_into(nodes, scratch, *a, |g| g.add_scaled(dy, s));
            }
            Op::AddScalar(a) => acc_into(nodes, scratch, *a, |g| g.add_scaled(dy, 1.0)),
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let sa = nodes[a].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = nodes[b].value.shape()[1];
                acc_into(nodes, scratch, a, |g| {
                    // da = dy . b^T : [m,n] x [n,k]
                    gemm_acc(g.data_mut(), dy.data(), nodes[b].value.data(), m, n, k, false, true);
                });
                acc_into(nodes, scratch, b, |g| {
                    // db = a^T . dy : [k,m] x [m,n]
                    gemm_acc(g.data_mut(), nodes[a].value.data(), dy.data(), k, m, n, true, false);
                });
            }
            Op::Bmm { a, b, transpose_b } => {
                let (a, b, tb) = (*a, *b, *transpose_b);
                let sa = nodes[a].value.shape();
                let sb = nodes[b].value.shape();
                let (m, k) = (sa[1], sa[2]);
                let n = if tb { sb[1] } else { sb[2] };
                let b_slab = sb[1] * sb[2];
                acc_into(nodes, scratch, a, |g| {
                    let vb = nodes[b].value.data();
                    g.data_mut().par_chunks_mut(m * k).enumerate().for_each(|(bi, ga)| {
                        let dyb = &dy.data()[bi * m * n..(bi + 1) * m * n];
                        let vbb = &vb[bi * b_slab..(bi + 1) * b_slab];
                        // da = dy . B_logical^T. For tb, stored b is already
                        // the logical transpose: plain product.
                        naive_mm_acc(ga, dyb, vbb, m, n, k, false, !tb);
                    });
                });
                acc_into(nodes, scratch, b, |g| {
                    let va = nodes[a].value.data();
                    g.data_mut().par_chunks_mut(b_slab).enumerate().for_each(|(bi, gb)| {
                        let dyb = &dy.data()[bi * m * n..(bi + 1) * m * n];
                        let vab = &va[bi * m * k..(bi + 1) * m * k];
                        if tb {
                            // d(stored b)[n,k] = dy^T . a
                            naive_mm_acc(gb, dyb, vab, n, m, k, true, false);
                        } else {
                            // db[k,n] = a^T . dy
                            naive_mm_acc(gb, vab, dyb, k, m, n, true, false);
                        }
                    });
                });
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let d = nodes[bias].value.numel();
                acc_into(nodes, scratch, x, |g| g.add_scaled(dy, 1.0));
                acc_into(nodes, scratch, bias, |g| {
                    let gb = g.data_mut();
                    for row in dy.data().chunks(d) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let x = *x;
                let d = *y.shape().last().expect("softmax rank");
                acc_into(nodes, scratch, x, |g| {
                    g.data_mut()
                        .par_chunks_mut(d)
                        .zip(y.data().par_chunks(d))
                        .zip(dy.data().par_chunks(d))
                        .for_each(|((gx, y), dy)| {
                            let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                gx[j] += y[j] * (dy[j] - dot);
                            }
                        });
                });
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = nodes[gamma].value.numel();
                let rows = y.numel() / d;
                let vx = nodes[x].value.data();
                let vg = nodes[gamma].value.data();
                let dyd = dy.data();
                acc_into(nodes, scratch, x, |g| {
                    let gd = g.data_mut();
                    for r in 0..rows {
                        let xr = &vx[r * d..(r + 1) * d];
                        let dyr = &dyd[r * d..(r + 1) * d];
                        let (m, rs) = (mean[r], rstd[r]);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let xhat = (xr[j] - m) * rs;
                            let dxhat = dyr[j] * vg[j];
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let gr = &mut gd[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xhat = (xr[j] - m) * rs;
                            gr[j] += rs * (dyr[j] * vg[j] - m1 - xhat * m2);
                        }
                    }
                });
                acc_into(nodes, scratch, gamma, |g| {
                    let gd = g.data_mut();
                    for r in 0..rows {
                        let xr = &vx[r * d..(r + 1) * d];
                        let dyr = &dyd[r * d..(r + 1) * d];
                        let (m, rs) = (mean[r], rstd[r]);
                        for j in 0..d {
                            gd[j] += dyr[j] * (xr[j] - m) * rs;
                        }
                    }
                });
                acc_into(nodes, scratch, beta, |g| {
                    let gd = g.data_mut();
                    for row in dyd.chunks(d) {
                        for (g, v) in gd.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let a = *a;
                acc_into(nodes, scratch, a, |g| {
                    let vx = nodes[a].value.data();
                    for ((g, d), x) in g.data_mut().iter_mut().zip(dy.data()).zip(vx) {
                        *g += d * gelu_bwd(*x);
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc_into(nodes, scratch, *a, |g| {
                    for ((g, d), yv) in g.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                        *g += d * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh(a) => {
                acc_into(nodes, scratch, *a, |g| {
                    for ((g, d), yv) in g.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                        *g += d * (1.0 - yv * yv);
                    }
                });
            }
            Op::Exp(a) => {
                acc_into(nodes, scratch, *a, |g| {
                    for ((g, d), yv) in g.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                        *g += d * yv;
                    }
                });
            }
            Op::Log(a) => {
                let a = *a;
                acc_into(nodes, scratch, a, |g| {
                    let vx = nodes[a].value.data();
                    for ((g, d), x) in g.data_mut().iter_mut().zip(dy.data()).zip(vx) {
                        *g += d / x;
                    }
                });
            }
            Op::Sum(a) => {
                let s = dy.item();
                acc_into(nodes, scratch, *a, |g| {
                    for g in g.data_mut() {
                        *g += s;
                    }
                });
            }
            Op::Mean(a) => {
                let a = *a;
                let s = dy.item() / nodes[a].value.numel() as f64;
                acc_into(nodes, scratch, a, |g| {
                    for g in g.data_mut() {
                        *g += s;
                    }
                });
            }
            Op::SumAxis { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = nodes[x].value.shape().to_vec();
                let (outer, mid, inner) = split_axis(&shape, axis);
                acc_into(nodes, scratch, x, |g| {
                    let gd = g.data_mut();
                    let dyd = dy.data();
                    for o in 0..outer {
                        for m in 0..mid {
                            let dst = (o * mid + m) * inner;
                            let src = o * inner;
                            for i in 0..inner {
                                gd[dst + i] += dyd[src + i];
                            }
                        }
                    }
                });
            }
            Op::Slice { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                let shape = nodes[x].value.shape().to_vec();
                let (outer, mid, inner) = split_axis(&shape, axis);
                let len = y.shape()[axis];
                acc_into(nodes, scratch, x, |g| {
                    let gd = g.data_mut();
                    let dyd = dy.data();
                    for o in 0..outer {
                        for m in 0..len {
                            let dst = (o * mid + start + m) * inner;
                            let src = (o * len + m) * inner;
                            for i in 0..inner {
                                gd[dst + i] += dyd[src + i];
                            }
                        }
                    }
                });
            }
            Op::Concat { a, b, axis } => {
                let (a, b, axis) = (*a, *b, *axis);
                let sa = nodes[a].value.shape().to_vec();
                let (outer, mid_a, inner) = split_axis(&sa, axis);
                let mid_b = nodes[b].value.shape()[axis];
                let mid = mid_a + mid_b;
                acc_into(nodes, scratch, a, |g| {
                    let gd = g.data_mut();
                    let dyd = dy.data();
                    for o in 0..outer {
                        for m in 0..mid_a {
                            let src = (o * mid + m) * inner;
                            let dst = (o * mid_a + m) * inner;
                            for i in 0..inner {
                                gd[dst + i] += dyd[src + i];
                            }
                        }
                    }
                });
                acc_into(nodes, scratch, b, |g| {
                    let gd = g.data_mut();
                    let dyd = dy.data();
                    for o in 0..outer {
                        for m in 0..mid_b {
                            let src = (o * mid + mid_a + m) * inner;
                            let dst = (o * mid_b + m) * inner;
                            for i in 0..inner {
                                gd[dst + i] += dyd[src + i];
                            }
                        }
                    }
                });
            }
            Op::Transpose2d { x } => {
                let x = *x;
                let (n, m) = (y.shape()[0], y.shape()[1]);
                acc_into(nodes, scratch, x, |g| {
                    let gd = g.data_mut();
                    let dyd = dy.data();
                    for i in 0..n {
                        for j in 0..m {
                            gd[j * n + i] += dyd[i * m + j];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                acc_into(nodes, scratch, *x, |g| {
                    for (g, v) in g.data_mut().iter_mut().zip(dy.data()) {
                        *g += v;
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let inner: usize = nodes[x].value.shape()[1..].iter().product();
                acc_into(nodes, scratch, x, |g| {
                    let gd = g.data_mut();
                    let dyd = dy.data();
                    for (o, &i) in idx.iter().enumerate() {
                        let src = o * inner;
                        let dst = i * inner;
                        for j in 0..inner {
                            gd[dst + j] += dyd[src + j];
                        }
                    }
                });
            }
            Op::GatherTime { x, idx } => {
                let x = *x;
                let shape = nodes[x].value.shape();
                let (t, d) = (shape[1], shape[2]);
                acc_into(nodes, scratch, x, |g| {
                    let gd = g.data_mut();
                    let dyd = dy.data();
                    for (bi, &ti) in idx.iter().enumerate() {
                        let dst = (bi * t + ti) * d;
                        let src = bi * d;
                        for j in 0..d {
                            gd[dst + j] += dyd[src + j];
                        }
                    }
                });
            }
            Op::RepeatTime { x } => {
                let x = *x;
                let (b, t, d) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                acc_into(nodes, scratch, x, |g| {
                    let gd = g.data_mut();
                    let dyd = dy.data();
                    for bi in 0..b {
                        for ti in 0..t {
                            let src = (bi * t + ti) * d;
                            let dst = bi * d;
                            for j in 0..d {
                                gd[dst + j] += dyd[src + j];
                            }
                        }
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let (x, lo, hi) = (*x, *lo, *hi);
                acc_into(nodes, scratch, x, |g| {
                    let vx = nodes[x].value.data();
                    for ((g, d), xv) in g.data_mut().iter_mut().zip(dy.data()).zip(vx) {
                        if *xv >= lo && *xv <= hi {
                            *g += d;
                        }
                    }
                });
            }
        }
        scratch[id] = Some(dy_owned);
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Get-or-allocate the scratch gradient of node `i` and apply `f` to it;
/// no-op for nodes that do not need gradients (pruned constant subgraphs).
fn acc_into(nodes: &[Node], scratch: &mut [Option<Tensor>], i: usize, f: impl FnOnce(&mut Tensor)) {
    if !nodes[i].needs_grad {
        return;
    }
    let shape = nodes[i].value.shape().to_vec();
    let grad = scratch[i].get_or_insert_with(|| Tensor::zeros(shape));
    f(grad);
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64 + Sync) -> Tensor {
    let mut data = t.data().to_vec();
    if data.len() >= 4096 {
        data.par_iter_mut().for_each(|v| *v = f(*v));
    } else {
        for v in &mut data {
            *v = f(*v);
        }
    }
    Tensor::new(t.shape().to_vec(), data)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// (product of dims before axis, dim at axis, product after).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// c += A.B via blocked dgemm. Logical A is m x k (stored transposed when
/// `a_t`), logical B is k x n (stored transposed when `b_t`). Large row counts
/// split into fixed 128-row chunks across the rayon pool; per-element results
/// are row-local, so the split does not change values.
pub fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, a_t: bool, b_t: bool) {
    assert_eq!(c.len(), m * n, "gemm output length {} != {m}x{n}", c.len());
    let (rsa, csa) = if a_t { (1isize, m as isize) } else { (k as isize, 1isize) };
    let (rsb, csb) = if b_t { (1isize, k as isize) } else { (n as isize, 1isize) };

    let run = |c_chunk: &mut [f64], row0: usize, rows: usize| {
        let a_off = if a_t { row0 } else { row0 * k };
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                1.0,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };

    if m >= MATMUL_PAR_ROWS && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(MATMUL_CHUNK * n).enumerate().for_each(|(ci, chunk)| {
            let row0 = ci * MATMUL_CHUNK;
            run(chunk, row0, chunk.len() / n);
        });
    } else {
        run(c, 0, m);
    }
}

/// c += A.B with a plain i-k-j loop: each output element accumulates strictly
/// ascending in k. Used where the inner dimension may include padding, so
/// padded and unpadded runs agree bitwise on the shared elements.
pub fn naive_mm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, a_t: bool, b_t: bool) {
    assert_eq!(c.len(), m * n, "naive_mm output length {} != {m}x{n}", c.len());
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = if a_t { a[kk * m + i] } else { a[i * k + kk] };
            if aik == 0.0 {
                continue;
            }
            if b_t {
                for (j, cv) in ci.iter_mut().enumerate() {
                    *cv += aik * b[j * k + kk];
                }
            } else {
                let brow = &b[kk * n..(kk + 1) * n];
                for (cv, bv) in ci.iter_mut().zip(brow) {
                    *cv += aik * bv;
                }
            }
        }
    }
}

/// Sinusoidal positional encoding rows for the given integer steps.
pub fn positional_encoding(steps: &[usize], d: usize) -> Tensor {
    assert!(d % 2 == 0, "positional encoding width {d} must be even");
    let mut data = vec![0.0; steps.len() * d];
    for (r, &s) in steps.iter().enumerate() {
        let row = &mut data[r * d..(r + 1) * d];
        for i in 0..d / 2 {
            let freq = (10_000.0f64).powf(-2.0 * i as f64 / d as f64);
            let angle = s as f64 * freq;
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![steps.len(), d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_returns_input() {
        let mut tape = Tape::new();
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = Tensor::new(vec![3, 3], (1..=9).map(|v| v as f64 * 0.37).collect());
        let i = tape.constant(eye);
        let av = tape.constant(a.clone());
        let out = tape.matmul(i, av);
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3]));
        let y = tape.softmax(x);
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_sigmoid_gradient_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![8]));
        let s = tape.sigmoid(x);
        let loss = tape.sum(s);
        tape.backward(loss);
        for g in tape.grad(x).expect("grad").data() {
            assert!((g - 0.25).abs() < 1e-15, "sigmoid' at 0 should be 0.25, got {g}");
        }
    }

    #[test]
    fn repeated_backward_doubles_and_zero_grad_resets() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.5, -0.5]));
        let sq = tape.mul(x, x);
        let loss = tape.sum(sq);
        tape.backward(loss);
        let first = tape.grad(x).expect("grad").data().to_vec();
        assert_eq!(first, vec![3.0, -1.0]);
        tape.backward(loss);
        let doubled = tape.grad(x).expect("grad").data().to_vec();
        for (a, b) in first.iter().zip(&doubled) {
            assert_eq!(*b, 2.0 * a);
        }
        tape.zero_grad();
        tape.backward(loss);
        let again = tape.grad(x).expect("grad").data().to_vec();
        assert_eq!(first, again);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]));
        let p = tape.mul(x, c);
        let loss = tape.sum(p);
        tape.backward(loss);
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).expect("grad").data(), &[3.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "mul shape mismatch: [2] vs [3]")]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        tape.mul(a, b);
    }

    #[test]
    #[should_panic(expected = "backward on an inference tape")]
    fn inference_tape_refuses_backward() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::zeros(vec![2]));
        let loss = tape.sum(x);
        tape.backward(loss);
    }

    #[test]
    fn bmm_matches_matmul_per_batch() {
        let mut tape = Tape::new();
        let a = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f64 * 0.1).collect());
        let b = Tensor::new(vec![2, 3, 2], (0..12).map(|v| 0.5 - v as f64 * 0.07).collect());
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let out = tape.bmm(av, bv, false);
        for bi in 0..2 {
            let mut want = vec![0.0; 4];
            naive_mm_acc(
                &mut want,
                &a.data()[bi * 6..(bi + 1) * 6],
                &b.data()[bi * 6..(bi + 1) * 6],
                2,
                3,
                2,
                false,
                false,
            );
            assert_eq!(&tape.value(out).data()[bi * 4..(bi + 1) * 4], &want[..]);
        }
    }

    #[test]
    fn bmm_transpose_b_matches_explicit_transpose() {
        let mut tape = Tape::new();
        let q = Tensor::new(vec![1, 2, 4], (0..8).map(|v| v as f64 * 0.3 - 1.0).collect());
        let kt = Tensor::new(vec![1, 3, 4], (0..12).map(|v| 0.2 * v as f64).collect());
        let qv = tape.constant(q.clone());
        let kv = tape.constant(kt.clone());
        let scores = tape.bmm(qv, kv, true);
        assert_eq!(tape.value(scores).shape(), &[1, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                let want: f64 = (0..4).map(|d| q.data()[i * 4 + d] * kt.data()[j * 4 + d]).sum();
                let got = tape.value(scores).data()[i * 3 + j];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let m = 5;
        let k = 7;
        let n = 4;
        let a: Vec<f64> = (0..m * k).map(|v| (v as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).cos()).collect();
        let mut a_t = vec![0.0; m * k];
        for i in 0..m {
            for j in 0..k {
                a_t[j * m + i] = a[i * k + j];
            }
        }
        let mut b_t = vec![0.0; k * n];
        for i in 0..k {
            for j in 0..n {
                b_t[j * k + i] = b[i * n + j];
            }
        }
        let mut want = vec![0.0; m * n];
        naive_mm_acc(&mut want, &a, &b, m, k, n, false, false);
        for (at, bt) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut got = vec![0.0; m * n];
            let a_buf = if at { &a_t } else { &a };
            let b_buf = if bt { &b_t } else { &b };
            gemm_acc(&mut got, a_buf, b_buf, m, k, n, at, bt);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "a_t={at} b_t={bt}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn positional_encoding_step_zero_alternates_zero_one() {
        let pe = positional_encoding(&[0, 1], 8);
        for i in 0..4 {
            assert_eq!(pe.data()[2 * i], 0.0);
            assert_eq!(pe.data()[2 * i + 1], 1.0);
        }
        assert!((pe.data()[8] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.data()[9] - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn slice_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 5], (0..10).map(|v| v as f64).collect()));
        let left = tape.slice(x, 1, 0, 2);
        let right = tape.slice(x, 1, 2, 3);
        let back = tape.concat(left, right, 1);
        assert_eq!(tape.value(back).data(), tape.value(x).data());
        let loss = tape.sum(back);
        tape.backward(loss);
        assert!(tape.grad(x).expect("grad").data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn gather_time_and_repeat_time_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f64).collect()));
        let picked = tape.gather_time(x, &[2, 0]);
        // batch 0 takes t=2 (values 4,5), batch 1 takes t=0 (values 6,7).
        assert_eq!(tape.value(picked).data(), &[4.0, 5.0, 6.0, 7.0]);
        let rep = tape.repeat_time(picked, 2);
        assert_eq!(tape.value(rep).shape(), &[2, 2, 2]);
        let loss = tape.sum(rep);
        tape.backward(loss);
        // Each picked row was repeated twice -> gradient 2 at the gathered
        // time steps, 0 elsewhere.
        let g = tape.grad(x).expect("grad").data();
        let want = [0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(g, &want);
    }
}
