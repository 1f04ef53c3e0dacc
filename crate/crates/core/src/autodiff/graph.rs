use std::sync::OnceLock;

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::error::{Error, Result};
use crate::scalar::{MatRef, Scalar};
use crate::tensor::{split_at_axis, strides, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Square,
    Ln,
    AddScalar(f64),
    MulScalar(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeometry },
    Votes { u: Var, w: Var },
    WeightedSum { u: Var, c: Var },
    Agreement { u: Var, v: Var },
    Unary { x: Var, kind: UnaryKind },
    Binary { a: Var, b: Var, kind: BinaryKind },
    AddBias { x: Var, bias: Var },
    Reduce { x: Var, axes: Vec<usize>, mean: bool },
    L2NormLast { x: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Expand { x: Var, axis: usize },
    Bce { p: Var, t: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Votes { .. } => "votes",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Agreement { .. } => "agreement",
            Op::Unary { .. } => "elementwise",
            Op::Binary { .. } => "binary",
            Op::AddBias { .. } => "add_bias",
            Op::Reduce { .. } => "reduce",
            Op::L2NormLast { .. } => "l2_norm_lastaxis",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Expand { .. } => "expand",
            Op::Bce { .. } => "binary_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Binary { a, b, .. } => vec![a, b],
            Op::Conv2d { x, k, b, .. } => vec![x, k, b],
            Op::Votes { u, w } => vec![u, w],
            Op::WeightedSum { u, c } => vec![u, c],
            Op::Agreement { u, v } => vec![u, v],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::Bce { p, t } => vec![p, t],
            Op::Unary { x, .. }
            | Op::Reduce { x, .. }
            | Op::L2NormLast { x }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Expand { x, .. } => vec![x],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    tracked: bool,
    /// Accumulated gradient; only populated on tracked leaves.
    grad: Option<Tensor<T>>,
}

/// Probability clamp used by the binary cross-entropy op.
pub const BCE_EPS: f64 = 1e-7;

fn check_finite_enabled() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| std::env::var("CAPSLAB_CHECK_FINITE").map(|v| v == "1").unwrap_or(false))
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// the tape is always topologically sorted.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), check_finite: check_finite_enabled() }
    }

    /// Forces NaN/Inf checking on or off regardless of `CAPSLAB_CHECK_FINITE`.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of a tracked leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Every tracked leaf that has received a gradient.
    pub fn leaf_grads(&self) -> Vec<(Var, &Tensor<T>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .filter_map(|(i, n)| n.grad.as_ref().map(|g| (Var(i), g)))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Result<Var> {
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        if self.check_finite
            && !value.all_finite()
            && op.inputs().iter().all(|v| self.nodes[v.0].value.all_finite())
        {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op, tracked, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf whose gradient is accumulated by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked: true, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked: false, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Untracked copy of `x`: gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    // ---- dense products --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            &mut out,
            n,
            1,
            false,
        );
        self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b })
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::arg("conv2d", "stride must be positive"));
        }
        let (sx, sk, sb) = (self.shape(x), self.shape(kernel), self.shape(bias));
        if sx.len() != 4 || sk.len() != 4 || sk[1] != sx[1] {
            return Err(Error::dim("conv2d", sx, sk));
        }
        if sk[2] != sk[3] {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {sk:?}")));
        }
        if sb != [sk[0]] {
            return Err(Error::dim("conv2d", sk, sb));
        }
        if sk[2] > sx[2] || sk[2] > sx[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than input {}x{}", sk[2], sk[3], sx[2], sx[3]),
            ));
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sk[0],
            kernel: sk[2],
            stride,
        };
        let out = conv2d_forward(&geom, self.value(x).data(), self.value(kernel).data(), self.value(bias).data());
        let shape = [geom.batch, geom.out_channels, geom.out_height(), geom.out_width()];
        self.push(Tensor::new(shape, out)?, Op::Conv2d { x, k: kernel, b: bias, geom })
    }

    /// Per-capsule vector-matrix products: `u` is `[B, M, Din]`, `w` is
    /// `[M, Din, P]` (one matrix per capsule) or `[1, Din, P]` (one shared
    /// matrix); the result is `[B, M, P]`.
    pub fn capsule_votes(&mut self, u: Var, w: Var) -> Result<Var> {
        let (su, sw) = (self.shape(u).to_vec(), self.shape(w).to_vec());
        if su.len() != 3 || sw.len() != 3 || su[2] != sw[1] || (sw[0] != su[1] && sw[0] != 1) {
            return Err(Error::dim("capsule_votes", &su, &sw));
        }
        let (b, m, din, p) = (su[0], su[1], su[2], sw[2]);
        let mut out = vec![T::zero(); b * m * p];
        let (ud, wd) = (self.value(u).data(), self.value(w).data());
        if sw[0] == 1 {
            T::gemm(MatRef::row_major(ud, b * m, din), MatRef::row_major(wd, din, p), &mut out, p, 1, false);
        } else {
            for i in 0..m {
                let a = MatRef { data: &ud[i * din..], rows: b, cols: din, row_stride: m * din, col_stride: 1 };
                let wm = MatRef::row_major(&wd[i * din * p..(i + 1) * din * p], din, p);
                T::gemm(a, wm, &mut out[i * p..], m * p, 1, false);
            }
        }
        self.push(Tensor::new([b, m, p], out)?, Op::Votes { u, w })
    }

    /// `s[b, j, :] = sum_i c[b, i, j] * u[b, i, j, :]` for votes `u`
    /// (`[B, M, N, D]`) and coupling coefficients `c` (`[B, M, N]`).
    pub fn weighted_sum(&mut self, u: Var, c: Var) -> Result<Var> {
        let (su, sc) = (self.shape(u).to_vec(), self.shape(c).to_vec());
        if su.len() != 4 || sc != su[..3] {
            return Err(Error::dim("weighted_sum", &su, &sc));
        }
        let (bsz, m, n, d) = (su[0], su[1], su[2], su[3]);
        let (ud, cd) = (self.value(u).data(), self.value(c).data());
        let mut out = vec![T::zero(); bsz * n * d];
        for b in 0..bsz {
            let dst = &mut out[b * n * d..(b + 1) * n * d];
            for i in 0..m {
                let base = (b * m + i) * n;
                for j in 0..n {
                    let cij = cd[base + j];
                    let src = &ud[(base + j) * d..(base + j + 1) * d];
                    for (o, &x) in dst[j * d..(j + 1) * d].iter_mut().zip(src) {
                        *o += x * cij;
                    }
                }
            }
        }
        self.push(Tensor::new([bsz, n, d], out)?, Op::WeightedSum { u, c })
    }

    /// `a[b, i, j] = u[b, i, j, :] . v[b, j, :]` for votes `u` (`[B, M, N, D]`)
    /// and outputs `v` (`[B, N, D]`).
    pub fn agreement(&mut self, u: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(u).to_vec(), self.shape(v).to_vec());
        if su.len() != 4 || sv.len() != 3 || sv[0] != su[0] || sv[1..] != su[2..] {
            return Err(Error::dim("agreement", &su, &sv));
        }
        let (bsz, m, n, d) = (su[0], su[1], su[2], su[3]);
        let (ud, vd) = (self.value(u).data(), self.value(v).data());
        let mut out = Vec::with_capacity(bsz * m * n);
        for b in 0..bsz {
            for i in 0..m {
                for j in 0..n {
                    let row = &ud[((b * m + i) * n + j) * d..][..d];
                    let vj = &vd[(b * n + j) * d..][..d];
                    let mut acc = T::zero();
                    for (&x, &y) in row.iter().zip(vj) {
                        acc += x * y;
                    }
                    out.push(acc);
                }
            }
        }
        self.push(Tensor::new([bsz, m, n], out)?, Op::Agreement { u, v })
    }

    // ---- element-wise ----------------------------------------------------

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        let xv = self.value(x);
        let out = match kind {
            UnaryKind::Relu => xv.map(|v| if v > T::zero() { v } else { T::zero() }),
            UnaryKind::Sigmoid => xv.map(sigmoid),
            UnaryKind::Square => xv.map(|v| v * v),
            UnaryKind::Ln => xv.map(|v| v.ln()),
            UnaryKind::AddScalar(c) => {
                let c = T::from_f64_lossy(c);
                xv.map(|v| v + c)
            }
            UnaryKind::MulScalar(c) => {
                let c = T::from_f64_lossy(c);
                xv.map(|v| v * c)
            }
        };
        self.push(out, Op::Unary { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Square)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Ln)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryKind::AddScalar(c))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryKind::MulScalar(c))
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("binary", av.shape(), bv.shape()));
        }
        let f = match kind {
            BinaryKind::Add => |x: T, y: T| x + y,
            BinaryKind::Sub => |x: T, y: T| x - y,
            BinaryKind::Mul => |x: T, y: T| x * y,
            BinaryKind::Div => |x: T, y: T| x / y,
        };
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, Op::Binary { a, b, kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    /// Adds `bias` (`[n]`) to every row of `x` (`[..., n]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let n = sb[0];
        let bd = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(&bd) {
                *v += b;
            }
        }
        self.push(out, Op::AddBias { x, bias })
    }

    // ---- reductions ------------------------------------------------------

    fn reduce(&mut self, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.is_empty() || axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::arg("reduce", format!("invalid axes {axes:?} for shape {shape:?}")));
        }
        let mut cur = self.value(x).data().to_vec();
        let mut cur_shape = shape.clone();
        for &a in axes.iter().rev() {
            cur = sum_axis(&cur, &cur_shape, a);
            cur_shape.remove(a);
        }
        if mean {
            let count = T::from_usize(axes.iter().map(|&a| shape[a]).product()).expect("count");
            for v in &mut cur {
                *v = *v / count;
            }
        }
        self.push(Tensor::new(cur_shape, cur)?, Op::Reduce { x, axes, mean })
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, true)
    }

    /// Sum over every axis, producing a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        self.sum(x, &axes)
    }

    pub fn l2_norm_lastaxis(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("l2_norm_lastaxis", "rank-0 input"))?;
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|row| {
                let mut acc = T::zero();
                for &v in row {
                    acc += v * v;
                }
                acc.sqrt()
            })
            .collect();
        let mut out_shape = shape;
        out_shape.pop();
        self.push(Tensor::new(out_shape, data)?, Op::L2NormLast { x })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * n + a) * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..n {
                    mx = mx.max(xd[idx(a)]);
                }
                let mut s = T::zero();
                for a in 0..n {
                    let e = (xd[idx(a)] - mx).exp();
                    out[idx(a)] = e;
                    s += e;
                }
                for a in 0..n {
                    out[idx(a)] = out[idx(a)] / s;
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg("log_softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * n + a) * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..n {
                    mx = mx.max(xd[idx(a)]);
                }
                let mut s = T::zero();
                for a in 0..n {
                    s += (xd[idx(a)] - mx).exp();
                }
                let lse = mx + s.ln();
                for a in 0..n {
                    out[idx(a)] = xd[idx(a)] - lse;
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::LogSoftmax { x, axis })
    }

    // ---- structural ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape { x })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::arg("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value(x).data(), &shape, perm);
        self.push(Tensor::new(out_shape, data)?, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Inserts a new axis of length `n` at position `axis`, repeating `x`.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() || n == 0 {
            return Err(Error::arg("expand", format!("axis {axis} / size {n} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &xd[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(src);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, n);
        self.push(Tensor::new(out_shape, out)?, Op::Expand { x, axis })
    }

    /// Element-wise `-(t ln p + (1-t) ln(1-p))` with `p` clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]`. Targets are not differentiated.
    pub fn binary_cross_entropy(&mut self, p: Var, t: Var) -> Result<Var> {
        let (pv, tv) = (self.value(p), self.value(t));
        if pv.shape() != tv.shape() {
            return Err(Error::dim("binary_cross_entropy", pv.shape(), tv.shape()));
        }
        let eps = T::from_f64_lossy(BCE_EPS);
        let one = T::one();
        let data = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(&p, &t)| {
                let pc = p.max(eps).min(one - eps);
                -(t * pc.ln() + (one - t) * (one - pc).ln())
            })
            .collect();
        let out = Tensor::new(pv.shape().to_vec(), data)?;
        self.push(out, Op::Bce { p, t })
    }

    // ---- reverse pass ----------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding into the gradient of every
    /// tracked leaf it reaches. Repeated calls accumulate; use
    /// [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        if !self.is_tracked(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].tracked {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match node.grad.as_mut() {
                    Some(acc) => add_into(acc.data_mut(), &g),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            for (input, gi) in self.input_grads(id, &g) {
                if !self.nodes[input.0].tracked {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => add_into(acc, &gi),
                    None => grads[input.0] = Some(gi),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn input_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let want = |v: Var| self.nodes[v.0].tracked;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                let gm = MatRef::row_major(g, m, n);
                if want(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(gm, MatRef::transposed(val(*b), k, n), &mut da, k, 1, false);
                    res.push((*a, da));
                }
                if want(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(MatRef::transposed(val(*a), m, k), gm, &mut db, n, 1, false);
                    res.push((*b, db));
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let grads = conv2d_backward(geom, val(*x), val(*k), g, (want(*x), want(*k), want(*b)));
                if let Some(dx) = grads.input {
                    res.push((*x, dx));
                }
                if let Some(dk) = grads.kernel {
                    res.push((*k, dk));
                }
                if let Some(db) = grads.bias {
                    res.push((*b, db));
                }
            }
            Op::Votes { u, w } => {
                let (su, sw) = (shp(*u), shp(*w));
                let (bsz, m, din, p) = (su[0], su[1], su[2], sw[2]);
                let shared = sw[0] == 1;
                let (ud, wd) = (val(*u), val(*w));
                if want(*u) {
                    let mut du = vec![T::zero(); ud.len()];
                    if shared {
                        T::gemm(
                            MatRef::row_major(g, bsz * m, p),
                            MatRef::transposed(wd, din, p),
                            &mut du,
                            din,
                            1,
                            false,
                        );
                    } else {
                        for i in 0..m {
                            let gi = MatRef { data: &g[i * p..], rows: bsz, cols: p, row_stride: m * p, col_stride: 1 };
                            let wt = MatRef::transposed(&wd[i * din * p..(i + 1) * din * p], din, p);
                            T::gemm(gi, wt, &mut du[i * din..], m * din, 1, false);
                        }
                    }
                    res.push((*u, du));
                }
                if want(*w) {
                    let mut dw = vec![T::zero(); wd.len()];
                    if shared {
                        T::gemm(
                            MatRef::transposed(ud, bsz * m, din),
                            MatRef::row_major(g, bsz * m, p),
                            &mut dw,
                            p,
                            1,
                            false,
                        );
                    } else {
                        for i in 0..m {
                            let ut = MatRef { data: &ud[i * din..], rows: din, cols: bsz, row_stride: 1, col_stride: m * din };
                            let gi = MatRef { data: &g[i * p..], rows: bsz, cols: p, row_stride: m * p, col_stride: 1 };
                            T::gemm(ut, gi, &mut dw[i * din * p..(i + 1) * din * p], p, 1, false);
                        }
                    }
                    res.push((*w, dw));
                }
            }
            Op::WeightedSum { u, c } => {
                let su = shp(*u);
                let (bsz, m, n, d) = (su[0], su[1], su[2], su[3]);
                let (ud, cd) = (val(*u), val(*c));
                if want(*u) {
                    let mut du = vec![T::zero(); ud.len()];
                    for b in 0..bsz {
                        for i in 0..m {
                            for j in 0..n {
                                let k = (b * m + i) * n + j;
                                let gj = &g[(b * n + j) * d..][..d];
                                for (o, &x) in du[k * d..(k + 1) * d].iter_mut().zip(gj) {
                                    *o = x * cd[k];
                                }
                            }
                        }
                    }
                    res.push((*u, du));
                }
                if want(*c) {
                    let mut dc = Vec::with_capacity(cd.len());
                    for b in 0..bsz {
                        for i in 0..m {
                            for j in 0..n {
                                let row = &ud[((b * m + i) * n + j) * d..][..d];
                                let gj = &g[(b * n + j) * d..][..d];
                                let mut acc = T::zero();
                                for (&x, &y) in row.iter().zip(gj) {
                                    acc += x * y;
                                }
                                dc.push(acc);
                            }
                        }
                    }
                    res.push((*c, dc));
                }
            }
            Op::Agreement { u, v } => {
                let su = shp(*u);
                let (bsz, m, n, d) = (su[0], su[1], su[2], su[3]);
                let (ud, vd) = (val(*u), val(*v));
                if want(*u) {
                    let mut du = vec![T::zero(); ud.len()];
                    for b in 0..bsz {
                        for i in 0..m {
                            for j in 0..n {
                                let k = (b * m + i) * n + j;
                                let vj = &vd[(b * n + j) * d..][..d];
                                for (o, &y) in du[k * d..(k + 1) * d].iter_mut().zip(vj) {
                                    *o = g[k] * y;
                                }
                            }
                        }
                    }
                    res.push((*u, du));
                }
                if want(*v) {
                    let mut dv = vec![T::zero(); vd.len()];
                    for b in 0..bsz {
                        let dst = &mut dv[b * n * d..(b + 1) * n * d];
                        for i in 0..m {
                            for j in 0..n {
                                let k = (b * m + i) * n + j;
                                let row = &ud[k * d..(k + 1) * d];
                                for (o, &x) in dst[j * d..(j + 1) * d].iter_mut().zip(row) {
                                    *o += g[k] * x;
                                }
                            }
                        }
                    }
                    res.push((*v, dv));
                }
            }
            Op::Unary { x, kind } => {
                let xd = val(*x);
                let dx: Vec<T> = match *kind {
                    UnaryKind::Relu => {
                        g.iter().zip(xd).map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() }).collect()
                    }
                    UnaryKind::Sigmoid => g.iter().zip(out).map(|(&gi, &y)| gi * y * (T::one() - y)).collect(),
                    UnaryKind::Square => {
                        let two = T::one() + T::one();
                        g.iter().zip(xd).map(|(&gi, &xi)| gi * two * xi).collect()
                    }
                    UnaryKind::Ln => g.iter().zip(xd).map(|(&gi, &xi)| gi / xi).collect(),
                    UnaryKind::AddScalar(_) => g.to_vec(),
                    UnaryKind::MulScalar(c) => {
                        let c = T::from_f64_lossy(c);
                        g.iter().map(|&gi| gi * c).collect()
                    }
                };
                res.push((*x, dx));
            }
            Op::Binary { a, b, kind } => {
                let (ad, bd) = (val(*a), val(*b));
                let (da, db): (Vec<T>, Vec<T>) = match kind {
                    BinaryKind::Add => (g.to_vec(), g.to_vec()),
                    BinaryKind::Sub => (g.to_vec(), g.iter().map(|&x| -x).collect()),
                    BinaryKind::Mul => (
                        g.iter().zip(bd).map(|(&gi, &y)| gi * y).collect(),
                        g.iter().zip(ad).map(|(&gi, &x)| gi * x).collect(),
                    ),
                    BinaryKind::Div => (
                        g.iter().zip(bd).map(|(&gi, &y)| gi / y).collect(),
                        g.iter().zip(ad.iter().zip(bd)).map(|(&gi, (&x, &y))| -gi * x / (y * y)).collect(),
                    ),
                };
                if want(*a) {
                    res.push((*a, da));
                }
                if want(*b) {
                    res.push((*b, db));
                }
            }
            Op::AddBias { x, bias } => {
                if want(*bias) {
                    let n = shp(*bias)[0];
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        add_into(&mut db, row);
                    }
                    res.push((*bias, db));
                }
                if want(*x) {
                    res.push((*x, g.to_vec()));
                }
            }
            Op::Reduce { x, axes, mean } => {
                let full = shp(*x);
                let mut dx = broadcast_back(g, full, axes);
                if *mean {
                    let count = T::from_usize(axes.iter().map(|&a| full[a]).product()).expect("count");
                    for v in &mut dx {
                        *v = *v / count;
                    }
                }
                res.push((*x, dx));
            }
            Op::L2NormLast { x } => {
                let xd = val(*x);
                let d = *shp(*x).last().expect("rank >= 1");
                let mut dx = vec![T::zero(); xd.len()];
                for (r, (&n, &gi)) in out.iter().zip(g).enumerate() {
                    if n > T::zero() {
                        let s = gi / n;
                        for j in 0..d {
                            dx[r * d + j] = s * xd[r * d + j];
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_at_axis(shp(*x), *axis);
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * n + a) * inner + i;
                        let mut dot = T::zero();
                        for a in 0..n {
                            dot += g[idx(a)] * out[idx(a)];
                        }
                        for a in 0..n {
                            dx[idx(a)] = out[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = split_at_axis(shp(*x), *axis);
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * n + a) * inner + i;
                        let mut gsum = T::zero();
                        for a in 0..n {
                            gsum += g[idx(a)];
                        }
                        for a in 0..n {
                            dx[idx(a)] = g[idx(a)] - out[idx(a)].exp() * gsum;
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::Reshape { x } => res.push((*x, g.to_vec())),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                res.push((*x, permute_data(g, node.value.shape(), &inv)));
            }
            Op::Expand { x, axis } => {
                res.push((*x, sum_axis(g, node.value.shape(), *axis)));
            }
            Op::Bce { p, t } => {
                if want(*p) {
                    let eps = T::from_f64_lossy(BCE_EPS);
                    let one = T::one();
                    let dp = g
                        .iter()
                        .zip(val(*p).iter().zip(val(*t)))
                        .map(|(&gi, (&p, &t))| {
                            if p < eps || p > one - eps {
                                T::zero()
                            } else {
                                gi * (p - t) / (p * (one - p))
                            }
                        })
                        .collect();
                    res.push((*p, dp));
                }
            }
        }
        res
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Sums `data` (of `shape`) over `axis`, accumulating in index order.
fn sum_axis<T: Scalar>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_at_axis(shape, axis);
    if inner == 1 {
        return data
            .chunks(n)
            .map(|row| {
                let mut acc = T::zero();
                for &v in row {
                    acc += v;
                }
                acc
            })
            .collect();
    }
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for a in 0..n {
            let src = &data[(o * n + a) * inner..(o * n + a + 1) * inner];
            add_into(dst, src);
        }
    }
    out
}

/// Repeats a reduced gradient back over the reduced `axes` of `full`.
fn broadcast_back<T: Scalar>(g: &[T], full: &[usize], axes: &[usize]) -> Vec<T> {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    let mut shape: Vec<usize> = (0..full.len()).filter(|a| !axes.contains(a)).map(|a| full[a]).collect();
    let mut cur = g.to_vec();
    for &a in &sorted {
        let outer: usize = shape[..a].iter().product();
        let inner: usize = shape[a..].iter().product();
        let n = full[a];
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &cur[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(src);
            }
        }
        shape.insert(a, n);
        cur = out;
    }
    cur
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        return data.to_vec();
    }
    // Innermost output axis is walked as a strided run.
    let last = rank - 1;
    let run = out_shape[last];
    let run_step = step[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < total {
        let mut p = base;
        for _ in 0..run {
            out.push(data[p]);
            p += run_step;
        }
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            base += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}
