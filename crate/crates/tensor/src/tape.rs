use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::{DType, Tensor};

static NEXT_EPOCH: AtomicU64 = AtomicU64::new(1);

fn next_epoch() -> u64 {
    NEXT_EPOCH.fetch_add(1, Ordering::Relaxed)
}

/// Records operations in evaluation order. Nodes are appended as ops run, so
/// the node order is always a valid topological order.
///
/// A tape is single-writer (`!Send`); use one tape per thread.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Inner>>,
}

struct Inner {
    epoch: u64,
    dtype: DType,
    nodes: Vec<Node>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    /// Elementwise with suffix broadcasting of the smaller operand.
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Scale(usize, f64),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
    },
    Reshape(usize),
    Gather {
        x: usize,
        index: Rc<[usize]>,
    },
    Concat {
        parts: Vec<usize>,
    },
    Gelu(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    MaskedSoftmax {
        x: usize,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        eps: f64,
    },
    Rotary {
        x: usize,
        cos: Rc<[f64]>,
        sin: Rc<[f64]>,
        heads: usize,
    },
    Sum(usize),
    Mean(usize),
    MaskedMean {
        x: usize,
        mask: Rc<[bool]>,
        count: usize,
    },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    epoch: u64,
    id: usize,
    value: Rc<Tensor>,
    requires_grad: bool,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_dtype(DType::F64)
    }

    pub fn with_dtype(dtype: DType) -> Self {
        Self {
            inner: Rc::new(RefCell::new(Inner {
                epoch: next_epoch(),
                dtype,
                nodes: Vec::new(),
            })),
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.borrow().dtype
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Vars created before the call become
    /// invalid on this tape. Calling it twice is the same as calling it once.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        if !inner.nodes.is_empty() {
            inner.nodes = Vec::new();
            inner.epoch = next_epoch();
        }
    }

    /// Records a leaf. Gradients are reported for leaves with `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let dtype = self.dtype();
        self.push(value.with_dtype(dtype), Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let value = Rc::new(if inner.dtype == DType::F64 {
            value
        } else {
            value.with_dtype(inner.dtype)
        });
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::clone(&value),
            op,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            epoch: inner.epoch,
            id,
            value,
            requires_grad,
        }
    }

    fn check(&self, v: &Var) -> Result<()> {
        let inner = self.inner.borrow();
        if !Rc::ptr_eq(&self.inner, &v.tape.inner) || v.epoch != inner.epoch {
            return Err(TensorError::ForeignTape);
        }
        Ok(())
    }

    /// Reverse sweep from a one-element `loss`. Contributions from fan-out are
    /// summed in reverse tape order, so the result is deterministic.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        self.check(loss)?;
        if loss.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss.value.shape().to_vec(),
            });
        }
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        if loss.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            propagate(nodes, &mut grads, id, &g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|g| {
                    Tensor::new(nodes[id].value.shape().to_vec(), g)
                        .expect("gradient buffer matches value shape")
                })
            })
            .collect();
        Ok(Gradients {
            epoch: inner.epoch,
            grads,
        })
    }
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Gradients {
    epoch: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` is not a grad-requiring leaf that
    /// the loss depends on.
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        if v.epoch != self.epoch {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, with zeros standing in for "no dependence".
    pub fn get_or_zeros(&self, v: &Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
    }
}

fn acc<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const C: f64 = 0.044_715;
    let u = K * (x + C * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * K * (1.0 + 3.0 * C * x * x);
    (y, dy)
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (na, nb) = (av.numel(), bv.numel());
            let (ad, bd) = (av.data(), bv.data());
            if let Some(ga) = acc(nodes, grads, *a) {
                for (i, &gi) in g.iter().enumerate() {
                    ga[i % na] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => gi,
                        BinaryKind::Mul => gi * bd[i % nb],
                    };
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % nb] += match kind {
                        BinaryKind::Add => gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * ad[i % na],
                    };
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                kernels::axpy(*c, g, gx);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                kernels::axpy(1.0, g, gx);
            }
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let d = matmul_dims(av.shape(), bv.shape()).expect("validated in forward");
            if let Some(ga) = acc(nodes, grads, *a) {
                for bi in 0..d.batch {
                    let go = &g[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                    let bo = d.b_off(bi);
                    let ao = d.a_off(bi);
                    kernels::gemm_nt(
                        go,
                        &bv.data()[bo..bo + d.k * d.n],
                        &mut ga[ao..ao + d.m * d.k],
                        d.m,
                        d.n,
                        d.k,
                    );
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for bi in 0..d.batch {
                    let go = &g[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                    let ao = d.a_off(bi);
                    let bo = d.b_off(bi);
                    kernels::gemm_tn(
                        &av.data()[ao..ao + d.m * d.k],
                        go,
                        &mut gb[bo..bo + d.k * d.n],
                        d.k,
                        d.m,
                        d.n,
                    );
                }
            }
        }
        Op::Gather { x, index } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (&src, &gi) in index.iter().zip(g) {
                    gx[src] += gi;
                }
            }
        }
        Op::Concat { parts } => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                if let Some(gp) = acc(nodes, grads, p) {
                    kernels::axpy(1.0, &g[off..off + n], gp);
                }
                off += n;
            }
        }
        Op::Gelu(x) => {
            let xv = &nodes[*x].value;
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((gxi, &xi), &gi) in gx.iter_mut().zip(xv.data()).zip(g) {
                    *gxi += gi * gelu_parts(xi).1;
                }
            }
        }
        Op::Softmax { x, axis } => {
            let shape = out.shape();
            let (outer, len, inner) = split_axis(shape, *axis);
            let y = out.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let s: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - s);
                        }
                    }
                }
            }
        }
        Op::MaskedSoftmax { x } => {
            let cols = *out.shape().last().expect("rank >= 2");
            let y = out.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((yr, gr), gxr) in y
                    .chunks_exact(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(gx.chunks_exact_mut(cols))
                {
                    let s = kernels::dot(yr, gr);
                    for ((gxi, &yi), &gi) in gxr.iter_mut().zip(yr).zip(gr) {
                        *gxi += yi * (gi - s);
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, eps } => {
            let xv = &nodes[*x].value;
            let gv = &nodes[*gain].value;
            let n = gv.numel();
            let rows = xv.numel() / n;
            let mut dgain = vec![0.0; n];
            let mut dx = vec![0.0; xv.numel()];
            for r in 0..rows {
                let xr = &xv.data()[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let ms = kernels::dot(xr, xr) / n as f64;
                let rms = (ms + eps).sqrt();
                let inv = 1.0 / rms;
                let mut s = 0.0;
                for j in 0..n {
                    let gy = gr[j] * gv.data()[j];
                    s += gy * xr[j];
                    dgain[j] += gr[j] * xr[j] * inv;
                }
                let coef = s / (n as f64 * rms * rms * rms);
                let dxr = &mut dx[r * n..(r + 1) * n];
                for j in 0..n {
                    dxr[j] = gr[j] * gv.data()[j] * inv - xr[j] * coef;
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                kernels::axpy(1.0, &dx, gx);
            }
            if let Some(gg) = acc(nodes, grads, *gain) {
                kernels::axpy(1.0, &dgain, gg);
            }
        }
        Op::Rotary {
            x,
            cos,
            sin,
            heads,
        } => {
            let d = *out.shape().last().expect("rank 2");
            let dh = d / heads;
            let pairs = dh / 2;
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, (gr, gxr)) in g.chunks_exact(d).zip(gx.chunks_exact_mut(d)).enumerate() {
                    for h in 0..*heads {
                        for j in 0..pairs {
                            let (c, s) = (cos[r * pairs + j], sin[r * pairs + j]);
                            let i0 = h * dh + 2 * j;
                            let (g0, g1) = (gr[i0], gr[i0 + 1]);
                            gxr[i0] += g0 * c + g1 * s;
                            gxr[i0 + 1] += -g0 * s + g1 * c;
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let n = gx.len().max(1) as f64;
                gx.iter_mut().for_each(|v| *v += g[0] / n);
            }
        }
        Op::MaskedMean { x, mask, count } => {
            if *count == 0 {
                return;
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                let w = g[0] / *count as f64;
                for (v, &m) in gx.iter_mut().zip(mask.iter()) {
                    if m {
                        *v += w;
                    }
                }
            }
        }
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

impl MatDims {
    fn a_off(&self, bi: usize) -> usize {
        if self.a_batched {
            bi * self.m * self.k
        } else {
            0
        }
    }

    fn b_off(&self, bi: usize) -> usize {
        if self.b_batched {
            bi * self.k * self.n
        } else {
            0
        }
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatDims> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return Err(mismatch());
    }
    let (batch_shape, a_batched, b_batched) = if ab == bb {
        (ab, !ab.is_empty(), !bb.is_empty())
    } else if bb.is_empty() {
        (ab, true, false)
    } else if ab.is_empty() {
        (bb, false, true)
    } else {
        return Err(mismatch());
    };
    let mut out_shape = batch_shape.to_vec();
    out_shape.extend([am[0], bm[1]]);
    Ok(MatDims {
        batch: batch_shape.iter().product(),
        m: am[0],
        k: am[1],
        n: bm[1],
        a_batched,
        b_batched,
        out_shape,
    })
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Row-major permutation of `shape` by `axes`, as a gather index.
fn permute_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut coord = vec![0usize; rank];
    for _ in 0..n {
        index.push(
            coord
                .iter()
                .zip(axes)
                .map(|(&c, &a)| c * strides[a])
                .sum(),
        );
        for d in (0..rank).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    (index, out_shape)
}

/// Concatenates tensors along axis 0. All parts must share trailing extents.
pub fn concat_rows(parts: &[Var]) -> Result<Var> {
    let first = parts.first().ok_or(TensorError::Invalid {
        op: "concat_rows",
        msg: "no inputs".into(),
    })?;
    let tape = &first.tape;
    let tail = &first.shape()[1..];
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        tape.check(p)?;
        if p.shape().is_empty() || &p.shape()[1..] != tail {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        rows += p.shape()[0];
        data.extend_from_slice(p.value.data());
    }
    let mut shape = vec![rows];
    shape.extend_from_slice(tail);
    let rg = parts.iter().any(|p| p.requires_grad);
    Ok(tape.push(
        Tensor::new(shape, data)?,
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
        },
        rg,
    ))
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn unary(&self, value: Tensor, op: Op) -> Var {
        self.tape.push(value, op, self.requires_grad)
    }

    fn binary(&self, other: &Var, kind: BinaryKind) -> Result<Var> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let (big, small) = if self.value.numel() >= other.value.numel() {
            (sa, sb)
        } else {
            (sb, sa)
        };
        let suffix_ok = small.iter().product::<usize>() == 1 && small.is_empty()
            || (small.len() <= big.len() && big.ends_with(small));
        if sa != sb && !suffix_ok {
            return Err(TensorError::ShapeMismatch {
                op: match kind {
                    BinaryKind::Add => "add",
                    BinaryKind::Sub => "sub",
                    BinaryKind::Mul => "mul",
                },
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (ad, bd) = (self.value.data(), other.value.data());
        let (na, nb) = (ad.len(), bd.len());
        let n = na.max(nb);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<f64> = if na == nb {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect()
        };
        let value = Tensor::new(big.to_vec(), data)?;
        Ok(self.tape.push(
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            self.requires_grad || other.requires_grad,
        ))
    }

    /// Elementwise sum. `other` may also be a scalar or a tensor whose shape
    /// is a suffix of `self`'s (broadcast over leading axes).
    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinaryKind::Sub)
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn square(&self) -> Result<Var> {
        self.mul(self)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.tape.check(self)?;
        Ok(self.unary(self.value.map(|x| x * c), Op::Scale(self.id, c)))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        self.tape.check(self)?;
        Ok(self.unary(self.value.map(|x| x + c), Op::AddScalar(self.id)))
    }

    /// Matrix product over the last two axes; leading axes are batch axes and
    /// either side may omit them.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        let d = matmul_dims(self.shape(), other.shape())?;
        let mut out = vec![0.0; d.batch * d.m * d.n];
        let (ad, bd) = (self.value.data(), other.value.data());
        for bi in 0..d.batch {
            let (ao, bo) = (d.a_off(bi), d.b_off(bi));
            kernels::gemm_nn(
                &ad[ao..ao + d.m * d.k],
                &bd[bo..bo + d.k * d.n],
                &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                d.m,
                d.k,
                d.n,
            );
        }
        Ok(self.tape.push(
            Tensor::new(d.out_shape.clone(), out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            self.requires_grad || other.requires_grad,
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.tape.check(self)?;
        let value = (*self.value).clone().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, index: Rc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.tape.check(self)?;
        let shape = shape.into();
        let n = self.value.numel();
        if shape.iter().product::<usize>() != index.len() || index.iter().any(|&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!(
                    "index of length {} into {} elements does not fit {:?}",
                    index.len(),
                    n,
                    shape
                ),
            });
        }
        let src = self.value.data();
        let data = index.iter().map(|&i| src[i]).collect();
        Ok(self.unary(Tensor::new(shape, data)?, Op::Gather { x: self.id, index }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of rank {rank}"),
            });
        }
        let (index, shape) = permute_index(self.shape(), axes);
        self.gather(index.into(), shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape();
        if shape.is_empty() || start + len > shape[0] {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} of {shape:?}", start + len),
            });
        }
        let row: usize = shape[1..].iter().product();
        let index: Vec<usize> = (start * row..(start + len) * row).collect();
        let mut out_shape = shape.to_vec();
        out_shape[0] = len;
        self.gather(index.into(), out_shape)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Var> {
        self.tape.check(self)?;
        Ok(self.unary(self.value.map(|x| gelu_parts(x).0), Op::Gelu(self.id)))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        self.tape.check(self)?;
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let x = self.value.data();
        let mut out = vec![0.0; x.len()];
        let mut buf = vec![0.0; len];
        let mut res = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..len {
                    buf[j] = x[(o * len + j) * inner + i];
                }
                kernels::softmax_slice(&buf, None, &mut res);
                for j in 0..len {
                    out[(o * len + j) * inner + i] = res[j];
                }
            }
        }
        Ok(self.unary(
            Tensor::new(shape.to_vec(), out)?,
            Op::Softmax { x: self.id, axis },
        ))
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// true. `mask` covers the last two axes and is shared by leading axes.
    /// A row with no allowed position comes out as zeros.
    pub fn masked_softmax(&self, mask: Rc<[bool]>) -> Result<Var> {
        self.tape.check(self)?;
        let shape = self.shape();
        if shape.len() < 2 || mask.len() != shape[shape.len() - 2] * shape[shape.len() - 1] {
            return Err(TensorError::Invalid {
                op: "masked_softmax",
                msg: format!("mask of length {} for shape {shape:?}", mask.len()),
            });
        }
        let cols = shape[shape.len() - 1];
        let rows = shape[shape.len() - 2];
        let x = self.value.data();
        let mut out = vec![0.0; x.len()];
        for (r, (xr, or)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
            let mr = &mask[(r % rows) * cols..(r % rows + 1) * cols];
            kernels::softmax_slice(xr, Some(mr), or);
        }
        Ok(self.unary(
            Tensor::new(shape.to_vec(), out)?,
            Op::MaskedSoftmax { x: self.id },
        ))
    }

    /// `x / sqrt(mean(x²) + eps) * gain` over the last axis.
    pub fn rms_norm(&self, gain: &Var, eps: f64) -> Result<Var> {
        self.tape.check(self)?;
        self.tape.check(gain)?;
        let shape = self.shape();
        let n = gain.value.numel();
        if gain.shape().len() != 1 || shape.last() != Some(&n) {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                lhs: shape.to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let g = gain.value.data();
        let mut out = vec![0.0; self.value.numel()];
        for (xr, or) in self.value.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let inv = 1.0 / (kernels::dot(xr, xr) / n as f64 + eps).sqrt();
            for j in 0..n {
                or[j] = xr[j] * inv * g[j];
            }
        }
        Ok(self.tape.push(
            Tensor::new(shape.to_vec(), out)?,
            Op::RmsNorm {
                x: self.id,
                gain: gain.id,
                eps,
            },
            self.requires_grad || gain.requires_grad,
        ))
    }

    /// Rotates interleaved pairs `(2j, 2j+1)` within each of `heads` equal
    /// slices of the last axis. `cos`/`sin` are `[rows, head_dim / 2]`.
    pub fn rotary(&self, cos: Rc<[f64]>, sin: Rc<[f64]>, heads: usize) -> Result<Var> {
        self.tape.check(self)?;
        let shape = self.shape();
        if shape.len() != 2 || heads == 0 || shape[1] % (2 * heads) != 0 {
            return Err(TensorError::Invalid {
                op: "rotary",
                msg: format!("shape {shape:?} with {heads} heads"),
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        let dh = d / heads;
        let pairs = dh / 2;
        if cos.len() != rows * pairs || sin.len() != rows * pairs {
            return Err(TensorError::Invalid {
                op: "rotary",
                msg: format!("angle table of length {} for {rows}x{pairs}", cos.len()),
            });
        }
        let mut out = self.value.data().to_vec();
        for (r, orow) in out.chunks_exact_mut(d).enumerate() {
            for h in 0..heads {
                for j in 0..pairs {
                    let (c, s) = (cos[r * pairs + j], sin[r * pairs + j]);
                    let i0 = h * dh + 2 * j;
                    let (x0, x1) = (orow[i0], orow[i0 + 1]);
                    orow[i0] = x0 * c - x1 * s;
                    orow[i0 + 1] = x0 * s + x1 * c;
                }
            }
        }
        Ok(self.unary(
            Tensor::new(shape.to_vec(), out)?,
            Op::Rotary {
                x: self.id,
                cos,
                sin,
                heads,
            },
        ))
    }

    pub fn sum(&self) -> Result<Var> {
        self.tape.check(self)?;
        Ok(self.unary(Tensor::scalar(self.value.sum()), Op::Sum(self.id)))
    }

    pub fn mean(&self) -> Result<Var> {
        self.tape.check(self)?;
        Ok(self.unary(Tensor::scalar(self.value.mean()), Op::Mean(self.id)))
    }

    /// Mean of the entries where `mask` is true; exactly 0 (with zero
    /// gradient) when the mask selects nothing.
    pub fn masked_mean(&self, mask: Rc<[bool]>) -> Result<Var> {
        self.tape.check(self)?;
        if mask.len() != self.value.numel() {
            return Err(TensorError::Invalid {
                op: "masked_mean",
                msg: format!(
                    "mask of length {} for {} elements",
                    mask.len(),
                    self.value.numel()
                ),
            });
        }
        let mut count = 0;
        let mut total = 0.0;
        for (&x, &m) in self.value.data().iter().zip(mask.iter()) {
            if m {
                count += 1;
                total += x;
            }
        }
        let v = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.unary(
            Tensor::scalar(v),
            Op::MaskedMean {
                x: self.id,
                mask,
                count,
            },
        ))
    }
}
