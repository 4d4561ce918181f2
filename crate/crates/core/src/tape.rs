//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation appends a node holding its output buffer, its shape and an
//! op record naming its inputs by [`TensorId`]. `backward` walks the tape in
//! reverse creation order and accumulates gradients with `+=`; iteration
//! orders are fixed, so gradients are bit-identical across repeated runs.
//!
//! Tracked tensors are never mutated in place: builders only append. Tensors
//! created with `requires_grad = false` (and anything depending only on them)
//! never receive gradient contributions.

use crate::cost;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::collections::BTreeMap;

/// Handle to a tensor on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Silu,
    Relu,
    Sigmoid,
    Exp,
    Softplus,
    Sqrt,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// How out-of-bounds taps behave under spatial padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    /// Out-of-bounds taps read zero.
    #[default]
    Zero,
    /// Out-of-bounds taps read the nearest border pixel, so constant maps
    /// stay constant through the convolution.
    Replicate,
}

/// Geometry of a 2-D convolution. Grouping is limited to the depthwise case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
    pub pad_mode: PadMode,
}

impl ConvSpec {
    pub fn unit(padding: usize) -> Self {
        ConvSpec { stride: 1, padding, depthwise: false, pad_mode: PadMode::Zero }
    }

    pub fn with_replicate_padding(mut self) -> Self {
        self.pad_mode = PadMode::Replicate;
        self
    }
}

/// Resolve a possibly out-of-bounds coordinate according to the pad mode.
#[inline]
fn resolve_tap(raw: isize, extent: usize, mode: PadMode) -> Option<usize> {
    if raw >= 0 && (raw as usize) < extent {
        Some(raw as usize)
    } else {
        match mode {
            PadMode::Zero => None,
            PadMode::Replicate => Some(raw.clamp(0, extent as isize - 1) as usize),
        }
    }
}

/// Initial contents of a new tape tensor.
pub enum Fill<T> {
    Zeros,
    Const(T),
    Data(Vec<T>),
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Unary { kind: UnaryKind, x: TensorId },
    Affine { x: TensorId, mul: T },
    Binary { kind: BinaryKind, a: TensorId, b: TensorId },
    Matmul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Reshape { x: TensorId },
    Reduce { kind: ReduceKind, x: TensorId, axis: Option<usize>, winners: Vec<usize> },
    Softmax { x: TensorId, axis: usize },
    Concat { xs: Vec<TensorId>, axis: usize },
    Narrow { x: TensorId, axis: usize, start: usize },
    Conv2d { x: TensorId, w: TensorId, bias: Option<TensorId>, spec: ConvSpec },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<T>, inv_std: Vec<T> },
    Dft2d { x: TensorId },
    PixelShuffle { x: TensorId, r: usize },
    NeighborhoodMean { x: TensorId, positions: Vec<(usize, usize)>, radius: usize },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

#[derive(Default)]
struct ScopeRecorder {
    stack: Vec<String>,
    macs: BTreeMap<String, u64>,
    activations: BTreeMap<String, u64>,
}

/// Append-only computation tape.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    macs: u64,
    scopes: Option<ScopeRecorder>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Standard trailing-dimension broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for r in 0..rank {
        let da = if r < a.len() { a[a.len() - 1 - r] } else { 1 };
        let db = if r < b.len() { b[b.len() - 1 - r] } else { 1 };
        out[rank - 1 - r] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast shapes {a:?} and {b:?}"
            )));
        };
    }
    Ok(out)
}

/// Row-major strides of `shape` against an output of rank `out_rank`,
/// left-padded, with stride 0 on broadcast dimensions.
fn bcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let mut s = vec![0usize; out_rank];
    let mut acc = 1usize;
    let off = out_rank - shape.len();
    for i in (0..shape.len()).rev() {
        s[off + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    s
}

/// Visit every output index of `out_shape` along with the (broadcast) offsets
/// into two source buffers.
fn for_each_bcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    if n == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ao, mut bo) = (0usize, 0usize);
    for lin in 0..n {
        f(lin, ao, bo);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ao += sa[ax];
            bo += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            ao -= sa[ax] * out_shape[ax];
            bo -= sb[ax] * out_shape[ax];
        }
    }
}

/// Split `shape` at `axis` into (outer, mid, inner) extents so that the linear
/// index of `[o, m, i]` is `(o * mid + m) * inner + i`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// softplus(x) = log(1 + e^x) in the overflow-safe form max(x, 0) + log1p(e^-|x|).
fn stable_softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), macs: 0, scopes: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── cost instrumentation ────────────────────────────────────────────────

    /// Total MAC-equivalents accumulated by every node pushed so far.
    pub fn total_macs(&self) -> u64 {
        self.macs
    }

    /// Start recording per-scope costs (used by the ledger cross-check).
    pub fn enable_scope_recording(&mut self) {
        self.scopes = Some(ScopeRecorder::default());
    }

    pub fn push_scope(&mut self, name: &str) {
        if let Some(rec) = &mut self.scopes {
            rec.stack.push(name.to_string());
        }
    }

    pub fn pop_scope(&mut self) {
        if let Some(rec) = &mut self.scopes {
            rec.stack.pop();
        }
    }

    /// Recorded macs per dotted scope path (cost-bearing nodes only).
    pub fn scope_macs(&self) -> BTreeMap<String, u64> {
        self.scopes.as_ref().map(|r| r.macs.clone()).unwrap_or_default()
    }

    /// Recorded activation element counts per dotted scope path.
    pub fn scope_activations(&self) -> BTreeMap<String, u64> {
        self.scopes.as_ref().map(|r| r.activations.clone()).unwrap_or_default()
    }

    fn record(&mut self, macs: u64, out_elems: usize) {
        self.macs += macs;
        if macs == 0 {
            return;
        }
        if let Some(rec) = &mut self.scopes {
            let path = rec.stack.join(".");
            *rec.macs.entry(path.clone()).or_insert(0) += macs;
            *rec.activations.entry(path).or_insert(0) += out_elems as u64;
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool, macs: u64) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.record(macs, data.len());
        self.nodes.push(Node { shape, data, grad: None, needs_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    // ── accessors ───────────────────────────────────────────────────────────

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    /// Gradient of the last `backward` root w.r.t. this tensor, if it was
    /// tracked and reached.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Extract the single element of a scalar-shaped tensor.
    pub fn value(&self, id: TensorId) -> Result<T> {
        let n = &self.nodes[id.0];
        if n.data.len() != 1 {
            return Err(Error::contract(format!(
                "value() requires a scalar tensor, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── construction ────────────────────────────────────────────────────────

    /// Create a leaf tensor. `Fill::Data` must match the shape's element count.
    pub fn tensor(&mut self, shape: &[usize], fill: Fill<T>, requires_grad: bool) -> Result<TensorId> {
        let n = numel(shape);
        let data = match fill {
            Fill::Zeros => vec![T::zero(); n],
            Fill::Const(v) => vec![v; n],
            Fill::Data(d) => {
                if d.len() != n {
                    return Err(Error::shape(format!(
                        "tensor data length {} does not match shape {:?} ({} elements)",
                        d.len(),
                        shape,
                        n
                    )));
                }
                d
            }
        };
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad, 0))
    }

    /// Tracked leaf from data.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>) -> Result<TensorId> {
        self.tensor(shape, Fill::Data(data), true)
    }

    /// Untracked leaf from data.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<TensorId> {
        self.tensor(shape, Fill::Data(data), false)
    }

    /// Untracked scalar of shape `[1]`.
    pub fn scalar(&mut self, v: T) -> TensorId {
        self.push(vec![1], vec![v], Op::Leaf, false, 0)
    }

    // ── elementwise ─────────────────────────────────────────────────────────

    fn binary(&mut self, kind: BinaryKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let n = numel(&out_shape);
        let rank = out_shape.len();
        let sa = bcast_strides(self.shape(a), rank);
        let sb = bcast_strides(self.shape(b), rank);
        let mut out = vec![T::zero(); n];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            let apply = |x: T, y: T| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
            if self.nodes[a.0].shape == self.nodes[b.0].shape {
                for i in 0..n {
                    out[i] = apply(da[i], db[i]);
                }
            } else {
                for_each_bcast(&out_shape, &sa, &sb, |lin, ao, bo| {
                    out[lin] = apply(da[ao], db[bo]);
                });
            }
        }
        let macs = match kind {
            BinaryKind::Add | BinaryKind::Sub => 0,
            BinaryKind::Mul => cost::MUL_MACS * n as u64,
            BinaryKind::Div => cost::DIV_MACS * n as u64,
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out_shape, out, Op::Binary { kind, a, b }, needs, macs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: TensorId) -> TensorId {
        let xd = &self.nodes[x.0].data;
        let out: Vec<T> = xd
            .iter()
            .map(|&v| match kind {
                UnaryKind::Silu => v * stable_sigmoid(v),
                UnaryKind::Relu => v.max(T::zero()),
                UnaryKind::Sigmoid => stable_sigmoid(v),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Softplus => stable_softplus(v),
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Abs => v.abs(),
            })
            .collect();
        let n = out.len() as u64;
        let macs = n * match kind {
            UnaryKind::Silu => cost::SILU_MACS,
            UnaryKind::Relu | UnaryKind::Abs => 0,
            UnaryKind::Sigmoid => cost::SIGMOID_MACS,
            UnaryKind::Exp => cost::EXP_MACS,
            UnaryKind::Softplus => cost::SOFTPLUS_MACS,
            UnaryKind::Sqrt => cost::SQRT_MACS,
        };
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, out, Op::Unary { kind, x }, needs, macs)
    }

    pub fn silu(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Silu, x)
    }
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Softplus, x)
    }
    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn abs(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Abs, x)
    }

    /// y = mul * x + add with scalar constants.
    pub fn affine(&mut self, x: TensorId, mul: T, add: T) -> TensorId {
        let out: Vec<T> = self.nodes[x.0].data.iter().map(|&v| mul * v + add).collect();
        let macs = cost::affine_macs(out.len());
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, out, Op::Affine { x, mul }, needs, macs)
    }

    // ── linear algebra and shape ops ────────────────────────────────────────

    /// `[m,k] x [k,p] -> [m,p]`, rank-2 only.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul requires [m,k] x [k,p], got {sa:?} x {sb:?}"
            )));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * p];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for i in 0..m {
                for l in 0..k {
                    let av = da[i * k + l];
                    let row = &db[l * p..(l + 1) * p];
                    let orow = &mut out[i * p..(i + 1) * p];
                    for j in 0..p {
                        orow[j] = orow[j] + av * row[j];
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let macs = cost::matmul_macs(m, k, p);
        Ok(self.push(vec![m, p], out, Op::Matmul { a, b }, needs, macs))
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose requires rank 2, got {s:?}")));
        }
        let (m, k) = (s[0], s[1]);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![T::zero(); m * k];
        for i in 0..m {
            for j in 0..k {
                out[j * m + i] = xd[i * k + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![k, m], out, Op::Transpose { x }, needs, 0))
    }

    /// Reinterpret the (row-major contiguous) data under a new shape.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.nodes[x.0].data.len() {
            return Err(Error::shape(format!(
                "reshape from {:?} to {:?} changes element count",
                self.shape(x),
                shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let needs = self.needs(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x }, needs, 0))
    }

    // ── reductions ──────────────────────────────────────────────────────────

    fn reduce(
        &mut self,
        kind: ReduceKind,
        x: TensorId,
        axis: Option<usize>,
        keepdim: bool,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let (out_shape, outer, mid, inner) = match axis {
            None => (vec![1], 1usize, numel(&xs), 1usize),
            Some(ax) => {
                if ax >= xs.len() {
                    return Err(Error::shape(format!(
                        "reduce axis {ax} out of range for shape {xs:?}"
                    )));
                }
                let (o, m, i) = split_axis(&xs, ax);
                let mut os = xs.clone();
                if keepdim {
                    os[ax] = 1;
                } else {
                    os.remove(ax);
                }
                if os.is_empty() {
                    os.push(1);
                }
                (os, o, m, i)
            }
        };
        if mid == 0 {
            return Err(Error::shape(format!(
                "cannot reduce over an empty axis in shape {xs:?}"
            )));
        }
        let n_out = outer * inner;
        let mut out = vec![T::zero(); n_out];
        let mut winners = Vec::new();
        {
            let xd = &self.nodes[x.0].data;
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for i in 0..inner {
                                out[o * inner + i] = out[o * inner + i] + xd[base + i];
                            }
                        }
                    }
                    if kind == ReduceKind::Mean {
                        let inv = T::one() / T::from_f64(mid as f64);
                        for v in &mut out {
                            *v = *v * inv;
                        }
                    }
                }
                ReduceKind::Max => {
                    // Ties keep the first (lowest linear index) element.
                    winners = vec![0usize; n_out];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut best = xd[(o * mid) * inner + i];
                            let mut best_at = (o * mid) * inner + i;
                            for m in 1..mid {
                                let at = (o * mid + m) * inner + i;
                                if xd[at] > best {
                                    best = xd[at];
                                    best_at = at;
                                }
                            }
                            out[o * inner + i] = best;
                            winners[o * inner + i] = best_at;
                        }
                    }
                }
            }
        }
        let macs = match kind {
            ReduceKind::Mean => cost::mean_macs(n_out),
            _ => 0,
        };
        let needs = self.needs(x);
        Ok(self.push(out_shape, out, Op::Reduce { kind, x, axis, winners }, needs, macs))
    }

    pub fn sum(&mut self, x: TensorId, axis: Option<usize>, keepdim: bool) -> Result<TensorId> {
        self.reduce(ReduceKind::Sum, x, axis, keepdim)
    }
    pub fn mean(&mut self, x: TensorId, axis: Option<usize>, keepdim: bool) -> Result<TensorId> {
        self.reduce(ReduceKind::Mean, x, axis, keepdim)
    }
    pub fn max(&mut self, x: TensorId, axis: Option<usize>, keepdim: bool) -> Result<TensorId> {
        self.reduce(ReduceKind::Max, x, axis, keepdim)
    }

    /// Numerically stabilized softmax along `axis` (max-subtraction inside).
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for shape {xs:?}"
            )));
        }
        let (outer, mid, inner) = split_axis(&xs, axis);
        if mid == 0 {
            return Err(Error::shape("softmax over an empty axis".to_string()));
        }
        let mut out = vec![T::zero(); numel(&xs)];
        {
            let xd = &self.nodes[x.0].data;
            for o in 0..outer {
                for i in 0..inner {
                    let at = |m: usize| (o * mid + m) * inner + i;
                    let mut mx = xd[at(0)];
                    for m in 1..mid {
                        mx = mx.max(xd[at(m)]);
                    }
                    let mut sum = T::zero();
                    for m in 0..mid {
                        let e = (xd[at(m)] - mx).exp();
                        out[at(m)] = e;
                        sum = sum + e;
                    }
                    for m in 0..mid {
                        out[at(m)] = out[at(m)] / sum;
                    }
                }
            }
        }
        let macs = cost::SOFTMAX_MACS * numel(&xs) as u64;
        let needs = self.needs(x);
        Ok(self.push(xs, out, Op::Softmax { x, axis }, needs, macs))
    }

    // ── concatenation and slicing ───────────────────────────────────────────

    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::shape("concat of zero tensors".to_string()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0usize;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() {
                return Err(Error::shape("concat rank mismatch".to_string()));
            }
            for (d, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::shape(format!(
                        "concat shapes differ outside axis {axis}: {s:?} vs {first:?}"
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let mut offset = 0usize;
        for &x in xs {
            let mid = self.shape(x)[axis];
            let xd = &self.nodes[x.0].data;
            for o in 0..outer {
                for m in 0..mid {
                    let src = (o * mid + m) * inner;
                    let dst = (o * axis_total + offset + m) * inner;
                    out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
                }
            }
            offset += mid;
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(out_shape, out, Op::Concat { xs: xs.to_vec(), axis }, needs, 0))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::shape(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for shape {xs:?}"
            )));
        }
        let (outer, mid, inner) = split_axis(&xs, axis);
        let mut out_shape = xs.clone();
        out_shape[axis] = len;
        let mut out = vec![T::zero(); numel(&out_shape)];
        let xd = &self.nodes[x.0].data;
        for o in 0..outer {
            for m in 0..len {
                let src = (o * mid + start + m) * inner;
                let dst = (o * len + m) * inner;
                out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out_shape, out, Op::Narrow { x, axis, start }, needs, 0))
    }

    // ── structured ops ──────────────────────────────────────────────────────

    /// 2-D convolution over `[B,Cin,H,W]` with weight `[Cout,Cin,kh,kw]`
    /// (depthwise: `[C,1,kh,kw]`) and optional bias `[Cout]`. Zero padding;
    /// output extent `(H + 2p - kh) / stride + 1` (floor).
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        spec: ConvSpec,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d requires rank-4 input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if spec.stride == 0 {
            return Err(Error::shape("conv2d stride must be >= 1".to_string()));
        }
        let (b, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if spec.depthwise {
            if wc != 1 || cout != cin {
                return Err(Error::shape(format!(
                    "depthwise conv2d requires weight [C,1,kh,kw] with C = {cin}, got {ws:?}"
                )));
            }
        } else if wc != cin {
            return Err(Error::shape(format!(
                "conv2d weight in-channels {wc} != input channels {cin}"
            )));
        }
        if h + 2 * spec.padding < kh || wdt + 2 * spec.padding < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * spec.padding,
                wdt + 2 * spec.padding
            )));
        }
        if let Some(bb) = bias {
            let bs = self.shape(bb);
            if bs != [cout] {
                return Err(Error::shape(format!(
                    "conv2d bias shape {bs:?} != [{cout}]"
                )));
            }
        }
        let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let ow = (wdt + 2 * spec.padding - kw) / spec.stride + 1;
        let cin_per_group = if spec.depthwise { 1 } else { cin };
        let mut out = vec![T::zero(); b * cout * oh * ow];
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            let bd = bias.map(|bb| self.nodes[bb.0].data.clone());
            for bi in 0..b {
                for co in 0..cout {
                    let base_w = co * cin_per_group * kh * kw;
                    let bias_v = bd.as_ref().map(|v| v[co]).unwrap_or_else(T::zero);
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let mut acc = bias_v;
                            for cg in 0..cin_per_group {
                                let ci = if spec.depthwise { co } else { cg };
                                let base_x = (bi * cin + ci) * h * wdt;
                                for i in 0..kh {
                                    let raw_h = (ohi * spec.stride + i) as isize - spec.padding as isize;
                                    let Some(ih) = resolve_tap(raw_h, h, spec.pad_mode) else {
                                        continue;
                                    };
                                    for j in 0..kw {
                                        let raw_w = (owi * spec.stride + j) as isize - spec.padding as isize;
                                        let Some(iw) = resolve_tap(raw_w, wdt, spec.pad_mode) else {
                                            continue;
                                        };
                                        let xv = xd[base_x + ih * wdt + iw];
                                        let wv = wd[base_w + (cg * kh + i) * kw + j];
                                        acc = acc + xv * wv;
                                    }
                                }
                            }
                            out[((bi * cout + co) * oh + ohi) * ow + owi] = acc;
                        }
                    }
                }
            }
        }
        let macs = cost::conv2d_macs(b * cout * oh * ow, cin_per_group, kh, kw);
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|bb| self.needs(bb)).unwrap_or(false);
        Ok(self.push(
            vec![b, cout, oh, ow],
            out,
            Op::Conv2d { x, w, bias, spec },
            needs,
            macs,
        ))
    }

    /// Layer normalization over the channel axis of `[B,C,H,W]`: every
    /// `(b,h,w)` channel vector is normalized to zero mean / unit variance
    /// (population variance, `eps` inside the square root) then scaled by
    /// `gamma` and shifted by `beta` (both `[C]`).
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!(
                "layer_norm requires rank-4 input, got {xs:?}"
            )));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "layer_norm gamma/beta must have shape [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let hw = h * w;
        let positions = b * hw;
        let eps_t = T::from_f64(eps);
        let inv_c = T::one() / T::from_f64(c as f64);
        let mut out = vec![T::zero(); numel(&xs)];
        let mut means = vec![T::zero(); positions];
        let mut inv_stds = vec![T::zero(); positions];
        {
            let xd = &self.nodes[x.0].data;
            let gd = &self.nodes[gamma.0].data;
            let bd = &self.nodes[beta.0].data;
            for bi in 0..b {
                for p in 0..hw {
                    let mut mean = T::zero();
                    for ci in 0..c {
                        mean = mean + xd[(bi * c + ci) * hw + p];
                    }
                    mean = mean * inv_c;
                    let mut var = T::zero();
                    for ci in 0..c {
                        let d = xd[(bi * c + ci) * hw + p] - mean;
                        var = var + d * d;
                    }
                    var = var * inv_c;
                    let inv_std = T::one() / (var + eps_t).sqrt();
                    means[bi * hw + p] = mean;
                    inv_stds[bi * hw + p] = inv_std;
                    for ci in 0..c {
                        let at = (bi * c + ci) * hw + p;
                        out[at] = gd[ci] * ((xd[at] - mean) * inv_std) + bd[ci];
                    }
                }
            }
        }
        let macs = cost::layer_norm_macs(c, positions);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            xs,
            out,
            Op::LayerNorm { x, gamma, beta, mean: means, inv_std: inv_stds },
            needs,
            macs,
        ))
    }

    /// Unnormalized forward 2-D DFT of every `[H,W]` plane of `[B,C,H,W]`.
    /// Output is `[B,C,2,H,W]`: index 0 of the third axis holds the real
    /// part, index 1 the imaginary part. Linear in the input, so it
    /// backpropagates exactly.
    pub fn dft2d(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("dft2d requires rank-4 input, got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let mut out = vec![T::zero(); b * c * 2 * hw];
        {
            let xd = &self.nodes[x.0].data;
            let mut re = vec![0f64; hw];
            let mut im = vec![0f64; hw];
            for plane in 0..b * c {
                for i in 0..hw {
                    re[i] = xd[plane * hw + i].to_f64();
                    im[i] = 0.0;
                }
                crate::fft::dft2d_in_place(&mut re, &mut im, h, w);
                let base = plane * 2 * hw;
                for i in 0..hw {
                    out[base + i] = T::from_f64(re[i]);
                    out[base + hw + i] = T::from_f64(im[i]);
                }
            }
        }
        let macs = cost::dft2d_macs(b, c, h, w);
        let needs = self.needs(x);
        Ok(self.push(vec![b, c, 2, h, w], out, Op::Dft2d { x }, needs, macs))
    }

    /// Depth-to-space rearrangement: `[B, C*r^2, H, W] -> [B, C, r*H, r*W]`.
    pub fn pixel_shuffle(&mut self, x: TensorId, r: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || r == 0 || !xs[1].is_multiple_of(r * r) {
            return Err(Error::shape(format!(
                "pixel_shuffle(r={r}) requires rank-4 input with channels divisible by r^2, got {xs:?}"
            )));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let c = cin / (r * r);
        let (oh, ow) = (h * r, w * r);
        let mut out = vec![T::zero(); b * c * oh * ow];
        {
            let xd = &self.nodes[x.0].data;
            for bi in 0..b {
                for co in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            for dh in 0..r {
                                for dw in 0..r {
                                    let ci = co * r * r + dh * r + dw;
                                    let src = ((bi * cin + ci) * h + hi) * w + wi;
                                    let dst = ((bi * c + co) * oh + hi * r + dh) * ow + wi * r + dw;
                                    out[dst] = xd[src];
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![b, c, oh, ow], out, Op::PixelShuffle { x, r }, needs, 0))
    }

    /// Mean feature vector over the `(2*radius+1)^2` window around each given
    /// position of `[C,H,W]`, windows clipped at the borders: output `[C, n]`.
    pub fn neighborhood_mean(
        &mut self,
        x: TensorId,
        positions: &[(usize, usize)],
        radius: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(format!(
                "neighborhood_mean requires rank-3 input [C,H,W], got {xs:?}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        for &(ph, pw) in positions {
            if ph >= h || pw >= w {
                return Err(Error::shape(format!(
                    "neighborhood position ({ph},{pw}) outside {h}x{w}"
                )));
            }
        }
        let n = positions.len();
        let mut out = vec![T::zero(); c * n];
        {
            let xd = &self.nodes[x.0].data;
            for (i, &(ph, pw)) in positions.iter().enumerate() {
                let h0 = ph.saturating_sub(radius);
                let h1 = (ph + radius).min(h - 1);
                let w0 = pw.saturating_sub(radius);
                let w1 = (pw + radius).min(w - 1);
                let count = T::from_f64(((h1 - h0 + 1) * (w1 - w0 + 1)) as f64);
                for ci in 0..c {
                    let mut acc = T::zero();
                    for y in h0..=h1 {
                        for xx in w0..=w1 {
                            acc = acc + xd[(ci * h + y) * w + xx];
                        }
                    }
                    out[ci * n + i] = acc / count;
                }
            }
        }
        let macs = cost::neighborhood_mean_macs(c, n);
        let needs = self.needs(x);
        Ok(self.push(
            vec![c, n],
            out,
            Op::NeighborhoodMean { x, positions: positions.to_vec(), radius },
            needs,
            macs,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────────

    fn accumulate(&mut self, id: TensorId, contrib: &[T]) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        let g = node.grad.get_or_insert_with(|| vec![T::zero(); node.data.len()]);
        debug_assert_eq!(g.len(), contrib.len());
        for (gv, cv) in g.iter_mut().zip(contrib.iter()) {
            *gv = *gv + *cv;
        }
    }

    /// Reverse pass from a scalar root. Existing gradients are cleared first;
    /// after the call, `grad` returns d(root)/d(tensor) for every tracked
    /// tensor that participates in the root's computation.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].needs_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match &self.nodes[id].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            self.backprop_node(TensorId(id), &op, &g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, out: TensorId, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Unary { kind, x } => {
                let xd = &self.nodes[x.0].data;
                let yd = &self.nodes[out.0].data;
                let contrib: Vec<T> = match kind {
                    UnaryKind::Silu => xd
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| {
                            let s = stable_sigmoid(v);
                            gv * (s * (T::one() + v * (T::one() - s)))
                        })
                        .collect(),
                    UnaryKind::Relu => xd
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                    UnaryKind::Sigmoid => yd
                        .iter()
                        .zip(g)
                        .map(|(&y, &gv)| gv * y * (T::one() - y))
                        .collect(),
                    UnaryKind::Exp => yd.iter().zip(g).map(|(&y, &gv)| gv * y).collect(),
                    UnaryKind::Softplus => xd
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| gv * stable_sigmoid(v))
                        .collect(),
                    UnaryKind::Sqrt => yd
                        .iter()
                        .zip(g)
                        .map(|(&y, &gv)| {
                            if y == T::zero() {
                                T::zero()
                            } else {
                                gv / (T::from_f64(2.0) * y)
                            }
                        })
                        .collect(),
                    UnaryKind::Abs => xd
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| {
                            if v > T::zero() {
                                gv
                            } else if v < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                };
                self.accumulate(*x, &contrib);
            }
            Op::Affine { x, mul } => {
                let contrib: Vec<T> = g.iter().map(|&gv| gv * *mul).collect();
                self.accumulate(*x, &contrib);
            }
            Op::Binary { kind, a, b } => {
                let out_shape = self.nodes[out.0].shape.clone();
                let rank = out_shape.len();
                let sa = bcast_strides(&self.nodes[a.0].shape, rank);
                let sb = bcast_strides(&self.nodes[b.0].shape, rank);
                let mut da = vec![T::zero(); self.nodes[a.0].data.len()];
                let mut db = vec![T::zero(); self.nodes[b.0].data.len()];
                {
                    let ad = &self.nodes[a.0].data;
                    let bd = &self.nodes[b.0].data;
                    match kind {
                        BinaryKind::Add => {
                            for_each_bcast(&out_shape, &sa, &sb, |lin, ao, bo| {
                                da[ao] = da[ao] + g[lin];
                                db[bo] = db[bo] + g[lin];
                            });
                        }
                        BinaryKind::Sub => {
                            for_each_bcast(&out_shape, &sa, &sb, |lin, ao, bo| {
                                da[ao] = da[ao] + g[lin];
                                db[bo] = db[bo] - g[lin];
                            });
                        }
                        BinaryKind::Mul => {
                            for_each_bcast(&out_shape, &sa, &sb, |lin, ao, bo| {
                                da[ao] = da[ao] + g[lin] * bd[bo];
                                db[bo] = db[bo] + g[lin] * ad[ao];
                            });
                        }
                        BinaryKind::Div => {
                            for_each_bcast(&out_shape, &sa, &sb, |lin, ao, bo| {
                                let inv_b = T::one() / bd[bo];
                                da[ao] = da[ao] + g[lin] * inv_b;
                                db[bo] = db[bo] - g[lin] * ad[ao] * inv_b * inv_b;
                            });
                        }
                    }
                }
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = &self.nodes[a.0].shape;
                    (s[0], s[1])
                };
                let p = self.nodes[b.0].shape[1];
                let mut da = vec![T::zero(); m * k];
                let mut db = vec![T::zero(); k * p];
                {
                    let ad = &self.nodes[a.0].data;
                    let bd = &self.nodes[b.0].data;
                    // da = g . b^T ; db = a^T . g
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = T::zero();
                            for j in 0..p {
                                acc = acc + g[i * p + j] * bd[l * p + j];
                            }
                            da[i * k + l] = acc;
                        }
                    }
                    for l in 0..k {
                        for j in 0..p {
                            let mut acc = T::zero();
                            for i in 0..m {
                                acc = acc + ad[i * k + l] * g[i * p + j];
                            }
                            db[l * p + j] = acc;
                        }
                    }
                }
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Transpose { x } => {
                let (k, m) = {
                    let s = &self.nodes[out.0].shape;
                    (s[0], s[1])
                };
                let mut dx = vec![T::zero(); m * k];
                for j in 0..k {
                    for i in 0..m {
                        dx[i * k + j] = g[j * m + i];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Reshape { x } => {
                self.accumulate(*x, g);
            }
            Op::Reduce { kind, x, axis, winners } => {
                let xs = self.nodes[x.0].shape.clone();
                let (outer, mid, inner) = match axis {
                    None => (1usize, numel(&xs), 1usize),
                    Some(ax) => split_axis(&xs, *ax),
                };
                let mut dx = vec![T::zero(); numel(&xs)];
                match kind {
                    ReduceKind::Sum => {
                        for o in 0..outer {
                            for m in 0..mid {
                                for i in 0..inner {
                                    dx[(o * mid + m) * inner + i] = g[o * inner + i];
                                }
                            }
                        }
                    }
                    ReduceKind::Mean => {
                        let inv = T::one() / T::from_f64(mid as f64);
                        for o in 0..outer {
                            for m in 0..mid {
                                for i in 0..inner {
                                    dx[(o * mid + m) * inner + i] = g[o * inner + i] * inv;
                                }
                            }
                        }
                    }
                    ReduceKind::Max => {
                        for (slot, &win) in winners.iter().enumerate() {
                            dx[win] = dx[win] + g[slot];
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Softmax { x, axis } => {
                let xs = self.nodes[x.0].shape.clone();
                let (outer, mid, inner) = split_axis(&xs, *axis);
                let yd = &self.nodes[out.0].data;
                let mut dx = vec![T::zero(); numel(&xs)];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |m: usize| (o * mid + m) * inner + i;
                        let mut dot = T::zero();
                        for m in 0..mid {
                            dot = dot + g[at(m)] * yd[at(m)];
                        }
                        for m in 0..mid {
                            dx[at(m)] = yd[at(m)] * (g[at(m)] - dot);
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[out.0].shape.clone();
                let (outer, total, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0usize;
                for &x in xs {
                    let mid = self.nodes[x.0].shape[*axis];
                    let mut dx = vec![T::zero(); self.nodes[x.0].data.len()];
                    for o in 0..outer {
                        for m in 0..mid {
                            let src = (o * total + offset + m) * inner;
                            let dst = (o * mid + m) * inner;
                            dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                        }
                    }
                    self.accumulate(x, &dx);
                    offset += mid;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.nodes[x.0].shape.clone();
                let (outer, mid, inner) = split_axis(&xs, *axis);
                let len = self.nodes[out.0].shape[*axis];
                let mut dx = vec![T::zero(); numel(&xs)];
                for o in 0..outer {
                    for m in 0..len {
                        let dst = (o * mid + start + m) * inner;
                        let src = (o * len + m) * inner;
                        dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Conv2d { x, w, bias, spec } => {
                let xs = self.nodes[x.0].shape.clone();
                let ws = self.nodes[w.0].shape.clone();
                let os = self.nodes[out.0].shape.clone();
                let (b, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (oh, ow) = (os[2], os[3]);
                let cin_per_group = if spec.depthwise { 1 } else { cin };
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let mut dx = vec![T::zero(); numel(&xs)];
                let mut dw = vec![T::zero(); numel(&ws)];
                {
                    let xd = &self.nodes[x.0].data;
                    let wd = &self.nodes[w.0].data;
                    for bi in 0..b {
                        for co in 0..cout {
                            let base_w = co * cin_per_group * kh * kw;
                            for ohi in 0..oh {
                                for owi in 0..ow {
                                    let gv = g[((bi * cout + co) * oh + ohi) * ow + owi];
                                    for cg in 0..cin_per_group {
                                        let ci = if spec.depthwise { co } else { cg };
                                        let base_x = (bi * cin + ci) * h * wdt;
                                        for i in 0..kh {
                                            let raw_h = (ohi * spec.stride + i) as isize
                                                - spec.padding as isize;
                                            let Some(ih) = resolve_tap(raw_h, h, spec.pad_mode)
                                            else {
                                                continue;
                                            };
                                            for j in 0..kw {
                                                let raw_w = (owi * spec.stride + j) as isize
                                                    - spec.padding as isize;
                                                let Some(iw) = resolve_tap(raw_w, wdt, spec.pad_mode)
                                                else {
                                                    continue;
                                                };
                                                let xi = base_x + ih * wdt + iw;
                                                let wi = base_w + (cg * kh + i) * kw + j;
                                                if need_x {
                                                    dx[xi] = dx[xi] + gv * wd[wi];
                                                }
                                                if need_w {
                                                    dw[wi] = dw[wi] + gv * xd[xi];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.accumulate(*x, &dx);
                }
                if need_w {
                    self.accumulate(*w, &dw);
                }
                if let Some(bb) = bias {
                    if self.needs(*bb) {
                        let mut db = vec![T::zero(); cout];
                        for bi in 0..b {
                            for co in 0..cout {
                                for s in 0..oh * ow {
                                    db[co] = db[co] + g[((bi * cout + co) * oh * ow) + s];
                                }
                            }
                        }
                        self.accumulate(*bb, &db);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let xs = self.nodes[x.0].shape.clone();
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = h * w;
                let inv_c = T::one() / T::from_f64(c as f64);
                let mut dx = vec![T::zero(); numel(&xs)];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                {
                    let xd = &self.nodes[x.0].data;
                    let gd = &self.nodes[gamma.0].data;
                    for bi in 0..b {
                        for p in 0..hw {
                            let mu = mean[bi * hw + p];
                            let istd = inv_std[bi * hw + p];
                            // dxh = g * gamma ; dx = istd * (dxh - mean(dxh) - xh * mean(dxh * xh))
                            let mut sum_dxh = T::zero();
                            let mut sum_dxh_xh = T::zero();
                            for ci in 0..c {
                                let at = (bi * c + ci) * hw + p;
                                let xh = (xd[at] - mu) * istd;
                                let dxh = g[at] * gd[ci];
                                sum_dxh = sum_dxh + dxh;
                                sum_dxh_xh = sum_dxh_xh + dxh * xh;
                                dgamma[ci] = dgamma[ci] + g[at] * xh;
                                dbeta[ci] = dbeta[ci] + g[at];
                            }
                            let m1 = sum_dxh * inv_c;
                            let m2 = sum_dxh_xh * inv_c;
                            for ci in 0..c {
                                let at = (bi * c + ci) * hw + p;
                                let xh = (xd[at] - mu) * istd;
                                let dxh = g[at] * gd[ci];
                                dx[at] = istd * (dxh - m1 - xh * m2);
                            }
                        }
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gamma, &dgamma);
                self.accumulate(*beta, &dbeta);
            }
            Op::Dft2d { x } => {
                // The DFT is linear with a symmetric real kernel (cos) and a
                // symmetric imaginary kernel (-sin), so the adjoint is
                // dx = Re(F(g_re)) + Im(F(g_im)) = Re(F(g_re - i*g_im)).
                let xs = self.nodes[x.0].shape.clone();
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = h * w;
                let mut dx = vec![T::zero(); numel(&xs)];
                let mut re = vec![0f64; hw];
                let mut im = vec![0f64; hw];
                for plane in 0..b * c {
                    let base = plane * 2 * hw;
                    for i in 0..hw {
                        re[i] = g[base + i].to_f64();
                        im[i] = -g[base + hw + i].to_f64();
                    }
                    crate::fft::dft2d_in_place(&mut re, &mut im, h, w);
                    for i in 0..hw {
                        dx[plane * hw + i] = T::from_f64(re[i]);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::PixelShuffle { x, r } => {
                let xs = self.nodes[x.0].shape.clone();
                let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let c = cin / (r * r);
                let (oh, ow) = (h * r, w * r);
                let mut dx = vec![T::zero(); numel(&xs)];
                for bi in 0..b {
                    for co in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                for dh in 0..*r {
                                    for dw in 0..*r {
                                        let ci = co * r * r + dh * r + dw;
                                        let src = ((bi * c + co) * oh + hi * r + dh) * ow + wi * r + dw;
                                        let dst = ((bi * cin + ci) * h + hi) * w + wi;
                                        dx[dst] = g[src];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::NeighborhoodMean { x, positions, radius } => {
                let xs = self.nodes[x.0].shape.clone();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let n = positions.len();
                let mut dx = vec![T::zero(); numel(&xs)];
                for (i, &(ph, pw)) in positions.iter().enumerate() {
                    let h0 = ph.saturating_sub(*radius);
                    let h1 = (ph + radius).min(h - 1);
                    let w0 = pw.saturating_sub(*radius);
                    let w1 = (pw + radius).min(w - 1);
                    let inv = T::one() / T::from_f64(((h1 - h0 + 1) * (w1 - w0 + 1)) as f64);
                    for ci in 0..c {
                        let gv = g[ci * n + i] * inv;
                        for y in h0..=h1 {
                            for xx in w0..=w1 {
                                let at = (ci * h + y) * w + xx;
                                dx[at] = dx[at] + gv;
                            }
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}
