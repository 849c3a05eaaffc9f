//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles in
//! execution order, which is already a topological order. [`Graph::backward`]
//! walks the tape in reverse and accumulates vector-Jacobian products.
//!
//! Shape errors in the primitive ops are programming errors and panic with a
//! descriptive message; layer-level helpers in [`crate::layers`] validate
//! shapes up front and return [`NnError::Shape`] instead.

use std::collections::HashMap;
use std::fmt;

use crate::error::{NnError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation with a hand-written backward pass.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Silu(Var),
    Softplus(Var),
    Sum(Var),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::AddChannel(..) => "add_channel",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Silu(..) => "silu",
            Op::Softplus(..) => "softplus",
            Op::Sum(..) => "sum",
            Op::MatMul(..) => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(..) => "upsample2x",
            Op::GatherRows { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Computation tape. One graph per forward pass; not shared across threads.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    first_non_finite: Option<(usize, &'static str)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .finish()
    }
}

/// Gradients for every node of a graph, indexed by [`Var`].
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn rows_of(t: &Tensor) -> (usize, usize) {
    let n = t.last_dim();
    (t.len() / n.max(1), n)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// `(outer, axis_len, inner)` for splitting a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // Stride in the input buffer for each output axis.
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < new_shape[ax] {
                break;
            }
            offset -= strides[ax] * new_shape[ax];
            idx[ax] = 0;
        }
    }
    (new_shape, out)
}

struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be [N, C, H, W], got {x:?}");
        assert_eq!(w.len(), 4, "conv2d weight must be [Co, Ci, kh, kw], got {w:?}");
        assert_eq!(x[1], w[1], "conv2d channel mismatch: input {x:?}, weight {w:?}");
        assert!(stride >= 1);
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than input");
        Self {
            n: x[0],
            ci: x[1],
            h,
            w: wd,
            co: w[0],
            kh,
            kw,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        }
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw = self.spatial();
        for c in 0..self.ci {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + i) as isize - self.pad as isize;
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + j) as isize - self.pad as isize;
                            dst[oh * self.wo + ow] = if ih >= 0
                                && (ih as usize) < self.h
                                && iw >= 0
                                && (iw as usize) < self.w
                            {
                                plane[ih as usize * self.w + iw as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw = self.spatial();
        for c in 0..self.ci {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + i) as isize - self.pad as isize;
                        if ih < 0 || ih as usize >= self.h {
                            continue;
                        }
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + j) as isize - self.pad as isize;
                            if iw >= 0 && (iw as usize) < self.w {
                                plane[ih as usize * self.w + iw as usize] += src[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node { value, op });
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Errors if any recorded op produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some((node, op)) => Err(NnError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    /// Leaf holding a constant (its gradient is still computed, but nothing
    /// consumes it unless the caller asks through [`NodeGrads`]).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    // ---- elementwise -------------------------------------------------------

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(t, Op::Mul(a, b))
    }

    /// `x[..., n] + row[n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let vx = self.value(x);
        let vr = self.value(row);
        assert_eq!(vr.len(), vx.last_dim(), "add_row: row length vs last dim");
        let n = vr.len();
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, r) in chunk.iter_mut().zip(vr.data()) {
                *d += r;
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(t, Op::AddRow(x, row))
    }

    /// `x[..., n] * row[n]`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let vx = self.value(x);
        let vr = self.value(row);
        assert_eq!(vr.len(), vx.last_dim(), "mul_row: row length vs last dim");
        let n = vr.len();
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, r) in chunk.iter_mut().zip(vr.data()) {
                *d *= r;
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(t, Op::MulRow(x, row))
    }

    /// `x[N, C, H, W] + bias[C]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(bias);
        assert_eq!(vx.rank(), 4, "add_channel expects [N, C, H, W]");
        let (c, hw) = (vx.shape()[1], vx.shape()[2] * vx.shape()[3]);
        assert_eq!(vb.len(), c, "add_channel: bias length vs channels");
        let mut data = vx.data().to_vec();
        for (i, plane) in data.chunks_mut(hw).enumerate() {
            let b = vb.data()[i % c];
            plane.iter_mut().for_each(|v| *v += b);
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(t, Op::AddChannel(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::ln);
        self.push(t, Op::Log(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        self.push(t, Op::Softplus(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a[..., k] @ b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(vb.rank(), 2, "matmul: rhs must be 2-D, got {:?}", vb.shape());
        let (k, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(va.last_dim(), k, "matmul: {:?} @ {:?}", va.shape(), vb.shape());
        let rows = va.len() / k.max(1);
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, va.data(), false, vb.data(), false, &mut out, false);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::from_parts(shape, out);
        self.push(t, Op::MatMul(a, b))
    }

    /// Batched matmul over 3-D operands `[B, ., .]` with optional transposes
    /// of the two trailing dims.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert!(va.rank() == 3 && vb.rank() == 3, "bmm expects 3-D operands");
        let batch = va.shape()[0];
        assert_eq!(batch, vb.shape()[0], "bmm: batch sizes differ");
        let (m, k) = if trans_a {
            (va.shape()[2], va.shape()[1])
        } else {
            (va.shape()[1], va.shape()[2])
        };
        let (kb, n) = if trans_b {
            (vb.shape()[2], vb.shape()[1])
        } else {
            (vb.shape()[1], vb.shape()[2])
        };
        assert_eq!(k, kb, "bmm: inner dims {:?} vs {:?}", va.shape(), vb.shape());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va.data()[i * m * k..(i + 1) * m * k],
                trans_a,
                &vb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let t = Tensor::from_parts(vec![batch, m, n], out);
        self.push(
            t,
            Op::Bmm {
                a,
                b,
                trans_a,
                trans_b,
            },
        )
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self
            .value(x)
            .clone()
            .reshaped(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(t, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(perm.len(), vx.rank(), "permute: rank mismatch");
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            assert!(p < perm.len() && !seen[p], "permute: invalid permutation {perm:?}");
            seen[p] = true;
        }
        let (shape, data) = permute_data(vx.data(), vx.shape(), perm);
        let t = Tensor::from_parts(shape, data);
        self.push(t, Op::Permute(x, perm.to_vec()))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(axis < vx.rank(), "narrow: axis out of range");
        let (outer, size, inner) = split_axis(vx.shape(), axis);
        assert!(start + len <= size, "narrow: {start}+{len} > {size}");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * size * inner + start * inner;
            data.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::from_parts(shape, data);
        self.push(t, Op::Narrow { x, axis, start })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let first = self.value(xs[0]).shape().to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            assert_eq!(s.len(), first.len(), "concat: rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat: shapes {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let vx = self.value(x);
                let size = vx.shape()[axis];
                let base = o * size * inner;
                data.extend_from_slice(&vx.data()[base..base + size * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::from_parts(shape, data);
        self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    // ---- normalisation -----------------------------------------------------

    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (_, n) = rows_of(vx);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(t, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (_, n) = rows_of(vx);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(t, Op::LogSoftmax(x))
    }

    /// Normalise each row over the last dimension to zero mean, unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (rows, n) = rows_of(vx);
        let mut data = vx.data().to_vec();
        let mut rstd = Vec::with_capacity(rows);
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(t, Op::LayerNorm { x, rstd })
    }

    // ---- convolution -------------------------------------------------------

    /// 2-D cross-correlation, `x[N, Ci, H, W]` with `w[Co, Ci, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let geo = ConvGeom::new(vx.shape(), vw.shape(), stride, pad);
        let (k, hw) = (geo.k(), geo.spatial());
        let mut cols = vec![0.0; k * hw];
        let mut out = vec![0.0; geo.n * geo.co * hw];
        let in_plane = geo.ci * geo.h * geo.w;
        for n in 0..geo.n {
            geo.im2col(&vx.data()[n * in_plane..(n + 1) * in_plane], &mut cols);
            gemm(
                geo.co,
                k,
                hw,
                vw.data(),
                false,
                &cols,
                false,
                &mut out[n * geo.co * hw..(n + 1) * geo.co * hw],
                false,
            );
        }
        let t = Tensor::from_parts(vec![geo.n, geo.co, geo.ho, geo.wo], out);
        self.push(t, Op::Conv2d { x, w, stride, pad })
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 4, "upsample2x expects [N, C, H, W]");
        let s = vx.shape();
        let (h, w) = (s[2], s[3]);
        let planes = s[0] * s[1];
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            let src = &vx.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let t = Tensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], out);
        self.push(t, Op::Upsample2x(x))
    }

    // ---- indexing and losses -----------------------------------------------

    /// Rows `idx` of a `[V, d]` table, giving `[idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let vt = self.value(table);
        assert_eq!(vt.rank(), 2, "gather_rows expects a 2-D table");
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < v, "gather_rows: index {i} >= {v}");
            data.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::from_parts(vec![idx.len(), d], data);
        self.push(
            t,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    /// Per-row `-log softmax(logits)[target]`; `logits` is `[rows, C]`,
    /// result is `[rows]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let vl = self.value(logits);
        let (rows, c) = rows_of(vl);
        assert_eq!(rows, targets.len(), "cross_entropy: one target per row");
        let mut out = Vec::with_capacity(rows);
        for (row, &t) in vl.data().chunks(c).zip(targets) {
            assert!(t < c, "cross_entropy: class {t} >= {c}");
            out.push(log_sum_exp(row) - row[t]);
        }
        let t = Tensor::from_parts(vec![rows], out);
        self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp>) -> Var {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let t = op.forward(&values);
        self.push(
            t,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar `loss`, returning gradients for every node.
    pub fn backward_all(&self, loss: Var) -> Result<NodeGrads> {
        self.check_finite()?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !g.is_finite() {
                return Err(NnError::NonFinite {
                    op: self.nodes[id].op.name(),
                    node: id,
                });
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(NodeGrads { grads })
    }

    /// Reverse pass returning gradients for every parameter in `store`;
    /// parameters the loss does not reach get exact zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let all = self.backward_all(loss)?;
        let grads = store
            .iter()
            .map(|(id, _, t)| match self.params.get(&id).and_then(|v| all.get(*v)) {
                Some(g) => g.clone(),
                None => Tensor::zeros(t.shape()),
            })
            .collect();
        Ok(Gradients::new(grads))
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                accumulate(grads, *a, zip_map(g, vb, |x, y| x * y));
                accumulate(grads, *b, zip_map(g, va, |x, y| x * y));
            }
            Op::AddRow(x, row) => {
                let n = self.value(*row).len();
                let mut gr = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (acc, v) in gr.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *row, Tensor::from_parts(self.shape(*row).to_vec(), gr));
            }
            Op::MulRow(x, row) => {
                let vx = self.value(*x);
                let vr = self.value(*row);
                let n = vr.len();
                let mut gr = vec![0.0; n];
                let mut gx = g.data().to_vec();
                for (gchunk, xchunk) in gx.chunks_mut(n).zip(vx.data().chunks(n)) {
                    for j in 0..n {
                        gr[j] += gchunk[j] * xchunk[j];
                        gchunk[j] *= vr.data()[j];
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
                accumulate(grads, *row, Tensor::from_parts(vr.shape().to_vec(), gr));
            }
            Op::AddChannel(x, bias) => {
                let s = out.shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut gb = vec![0.0; c];
                for (i, plane) in g.data().chunks(hw).enumerate() {
                    gb[i % c] += plane.iter().sum::<f64>();
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *bias, Tensor::from_parts(vec![c], gb));
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.map(|v| v * c)),
            Op::AddScalar(x) => accumulate(grads, *x, g.clone()),
            Op::Exp(x) => accumulate(grads, *x, zip_map(g, out, |a, y| a * y)),
            Op::Log(x) => accumulate(grads, *x, zip_map(g, self.value(*x), |a, v| a / v)),
            Op::Silu(x) => accumulate(
                grads,
                *x,
                zip_map(g, self.value(*x), |a, v| {
                    let s = sigmoid(v);
                    a * s * (1.0 + v * (1.0 - s))
                }),
            ),
            Op::Softplus(x) => {
                accumulate(grads, *x, zip_map(g, self.value(*x), |a, v| a * sigmoid(v)))
            }
            Op::Sum(x) => {
                let gv = g.item();
                accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let rows = va.len() / k.max(1);
                let mut ga = vec![0.0; va.len()];
                gemm(rows, n, k, g.data(), false, vb.data(), true, &mut ga, false);
                let mut gb = vec![0.0; vb.len()];
                gemm(k, rows, n, va.data(), true, g.data(), false, &mut gb, false);
                accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), ga));
                accumulate(grads, *b, Tensor::from_parts(vb.shape().to_vec(), gb));
            }
            Op::Bmm {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let batch = va.shape()[0];
                let (m, n) = (out.shape()[1], out.shape()[2]);
                let k = va.len() / (batch * m);
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for i in 0..batch {
                    let a_i = &va.data()[i * m * k..(i + 1) * m * k];
                    let b_i = &vb.data()[i * k * n..(i + 1) * k * n];
                    let g_i = &g.data()[i * m * n..(i + 1) * m * n];
                    let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
                    let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                    match (trans_a, trans_b) {
                        (false, false) => {
                            gemm(m, n, k, g_i, false, b_i, true, ga_i, false);
                            gemm(k, m, n, a_i, true, g_i, false, gb_i, false);
                        }
                        (true, false) => {
                            gemm(k, n, m, b_i, false, g_i, true, ga_i, false);
                            gemm(k, m, n, a_i, false, g_i, false, gb_i, false);
                        }
                        (false, true) => {
                            gemm(m, n, k, g_i, false, b_i, false, ga_i, false);
                            gemm(n, m, k, g_i, true, a_i, false, gb_i, false);
                        }
                        (true, true) => {
                            gemm(k, n, m, b_i, true, g_i, true, ga_i, false);
                            gemm(n, m, k, g_i, true, a_i, true, gb_i, false);
                        }
                    }
                }
                accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), ga));
                accumulate(grads, *b, Tensor::from_parts(vb.shape().to_vec(), gb));
            }
            Op::Reshape(x) => {
                let t = Tensor::from_parts(self.shape(*x).to_vec(), g.data().to_vec());
                accumulate(grads, *x, t);
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (shape, data) = permute_data(g.data(), g.shape(), &inv);
                accumulate(grads, *x, Tensor::from_parts(shape, data));
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, size, inner) = split_axis(xs, *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![0.0; outer * size * inner];
                for o in 0..outer {
                    let base = o * size * inner + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, Tensor::from_parts(xs.to_vec(), gx));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let shape = self.shape(x).to_vec();
                    let size = shape[*axis];
                    let mut gx = Vec::with_capacity(outer * size * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        gx.extend_from_slice(&g.data()[base..base + size * inner]);
                    }
                    offset += size;
                    accumulate(grads, x, Tensor::from_parts(shape, gx));
                }
            }
            Op::Softmax(x) => {
                let (_, n) = rows_of(out);
                let mut gx = Vec::with_capacity(out.len());
                for (y, gy) in out.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    gx.extend(y.iter().zip(gy).map(|(yv, gv)| yv * (gv - dot)));
                }
                accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::LogSoftmax(x) => {
                let (_, n) = rows_of(out);
                let mut gx = Vec::with_capacity(out.len());
                for (y, gy) in out.data().chunks(n).zip(g.data().chunks(n)) {
                    let s: f64 = gy.iter().sum();
                    gx.extend(y.iter().zip(gy).map(|(yv, gv)| gv - yv.exp() * s));
                }
                accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::LayerNorm { x, rstd } => {
                let (_, n) = rows_of(out);
                let nf = n as f64;
                let mut gx = Vec::with_capacity(out.len());
                for ((xh, gy), r) in out.data().chunks(n).zip(g.data().chunks(n)).zip(rstd) {
                    let mean_g = gy.iter().sum::<f64>() / nf;
                    let mean_gx = xh.iter().zip(gy).map(|(a, b)| a * b).sum::<f64>() / nf;
                    gx.extend(
                        xh.iter()
                            .zip(gy)
                            .map(|(xv, gv)| r * (gv - mean_g - xv * mean_gx)),
                    );
                }
                accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::Conv2d { x, w, stride, pad } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let geo = ConvGeom::new(vx.shape(), vw.shape(), *stride, *pad);
                let (k, hw) = (geo.k(), geo.spatial());
                let in_plane = geo.ci * geo.h * geo.w;
                let mut cols = vec![0.0; k * hw];
                let mut dcols = vec![0.0; k * hw];
                let mut gw = vec![0.0; vw.len()];
                let mut gx = vec![0.0; vx.len()];
                for n in 0..geo.n {
                    let g_n = &g.data()[n * geo.co * hw..(n + 1) * geo.co * hw];
                    geo.im2col(&vx.data()[n * in_plane..(n + 1) * in_plane], &mut cols);
                    gemm(geo.co, hw, k, g_n, false, &cols, true, &mut gw, true);
                    gemm(k, geo.co, hw, vw.data(), true, g_n, false, &mut dcols, false);
                    geo.col2im(&dcols, &mut gx[n * in_plane..(n + 1) * in_plane]);
                }
                accumulate(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
                accumulate(grads, *w, Tensor::from_parts(vw.shape().to_vec(), gw));
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                let planes = s[0] * s[1];
                let mut gx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(s, gx));
            }
            Op::GatherRows { table, idx } => {
                let s = self.shape(*table).to_vec();
                let d = s[1];
                let mut gt = vec![0.0; s[0] * d];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g.data()[r * d + j];
                    }
                }
                accumulate(grads, *table, Tensor::from_parts(s, gt));
            }
            Op::CrossEntropy { logits, targets } => {
                let vl = self.value(*logits);
                let (_, c) = rows_of(vl);
                let mut gl = Vec::with_capacity(vl.len());
                for ((row, &t), gr) in vl.data().chunks(c).zip(targets).zip(g.data()) {
                    let lse = log_sum_exp(row);
                    gl.extend(
                        row.iter()
                            .enumerate()
                            .map(|(j, v)| gr * ((v - lse).exp() - if j == t { 1.0 } else { 0.0 })),
                    );
                }
                accumulate(grads, *logits, Tensor::from_parts(vl.shape().to_vec(), gl));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&values, out, g);
                assert_eq!(gs.len(), inputs.len(), "custom op `{}` gradient arity", op.name());
                for (&v, gv) in inputs.iter().zip(gs) {
                    assert_eq!(gv.shape(), self.shape(v), "custom op `{}` gradient shape", op.name());
                    accumulate(grads, v, gv);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
}

/// Numerically stable `log Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
