//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its variables in order. The
//! backward pass walks the records from the last to the first and applies each
//! operation's vector-Jacobian product.

use rand::Rng;

use super::tensor::{broadcast_shape, broadcast_strides, for_each_offset, strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_K * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_K * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
        }
    }
}

// tanh approximation of GELU
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    Activation(Var, Activation),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    SumAxis(Var, usize),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>, usize),
    IndexSelect {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    TemporalConv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Upsample(Var),
    NormLast(Var),
    Dropout(Var, Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Softmax(..) => "softmax",
            Op::Activation(..) => "activation",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SumAxis(..) => "sum_axis",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat(..) => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::Narrow { .. } => "narrow",
            Op::TemporalConv { .. } => "temporal_conv",
            Op::Upsample(..) => "temporal_upsample",
            Op::NormLast(..) => "norm_lastdim",
            Op::Dropout(..) => "dropout",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of operations with their forward values.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Operations whose gradient rule ran, in the order they were replayed.
    pub fn replay_order(&self) -> &[Var] {
        &self.visited
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Names of the recorded operations, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; its gradient is tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        let needs = value.requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].needs_grad = true;
        v
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            let data = self
                .data(a)
                .iter()
                .zip(self.data(b))
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok((sa, data));
        }
        let out = broadcast_shape(op_name, &sa, &sb)?;
        let stride_a = broadcast_strides(&sa, &out);
        let stride_b = broadcast_strides(&sb, &out);
        let (da, db) = (self.data(a), self.data(b));
        let mut data = vec![0.0; out.iter().product()];
        for_each_offset(&out, [&stride_a, &stride_b], |i, [oa, ob]| {
            data[i] = f(da[oa], db[ob]);
        });
        Ok((out, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(s, d, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(s, d, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(s, d, Op::Mul(a, b), needs))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(b).contains(&0.0) {
            return Err(Error::DivisionByZero { op: "div" });
        }
        let (s, d) = self.binary("div", a, b, |x, y| x / y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(s, d, Op::Div(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, data, Op::Scale(x, s), needs)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let data = self.data(x).iter().map(|&v| act.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, data, Op::Activation(x, act), needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`. Identity
    /// outside training mode.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(
                "dropout",
                format!("rate {rate} outside [0, 1)"),
            ));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape, data, Op::Dropout(x, mask), needs))
    }

    // ---- linear algebra ----------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`; leading
    /// batch extents broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let plan = MatmulPlan::new(&sa[..sa.len() - 2], &sb[..sb.len() - 2])
            .map_err(|_| Error::shape("matmul", &sa, &sb))?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; plan.batch_count() * m * n];
        plan.for_each(|ci, ai, bi| {
            let am = &da[ai * m * k..(ai + 1) * m * k];
            let bm = &db[bi * k * n..(bi + 1) * k * n];
            let cm = &mut out[ci * m * n..(ci + 1) * m * n];
            for i in 0..m {
                let crow = &mut cm[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = am[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bm[p * n..(p + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += aip * bv;
                    }
                }
            }
        });
        let mut shape = plan.out_batch.clone();
        shape.extend([m, n]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::MatMul(a, b), needs))
    }

    /// `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), needs))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("{axes:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let src = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for_each_offset(&out_shape, [&src_strides], |i, [o]| out[i] = xd[o]);
        let needs = self.needs(x);
        Ok(self.push(out_shape, out, Op::Permute(x, axes.to_vec()), needs))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::invalid("transpose", "rank must be at least 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    // ---- normalizers ---------------------------------------------------

    /// Softmax along the last axis with max-subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let xd = self.data(x);
        if xd.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let n = *shape.last().unwrap();
        let mut out = vec![0.0; xd.len()];
        for (row, orow) in xd.chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::Softmax(x), needs))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![0.0; xd.len()];
        for (row, orow) in xd.chunks(c).zip(out.chunks_mut(c)) {
            let (mean, rstd) = moments(row, eps);
            for i in 0..c {
                orow[i] = (row[i] - mean) * rstd * g[i] + b[i];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            needs,
        ))
    }

    // ---- reductions and structure ---------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![s], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let needs = self.needs(x);
        self.push(vec![1], vec![s], Op::Mean(x), needs)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "sum_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, d, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..d {
                let src = &xd[(o * d + k) * inner..(o * d + k + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.needs(x);
        Ok(self.push(out_shape, out, Op::SumAxis(x, axis), needs))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *xs.first()
                    .ok_or_else(|| Error::invalid("concat", "no inputs"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let d = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(shape, out, Op::Concat(xs.to_vec(), axis), needs))
    }

    pub fn concat_lastdim(&mut self, xs: &[Var]) -> Result<Var> {
        let axis = self.shape(xs[0]).len() - 1;
        self.concat(xs, axis)
    }

    /// Gathers entries `indices` along `axis`.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || indices.iter().any(|&i| i >= shape[axis]) || indices.is_empty() {
            return Err(Error::invalid(
                "index_select",
                format!("indices {indices:?} invalid for axis {axis} of {shape:?}"),
            ));
        }
        let (outer, d, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&xd[(o * d + i) * inner..(o * d + i + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let needs = self.needs(x);
        Ok(self.push(
            out_shape,
            out,
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("{start}+{len} out of range on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, d, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * d + start) * inner..(o * d + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(x);
        Ok(self.push(out_shape, out, Op::Narrow { x, axis, start }, needs))
    }

    /// Euclidean norm over the last axis, which is removed from the shape.
    pub fn norm_lastdim(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let out: Vec<f64> = self
            .data(x)
            .chunks(c)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.needs(x);
        self.push(out_shape, out, Op::NormLast(x), needs)
    }

    // ---- temporal ops ------------------------------------------------------

    /// Convolution along the time axis of `x: [B, T, J, Cin]` with weights
    /// `w: [K, Cin, Cout]`, zero padding `(K - 1) / 2`, shared over joints.
    pub fn temporal_conv(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 3 || xs[3] != ws[1] {
            return Err(Error::shape("temporal_conv", &xs, &ws));
        }
        let kernel = ws[0];
        if kernel.is_multiple_of(2) {
            return Err(Error::invalid(
                "temporal_conv",
                format!("kernel {kernel} must be odd"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("temporal_conv", "stride must be positive"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[2]] {
                return Err(Error::shape("temporal_conv", &ws, self.shape(b)));
            }
        }
        let g = ConvGeom::new(&xs, &ws, stride);
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; g.b * g.t_out * g.j * g.co];
        if let Some(b) = bias {
            let bd = self.data(b);
            for row in out.chunks_mut(g.co) {
                row.copy_from_slice(bd);
            }
        }
        g.for_each_tap(|xo, wo, oo| {
            let xr = &xd[xo..xo + g.ci];
            let orow = &mut out[oo..oo + g.co];
            for (ci, &xv) in xr.iter().enumerate() {
                let wr = &wd[wo + ci * g.co..wo + (ci + 1) * g.co];
                for (o, &wv) in orow.iter_mut().zip(wr) {
                    *o += xv * wv;
                }
            }
        });
        let needs = self.needs(x) || self.needs(w) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            vec![g.b, g.t_out, g.j, g.co],
            out,
            Op::TemporalConv { x, w, bias, stride },
            needs,
        ))
    }

    /// Linear interpolation along the time axis of `[B, T, J, C]` with the
    /// align-corners convention.
    pub fn temporal_upsample(&mut self, x: Var, target: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid(
                "temporal_upsample",
                format!("expected rank-4 input, got {xs:?}"),
            ));
        }
        if target < 1 || target < xs[1] {
            return Err(Error::invalid(
                "temporal_upsample",
                format!(
                    "target length {target} must be at least the input length {}",
                    xs[1]
                ),
            ));
        }
        let taps = interp_taps(xs[1], target);
        let (b, t, frame) = (xs[0], xs[1], xs[2] * xs[3]);
        let xd = self.data(x);
        let mut out = vec![0.0; b * target * frame];
        for bi in 0..b {
            for (to, &(i0, i1, f)) in taps.iter().enumerate() {
                let dst = &mut out[(bi * target + to) * frame..(bi * target + to + 1) * frame];
                let s0 = &xd[(bi * t + i0) * frame..(bi * t + i0 + 1) * frame];
                let s1 = &xd[(bi * t + i1) * frame..(bi * t + i1 + 1) * frame];
                for ((d, &a), &c) in dst.iter_mut().zip(s0).zip(s1) {
                    *d = a + f * (c - a);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![b, target, xs[2], xs[3]], out, Op::Upsample(x), needs))
    }

    // ---- backward --------------------------------------------------------------

    /// Back-propagates from the scalar `loss` through every recorded operation in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.data(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visited = Vec::new();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(Var(i));
            self.apply_rule(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.data(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    /// Accumulates `factor * g` into `v`, summing over axes `v` was broadcast along.
    fn broadcast_back(
        &self,
        grads: &mut [Option<Vec<f64>>],
        out: &[usize],
        g: &[f64],
        v: Var,
        factor: f64,
    ) {
        let shape = self.shape(v).to_vec();
        let Some(gv) = self.acc(grads, v) else { return };
        if shape == out {
            for (d, &gi) in gv.iter_mut().zip(g) {
                *d += gi * factor;
            }
            return;
        }
        let st = broadcast_strides(&shape, out);
        for_each_offset(out, [&st], |i, [o]| gv[o] += g[i] * factor);
    }

    fn apply_rule(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_shape = self.nodes[i].value.shape().to_vec();
        let out_data = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.broadcast_back(grads, &out_shape, g, *a, 1.0);
                self.broadcast_back(grads, &out_shape, g, *b, 1.0);
            }
            Op::Sub(a, b) => {
                self.broadcast_back(grads, &out_shape, g, *a, 1.0);
                self.broadcast_back(grads, &out_shape, g, *b, -1.0);
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(self.nodes[i].op, Op::Div(..));
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (da, db) = (self.data(*a), self.data(*b));
                let st_a = broadcast_strides(&sa, &out_shape);
                let st_b = broadcast_strides(&sb, &out_shape);
                // operand offsets are needed on both sides, so collect them once
                let mut pairs = Vec::with_capacity(g.len());
                for_each_offset(&out_shape, [&st_a, &st_b], |_, [oa, ob]| {
                    pairs.push((oa, ob))
                });
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, &(oa, ob)) in pairs.iter().enumerate() {
                        ga[oa] += if is_div { g[k] / db[ob] } else { g[k] * db[ob] };
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (k, &(oa, ob)) in pairs.iter().enumerate() {
                        gb[ob] += if is_div {
                            -g[k] * da[oa] / (db[ob] * db[ob])
                        } else {
                            g[k] * da[oa]
                        };
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, &gi) in gx.iter_mut().zip(g) {
                        *d += gi * s;
                    }
                }
            }
            Op::Activation(x, act) => {
                let xd = self.data(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, &gi), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        *d += gi * act.derivative(xv);
                    }
                }
            }
            Op::Dropout(x, mask) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let plan = MatmulPlan::new(&sa[..sa.len() - 2], &sb[..sb.len() - 2])
                    .expect("checked in forward");
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    plan.for_each(|ci, ai, bi| {
                        let gm = &g[ci * m * n..(ci + 1) * m * n];
                        let bm = &db[bi * k * n..(bi + 1) * k * n];
                        let gam = &mut ga[ai * m * k..(ai + 1) * m * k];
                        for r in 0..m {
                            let grow = &gm[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bm[p * n..(p + 1) * n];
                                gam[r * k + p] +=
                                    grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if let Some(gb) = self.acc(grads, *b) {
                    plan.for_each(|ci, ai, bi| {
                        let gm = &g[ci * m * n..(ci + 1) * m * n];
                        let am = &da[ai * m * k..(ai + 1) * m * k];
                        let gbm = &mut gb[bi * k * n..(bi + 1) * k * n];
                        for r in 0..m {
                            let grow = &gm[r * n..(r + 1) * n];
                            for p in 0..k {
                                let av = am[r * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (d, &gv) in gbm[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, &gi) in gx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Permute(x, axes) => {
                let src = strides(self.shape(*x));
                let src_strides: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
                if let Some(gx) = self.acc(grads, *x) {
                    for_each_offset(&out_shape, [&src_strides], |k, [o]| gx[o] += g[k]);
                }
            }
            Op::Softmax(x) => {
                let n = *out_shape.last().unwrap();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((yr, gr), dr) in out_data.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, &y), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += y * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let c = *out_shape.last().unwrap();
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let rows = xd.len() / c;
                let mut xhat = vec![0.0; xd.len()];
                let mut rstds = vec![0.0; rows];
                for (r, row) in xd.chunks(c).enumerate() {
                    let (mean, rstd) = moments(row, *eps);
                    rstds[r] = rstd;
                    for k in 0..c {
                        xhat[r * c + k] = (row[k] - mean) * rstd;
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (k, (gi, xh)) in g.iter().zip(&xhat).enumerate() {
                        gg[k % c] += gi * xh;
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for (k, gi) in g.iter().enumerate() {
                        gb[k % c] += gi;
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let dxhat: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for k in 0..c {
                            gx[r * c + k] += rstds[r] * (dxhat[k] - m1 - xh[k] * m2);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.data(*x).len() as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::SumAxis(x, axis) => {
                let (outer, d, inner) = axis_split(self.shape(*x), *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for k in 0..d {
                            for (dst, &v) in gx[(o * d + k) * inner..(o * d + k + 1) * inner]
                                .iter_mut()
                                .zip(src)
                            {
                                *dst += v;
                            }
                        }
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(&out_shape, *axis);
                let mut start = 0;
                for &v in xs {
                    let d = self.shape(v)[*axis];
                    if let Some(gv) = self.acc(grads, v) {
                        for o in 0..outer {
                            let src =
                                &g[(o * total + start) * inner..(o * total + start + d) * inner];
                            for (dst, &s) in
                                gv[o * d * inner..(o + 1) * d * inner].iter_mut().zip(src)
                            {
                                *dst += s;
                            }
                        }
                    }
                    start += d;
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let (outer, d, inner) = axis_split(self.shape(*x), *axis);
                let n = indices.len();
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for (k, &idx) in indices.iter().enumerate() {
                            let src = &g[(o * n + k) * inner..(o * n + k + 1) * inner];
                            for (dst, &s) in gx[(o * d + idx) * inner..(o * d + idx + 1) * inner]
                                .iter_mut()
                                .zip(src)
                            {
                                *dst += s;
                            }
                        }
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, d, inner) = axis_split(self.shape(*x), *axis);
                let len = out_shape[*axis];
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (dst, &s) in gx[(o * d + start) * inner..(o * d + start + len) * inner]
                            .iter_mut()
                            .zip(src)
                        {
                            *dst += s;
                        }
                    }
                }
            }
            Op::NormLast(x) => {
                let c = *self.shape(*x).last().unwrap();
                let xd = self.data(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (&norm, &gi)) in out_data.iter().zip(g).enumerate() {
                        if norm == 0.0 {
                            continue;
                        }
                        for k in 0..c {
                            gx[r * c + k] += gi * xd[r * c + k] / norm;
                        }
                    }
                }
            }
            Op::TemporalConv { x, w, bias, stride } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let geom = ConvGeom::new(&xs, &ws, *stride);
                let (xd, wd) = (self.data(*x), self.data(*w));
                if let Some(b) = bias {
                    if let Some(gb) = self.acc(grads, *b) {
                        for row in g.chunks(geom.co) {
                            for (d, &v) in gb.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    geom.for_each_tap(|xo, wo, oo| {
                        let grow = &g[oo..oo + geom.co];
                        for ci in 0..geom.ci {
                            let wr = &wd[wo + ci * geom.co..wo + (ci + 1) * geom.co];
                            gx[xo + ci] += grow.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                }
                if let Some(gw) = self.acc(grads, *w) {
                    geom.for_each_tap(|xo, wo, oo| {
                        let grow = &g[oo..oo + geom.co];
                        for ci in 0..geom.ci {
                            let xv = xd[xo + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            for (d, &gv) in gw[wo + ci * geom.co..wo + (ci + 1) * geom.co]
                                .iter_mut()
                                .zip(grow)
                            {
                                *d += xv * gv;
                            }
                        }
                    });
                }
            }
            Op::Upsample(x) => {
                let xs = self.shape(*x).to_vec();
                let target = out_shape[1];
                let taps = interp_taps(xs[1], target);
                let (b, t, frame) = (xs[0], xs[1], xs[2] * xs[3]);
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..b {
                        for (to, &(i0, i1, f)) in taps.iter().enumerate() {
                            let src =
                                &g[(bi * target + to) * frame..(bi * target + to + 1) * frame];
                            for (k, &s) in src.iter().enumerate() {
                                gx[(bi * t + i0) * frame + k] += (1.0 - f) * s;
                                gx[(bi * t + i1) * frame + k] += f * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// `(i0, i1, frac)` for each output instant under align-corners interpolation.
fn interp_taps(src: usize, target: usize) -> Vec<(usize, usize, f64)> {
    (0..target)
        .map(|t| {
            if src == 1 || target == 1 {
                return (0, 0, 0.0);
            }
            let num = t * (src - 1);
            let den = target - 1;
            let i0 = num / den;
            let frac = (num % den) as f64 / den as f64;
            (i0, (i0 + 1).min(src - 1), frac)
        })
        .collect()
}

struct MatmulPlan {
    out_batch: Vec<usize>,
    stride_a: Vec<usize>,
    stride_b: Vec<usize>,
}

impl MatmulPlan {
    fn new(batch_a: &[usize], batch_b: &[usize]) -> Result<Self> {
        let out_batch = broadcast_shape("matmul", batch_a, batch_b)?;
        Ok(Self {
            stride_a: broadcast_strides(batch_a, &out_batch),
            stride_b: broadcast_strides(batch_b, &out_batch),
            out_batch,
        })
    }

    fn batch_count(&self) -> usize {
        self.out_batch.iter().product()
    }

    /// Calls `f(out_matrix, a_matrix, b_matrix)` for every batch entry.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        for_each_offset(
            &self.out_batch,
            [&self.stride_a, &self.stride_b],
            |c, [a, b]| f(c, a, b),
        );
    }
}

struct ConvGeom {
    b: usize,
    t_in: usize,
    t_out: usize,
    j: usize,
    ci: usize,
    co: usize,
    kernel: usize,
    stride: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize) -> Self {
        Self {
            b: xs[0],
            t_in: xs[1],
            t_out: xs[1].div_ceil(stride),
            j: xs[2],
            ci: xs[3],
            co: ws[2],
            kernel: ws[0],
            stride,
        }
    }

    /// Visits every (input row, weight slab, output row) offset triple that
    /// contributes to the convolution.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let pad = (self.kernel - 1) / 2;
        for bi in 0..self.b {
            for to in 0..self.t_out {
                for k in 0..self.kernel {
                    let ti = (to * self.stride + k) as isize - pad as isize;
                    if ti < 0 || ti as usize >= self.t_in {
                        continue;
                    }
                    let ti = ti as usize;
                    for ji in 0..self.j {
                        let xo = ((bi * self.t_in + ti) * self.j + ji) * self.ci;
                        let oo = ((bi * self.t_out + to) * self.j + ji) * self.co;
                        f(xo, k * self.ci * self.co, oo);
                    }
                }
            }
        }
    }
}
