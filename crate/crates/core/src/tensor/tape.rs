//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose parents already live on the tape, so
//! walking the tape backwards is a reverse topological order and each node is
//! visited exactly once.

use super::dense::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

const LAYERNORM_EPS: f64 = 1e-5;
/// Lower bound on row norms in [`Tape::normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Reduce {
        x: Var,
        kind: Reduce,
        outer: usize,
        n: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
        b: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_pad(k: usize) -> usize {
    (k - 1) / 2
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable input; gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected a matrix, got {:?}", s))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{}x{} · {}x{}", m, k, k2, n)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor::matrix(n, m, out)?, Op::Transpose(a), &[a])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.len() == 1 {
            let y = vb.item();
            Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x, y)).collect())?
        } else if va.len() == 1 {
            let x = va.item();
            Tensor::new(vb.shape().to_vec(), vb.data().iter().map(|&y| f(x, y)).collect())?
        } else {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        };
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-D vector to every row of a T×D matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (t, d) = self.matrix_dims("add_row", x)?;
        if self.value(row).len() != d || self.value(row).rank() != 1 {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(row)),
            ));
        }
        let r = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..t {
            for (o, b) in out[i * d..(i + 1) * d].iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push("add_row", Tensor::matrix(t, d, out)?, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.map_value(x, |a| a * s);
        self.push("scale", v, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.map_value(x, |a| a + s);
        self.push("add_scalar", v, Op::AddScalar(x), &[x])
    }

    fn map_value(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
            .expect("same shape")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.map_value(x, sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.map_value(x, |a| a.max(0.0));
        self.push("relu", v, Op::Relu(x), &[x])
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.map_value(x, |a| a * sigmoid(a));
        self.push("silu", v, Op::Silu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.map_value(x, f64::exp);
        self.push("exp", v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&a| a <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "log of non-positive value {}",
                bad
            )));
        }
        let v = self.map_value(x, f64::ln);
        self.push("log", v, Op::Log(x), &[x])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.map_value(x, |a| a.clamp(lo, hi));
        self.push("clamp", v, Op::Clamp(x, lo, hi), &[x])
    }

    pub fn reduce(&mut self, kind: Reduce, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "reduce",
                format!("axis {} of rank-{} tensor", axis, shape.len()),
            ));
        }
        let n = shape[axis];
        if n == 0 {
            return Err(Error::shape("reduce", "empty axis"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += src[base + i];
                        }
                    }
                }
                if kind == Reduce::Mean {
                    let inv = 1.0 / n as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            Reduce::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = src[o * n * inner + i];
                        let mut at = 0;
                        for j in 1..n {
                            let v = src[(o * n + j) * inner + i];
                            if v > best {
                                best = v;
                                at = j;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = at;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        self.push(
            "reduce",
            value,
            Op::Reduce {
                x,
                kind,
                outer,
                n,
                inner,
                argmax,
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Mean, x, axis)
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Max, x, axis)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Selects rows by index. Indices are constants; duplicates are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (t, d) = self.matrix_dims("gather_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= t) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {} out of range for {} rows", bad, t),
            ));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(src.row(i));
        }
        self.push(
            "gather_rows",
            Tensor::matrix(idx.len(), d, out)?,
            Op::GatherRows(x, idx.to_vec()),
            &[x],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (t, d) = self.matrix_dims("slice_cols", x)?;
        if start + len > d {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {}..{} of {}", start, start + len, d),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(t * len);
        for i in 0..t {
            out.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        self.push(
            "slice_cols",
            Tensor::matrix(t, len, out)?,
            Op::SliceCols(x, start),
            &[x],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (t, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != t {
                return Err(Error::shape("concat_cols", format!("{} rows vs {}", r, t)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(t * total);
        for i in 0..t {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            "concat_cols",
            Tensor::matrix(t, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    /// Per-row normalization to zero mean and unit variance, then `gain * x + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (t, d) = self.matrix_dims("layernorm", x)?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layernorm", "gain/bias length must equal D"));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; t * d];
        let mut inv_std = vec![0.0; t];
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            let row = &src[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layernorm",
            Tensor::matrix(t, d, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (t, d) = self.matrix_dims("softmax_rows", x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d.max(1)).take(t) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(
            "softmax_rows",
            Tensor::matrix(t, d, out)?,
            Op::SoftmaxRows(x),
            &[x],
        )
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (t, d) = self.matrix_dims("log_softmax_rows", x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d.max(1)).take(t) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(
            "log_softmax_rows",
            Tensor::matrix(t, d, out)?,
            Op::LogSoftmaxRows(x),
            &[x],
        )
    }

    /// Scales each row to unit L2 norm; norms below [`NORM_FLOOR`] are clamped.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (t, d) = self.matrix_dims("normalize_rows", x)?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(t);
        for row in out.chunks_mut(d.max(1)).take(t) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n = n.max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(
            "normalize_rows",
            Tensor::matrix(t, d, out)?,
            Op::NormalizeRows { x, norms },
            &[x],
        )
    }

    /// Same-length temporal cross-correlation.
    ///
    /// `x`: T×Din, `w`: k×Din×Dout, `b`: Dout. Zero padding of ⌊(k−1)/2⌋
    /// frames on the left and ⌈(k−1)/2⌉ on the right.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t, din) = self.matrix_dims("conv1d", x)?;
        let (k, wdin, dout) = match *self.shape(w) {
            [k, i, o] => (k, i, o),
            ref s => return Err(Error::shape("conv1d", format!("weight shape {:?}", s))),
        };
        if k == 0 {
            return Err(Error::InvalidArgument("conv1d kernel size must be > 0".into()));
        }
        if wdin != din || self.value(b).len() != dout {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "x {:?}, w {:?}, b {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let pad = same_pad(k);
        let (xs, ws, bs) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; t * dout];
        for ti in 0..t {
            out[ti * dout..(ti + 1) * dout].copy_from_slice(bs);
        }
        for j in 0..k {
            let wj = &ws[j * din * dout..(j + 1) * din * dout];
            let (lo, hi) = valid_range(t, j, pad);
            if lo >= hi {
                continue;
            }
            // rows lo..hi of output read input rows lo+j-pad..hi+j-pad
            let src = &xs[(lo + j - pad) * din..(hi + j - pad) * din];
            gemm_nn(src, wj, &mut out[lo * dout..hi * dout], hi - lo, din, dout);
        }
        self.push(
            "conv1d",
            Tensor::matrix(t, dout, out)?,
            Op::Conv1d { x, w, b },
            &[x, w, b],
        )
    }

    /// Per-channel temporal cross-correlation. `x`: T×D, `w`: k×D, `b`: D.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t, d) = self.matrix_dims("depthwise_conv1d", x)?;
        let (k, wd) = self.matrix_dims("depthwise_conv1d", w)?;
        if k == 0 {
            return Err(Error::InvalidArgument("conv1d kernel size must be > 0".into()));
        }
        if wd != d || self.value(b).len() != d {
            return Err(Error::shape("depthwise_conv1d", "channel count mismatch"));
        }
        let pad = same_pad(k);
        let (xs, ws, bs) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; t * d];
        for ti in 0..t {
            out[ti * d..(ti + 1) * d].copy_from_slice(bs);
        }
        for j in 0..k {
            let wj = &ws[j * d..(j + 1) * d];
            let (lo, hi) = valid_range(t, j, pad);
            for ti in lo..hi {
                let s = ti + j - pad;
                let orow = &mut out[ti * d..(ti + 1) * d];
                let xrow = &xs[s * d..(s + 1) * d];
                for c in 0..d {
                    orow[c] += xrow[c] * wj[c];
                }
            }
        }
        self.push(
            "depthwise_conv1d",
            Tensor::matrix(t, d, out)?,
            Op::DepthwiseConv1d { x, w, b },
            &[x, w, b],
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.backward_scaled(output, 1.0)
    }

    /// Reverse pass seeded with `seed` instead of 1.
    pub fn backward_scaled(&self, output: Var, seed: f64) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(Tensor::filled(self.shape(output), seed));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads)?;
            // keep intermediate gradients visible to callers
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape")
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[id].value;
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.value(*a).data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = gd[j * m + i];
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, self.reduce_broadcast(*a, gd, |_, g| g));
                self.accumulate(grads, *b, self.reduce_broadcast(*b, gd, |_, g| sign * g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = self.reduce_broadcast(*a, gd, |i, g| g * broadcast_at(vb, i));
                let gb = self.reduce_broadcast(*b, gd, |i, g| g * broadcast_at(va, i));
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*row) {
                    let d = self.value(*row).len();
                    let mut dr = vec![0.0; d];
                    for chunk in gd.chunks(d) {
                        for (acc, v) in dr.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *row, self.like(*row, dr));
                }
            }
            Op::Scale(x, s) => {
                let dx = gd.iter().map(|v| v * s).collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Sigmoid(x) => {
                let dx = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Relu(x) => {
                let dx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &a)| if a > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Silu(x) => {
                let dx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &a)| {
                        let s = sigmoid(a);
                        g * (s + a * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Exp(x) => {
                let dx = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Log(x) => {
                let dx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, a)| g / a)
                    .collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Clamp(x, lo, hi) => {
                let dx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, a)| if a < lo || a > hi { 0.0 } else { *g })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Reduce {
                x,
                kind,
                outer,
                n,
                inner,
                argmax,
            } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                let mut dx = vec![0.0; outer * n * inner];
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let f = if *kind == Reduce::Mean { 1.0 / n as f64 } else { 1.0 };
                        for o in 0..outer {
                            for j in 0..n {
                                for i in 0..inner {
                                    dx[(o * n + j) * inner + i] = gd[o * inner + i] * f;
                                }
                            }
                        }
                    }
                    Reduce::Max => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let j = argmax[o * inner + i];
                                dx[(o * n + j) * inner + i] = gd[o * inner + i];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, self.like(*x, vec![gd[0]; n]));
            }
            Op::GatherRows(x, idx) => {
                let d = self.value(*x).cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        dx[i * d + c] += gd[r * d + c];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::SliceCols(x, start) => {
                let (t, d) = (self.value(*x).rows(), self.value(*x).cols());
                let len = out.cols();
                let mut dx = vec![0.0; t * d];
                for i in 0..t {
                    dx[i * d + start..i * d + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::ConcatCols(parts) => {
                let t = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(t * w);
                        for i in 0..t {
                            dp.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, self.like(p, dp));
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, self.like(*x, gd.to_vec()));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (t, d) = (out.rows(), out.cols());
                let gv = self.value(*gain).data();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; t * d];
                for i in 0..t {
                    let grow = &gd[i * d..(i + 1) * d];
                    let hrow = &xhat[i * d..(i + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        dgain[j] += grow[j] * hrow[j];
                        dbias[j] += grow[j];
                        let dh = grow[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                    }
                    let scale = inv_std[i] / d as f64;
                    for j in 0..d {
                        let dh = grow[j] * gv[j];
                        dx[i * d + j] = scale * (d as f64 * dh - sum_dh - hrow[j] * sum_dh_h);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
                self.accumulate(grads, *gain, self.like(*gain, dgain));
                self.accumulate(grads, *bias, self.like(*bias, dbias));
            }
            Op::SoftmaxRows(x) => {
                let d = out.cols();
                let mut dx = vec![0.0; out.len()];
                for ((drow, grow), yrow) in dx
                    .chunks_mut(d)
                    .zip(gd.chunks(d))
                    .zip(out.data().chunks(d))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for j in 0..d {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::LogSoftmaxRows(x) => {
                let d = out.cols();
                let mut dx = vec![0.0; out.len()];
                for ((drow, grow), yrow) in dx
                    .chunks_mut(d)
                    .zip(gd.chunks(d))
                    .zip(out.data().chunks(d))
                {
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..d {
                        drow[j] = grow[j] - yrow[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::NormalizeRows { x, norms } => {
                let d = out.cols();
                let src = self.value(*x).data();
                let mut dx = vec![0.0; out.len()];
                for (i, &n) in norms.iter().enumerate() {
                    let grow = &gd[i * d..(i + 1) * d];
                    let yrow = &out.data()[i * d..(i + 1) * d];
                    let raw = src[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let drow = &mut dx[i * d..(i + 1) * d];
                    if raw > NORM_FLOOR {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for j in 0..d {
                            drow[j] = (grow[j] - yrow[j] * dot) / n;
                        }
                    } else {
                        for j in 0..d {
                            drow[j] = grow[j] / n;
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Conv1d { x, w, b } => {
                let (t, din) = (self.value(*x).rows(), self.value(*x).cols());
                let k = self.value(*w).shape()[0];
                let dout = out.cols();
                let pad = same_pad(k);
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; dout];
                    for row in gd.chunks(dout) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
                let need_x = self.requires_grad(*x);
                let need_w = self.requires_grad(*w);
                let mut dx = vec![0.0; if need_x { t * din } else { 0 }];
                let mut dw = vec![0.0; if need_w { k * din * dout } else { 0 }];
                for j in 0..k {
                    let (lo, hi) = valid_range(t, j, pad);
                    if lo >= hi {
                        continue;
                    }
                    let rows = hi - lo;
                    let gsl = &gd[lo * dout..hi * dout];
                    let (s0, s1) = ((lo + j - pad) * din, (hi + j - pad) * din);
                    if need_x {
                        let wj = &ws[j * din * dout..(j + 1) * din * dout];
                        gemm_nt(gsl, wj, &mut dx[s0..s1], rows, dout, din);
                    }
                    if need_w {
                        gemm_tn(
                            &xs[s0..s1],
                            gsl,
                            &mut dw[j * din * dout..(j + 1) * din * dout],
                            rows,
                            din,
                            dout,
                        );
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if need_w {
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
            }
            Op::DepthwiseConv1d { x, w, b } => {
                let (t, d) = (out.rows(), out.cols());
                let k = self.value(*w).rows();
                let pad = same_pad(k);
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let mut dx = vec![0.0; t * d];
                let mut dw = vec![0.0; k * d];
                let mut db = vec![0.0; d];
                for row in gd.chunks(d) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                for j in 0..k {
                    let (lo, hi) = valid_range(t, j, pad);
                    for ti in lo..hi {
                        let s = ti + j - pad;
                        for c in 0..d {
                            let gv = gd[ti * d + c];
                            dx[s * d + c] += gv * ws[j * d + c];
                            dw[j * d + c] += gv * xs[s * d + c];
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
                self.accumulate(grads, *w, self.like(*w, dw));
                self.accumulate(grads, *b, self.like(*b, db));
            }
        }
        Ok(())
    }

    /// Gradient for an operand of a possibly scalar-broadcast binary op.
    fn reduce_broadcast(&self, v: Var, gd: &[f64], f: impl Fn(usize, f64) -> f64) -> Tensor {
        let n = self.value(v).len();
        if n == gd.len() {
            self.like(v, gd.iter().enumerate().map(|(i, &g)| f(i, g)).collect())
        } else {
            let s = gd.iter().enumerate().map(|(i, &g)| f(i, g)).sum();
            self.like(v, vec![s])
        }
    }
}

fn broadcast_at(t: &Tensor, i: usize) -> f64 {
    if t.len() == 1 {
        t.item()
    } else {
        t.data()[i]
    }
}

/// Output rows `lo..hi` whose tap `j` reads an in-range input row.
fn valid_range(t: usize, j: usize, pad: usize) -> (usize, usize) {
    // input index = ti + j - pad must lie in [0, t)
    let lo = pad.saturating_sub(j);
    let hi = (t + pad).saturating_sub(j).min(t);
    (lo, hi.max(lo))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let (imax, &m) = xs
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
    let rest: f64 = xs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != imax)
        .map(|(_, v)| (v - m).exp())
        .sum();
    m + rest.ln_1p()
}
