//! Dense row-major `f64` tensors and a tape for reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns the
//! gradient of every node that requires one. Leaves created with
//! [`Tape::constant`] never receive gradients, and neither does anything
//! computed only from constants.
//!
//! There is no implicit broadcasting. Scalar operands use the dedicated
//! `scale`/`add_scalar` ops and bias vectors go through [`Tape::add_row`].

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    values.len()
                ),
            ));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        let values = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.values[0])
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise product. Shapes must agree.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "hadamard",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            values,
        })
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], rate: f64, rng: &mut R) -> Tensor {
    let keep_scale = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep_scale
            }
        })
        .collect();
    Tensor {
        shape: shape.to_vec(),
        values,
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow { x, bias } => vec![*x, *bias],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Narrow { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            values: g.clone(),
        })
    }

    /// Borrowed gradient values; `None` when `v` does not require a gradient.
    pub fn values(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Extent of `axis` plus the product of the dims before and after it.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, trans_b: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if trans_b {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (j, o) in o_row.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                *o = dot(a_row, b_row);
            }
        }
    } else {
        for i in 0..m {
            let o_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = a[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += a_ip * bv;
                }
            }
        }
    }
    out
}

/// Dot product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (a4, a_tail) = a.split_at(a.len() / 4 * 4);
    let (b4, b_tail) = b.split_at(a4.len());
    for (x, y) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = a_tail.iter().zip(b_tail).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// A leaf that borrows its value instead of copying it.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Every leaf with its `requires_grad` flag.
    pub fn leaves(&self) -> impl Iterator<Item = (Var, bool)> + use<'_, 'a> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, n)| (Var(i), n.requires_grad))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(
                op,
                format!("expected a matrix, got shape {s:?}"),
            )),
        }
    }

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions differ: [{m}×{k}] · [{br}×{bc}]{}",
                    if trans_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let out = matmul_kernel(
            &self.value(a).values,
            &self.value(b).values,
            m,
            k,
            n,
            trans_b,
        );
        self.push(
            Tensor {
                shape: vec![m, n],
                values: out,
            },
            Op::MatMul { a, b, trans_b },
        )
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let values = self
            .value(a)
            .values
            .iter()
            .zip(&self.value(b).values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, values }, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let values = self
            .value(a)
            .values
            .iter()
            .zip(&self.value(b).values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, values }, Op::Mul(a, b))
    }

    /// Adds the vector `bias: [n]` to every row of `x: [m×n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims(x, "add_row")?;
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} does not match row width {n}", self.shape(bias)),
            ));
        }
        let b = &self.value(bias).values;
        let values = self
            .value(x)
            .values
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, values }, Op::AddRow { x, bias })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "transpose")?;
        let src = &self.value(x).values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = src[i * c + j];
            }
        }
        self.push(
            Tensor {
                shape: vec![c, r],
                values,
            },
            Op::Transpose(x),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let values = self.value(x).values.clone();
        self.push(
            Tensor {
                shape: shape.to_vec(),
                values,
            },
            Op::Reshape(x),
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax along `axis` restricted to entries whose `keep` flag is set.
    /// Excluded entries come out as exactly zero; a lane with no kept entry
    /// is all zeros.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, keep: Vec<bool>) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(Error::shape(
                "masked_softmax",
                "mask size differs from input",
            ));
        }
        self.softmax_impl(x, axis, Some(keep))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, mask: Option<Vec<bool>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} for shape {shape:?}"),
            ));
        }
        let (outer, n, inner) = lanes(&shape, axis);
        let src = &self.value(x).values;
        let mut out = vec![0.0; src.len()];
        let kept = |idx: usize| mask.as_ref().is_none_or(|m| m[idx]);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let idx = |j: usize| base + j * inner;
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    if kept(idx(j)) {
                        max = max.max(src[idx(j)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..n {
                    if kept(idx(j)) {
                        let e = (src[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total += e;
                    }
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        self.push(Tensor { shape, values: out }, Op::Softmax { x, axis })
    }

    /// `log(softmax(x))` along `axis`, computed as `x - max - log Σ exp(x - max)`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "log_softmax",
                format!("axis {axis} for shape {shape:?}"),
            ));
        }
        let (outer, n, inner) = lanes(&shape, axis);
        let src = &self.value(x).values;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n)
                    .map(|j| src[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = (0..n).map(|j| (src[base + j * inner] - max).exp()).sum();
                let log_z = max + total.ln();
                for j in 0..n {
                    out[base + j * inner] = src[base + j * inner] - log_z;
                }
            }
        }
        self.push(Tensor { shape, values: out }, Op::LogSoftmax { x, axis })
    }

    /// Layer normalization over the last axis of `x: [m×n]` with learned
    /// `gain: [n]` and `bias: [n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "layer_norm")?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape(
                "layer_norm",
                "gain/bias width differs from input",
            ));
        }
        let src = &self.value(x).values;
        let g = &self.value(gain).values;
        let b = &self.value(bias).values;
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        self.push(
            Tensor {
                shape: vec![m, n],
                values: out,
            },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Gathers rows of `table: [V×d]` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} out of range for table of {v} rows"),
            ));
        }
        let src = &self.value(table).values;
        let mut values = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            values.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push(
            Tensor {
                shape: vec![ids.len(), d],
                values,
            },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} for shape {base_shape:?}"),
            ));
        }
        let mut total_axis = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base_shape:?}")));
            }
            total_axis += s[axis];
        }
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let mut values = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape[axis] * inner;
                values.extend_from_slice(&t.values[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total_axis;
        self.push(
            Tensor { shape, values },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// The sub-tensor `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("{start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = lanes(&shape, axis);
        let src = &self.value(x).values;
        let mut values = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = o * n * inner + start * inner;
            values.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            Tensor {
                shape: out_shape,
                values,
            },
            Op::Narrow { x, axis, start },
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).values.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Applies a caller-supplied dropout mask (see [`dropout_mask`]).
    pub fn dropout(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape[0], av.shape[1]);
                let n = out.shape[1];
                acc(*a, &mut |da| {
                    // non-transposed: dA = G·Bᵀ with B [k×n]; transposed: dA = G·B with B [n×k]
                    for r in 0..m {
                        let g_row = &g[r * n..(r + 1) * n];
                        let da_row = &mut da[r * k..(r + 1) * k];
                        if *trans_b {
                            for (j, &gj) in g_row.iter().enumerate() {
                                if gj == 0.0 {
                                    continue;
                                }
                                let b_row = &bv.values[j * k..(j + 1) * k];
                                for (d, &bb) in da_row.iter_mut().zip(b_row) {
                                    *d += gj * bb;
                                }
                            }
                        } else {
                            for (p, d) in da_row.iter_mut().enumerate() {
                                *d += dot(g_row, &bv.values[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for r in 0..m {
                        let g_row = &g[r * n..(r + 1) * n];
                        let a_row = &av.values[r * k..(r + 1) * k];
                        if *trans_b {
                            // dB [n×k] += Gᵀ·A
                            for (j, &gj) in g_row.iter().enumerate() {
                                if gj == 0.0 {
                                    continue;
                                }
                                let db_row = &mut db[j * k..(j + 1) * k];
                                for (d, &aa) in db_row.iter_mut().zip(a_row) {
                                    *d += gj * aa;
                                }
                            }
                        } else {
                            // dB [k×n] += Aᵀ·G
                            for (p, &ap) in a_row.iter().enumerate() {
                                if ap == 0.0 {
                                    continue;
                                }
                                let db_row = &mut db[p * n..(p + 1) * n];
                                for (d, &gg) in db_row.iter_mut().zip(g_row) {
                                    *d += ap * gg;
                                }
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::AddRow { x, bias } => {
                acc(*x, &mut |d| add_into(d, g));
                let n = self.value(*bias).len();
                acc(*bias, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = &self.value(*a).values;
                let bv = &self.value(*b).values;
                acc(*a, &mut |d| {
                    for ((d, gg), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += gg * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, gg), y) in d.iter_mut().zip(g).zip(av) {
                        *d += gg * y;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| {
                for (d, gg) in d.iter_mut().zip(g) {
                    *d += gg * c;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Relu(x) => {
                let xv = &self.value(*x).values;
                acc(*x, &mut |d| {
                    for ((d, gg), v) in d.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += gg;
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis, .. } => {
                let (outer, n, inner) = lanes(&out.shape, *axis);
                let y = &out.values;
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let s: f64 = (0..n)
                                .map(|j| g[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..n {
                                let idx = base + j * inner;
                                d[idx] += y[idx] * (g[idx] - s);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = lanes(&out.shape, *axis);
                let y = &out.values;
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let s: f64 = (0..n).map(|j| g[base + j * inner]).sum();
                            for j in 0..n {
                                let idx = base + j * inner;
                                d[idx] += g[idx] - y[idx].exp() * s;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gain).len();
                let m = inv_std.len();
                let gv = &self.value(*gain).values;
                acc(*x, &mut |d| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            d[r * n + c] += inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            d[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for gr in g.chunks(n) {
                        add_into(d, gr);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d_model = self.shape(*table)[1];
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(
                            &mut d[id * d_model..(id + 1) * d_model],
                            &g[r * d_model..(r + 1) * d_model],
                        );
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out.shape[..*axis].iter().product();
                let inner: usize = out.shape[axis + 1..].iter().product();
                let out_chunk = out.shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.shape(*p)[*axis] * inner;
                    acc(*p, &mut |d| {
                        for o in 0..outer {
                            let from = o * out_chunk + offset;
                            add_into(&mut d[o * chunk..(o + 1) * chunk], &g[from..from + chunk]);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = lanes(self.shape(*x), *axis);
                let len = out.shape[*axis];
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let from = o * n * inner + start * inner;
                        add_into(
                            &mut d[from..from + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::Sum(x) => {
                let gs = g[0];
                acc(*x, &mut |d| {
                    for v in d.iter_mut() {
                        *v += gs;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Central differences of `f` with respect to every entry of `inputs[which]`.
    fn numeric_grad(
        inputs: &[Tensor],
        which: usize,
        f: &dyn Fn(&mut Tape, &[Var]) -> Var,
    ) -> Vec<f64> {
        let h = 1e-5;
        let eval = |ins: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).item().unwrap()
        };
        (0..inputs[which].len())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[which].values[i] += h;
                let mut minus = inputs.to_vec();
                minus[which].values[i] -= h;
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn check_grads(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.values(*v).unwrap();
            let numeric = numeric_grad(inputs, k, f);
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel < 1e-5, "input {k}: analytic {a} numeric {n}");
            }
        }
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 3], &mut rng);
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let mut tape = Tape::new();
        let (va, vi) = (tape.constant(a.clone()), tape.constant(eye));
        let p = tape.matmul(va, vi).unwrap();
        assert_eq!(tape.value(p), &a);

        let l = tape.constant(Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap());
        let r = tape.constant(Tensor::from_rows(&[vec![1.], vec![1.]]).unwrap());
        let p = tape.matmul(l, r).unwrap();
        assert_eq!(tape.value(p).values(), &[3.0, 7.0]);
        assert_eq!(tape.shape(p), &[2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
        assert!(tape.matmul_t(a, b).is_ok());
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = [random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)];
        check_grads(&ins, &|t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            t.sum(p).unwrap()
        });
        let ins = [
            random(&[3, 4], &mut rng),
            random(&[5, 4], &mut rng),
            random(&[3, 5], &mut rng),
        ];
        check_grads(&ins, &|t, v| {
            let p = t.matmul_t(v[0], v[1]).unwrap();
            let w = t.mul(p, v[2]).unwrap();
            t.sum(w).unwrap()
        });
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).values(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s).values();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] >= 0.0 && v[1] < 1e-300);
    }

    #[test]
    fn softmax_sums_to_one_on_either_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random(&[4, 5], &mut rng).map(|v| v * 20.0);
        let mut tape = Tape::new();
        let x = tape.constant(t);
        for axis in 0..2 {
            let s = tape.softmax(x, axis).unwrap();
            let y = tape.value(s);
            assert!(y.values().iter().all(|&v| v >= 0.0));
            let (rows, cols) = (4, 5);
            if axis == 1 {
                for r in 0..rows {
                    assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            } else {
                for c in 0..cols {
                    let s: f64 = (0..rows).map(|r| y.get(r, c)).sum();
                    assert!((s - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_and_log_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = [random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)];
        for axis in 0..2 {
            check_grads(&ins, &|t, v| {
                let s = t.softmax(v[0], axis).unwrap();
                let w = t.mul(s, v[1]).unwrap();
                t.sum(w).unwrap()
            });
            check_grads(&ins, &|t, v| {
                let s = t.log_softmax(v[0], axis).unwrap();
                let w = t.mul(s, v[1]).unwrap();
                t.sum(w).unwrap()
            });
        }
        let keep: Vec<bool> = (0..12).map(|i| i % 4 <= i / 4).collect();
        check_grads(&ins, &|t, v| {
            let s = t.masked_softmax(v[0], 1, keep.clone()).unwrap();
            let w = t.mul(s, v[1]).unwrap();
            t.sum(w).unwrap()
        });
    }

    #[test]
    fn masked_softmax_zeroes_excluded_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 5.0, 2.0, 0.0, 0.0, 0.0]).unwrap());
        let s = tape
            .masked_softmax(x, 1, vec![true, false, true, false, false, false])
            .unwrap();
        let y = tape.value(s);
        assert_eq!(y.get(0, 1), 0.0);
        assert!((y.get(0, 0) + y.get(0, 2) - 1.0).abs() < 1e-15);
        assert_eq!(y.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn log_softmax_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let t = random(&[3, 7], &mut rng).map(|v| v * 5.0);
            let mut tape = Tape::new();
            let x = tape.constant(t);
            let ls = tape.log_softmax(x, 1).unwrap();
            let s = tape.softmax(x, 1).unwrap();
            let ls = tape.value(ls).clone();
            let s = tape.value(s).clone();
            for (a, b) in ls.values().iter().zip(s.values()) {
                assert!((a - b.ln()).abs() < 1e-9);
            }
            for r in 0..3 {
                let z: f64 = ls.row(r).iter().map(|v| v.exp()).sum();
                assert!((z - 1.0).abs() < 1e-12);
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let ls = tape.log_softmax(x, 0).unwrap();
        for v in tape.value(ls).values() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn simple_backward_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random(&[3, 2], &mut rng);
        let mut tape = Tape::new();
        let v = tape.param(w.clone());
        let s = tape.sum(v).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.values(v).unwrap().iter().all(|&x| x == 1.0));

        let mut tape = Tape::new();
        let v = tape.param(w.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        for (gv, wv) in g.values(v).unwrap().iter().zip(w.values()) {
            assert_eq!(*gv, 2.0 * wv);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::filled(&[2], 2.0));
        let c = tape.constant(Tensor::filled(&[2], 3.0));
        let m = tape.mul(p, c).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.values(c).is_none());
        assert_eq!(g.values(p).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ins = [
            random(&[4, 6], &mut rng),
            random(&[6], &mut rng),
            random(&[6], &mut rng),
            random(&[6, 4], &mut rng),
            random(&[5, 6], &mut rng),
        ];
        check_grads(&ins, &|t, v| {
            let ln = t.layer_norm(v[0], v[1], v[2]).unwrap();
            let ab = t.add_row(ln, v[1]).unwrap();
            let r = t.relu(ab).unwrap();
            let tr = t.transpose(r).unwrap();
            let w = t.mul(tr, v[3]).unwrap();
            let a = t.narrow(w, 1, 1, 2).unwrap();
            let b = t.narrow(w, 1, 0, 3).unwrap();
            let c = t.concat(&[a, b], 1).unwrap();
            let e = t.embedding(v[4], &[0, 3, 3, 1, 4, 2]).unwrap();
            let e = t.reshape(e, &[6, 6]).unwrap();
            let e = t.narrow(e, 0, 1, 5).unwrap();
            let ee = t.matmul(e, c).unwrap();
            let s = t.scale(ee, 0.7).unwrap();
            let s = t.add_scalar(s, 1.5).unwrap();
            let sq = t.mul(s, s).unwrap();
            t.sum(sq).unwrap()
        });
    }

    #[test]
    fn concat_rows_and_cols() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![5.], vec![6.]]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).values(), &[1., 2., 5., 3., 4., 6.]);
        let d = tape.concat(&[a, a], 0).unwrap();
        assert_eq!(tape.shape(d), &[4, 2]);
        assert!(tape.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&[5, 5], &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let v = tape.param(a.clone());
            let m = tape.matmul(v, v).unwrap();
            let s = tape.softmax(m, 1).unwrap();
            let l = tape.log_softmax(s, 0).unwrap();
            let t = tape.sum(l).unwrap();
            tape.backward(t).unwrap().get(v).unwrap()
        };
        let (x, y) = (run(), run());
        assert!(x
            .values()
            .iter()
            .zip(y.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn dropout_mask_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = dropout_mask(&[1000], 0.25, &mut rng);
        let scale = 1.0 / 0.75;
        assert!(m.values().iter().all(|&v| v == 0.0 || v == scale));
        let dropped = m.values().iter().filter(|&&v| v == 0.0).count();
        assert!((200..300).contains(&dropped));
    }

    #[test]
    fn tensor_shape_contract() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1], vec![f64::MAX]).unwrap());
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(Error::NonFinite("scale"))
        ));
    }
}
