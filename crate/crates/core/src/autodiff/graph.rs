use std::sync::Arc;

use super::{AutodiffError, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of primitive operations. Every backward rule is written in
/// terms of these same primitives, which is what makes gradients themselves
/// differentiable.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    /// Multiply by a constant.
    Scale(f64),
    /// Add a constant.
    AddScalar(f64),
    Sqrt,
    Exp,
    Log,
    Tanh,
    /// `x * Phi(x)` with `Phi` the standard normal CDF.
    Gelu,
    /// Derivative of [`Op::Gelu`], `Phi(x) + x * phi(x)`.
    GeluGrad,
    /// `[.., m, k] x [.., k, n]` with identical leading dimensions.
    Matmul,
    /// Swap the last two axes.
    Transpose,
    Reshape(Vec<usize>),
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        axis: usize,
    },
    /// Sum of all elements to a scalar.
    Sum,
    /// Broadcast a single element to `shape`.
    Expand(Vec<usize>),
    /// Reduce the last axis.
    SumLast,
    /// Repeat along a new last axis of length `n`.
    ExpandLast(usize),
    /// Reduce every axis but the last.
    SumLeading,
    /// Broadcast a vector `[n]` to `[leading.., n]`.
    ExpandLeading(Vec<usize>),
    /// Softmax over the last axis.
    Softmax,
    /// Mean cross-entropy of `[N, C]` logits against class ids.
    CrossEntropy(Arc<[usize]>),
    /// Rows of a `[V, d]` table.
    Gather(Arc<[usize]>),
    /// Adjoint of [`Op::Gather`]: add rows of `[n, d]` into a `[rows, d]` zero table.
    ScatterAdd {
        ids: Arc<[usize]>,
        rows: usize,
    },
}

#[derive(Clone, Debug)]
pub(crate) enum NodeKind {
    Leaf,
    Constant,
    Op(Op),
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) kind: NodeKind,
    pub(crate) inputs: Vec<Var>,
    pub(crate) value: Tensor,
    pub(crate) differentiable: bool,
}

/// Append-only computation graph. Inputs of a node always precede it, so
/// append order is a topological order.
#[derive(Debug)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) recording: bool,
    pub(crate) consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// (outer, dim, inner) extents around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn erf_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Whether gradients can flow into `v`.
    pub fn is_differentiable(&self, v: Var) -> bool {
        self.nodes[v.0].differentiable
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            kind: NodeKind::Leaf,
            inputs: Vec::new(),
            value,
            differentiable: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value with zero gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            kind: NodeKind::Constant,
            inputs: Vec::new(),
            value,
            differentiable: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(AutodiffError::GraphConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        let differentiable = self.recording && inputs.iter().any(|v| self.nodes[v.0].differentiable);
        let node = if differentiable {
            Node {
                kind: NodeKind::Op(op),
                inputs,
                value,
                differentiable,
            }
        } else {
            Node {
                kind: NodeKind::Constant,
                inputs: Vec::new(),
                value,
                differentiable,
            }
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Apply a primitive by kind.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::Arity {
                    op: "apply",
                    expected: n,
                    got: inputs.len(),
                })
            }
        };
        match op {
            Op::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Op::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Op::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Op::Div => arity(2).and_then(|_| self.div(inputs[0], inputs[1])),
            Op::Scale(c) => arity(1).and_then(|_| self.scale(inputs[0], c)),
            Op::AddScalar(c) => arity(1).and_then(|_| self.add_scalar(inputs[0], c)),
            Op::Sqrt => arity(1).and_then(|_| self.sqrt(inputs[0])),
            Op::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            Op::Log => arity(1).and_then(|_| self.log(inputs[0])),
            Op::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            Op::Gelu => arity(1).and_then(|_| self.gelu(inputs[0])),
            Op::GeluGrad => arity(1).and_then(|_| self.gelu_grad(inputs[0])),
            Op::Matmul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Op::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            Op::Reshape(shape) => arity(1).and_then(|_| self.reshape(inputs[0], &shape)),
            Op::Slice { axis, start, len } => arity(1).and_then(|_| self.slice(inputs[0], axis, start, len)),
            Op::Concat { axis } => self.concat(inputs, axis),
            Op::Sum => arity(1).and_then(|_| self.sum(inputs[0])),
            Op::Expand(shape) => arity(1).and_then(|_| self.expand(inputs[0], &shape)),
            Op::SumLast => arity(1).and_then(|_| self.sum_last(inputs[0])),
            Op::ExpandLast(n) => arity(1).and_then(|_| self.expand_last(inputs[0], n)),
            Op::SumLeading => arity(1).and_then(|_| self.sum_leading(inputs[0])),
            Op::ExpandLeading(leading) => arity(1).and_then(|_| self.expand_leading(inputs[0], &leading)),
            Op::Softmax => arity(1).and_then(|_| self.softmax(inputs[0])),
            Op::CrossEntropy(t) => arity(1).and_then(|_| self.cross_entropy(inputs[0], &t)),
            Op::Gather(ids) => arity(1).and_then(|_| self.gather(inputs[0], &ids)),
            Op::ScatterAdd { ids, rows } => arity(1).and_then(|_| self.scatter_add(inputs[0], &ids, rows)),
        }
    }

    fn binary(&mut self, name: &'static str, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check_live()?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, &[va.shape(), vb.shape()]));
        }
        let out = va.zip_map(vb, f);
        Ok(self.push(op, vec![a, b], out))
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check_live()?;
        let out = self.value(a).map(f);
        Ok(self.push(op, vec![a], out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", Op::Div, a, b, |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::Scale(c), a, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::AddScalar(c), a, |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sqrt, a, f64::sqrt)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Log, a, f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Tanh, a, f64::tanh)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Gelu, a, |x| x * erf_cdf(x))
    }

    pub fn gelu_grad(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::GeluGrad, a, |x| erf_cdf(x) + x * normal_pdf(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(mismatch("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let (da, db) = (va.data(), vb.data());
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a0 = bi * m * k;
            let b0 = bi * k * n;
            let o0 = bi * m * n;
            for i in 0..m {
                let orow = &mut out[o0 + i * n..o0 + (i + 1) * n];
                for p in 0..k {
                    let aip = da[a0 + i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &db[b0 + p * n..b0 + (p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(Op::Matmul, vec![a, b], out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let va = self.value(a);
        let s = va.shape();
        let r = s.len();
        if r < 2 {
            return Err(mismatch("transpose", &[s]));
        }
        let (m, n) = (s[r - 2], s[r - 1]);
        let batch: usize = s[..r - 2].iter().product();
        let d = va.data();
        let mut out = vec![0.0; d.len()];
        for bi in 0..batch {
            let base = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = d[base + i * n + j];
                }
            }
        }
        let mut shape = s.to_vec();
        shape.swap(r - 2, r - 1);
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(Op::Transpose, vec![a], out))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_live()?;
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.len() {
            return Err(mismatch("reshape", &[va.shape(), shape]));
        }
        let out = Tensor::from_parts(shape.to_vec(), va.data().to_vec());
        Ok(self.push(Op::Reshape(shape.to_vec()), vec![a], out))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_live()?;
        let va = self.value(a);
        let s = va.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                bound: s.get(axis).copied().unwrap_or(0),
            });
        }
        let (outer, dim, inner) = split_axis(s, axis);
        let d = va.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(Op::Slice { axis, start, len }, vec![a], out))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.check_live()?;
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::Arity {
                op: "concat",
                expected: 1,
                got: 0,
            });
        };
        let s0 = self.value(first).shape().to_vec();
        if axis >= s0.len() {
            return Err(mismatch("concat", &[&s0]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible =
                s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &[&s0, s]));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), out))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let total = self.value(a).data().iter().sum();
        Ok(self.push(Op::Sum, vec![a], Tensor::scalar(total)))
    }

    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_live()?;
        let va = self.value(a);
        if va.len() != 1 {
            return Err(mismatch("expand", &[va.shape(), shape]));
        }
        let out = Tensor::full(shape, va.data()[0]);
        Ok(self.push(Op::Expand(shape.to_vec()), vec![a], out))
    }

    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let va = self.value(a);
        let s = va.shape();
        let Some((&n, lead)) = s.split_last() else {
            return Err(mismatch("sum_last", &[s]));
        };
        let out: Vec<f64> = if n == 0 {
            vec![0.0; lead.iter().product()]
        } else {
            va.data().chunks(n).map(|row| row.iter().sum()).collect()
        };
        let out = Tensor::from_parts(lead.to_vec(), out);
        Ok(self.push(Op::SumLast, vec![a], out))
    }

    pub fn expand_last(&mut self, a: Var, n: usize) -> Result<Var> {
        self.check_live()?;
        let va = self.value(a);
        let mut out = Vec::with_capacity(va.len() * n);
        for &x in va.data() {
            out.extend(std::iter::repeat_n(x, n));
        }
        let mut shape = va.shape().to_vec();
        shape.push(n);
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(Op::ExpandLast(n), vec![a], out))
    }

    pub fn sum_leading(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let va = self.value(a);
        let s = va.shape();
        let Some(&n) = s.last() else {
            return Err(mismatch("sum_leading", &[s]));
        };
        let mut out = vec![0.0; n];
        if n > 0 {
            for row in va.data().chunks(n) {
                for (o, &x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        let out = Tensor::from_parts(vec![n], out);
        Ok(self.push(Op::SumLeading, vec![a], out))
    }

    pub fn expand_leading(&mut self, a: Var, leading: &[usize]) -> Result<Var> {
        self.check_live()?;
        let va = self.value(a);
        if va.rank() != 1 {
            return Err(mismatch("expand_leading", &[va.shape(), leading]));
        }
        let reps: usize = leading.iter().product();
        let mut out = Vec::with_capacity(reps * va.len());
        for _ in 0..reps {
            out.extend_from_slice(va.data());
        }
        let mut shape = leading.to_vec();
        shape.push(va.len());
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(Op::ExpandLeading(leading.to_vec()), vec![a], out))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let va = self.value(a);
        let Some(&n) = va.shape().last() else {
            return Err(mismatch("softmax", &[va.shape()]));
        };
        let mut out = va.data().to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), out);
        Ok(self.push(Op::Softmax, vec![a], out))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_live()?;
        let v = self.value(logits);
        let s = v.shape();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(mismatch("cross_entropy", &[s, &[targets.len()]]));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let mut total = 0.0;
        for (row, &t) in v.data().chunks(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(Op::CrossEntropy(targets.into()), vec![logits], out))
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check_live()?;
        let v = self.value(table);
        let s = v.shape();
        if s.len() != 2 {
            return Err(mismatch("gather", &[s]));
        }
        let (rows, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_parts(vec![ids.len(), d], out);
        Ok(self.push(Op::Gather(ids.into()), vec![table], out))
    }

    pub fn scatter_add(&mut self, src: Var, ids: &[usize], rows: usize) -> Result<Var> {
        self.check_live()?;
        let v = self.value(src);
        let s = v.shape();
        if s.len() != 2 || s[0] != ids.len() {
            return Err(mismatch("scatter_add", &[s, &[ids.len()]]));
        }
        let d = s[1];
        let mut out = vec![0.0; rows * d];
        for (r, &i) in ids.iter().enumerate() {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "scatter_add",
                    index: i,
                    bound: rows,
                });
            }
            for (o, &x) in out[i * d..(i + 1) * d].iter_mut().zip(&v.data()[r * d..(r + 1) * d]) {
                *o += x;
            }
        }
        let out = Tensor::from_parts(vec![rows, d], out);
        Ok(self.push(Op::ScatterAdd { ids: ids.into(), rows }, vec![src], out))
    }

    // Composites.

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).last().copied().unwrap_or(1).max(1);
        let s = self.sum_last(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `x + b` with `b: [n]` broadcast over the leading axes of `x: [.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x);
        let lead = s[..s.len().saturating_sub(1)].to_vec();
        let bb = self.expand_leading(b, &lead)?;
        self.add(x, bb)
    }

    /// `x * g` with `g: [n]` broadcast over the leading axes of `x: [.., n]`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let s = self.shape(x);
        let lead = s[..s.len().saturating_sub(1)].to_vec();
        let gb = self.expand_leading(g, &lead)?;
        self.mul(x, gb)
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Layer normalization over the last axis with gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.shape(x).last().copied().unwrap_or(0);
        let mu = self.mean_last(x)?;
        let mu = self.expand_last(mu, n)?;
        let centered = self.sub(x, mu)?;
        let sq = self.mul(centered, centered)?;
        let var = self.mean_last(sq)?;
        let var = self.add_scalar(var, eps)?;
        let std = self.sqrt(var)?;
        let std = self.expand_last(std, n)?;
        let normed = self.div(centered, std)?;
        let scaled = self.mul_row(normed, gain)?;
        self.add_bias(scaled, bias)
    }
}
