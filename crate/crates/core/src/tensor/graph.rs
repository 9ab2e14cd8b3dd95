use std::collections::HashMap;

use super::{split_axis, Tensor};
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Abs(Var),
    Clamp(Var, F, F),
    Sum(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    BroadcastRows(Var),
    ScaleRows(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Recording tape. Nodes are appended in evaluation order, so every node's
/// inputs precede it.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: F) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copy of `x` cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    /// Leaf bound to a stored parameter. Repeated requests for the same
    /// parameter return the same leaf, so gradients from every use site
    /// accumulate on one node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, x: Var) -> &Tensor<F> {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn item(&self, x: Var) -> F {
        self.nodes[x.0].value.item()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `x`, if any flowed.
    pub fn grad(&self, x: Var) -> Option<Tensor<F>> {
        let node = &self.nodes[x.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every parameter leaf, keyed by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<F>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = self
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return dim_err(format!("{what}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let out = self.nodes[x.0].value.map(f);
        self.push(out, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return dim_err(format!("matmul: [{m}, {k}] x [{k2}, {n}]"));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "maximum", |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "minimum", |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: F) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -F::one())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, F::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, F::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, F::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(F::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, F::sqrt, Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, F::abs, Op::Abs(x))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero outside the band.
    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::from_usize_lossy(self.value(x).len().max(1));
        let s = self.sum(x);
        self.scale(s, F::one() / n)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        if mean {
            let inv = F::one() / F::from_usize_lossy(n.max(1));
            out.iter_mut().for_each(|v| *v = *v * inv);
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let t = Tensor::new(new_shape, out)?;
        let op = if mean { Op::MeanAxis(x, axis) } else { Op::SumAxis(x, axis) };
        Ok(self.push(t, op, &[x]))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| src[at(k)]).fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for k in 0..n {
                    let e = (src[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z = z + e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax(x, axis), &[x]))
    }

    /// Per-row normalization over the last dimension (epsilon 1e-5), then
    /// affine with `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return dim_err(format!(
                "layer_norm: input {:?}, gain {:?}, bias {:?}",
                shape,
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let eps = F::lit(1e-5);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d.max(1);
        let df = F::from_usize_lossy(d);
        let mut out = vec![F::zero(); src.len()];
        let mut xhat = vec![F::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / df;
            let inv = F::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mu) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        split_axis(&base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err(format!("concat along {axis}: {base:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if start >= end || end > n {
            return dim_err(format!("slice [{start}, {end}) on axis {axis} of {shape:?}"));
        }
        let src = self.value(x).data();
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = width;
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(t, Op::Slice { x, axis, start }, &[x]))
    }

    /// Selects entries along axis 0 (rows of a matrix, elements of a vector).
    /// Indices may repeat; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, n, inner) = split_axis(&shape, 0)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return dim_err(format!("gather index {bad} out of range for {shape:?}"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut new_shape = shape;
        new_shape[0] = indices.len();
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(t, Op::GatherRows(x, indices.to_vec()), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Repeats a length-`d` vector into `rows × d`.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let s = self.shape(v);
        if s.len() != 1 {
            return dim_err(format!("broadcast_rows expects a vector, got {s:?}"));
        }
        let d = s[0];
        let src = self.value(v).data();
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(t, Op::BroadcastRows(v), &[v]))
    }

    /// Adds a length-`d` vector to every row of an `n × d` matrix.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (n, _) = self.value(m).dims2()?;
        let b = self.broadcast_rows(v, n)?;
        self.add(m, b)
    }

    /// Multiplies row `i` of an `n × d` matrix by `s[i]`.
    pub fn scale_rows(&mut self, m: Var, s: Var) -> Result<Var> {
        let (n, d) = self.value(m).dims2()?;
        if self.shape(s) != [n] {
            return dim_err(format!("scale_rows: matrix [{n}, {d}], scales {:?}", self.shape(s)));
        }
        let mv = self.value(m).data();
        let sv = self.value(s).data();
        let out = (0..n * d).map(|k| mv[k] * sv[k / d]).collect();
        let t = Tensor::new(vec![n, d], out)?;
        Ok(self.push(t, Op::ScaleRows(m, s), &[m, s]))
    }

    /// Reverse-mode accumulation from a single-element `loss`. A graph admits
    /// one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("graph already consumed by a backward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy, &mut grads);
            self.nodes[idx].grad = Some(gy);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, gy: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![F::zero(); len]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("matmul lhs");
                let n = self.nodes[b.0].value.shape()[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = F::zero();
                            for j in 0..n {
                                s = s + gy[i * n + j] * bv[p * n + j];
                            }
                            g[i * k + p] = g[i * k + p] + s;
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            for j in 0..n {
                                g[p * n + j] = g[p * n + j] + a_ip * gy[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g - d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] = g[k] + gy[k] * bv[k];
                    }
                });
                acc(*b, &mut |g| {
                    for k in 0..g.len() {
                        g[k] = g[k] + gy[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] = g[k] + gy[k] / bv[k];
                    }
                });
                acc(*b, &mut |g| {
                    for k in 0..g.len() {
                        g[k] = g[k] - gy[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (av, bv) = (val(*a), val(*b));
                let pick_a = |k: usize| if is_max { av[k] >= bv[k] } else { av[k] <= bv[k] };
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        if pick_a(k) {
                            g[k] = g[k] + gy[k];
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for k in 0..g.len() {
                        if !pick_a(k) {
                            g[k] = g[k] + gy[k];
                        }
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d * *s)
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::Exp(x) => acc(*x, &mut |g| {
                for k in 0..g.len() {
                    g[k] = g[k] + gy[k] * y[k];
                }
            }),
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for k in 0..g.len() {
                        g[k] = g[k] + gy[k] / xv[k];
                    }
                })
            }
            Op::Tanh(x) => acc(*x, &mut |g| {
                for k in 0..g.len() {
                    g[k] = g[k] + gy[k] * (F::one() - y[k] * y[k]);
                }
            }),
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for k in 0..g.len() {
                        if xv[k] > F::zero() {
                            g[k] = g[k] + gy[k];
                        }
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |g| {
                for k in 0..g.len() {
                    g[k] = g[k] + gy[k] * y[k] * (F::one() - y[k]);
                }
            }),
            // At 0 the derivative is unbounded; pass nothing back so a zero
            // row under a norm yields a zero gradient instead of inf * 0.
            Op::Sqrt(x) => acc(*x, &mut |g| {
                let two = F::lit(2.0);
                for k in 0..g.len() {
                    if y[k] > F::zero() {
                        g[k] = g[k] + gy[k] / (two * y[k]);
                    }
                }
            }),
            Op::Abs(x) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for k in 0..g.len() {
                        let s = if xv[k] > F::zero() {
                            F::one()
                        } else if xv[k] < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        g[k] = g[k] + gy[k] * s;
                    }
                })
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for k in 0..g.len() {
                        if xv[k] >= *lo && xv[k] <= *hi {
                            g[k] = g[k] + gy[k];
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|g| *g = *g + gy[0])),
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let shape = self.nodes[x.0].value.shape();
                let (outer, n, inner) = split_axis(shape, *axis).expect("axis checked");
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    F::one() / F::from_usize_lossy(n.max(1))
                } else {
                    F::one()
                };
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                let at = (o * n + k) * inner + i;
                                g[at] = g[at] + gy[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let shape = self.nodes[x.0].value.shape();
                let (outer, n, inner) = split_axis(shape, *axis).expect("axis checked");
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: F = (0..n).map(|k| gy[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                g[at(k)] = g[at(k)] + y[at(k)] * (gy[at(k)] - dot);
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
                let d = self.nodes[gain.0].value.len();
                let gv = val(*gain);
                let rows = inv_std.len();
                let df = F::from_usize_lossy(d);
                acc(*x, &mut |g| {
                    for r in 0..rows {
                        let o = r * d;
                        let mut sum_dh = F::zero();
                        let mut sum_dh_h = F::zero();
                        for j in 0..d {
                            let dh = gy[o + j] * gv[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * xhat[o + j];
                        }
                        for j in 0..d {
                            let dh = gy[o + j] * gv[j];
                            g[o + j] = g[o + j]
                                + inv_std[r] / df * (df * dh - sum_dh - xhat[o + j] * sum_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] = g[j] + gy[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] = g[j] + gy[r * d + j];
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let total = node.value.shape()[*axis];
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let inner: usize = node.value.shape()[*axis + 1..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.shape()[*axis];
                    acc(p, &mut |g| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * n * inner;
                            for k in 0..n * inner {
                                g[dst + k] = g[dst + k] + gy[src + k];
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.nodes[x.0].value.shape();
                let (outer, n, inner) = split_axis(shape, *axis).expect("axis checked");
                let width = node.value.shape()[*axis];
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * width * inner;
                        for k in 0..width * inner {
                            g[dst + k] = g[dst + k] + gy[src + k];
                        }
                    }
                });
            }
            Op::GatherRows(x, indices) => {
                let inner = node.value.len() / indices.len().max(1);
                acc(*x, &mut |g| {
                    for (r, &i) in indices.iter().enumerate() {
                        for k in 0..inner {
                            g[i * inner + k] = g[i * inner + k] + gy[r * inner + k];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = self.nodes[x.0].value.dims2().expect("transpose input");
                acc(*x, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] = g[i * c + j] + gy[j * r + i];
                        }
                    }
                });
            }
            Op::BroadcastRows(v) => {
                let d = self.nodes[v.0].value.len();
                acc(*v, &mut |g| {
                    for (k, &dy) in gy.iter().enumerate() {
                        g[k % d] = g[k % d] + dy;
                    }
                });
            }
            Op::ScaleRows(m, s) => {
                let d = node.value.shape()[1];
                let (mv, sv) = (val(*m), val(*s));
                acc(*m, &mut |g| {
                    for k in 0..g.len() {
                        g[k] = g[k] + gy[k] * sv[k / d];
                    }
                });
                acc(*s, &mut |g| {
                    for k in 0..gy.len() {
                        g[k / d] = g[k / d] + gy[k] * mv[k];
                    }
                });
            }
        }
    }
}

fn add_into<F: Scalar>(g: &mut [F], d: &[F]) {
    g.iter_mut().zip(d).for_each(|(g, &d)| *g = *g + d);
}

pub(crate) fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == F::zero() {
                continue;
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + a_ip * b[p * n + j];
            }
        }
    }
    out
}
