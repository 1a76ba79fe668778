//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every training iteration. Operations are
//! appended in execution order, so the node list is already topologically
//! sorted and [`Graph::backward`] is a single reverse sweep. Parameter leaves
//! receive their gradients by accumulation: a parameter read by several
//! forwards within one graph collects the sum of every contribution.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geometry: ConvGeometry,
        cols: Vec<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, T),
    BiasAdd(Var, Var),
    Reshape(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    LinearCombination(Vec<(T, Var)>),
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Nodes are only ever appended.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value.detached(), Op::Input, false)
    }

    /// Trainable leaf. Its gradient slot is filled by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value.detached(), Op::Param, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on a parameter leaf, if any backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// Cross-correlation of `input[n×c×h×w]` with `kernel[o×c×kh×kw]` under zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.value(input).shape(), self.value(kernel).shape());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || stride == 0 {
            return Err(Error::dim("conv2d", si, sk));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim("conv2d", si, sk));
        }
        let geometry = ConvGeometry {
            batch: n,
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let cols = kernels::im2col(&geometry, self.value(input).data());
        let positions = geometry.positions();
        let mut mat = vec![T::zero(); o * positions];
        kernels::gemm_nn(o, geometry.patch(), positions, self.value(kernel).data(), &cols, &mut mat);

        // [o, n, oh, ow] -> [n, o, oh, ow]
        let plane = geometry.out_h * geometry.out_w;
        let mut out = vec![T::zero(); n * o * plane];
        for oc in 0..o {
            for b in 0..n {
                let src = &mat[(oc * n + b) * plane..][..plane];
                out[(b * o + oc) * plane..][..plane].copy_from_slice(src);
            }
        }
        let needs = self.needs(input) || self.needs(kernel);
        let value = Tensor::new(vec![n, o, geometry.out_h, geometry.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geometry,
                cols: if self.needs(kernel) || self.needs(input) { cols } else { Vec::new() },
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, c), needs)
    }

    /// Adds `bias[f]` along axis 1 of `x[n×f]` or `x[n×f×…]`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::dim("bias_add", sx, sb));
        }
        let inner: usize = sx[2..].iter().product();
        let features = sx[1];
        let mut value = self.value(x).detached();
        let bias_data = self.value(bias).data().to_vec();
        for (i, chunk) in value.data_mut().chunks_exact_mut(inner).enumerate() {
            let b = bias_data[i % features];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::BiasAdd(x, bias), needs))
    }

    /// Collapses every axis after the first: `[n, …] -> [n, prod(…)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.is_empty() {
            return Err(Error::dim("flatten", &shape, &[]));
        }
        let rest: usize = shape[1..].iter().product();
        let value = self.value(x).detached().reshape(vec![shape[0], rest])?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Non-overlapping max pooling with window and stride `size`; trailing rows/cols are dropped.
    pub fn maxpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 || size == 0 || shape[2] < size || shape[3] < size {
            return Err(Error::dim("maxpool2d", &shape, &[size, size]));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / size, w / size);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            Op::MaxPool2d { input: x, argmax },
            needs,
        ))
    }

    /// `Σ coefᵢ·xᵢ` over same-shaped operands.
    pub fn linear_combination(&mut self, terms: &[(T, Var)]) -> Result<Var> {
        let Some(&(_, first)) = terms.first() else {
            return Err(Error::invalid("linear_combination needs at least one term"));
        };
        let shape = self.value(first).shape().to_vec();
        let mut acc = vec![T::zero(); self.value(first).len()];
        for &(coef, v) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("linear_combination", &shape, t.shape()));
            }
            for (a, &x) in acc.iter_mut().zip(t.data()) {
                *a += coef * x;
            }
        }
        let needs = terms.iter().any(|&(_, v)| self.needs(v));
        Ok(self.push(Tensor::new(shape, acc)?, Op::LinearCombination(terms.to_vec()), needs))
    }

    /// Row-wise softmax of a `[n×classes]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("softmax", &shape, &[]));
        }
        let probs = softmax_rows(self.value(x).data(), shape[1]);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, probs)?, Op::Softmax(x), needs))
    }

    /// Batch mean of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::dim("softmax_cross_entropy", &shape, &[labels.len()]));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let probs = softmax_rows(self.value(logits).data(), classes);
        let data = self.value(logits).data();
        let mut total = T::zero();
        for (row, &label) in data.chunks_exact(classes).zip(labels) {
            total += neg_log_softmax(row, label);
        }
        let loss = total / T::of(labels.len() as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Forwards `replacement` but routes the incoming gradient to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor<T>) -> Result<Var> {
        if replacement.shape() != self.value(x).shape() {
            return Err(Error::dim("straight_through", self.value(x).shape(), replacement.shape()));
        }
        let needs = self.needs(x);
        Ok(self.push(replacement.detached(), Op::StraightThrough(x), needs))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into parameter leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(up) = adj[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    self.nodes[idx].value.accumulate_grad(&up)?;
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                    let n = self.value(b).shape()[1];
                    if self.needs(a) {
                        let mut da = vec![T::zero(); m * k];
                        kernels::gemm_nt(m, n, k, &up, self.value(b).data(), &mut da);
                        add_into(&mut adj, a, da);
                    }
                    if self.needs(b) {
                        let mut db = vec![T::zero(); k * n];
                        kernels::gemm_tn(k, m, n, self.value(a).data(), &up, &mut db);
                        add_into(&mut adj, b, db);
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    geometry: g,
                    cols,
                } => {
                    let (input, kernel, g) = (*input, *kernel, *g);
                    let o = self.value(kernel).shape()[0];
                    let plane = g.out_h * g.out_w;
                    let positions = g.positions();
                    // [n, o, oh, ow] -> [o, n·oh·ow]
                    let mut dmat = vec![T::zero(); o * positions];
                    for b in 0..g.batch {
                        for oc in 0..o {
                            dmat[(oc * g.batch + b) * plane..][..plane]
                                .copy_from_slice(&up[(b * o + oc) * plane..][..plane]);
                        }
                    }
                    if self.needs(kernel) {
                        let mut dk = vec![T::zero(); o * g.patch()];
                        kernels::gemm_nt(o, positions, g.patch(), &dmat, cols, &mut dk);
                        add_into(&mut adj, kernel, dk);
                    }
                    if self.needs(input) {
                        let mut dcols = vec![T::zero(); g.patch() * positions];
                        kernels::gemm_tn(
                            g.patch(),
                            o,
                            positions,
                            self.value(kernel).data(),
                            &dmat,
                            &mut dcols,
                        );
                        let mut dx = vec![T::zero(); self.value(input).len()];
                        kernels::col2im(&g, &dcols, &mut dx);
                        add_into(&mut adj, input, dx);
                    }
                }
                Op::Relu(x) => {
                    let x = *x;
                    let dx = up
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(&u, &v)| if v > T::zero() { u } else { T::zero() })
                        .collect();
                    add_into(&mut adj, x, dx);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        add_into(&mut adj, a, up.clone());
                    }
                    if self.needs(b) {
                        add_into(&mut adj, b, up);
                    }
                }
                Op::Scale(x, c) => {
                    let (x, c) = (*x, *c);
                    add_into(&mut adj, x, up.iter().map(|&u| u * c).collect());
                }
                Op::BiasAdd(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    if self.needs(bias) {
                        let shape = self.value(x).shape();
                        let inner: usize = shape[2..].iter().product();
                        let features = shape[1];
                        let mut db = vec![T::zero(); features];
                        for (i, chunk) in up.chunks_exact(inner).enumerate() {
                            db[i % features] += chunk.iter().copied().sum::<T>();
                        }
                        add_into(&mut adj, bias, db);
                    }
                    if self.needs(x) {
                        add_into(&mut adj, x, up);
                    }
                }
                Op::Reshape(x) | Op::StraightThrough(x) => {
                    let x = *x;
                    add_into(&mut adj, x, up);
                }
                Op::MaxPool2d { input, argmax } => {
                    let input = *input;
                    let mut dx = vec![T::zero(); self.value(input).len()];
                    for (&u, &src) in up.iter().zip(argmax) {
                        dx[src] += u;
                    }
                    add_into(&mut adj, input, dx);
                }
                Op::LinearCombination(terms) => {
                    let terms = terms.clone();
                    for (coef, v) in terms {
                        if self.needs(v) {
                            add_into(&mut adj, v, up.iter().map(|&u| u * coef).collect());
                        }
                    }
                }
                Op::Softmax(x) => {
                    let x = *x;
                    let probs = self.nodes[idx].value.data();
                    let classes = self.nodes[idx].value.shape()[1];
                    let mut dx = vec![T::zero(); probs.len()];
                    for ((p, u), d) in probs
                        .chunks_exact(classes)
                        .zip(up.chunks_exact(classes))
                        .zip(dx.chunks_exact_mut(classes))
                    {
                        let dot: T = p.iter().zip(u).map(|(&a, &b)| a * b).sum();
                        for j in 0..classes {
                            d[j] = p[j] * (u[j] - dot);
                        }
                    }
                    add_into(&mut adj, x, dx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let logits = *logits;
                    let classes = self.value(logits).shape()[1];
                    let scale = up[0] / T::of(labels.len() as f64);
                    let mut dx = probs.clone();
                    for (row, &label) in dx.chunks_exact_mut(classes).zip(labels) {
                        row[label] -= T::one();
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    add_into(&mut adj, logits, dx);
                }
                Op::Sum(x) => {
                    let x = *x;
                    let n = self.value(x).len();
                    add_into(&mut adj, x, vec![up[0]; n]);
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(adj: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match &mut adj[v.0] {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

/// Row-wise max-shifted softmax.
pub fn softmax_rows<T: Real>(data: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    out
}

/// `-log softmax(row)[label]` via log-sum-exp.
pub fn neg_log_softmax<T: Real>(row: &[T], label: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    lse - row[label]
}
