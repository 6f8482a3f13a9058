use super::conv::ConvGeometry;
use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    Relu(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    GaussianKernel {
        x: Var,
        sigma: f64,
    },
    Hsic {
        k: Var,
        l: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A tape of recorded operations. Nodes are appended in evaluation order,
/// so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Trailing-dimension broadcast: `small` must equal the last dims of `big`.
fn broadcast_ok(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Centre a square matrix: `H M H` with `H = I - 11^T / n`.
pub(crate) fn double_center(m: &[f64], n: usize) -> Vec<f64> {
    let inv = 1.0 / n as f64;
    let mut row_mean = vec![0.0; n];
    let mut col_mean = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            row_mean[i] += m[i * n + j];
            col_mean[j] += m[i * n + j];
        }
    }
    row_mean.iter_mut().for_each(|v| *v *= inv);
    col_mean.iter_mut().for_each(|v| *v *= inv);
    let grand = row_mean.iter().sum::<f64>() * inv;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = m[i * n + j] - row_mean[i] - col_mean[j] + grand;
        }
    }
    out
}

fn transpose_square(m: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = m[i * n + j];
        }
    }
    t
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded node, in recording (topological) order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of the last backward pass(es), if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_ok(av.shape(), bv.shape()) {
            return Err(Error::shape(format!(
                "{name}: cannot broadcast {:?} onto {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let m = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % m]))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (av.shape(), bv.shape()) else {
            return Err(Error::shape(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        };
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dimensions {k} != {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), false, 0.0, &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Cross-correlation of an `n x h x w x cin` input with a
    /// `kh x kw x cin x cout` kernel, plus an optional per-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geometry = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geometry.out_channels] {
                return Err(Error::shape(format!(
                    "conv2d bias shape {:?}, expected [{}]",
                    self.shape(b),
                    geometry.out_channels
                )));
            }
        }
        let data = geometry.forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(geometry.output_shape().to_vec(), data)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            &inputs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let &[n, classes] = lv.shape() else {
            return Err(Error::shape(format!("logits must be 2-D, got {:?}", lv.shape())));
        };
        if n == 0 || labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} logit rows", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        let mut probs = vec![0.0; n * classes];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv.data()[i * classes..][..classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            for (p, v) in probs[i * classes..][..classes].iter_mut().zip(row) {
                *p = (v - max - log_denom).exp();
            }
            loss += log_denom - (row[label] - max);
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Collapse every axis after the first: `n x ... -> n x rest`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let Some((&n, rest)) = shape.split_first() else {
            return Err(Error::shape("cannot flatten a scalar"));
        };
        let rest = rest.iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Concatenate along the last axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat of zero tensors"));
        };
        let lead = self.shape(first).split_last().map(|(_, l)| l.to_vec());
        let Some(lead) = lead else {
            return Err(Error::shape("cannot concat scalars"));
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let shape = self.shape(p);
            match shape.split_last() {
                Some((&w, l)) if l == lead.as_slice() => widths.push(w),
                _ => {
                    return Err(Error::shape(format!(
                        "concat: {shape:?} incompatible with leading dims {lead:?}"
                    )))
                }
            }
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..][..w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `K_ij = exp(-|x_i - x_j|^2 / (2 sigma^2))` over the rows of an `n x p` matrix.
    pub fn gaussian_kernel(&mut self, x: Var, sigma: f64) -> Result<Var> {
        let xv = self.value(x);
        let &[n, p] = xv.shape() else {
            return Err(Error::shape(format!("kernel input must be 2-D, got {:?}", xv.shape())));
        };
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::shape(format!("bandwidth must be positive, got {sigma}")));
        }
        let scale = -1.0 / (2.0 * sigma * sigma);
        let d = xv.data();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            k[i * n + i] = 1.0;
            for j in i + 1..n {
                let dist2: f64 = d[i * p..][..p]
                    .iter()
                    .zip(&d[j * p..][..p])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let v = (dist2 * scale).exp();
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        let out = Tensor::new(vec![n, n], k)?;
        Ok(self.push(out, Op::GaussianKernel { x, sigma }, &[x]))
    }

    /// Biased empirical HSIC, `trace(K H L H) / (n - 1)^2`.
    pub fn hsic(&mut self, k: Var, l: Var) -> Result<Var> {
        let (kv, lv) = (self.value(k), self.value(l));
        let n = match kv.shape() {
            &[a, b] if a == b => a,
            s => return Err(Error::shape(format!("hsic: K must be square, got {s:?}"))),
        };
        if lv.shape() != [n, n] {
            return Err(Error::shape(format!(
                "hsic: L shape {:?} does not match K {:?}",
                lv.shape(),
                kv.shape()
            )));
        }
        if n < 2 {
            return Err(Error::shape("hsic needs at least two samples"));
        }
        let kc = double_center(kv.data(), n);
        // trace(A B) = sum_ij A_ij B_ji
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += kc[i * n + j] * lv.data()[j * n + i];
            }
        }
        let norm = ((n - 1) * (n - 1)) as f64;
        Ok(self.push(Tensor::scalar(acc / norm), Op::Hsic { k, l }, &[k, l]))
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into every
    /// node that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) | &Op::Mul(a, b) => {
                let op = &self.nodes[id].op;
                let (av, bv) = (self.value(a), self.value(b));
                let m = bv.len();
                if self.wants(a) {
                    let ga = slot(grads, a, av.len());
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += match op {
                            Op::Mul(..) => gi * bv.data()[i % m],
                            _ => *gi,
                        };
                    }
                }
                if self.wants(b) {
                    let gb = slot(grads, b, m);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % m] += match op {
                            Op::Mul(..) => gi * av.data()[i],
                            Op::Sub(..) => -gi,
                            _ => *gi,
                        };
                    }
                }
            }
            &Op::Scale(a, factor) => {
                let ga = slot(grads, a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor);
            }
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(a) {
                    let ga = slot(grads, a, m * k);
                    gemm(m, n, k, 1.0, g, false, bv.data(), true, 1.0, ga);
                }
                if self.wants(b) {
                    let gb = slot(grads, b, k * n);
                    gemm(k, m, n, 1.0, av.data(), true, g, false, 1.0, gb);
                }
            }
            &Op::Conv2d {
                input,
                kernel,
                bias,
                ref geometry,
            } => {
                let (iv, kv) = (self.value(input), self.value(kernel));
                // Take the three buffers out so they can be borrowed together.
                let mut ig = self.wants(input).then(|| {
                    grads[input.0].take().unwrap_or_else(|| vec![0.0; iv.len()])
                });
                let mut kg = self.wants(kernel).then(|| {
                    grads[kernel.0].take().unwrap_or_else(|| vec![0.0; kv.len()])
                });
                let mut bg = bias.filter(|&b| self.wants(b)).map(|b| {
                    grads[b.0].take().unwrap_or_else(|| vec![0.0; geometry.out_channels])
                });
                geometry.backward(
                    iv.data(),
                    kv.data(),
                    g,
                    ig.as_deref_mut(),
                    kg.as_deref_mut(),
                    bg.as_deref_mut(),
                );
                if let Some(ig) = ig {
                    grads[input.0] = Some(ig);
                }
                if let Some(kg) = kg {
                    grads[kernel.0] = Some(kg);
                }
                if let (Some(b), Some(bg)) = (bias, bg) {
                    grads[b.0] = Some(bg);
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x);
                let gx = slot(grads, x, xv.len());
                for ((acc, gi), xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                    if *xi > 0.0 {
                        *acc += gi;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let classes = probs.len() / n;
                let scale = g[0] / n as f64;
                let gl = slot(grads, *logits, probs.len());
                for (i, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        gl[i * classes + c] += scale * (probs[i * classes + c] - onehot);
                    }
                }
            }
            &Op::Reshape(x) => {
                let gx = slot(grads, x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::Concat(parts) => {
                let total = *out.shape().last().expect("concat output has an axis");
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().expect("concat input has an axis");
                    if self.wants(p) {
                        let gp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            &Op::Sum(x) => {
                let gx = slot(grads, x, self.value(x).len());
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            &Op::Mean(x) => {
                let len = self.value(x).len();
                let share = g[0] / len as f64;
                let gx = slot(grads, x, len);
                gx.iter_mut().for_each(|a| *a += share);
            }
            &Op::GaussianKernel { x, sigma } => {
                let xv = self.value(x);
                let (n, p) = (xv.shape()[0], xv.shape()[1]);
                let k = out.data();
                let d = xv.data();
                let inv = 1.0 / (sigma * sigma);
                let gx = slot(grads, x, n * p);
                // dK_ij/dx_i = -K_ij (x_i - x_j) / sigma^2, symmetric in (i, j).
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let w = (g[i * n + j] + g[j * n + i]) * k[i * n + j] * inv;
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..p {
                            gx[i * p + c] -= w * (d[i * p + c] - d[j * p + c]);
                        }
                    }
                }
            }
            &Op::Hsic { k, l } => {
                let kv = self.value(k);
                let n = kv.shape()[0];
                let scale = g[0] / ((n - 1) * (n - 1)) as f64;
                // d trace(K H L H)/dK = (H L H)^T, and symmetrically for L.
                if self.wants(k) {
                    let hlh = double_center(&transpose_square(self.value(l).data(), n), n);
                    let gk = slot(grads, k, n * n);
                    gk.iter_mut().zip(&hlh).for_each(|(a, b)| *a += scale * b);
                }
                if self.wants(l) {
                    let hkh = double_center(&transpose_square(kv.data(), n), n);
                    let gl = slot(grads, l, n * n);
                    gl.iter_mut().zip(&hkh).for_each(|(a, b)| *a += scale * b);
                }
            }
        }
    }
}
