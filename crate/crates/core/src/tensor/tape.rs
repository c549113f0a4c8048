//! Wengert tape for reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends one node holding its
//! output, so node order is a topological order. [`Tape::backward`] walks
//! the nodes once in reverse. A tape is meant to live for one forward pass;
//! no higher-order gradients.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    AddBias { x: Var, bias: Var },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Option<Vec<T>>,
    },
    Relu(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    BoxReluCentre { centre: Var, radius: Var, shrink: T },
    BoxReluRadius { centre: Var, radius: Var, shrink: T },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelScaleAbs { x: Var, gamma: Var, inv_std: Vec<T> },
    RowLinear { x: Var, mats: Vec<T>, n_out: usize },
    Gather { x: Var, index: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    SumAbs(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of evaluated operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Per-row softmax cross-entropy written over logit differences
/// `d_i = y_i - y_t`: `ln(1 + sum_{i != t} exp(d_i))`, stabilised by the
/// largest difference. Returns the loss and the softmax probabilities.
fn cross_entropy_row<T: Scalar>(row: &[T], t: usize, probs: &mut [T]) -> T {
    let yt = row[t];
    let mut m = T::zero();
    for (i, &y) in row.iter().enumerate() {
        if i != t {
            let d = y - yt;
            if d > m {
                m = d;
            }
        }
    }
    let mut s = T::zero();
    for (i, &y) in row.iter().enumerate() {
        if i != t {
            let e = (y - yt - m).exp();
            probs[i] = e;
            s = s + e;
        }
    }
    let loss;
    let total;
    if m == T::zero() {
        loss = s.ln_1p();
        total = T::one() + s;
        probs[t] = T::one();
    } else {
        let base = (-m).exp();
        total = base + s;
        loss = m + total.ln();
        probs[t] = base;
    }
    for p in probs.iter_mut() {
        *p = *p / total;
    }
    loss
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        value.requires_grad = rg;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let mut value = tensor;
        value.grad = None;
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) root w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, n, k, self.data(a), self.data(b), &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let value = Tensor::new(&[cols, rows], kernels::transpose(rows, cols, self.data(x)))?;
        Ok(self.push(value, Op::Transpose { x, rows, cols }, &[x]))
    }

    /// `x[b, j] + bias[j]` for `x: B×n`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let n = sb[0];
        let b = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let value = Tensor::new(sx, data)?;
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[geom.out_channels]));
            }
        }
        let (out, cols) = kernels::conv2d_forward(
            self.data(x),
            self.data(kernel),
            bias.map(|b| self.data(b)),
            &geom,
        );
        let keep = self.requires_grad(kernel);
        let value = Tensor::new(&geom.out_shape(), out)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let op = Op::Conv2d {
            x,
            kernel,
            bias,
            geom,
            cols: keep.then_some(cols),
        };
        Ok(self.push(value, op, &inputs))
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push(value, Op::Abs(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    fn box_relu_check(&self, centre: Var, radius: Var) -> Result<()> {
        if self.shape(centre) != self.shape(radius) {
            return Err(Error::shape("box_relu", self.shape(centre), self.shape(radius)));
        }
        Ok(())
    }

    /// Centre of the Box ReLU transformer with shrinking coefficient `shrink`.
    pub fn box_relu_centre(&mut self, centre: Var, radius: Var, shrink: T) -> Result<Var> {
        self.box_relu_check(centre, radius)?;
        let half = T::of(0.5);
        let value = self.value(centre).zip_map(self.value(radius), |c, r| {
            if c + r <= T::zero() {
                T::zero()
            } else if c - r <= T::zero() {
                shrink * ((c + r) * half)
            } else {
                c
            }
        })?;
        Ok(self.push(
            value,
            Op::BoxReluCentre { centre, radius, shrink },
            &[centre, radius],
        ))
    }

    /// Radius of the Box ReLU transformer with shrinking coefficient `shrink`.
    pub fn box_relu_radius(&mut self, centre: Var, radius: Var, shrink: T) -> Result<Var> {
        self.box_relu_check(centre, radius)?;
        let half = T::of(0.5);
        let value = self.value(centre).zip_map(self.value(radius), |c, r| {
            if c + r <= T::zero() {
                T::zero()
            } else if c - r <= T::zero() {
                shrink * ((c + r) * half)
            } else {
                r
            }
        })?;
        Ok(self.push(
            value,
            Op::BoxReluRadius { centre, radius, shrink },
            &[centre, radius],
        ))
    }

    fn channel_check(&self, x: Var, gamma: Var, n_stats: usize) -> Result<(usize, usize)> {
        let s = self.shape(x);
        let c = self.shape(gamma);
        if s.len() < 2 || c.len() != 1 || s[1] != c[0] || n_stats != c[0] {
            return Err(Error::shape("channel_affine", s, c));
        }
        let inner: usize = s[2..].iter().product();
        Ok((c[0], inner))
    }

    /// Per-channel `gamma * inv_std * (x - mean) + beta` on `N×C×…` inputs.
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        mean: Vec<T>,
        inv_std: Vec<T>,
    ) -> Result<Var> {
        let (channels, inner) = self.channel_check(x, gamma, mean.len())?;
        let g = self.data(gamma);
        let b = beta.map(|b| self.data(b));
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / inner) % channels;
                let y = g[c] * inv_std[c] * (v - mean[c]);
                match b {
                    Some(b) => y + b[c],
                    None => y,
                }
            })
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        let mut inputs = vec![x, gamma];
        inputs.extend(beta);
        Ok(self.push(
            value,
            Op::ChannelAffine { x, gamma, beta, mean, inv_std },
            &inputs,
        ))
    }

    /// Per-channel `|gamma * inv_std| * x`: the radius rule of a fixed affine map.
    pub fn channel_scale_abs(&mut self, x: Var, gamma: Var, inv_std: Vec<T>) -> Result<Var> {
        let (channels, inner) = self.channel_check(x, gamma, inv_std.len())?;
        let g = self.data(gamma);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / inner) % channels;
                (g[c] * inv_std[c]).abs() * v
            })
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::ChannelScaleAbs { x, gamma, inv_std }, &[x, gamma]))
    }

    /// Applies a distinct constant matrix to every row: `out[b] = mats[b] @ x[b]`,
    /// with `mats` laid out as `B×n_out×n_in`.
    pub fn row_linear(&mut self, x: Var, mats: Vec<T>, n_out: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || mats.len() != s[0] * n_out * s[1] {
            return Err(Error::shape("row_linear", s, &[mats.len(), n_out]));
        }
        let (rows, n_in) = (s[0], s[1]);
        let xd = self.data(x);
        let mut out = vec![T::zero(); rows * n_out];
        for b in 0..rows {
            let xr = &xd[b * n_in..(b + 1) * n_in];
            for o in 0..n_out {
                let mr = &mats[(b * n_out + o) * n_in..(b * n_out + o + 1) * n_in];
                let mut acc = T::zero();
                for (m, v) in mr.iter().zip(xr) {
                    acc = acc + *m * *v;
                }
                out[b * n_out + o] = acc;
            }
        }
        let value = Tensor::new(&[rows, n_out], out)?;
        Ok(self.push(value, Op::RowLinear { x, mats, n_out }, &[x]))
    }

    /// `out[b] = x[b, index[b]]` for `x: B×n`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != index.len() {
            return Err(Error::shape("gather", s, &[index.len()]));
        }
        let n = s[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Index { what: "gather", index: bad, len: n });
        }
        let xd = self.data(x);
        let data = index.iter().enumerate().map(|(b, &i)| xd[b * n + i]).collect();
        let value = Tensor::new(&[index.len()], data)?;
        Ok(self.push(value, Op::Gather { x, index }, &[x]))
    }

    /// Per-row softmax cross-entropy of `logits: B×n` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy", s, &[targets.len()]));
        }
        let n = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Index { what: "cross_entropy target", index: bad, len: n });
        }
        let xd = self.data(logits);
        let mut probs = vec![T::zero(); xd.len()];
        let losses = targets
            .iter()
            .enumerate()
            .map(|(b, &t)| cross_entropy_row(&xd[b * n..(b + 1) * n], t, &mut probs[b * n..(b + 1) * n]))
            .collect();
        let value = Tensor::new(&[targets.len()], losses)?;
        Ok(self.push(
            value,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).numel() as f64);
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push(value, Op::Mean(x), &[x])
    }

    pub fn sum_abs(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.data(x).iter().map(|v| v.abs()).sum());
        self.push(value, Op::SumAbs(x), &[x])
    }

    /// Back-propagates from the scalar `root`. Afterwards every node that
    /// requires grad carries a gradient (zero if `root` does not depend on it).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward root", self.shape(root), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                let n = node.value.numel();
                node.value.set_grad(g.unwrap_or_else(|| vec![T::zero(); n]));
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].value.requires_grad();
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(*a) {
                    let bt = kernels::transpose(k, n, self.data(*b));
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(m, k, n, g, &bt, &mut da);
                    add_into(&mut grads[a.0], da);
                }
                if needs(*b) {
                    let at = kernels::transpose(m, k, self.data(*a));
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm(k, n, m, &at, g, &mut db);
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Transpose { x, rows, cols } => {
                if needs(*x) {
                    add_into(&mut grads[x.0], kernels::transpose(*cols, *rows, g));
                }
            }
            Op::AddBias { x, bias } => {
                if needs(*x) {
                    add_into(&mut grads[x.0], g.to_vec());
                }
                if needs(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![T::zero(); n];
                    for (i, &v) in g.iter().enumerate() {
                        db[i % n] = db[i % n] + v;
                    }
                    add_into(&mut grads[bias.0], db);
                }
            }
            Op::Conv2d { x, kernel, bias, geom, cols } => {
                if needs(*x) {
                    let dx = kernels::conv2d_backward_input(g, self.data(*kernel), geom);
                    add_into(&mut grads[x.0], dx);
                }
                if needs(*kernel) {
                    let cols = cols.as_ref().expect("patches saved when kernel requires grad");
                    add_into(&mut grads[kernel.0], kernels::conv2d_backward_kernel(g, cols, geom));
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        let db = kernels::channel_sums(g, geom.batch, geom.out_channels);
                        add_into(&mut grads[b.0], db);
                    }
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let d = self
                        .data(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    add_into(&mut grads[x.0], d);
                }
            }
            Op::Abs(x) => {
                if needs(*x) {
                    let d = self.data(*x).iter().zip(g).map(|(&v, &gv)| sign(v) * gv).collect();
                    add_into(&mut grads[x.0], d);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if needs(*b) {
                    add_into(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if needs(*b) {
                    add_into(&mut grads[b.0], g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d = self.data(*b).iter().zip(g).map(|(&q, &gv)| q * gv).collect();
                    add_into(&mut grads[a.0], d);
                }
                if needs(*b) {
                    let d = self.data(*a).iter().zip(g).map(|(&p, &gv)| p * gv).collect();
                    add_into(&mut grads[b.0], d);
                }
            }
            Op::Scale(x, s) => {
                if needs(*x) {
                    add_into(&mut grads[x.0], g.iter().map(|&v| v * *s).collect());
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    add_into(&mut grads[x.0], g.to_vec());
                }
            }
            Op::BoxReluCentre { centre, radius, shrink } | Op::BoxReluRadius { centre, radius, shrink } => {
                let is_centre = matches!(node.op, Op::BoxReluCentre { .. });
                let half_s = *shrink * T::of(0.5);
                let cs = self.data(*centre);
                let rs = self.data(*radius);
                let mut dc = vec![T::zero(); g.len()];
                let mut dr = vec![T::zero(); g.len()];
                for i in 0..g.len() {
                    let (c, r) = (cs[i], rs[i]);
                    if c + r <= T::zero() {
                        continue;
                    } else if c - r <= T::zero() {
                        dc[i] = half_s * g[i];
                        dr[i] = half_s * g[i];
                    } else if is_centre {
                        dc[i] = g[i];
                    } else {
                        dr[i] = g[i];
                    }
                }
                if needs(*centre) {
                    add_into(&mut grads[centre.0], dc);
                }
                if needs(*radius) {
                    add_into(&mut grads[radius.0], dr);
                }
            }
            Op::ChannelAffine { x, gamma, beta, mean, inv_std } => {
                let channels = mean.len();
                let inner: usize = self.shape(*x)[2..].iter().product();
                let gam = self.data(*gamma);
                if needs(*x) {
                    let d = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| {
                            let c = (i / inner) % channels;
                            gam[c] * inv_std[c] * gv
                        })
                        .collect();
                    add_into(&mut grads[x.0], d);
                }
                if needs(*gamma) {
                    let xd = self.data(*x);
                    let mut d = vec![T::zero(); channels];
                    for (i, &gv) in g.iter().enumerate() {
                        let c = (i / inner) % channels;
                        d[c] = d[c] + gv * inv_std[c] * (xd[i] - mean[c]);
                    }
                    add_into(&mut grads[gamma.0], d);
                }
                if let Some(b) = beta {
                    if needs(*b) {
                        let mut d = vec![T::zero(); channels];
                        for (i, &gv) in g.iter().enumerate() {
                            let c = (i / inner) % channels;
                            d[c] = d[c] + gv;
                        }
                        add_into(&mut grads[b.0], d);
                    }
                }
            }
            Op::ChannelScaleAbs { x, gamma, inv_std } => {
                let channels = inv_std.len();
                let inner: usize = self.shape(*x)[2..].iter().product();
                let gam = self.data(*gamma);
                if needs(*x) {
                    let d = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| {
                            let c = (i / inner) % channels;
                            (gam[c] * inv_std[c]).abs() * gv
                        })
                        .collect();
                    add_into(&mut grads[x.0], d);
                }
                if needs(*gamma) {
                    let xd = self.data(*x);
                    let mut d = vec![T::zero(); channels];
                    for (i, &gv) in g.iter().enumerate() {
                        let c = (i / inner) % channels;
                        d[c] = d[c] + gv * xd[i] * inv_std[c].abs() * sign(gam[c]);
                    }
                    add_into(&mut grads[gamma.0], d);
                }
            }
            Op::RowLinear { x, mats, n_out } => {
                if needs(*x) {
                    let s = self.shape(*x);
                    let (rows, n_in) = (s[0], s[1]);
                    let mut d = vec![T::zero(); rows * n_in];
                    for b in 0..rows {
                        for o in 0..*n_out {
                            let gv = g[b * n_out + o];
                            let mr = &mats[(b * n_out + o) * n_in..(b * n_out + o + 1) * n_in];
                            for (dst, &m) in d[b * n_in..(b + 1) * n_in].iter_mut().zip(mr) {
                                *dst = *dst + m * gv;
                            }
                        }
                    }
                    add_into(&mut grads[x.0], d);
                }
            }
            Op::Gather { x, index } => {
                if needs(*x) {
                    let n = self.shape(*x)[1];
                    let mut d = vec![T::zero(); index.len() * n];
                    for (b, &i) in index.iter().enumerate() {
                        d[b * n + i] = g[b];
                    }
                    add_into(&mut grads[x.0], d);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if needs(*logits) {
                    let n = self.shape(*logits)[1];
                    let mut d = probs.clone();
                    for (b, &t) in targets.iter().enumerate() {
                        d[b * n + t] = d[b * n + t] - T::one();
                        for v in &mut d[b * n..(b + 1) * n] {
                            *v = *v * g[b];
                        }
                    }
                    add_into(&mut grads[logits.0], d);
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let n = self.value(*x).numel();
                    add_into(&mut grads[x.0], vec![g[0]; n]);
                }
            }
            Op::Mean(x) => {
                if needs(*x) {
                    let n = self.value(*x).numel();
                    add_into(&mut grads[x.0], vec![g[0] / T::of(n as f64); n]);
                }
            }
            Op::SumAbs(x) => {
                if needs(*x) {
                    let d = self.data(*x).iter().map(|&v| sign(v) * g[0]).collect();
                    add_into(&mut grads[x.0], d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{finite_diff, max_rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

    /// Random tensor with entries bounded away from zero, so that ReLU and
    /// absolute-value kinks stay out of the finite-difference stencil.
    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) { v } else { -v }
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Scalarizes an output with fixed random weights so every entry matters.
    fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = rand_t(&mut rng, tape.shape(y));
        let w = tape.constant(w);
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    }

    fn check(build: &Build, inputs: Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let y = build(&mut tape, &vars);
        let root = weighted_sum(&mut tape, y);
        tape.backward(root).unwrap();
        let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
        let numeric = finite_diff(
            |xs| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
                let y = build(&mut tape, &vars);
                let root = weighted_sum(&mut tape, y);
                tape.value(root).item()
            },
            &inputs,
            1e-6,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            let err = max_rel_error(a, n, 1e-3);
            assert!(err < 1e-6, "relative error {err}: {a:?} vs {n:?}");
        }
    }

    #[test]
    fn grad_matmul_transpose_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            &|t, v| {
                let bt = t.transpose(v[1]).unwrap();
                let y = t.matmul(v[0], bt).unwrap();
                t.add_bias(y, v[2]).unwrap()
            },
            vec![rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[5, 4]), rand_t(&mut rng, &[5])],
        );
    }

    #[test]
    fn grad_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap(),
            vec![rand_t(&mut rng, &[2, 2, 5, 5]), rand_t(&mut rng, &[3, 2, 3, 3]), rand_t(&mut rng, &[3])],
        );
    }

    #[test]
    fn grad_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            &|t, v| {
                let r = t.relu(v[0]);
                let a = t.abs(v[1]);
                let s = t.add(r, a).unwrap();
                let d = t.sub(s, v[1]).unwrap();
                let m = t.mul(d, v[0]).unwrap();
                let m = t.scale(m, -1.5);
                t.reshape(m, &[6]).unwrap()
            },
            vec![rand_t(&mut rng, &[2, 3]), rand_t(&mut rng, &[2, 3])],
        );
    }

    #[test]
    fn grad_box_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // centres and radii chosen so that all three cases occur
        let c = Tensor::from_f64(&[1, 6], &[-2.0, -0.3, 0.2, 0.9, 1.5, -0.1]).unwrap();
        let r = Tensor::from_f64(&[1, 6], &[0.5, 0.6, 0.5, 0.4, 0.2, 0.45]).unwrap();
        let _ = &mut rng;
        for shrink in [1.0, 0.7] {
            check(
                &move |t, v| {
                    let a = t.box_relu_centre(v[0], v[1], shrink).unwrap();
                    let b = t.box_relu_radius(v[0], v[1], shrink).unwrap();
                    let b = t.scale(b, 1.3);
                    t.add(a, b).unwrap()
                },
                vec![c.clone(), r.clone()],
            );
        }
    }

    #[test]
    fn grad_channel_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mean = vec![0.1, -0.2, 0.3];
        let inv = vec![1.2, 0.8, 2.0];
        check(
            &move |t, v| {
                let a = t.channel_affine(v[0], v[1], Some(v[2]), mean.clone(), inv.clone()).unwrap();
                let b = t.channel_scale_abs(v[0], v[1], inv.clone()).unwrap();
                t.add(a, b).unwrap()
            },
            vec![rand_t(&mut rng, &[2, 3, 2, 2]), rand_t(&mut rng, &[3]), rand_t(&mut rng, &[3])],
        );
    }

    #[test]
    fn grad_row_linear_gather_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mats: Vec<f64> = (0..2 * 4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        check(
            &move |t, v| {
                let y = t.row_linear(v[0], mats.clone(), 4).unwrap();
                let ce = t.cross_entropy(y, &[1, 3]).unwrap();
                let g = t.gather(y, vec![0, 2]).unwrap();
                let s = t.add(ce, g).unwrap();
                let m = t.mean(s);
                let a = t.sum_abs(v[0]);
                let out = t.add(m, a).unwrap();
                t.reshape(out, &[1]).unwrap()
            },
            vec![rand_t(&mut rng, &[2, 3])],
        );
    }

    #[test]
    fn cross_entropy_values() {
        let l = crate::tensor::softmax_cross_entropy(&Tensor::<f64>::from_f64(&[3], &[1.0, 1.0, 1.0]).unwrap(), 0).unwrap();
        assert!((l.item() - 3f64.ln()).abs() < 1e-15);
        // large margins stay finite
        let l = crate::tensor::softmax_cross_entropy(&Tensor::<f64>::from_f64(&[2], &[0.0, 1000.0]).unwrap(), 0).unwrap();
        assert!((l.item() - 1000.0).abs() < 1e-9);
        let l = crate::tensor::softmax_cross_entropy(&Tensor::<f64>::from_f64(&[2], &[1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!(l.item() >= 0.0 && l.item() < 1e-300);
    }

    #[test]
    fn unreached_params_get_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::full(&[2], 1.0));
        let b = tape.param(Tensor::full(&[3], 1.0));
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 0.0, 0.0]);
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_t(&mut rng, &[7, 9]);
        let b = rand_t(&mut rng, &[9, 5]);
        let c = crate::tensor::matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..9 {
                    acc += a.data()[i * 9 + k] * b.data()[k * 5 + j];
                }
                assert_eq!(c.data()[i * 5 + j], acc);
            }
        }
        assert!(crate::tensor::matmul(&a, &a).is_err());
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, c, h, w, o, k, s, p) = (2, 3, 6, 5, 4, 3, 2, 1);
        let x = rand_t(&mut rng, &[n, c, h, w]);
        let kern = rand_t(&mut rng, &[o, c, k, k]);
        let bias = rand_t(&mut rng, &[o]);
        let y = crate::tensor::conv2d(&x, &kern, Some(&bias), s, p).unwrap();
        let (oh, ow) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
        assert_eq!(y.shape(), &[n, o, oh, ow]);
        for b in 0..n {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let (yy, xx) = ((i * s + ki) as isize - p as isize, (j * s + kj) as isize - p as isize);
                                    let v = if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                        0.0
                                    } else {
                                        x.data()[((b * c + ci) * h + yy as usize) * w + xx as usize]
                                    };
                                    acc += v * kern.data()[((oc * c + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                        let got = y.data()[((b * o + oc) * oh + i) * ow + j];
                        assert_eq!(got, acc + bias.data()[oc]);
                    }
                }
            }
        }
    }
}
