//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the tape once in reverse. Graphs are built per training step and
//! dropped afterwards.

mod conv;

use crate::error::{Error, Result};
use crate::prob;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transforms::{satd_plane, upsample2x_plane, upsample2x_plane_adjoint, SATD_BLOCK};

use conv::{conv_backward, conv_forward, conv_t_backward, conv_t_forward, ConvGeom};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    /// `x + c` for a constant `c` that never needs a gradient.
    Shift(Var),
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, stride: usize, pad: usize },
    Relu(Var),
    LeakyRelu(Var, T),
    Softplus(Var),
    Abs(Var),
    Gdn { x: Var, beta: Var, gamma: Var, inverse: bool },
    GlobalAvgPool(Var),
    L2NormalizeRows(Var),
    Reshape(Var),
    Upsample2x(Var),
    Clamp { x: Var, lo: T, hi: T },
    Sum(Var),
    SumSq(Var),
    SumAbs(Var),
    Satd { a: Var, b: Var },
    SoftmaxXent { logits: Var, labels: Vec<usize>, eps: T },
    GaussianLik { y: Var, sigma: Var },
    LogisticLik { z: Var, loc: Var, log_scale: Var },
    NegLog2Sum { p: Var, floor: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar output with respect to every tracked node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::invalid(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

/// Splits `[N, C, rest...]` into `(N, C, prod(rest))`.
fn ncs(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape.first().copied().unwrap_or(1);
    let c = shape.get(1).copied().unwrap_or(1);
    let s = shape.iter().skip(2).product();
    (n, c, s)
}

/// GDN normalizer `beta_i + sum_j gamma_ij x_j^2` at every (n, s) site.
fn gdn_norm<T: Scalar>(x: &[T], beta: &[T], gamma: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut norm = vec![T::zero(); n * c * s];
    let mut sq = vec![T::zero(); c];
    for b in 0..n {
        for p in 0..s {
            for j in 0..c {
                let v = x[(b * c + j) * s + p];
                sq[j] = v * v;
            }
            for i in 0..c {
                let row = &gamma[i * c..(i + 1) * c];
                let acc = row.iter().zip(&sq).fold(beta[i], |a, (&g, &q)| a + g * q);
                norm[(b * c + i) * s + p] = acc;
            }
        }
    }
    norm
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("sub", va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k), &[a])
    }

    /// Adds a constant tensor (for example training noise).
    pub fn shift(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            return Err(shape_err("shift", va.shape(), c.shape()));
        }
        let out = va.zip_map(c, |x, y| x + y);
        Ok(self.push(out, Op::Shift(a), &[a]))
    }

    pub fn shift_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Shift(a), &[a])
    }

    /// Adds `b[c]` along axis 1 of `x` (`[N, C, ...]`).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let (n, c, s) = ncs(vx.shape());
        if vb.numel() != c {
            return Err(shape_err("channel bias", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        let bd = vb.data();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bd[(i / s) % c];
        }
        debug_assert_eq!(out.numel(), n * c * s);
        Ok(self.push(out, Op::AddChannelBias(x, b), &[x, b]))
    }

    /// `[N, K] x [K, M] -> [N, M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        T::gemm(n, k, m, T::one(), va.data(), k as isize, 1, vb.data(), m as isize, 1, T::zero(), &mut out, m as isize, 1);
        let out = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Convolution of `[N, C, H, W]` with `[O, C, k, k]` weights, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || stride == 0 {
            return Err(shape_err("conv2d", sx, sw));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d kernel larger than input", sx, sw));
        }
        let g = ConvGeom::forward(c, h, wd, k, stride, pad);
        let (in_len, out_len) = (c * h * wd, o * g.out_len());
        let mut out = vec![T::zero(); n * out_len];
        let mut cols = Vec::new();
        for b in 0..n {
            conv_forward(
                &vx.data()[b * in_len..(b + 1) * in_len],
                vw.data(),
                o,
                &g,
                &mut out[b * out_len..(b + 1) * out_len],
                &mut cols,
            );
        }
        let out = Tensor::from_vec(&[n, o, g.out_h, g.out_w], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, stride, pad }, &[x, w]))
    }

    /// Transposed convolution, weights `[I, O, k, k]`. Output size is
    /// `(H - 1) * stride - 2 * pad + k + out_pad`.
    pub fn conv_t2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, out_pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || sw[2] != sw[3] || stride == 0 || out_pad >= stride {
            return Err(shape_err("conv_t2d", sx, sw));
        }
        let (n, i, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[1], sw[2]);
        let oh = ((h - 1) * stride + k + out_pad).checked_sub(2 * pad);
        let ow = ((wd - 1) * stride + k + out_pad).checked_sub(2 * pad);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(shape_err("conv_t2d output size", sx, sw)),
        };
        let g = ConvGeom::forward(o, oh, ow, k, stride, pad);
        if (g.out_h, g.out_w) != (h, wd) {
            return Err(shape_err("conv_t2d geometry", sx, sw));
        }
        let (in_len, out_len) = (i * h * wd, o * oh * ow);
        let mut out = vec![T::zero(); n * out_len];
        let mut cols = Vec::new();
        for b in 0..n {
            conv_t_forward(
                &vx.data()[b * in_len..(b + 1) * in_len],
                vw.data(),
                i,
                &g,
                &mut out[b * out_len..(b + 1) * out_len],
                &mut cols,
            );
        }
        let out = Tensor::from_vec(&[n, o, oh, ow], out)?;
        Ok(self.push(out, Op::ConvT2d { x, w, stride, pad }, &[x, w]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let f = v.as_f64();
            T::lit(if f > 30.0 { f } else { f.exp().ln_1p() })
        });
        self.push(out, Op::Softplus(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs(x), &[x])
    }

    /// Generalized divisive normalization across axis 1:
    /// `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)`; the inverse form
    /// multiplies by the same root.
    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
        let (vx, vb, vg) = (self.value(x), self.value(beta), self.value(gamma));
        let (n, c, s) = ncs(vx.shape());
        if vb.numel() != c || vg.numel() != c * c {
            return Err(shape_err("gdn", vx.shape(), vg.shape()));
        }
        let norm = gdn_norm(vx.data(), vb.data(), vg.data(), n, c, s);
        let mut out = vx.clone();
        for (v, &d) in out.data_mut().iter_mut().zip(&norm) {
            let r = d.sqrt();
            *v = if inverse { *v * r } else { *v / r };
        }
        Ok(self.push(out, Op::Gdn { x, beta, gamma, inverse }, &[x, beta, gamma]))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 4 {
            return Err(Error::invalid(format!("global_avg_pool expects NCHW, got {:?}", vx.shape())));
        }
        let (n, c, s) = ncs(vx.shape());
        let inv = T::one() / T::from_usize(s).unwrap();
        let out: Vec<T> = vx
            .data()
            .chunks(s)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[n, c], out)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Scales every row of `[N, D]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(Error::invalid(format!("l2_normalize_rows expects [N, D], got {:?}", vx.shape())));
        }
        let d = vx.shape()[1];
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(d) {
            let n = row_norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(self.push(out, Op::L2NormalizeRows(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Bilinear 2x upsampling of every `[H, W]` plane.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 4 {
            return Err(Error::invalid(format!("upsample2x expects NCHW, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Vec::with_capacity(n * c * 4 * h * w);
        for plane in vx.data().chunks(h * w) {
            out.extend(upsample2x_plane(plane, h, w));
        }
        let out = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(out, Op::Upsample2x(x), &[x]))
    }

    /// Hard clip; the gradient is identity inside `[lo, hi]` and zero outside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSq(x), &[x])
    }

    pub fn sum_abs(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v.abs()).sum();
        self.push(Tensor::scalar(s), Op::SumAbs(x), &[x])
    }

    /// Batch SATD: for every image the 8x8 Hadamard SATD of `a - b` divided by
    /// `C * H * W`, summed over the batch.
    pub fn satd(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.shape().len() != 4 {
            return Err(shape_err("satd", va.shape(), vb.shape()));
        }
        let s = va.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        let inv = T::one() / T::from_usize(c * h * w).unwrap();
        let mut total = T::zero();
        for (pa, pb) in va.data().chunks(h * w).zip(vb.data().chunks(h * w)) {
            let diff: Vec<T> = pa.iter().zip(pb).map(|(&x, &y)| x - y).collect();
            total += satd_plane(&diff, h, w, SATD_BLOCK, None) * inv;
        }
        Ok(self.push(Tensor::scalar(total), Op::Satd { a, b }, &[a, b]))
    }

    /// Softmax cross-entropy summed over the batch, with the true-class
    /// probability floored at `eps`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize], eps: T) -> Result<Var> {
        let vl = self.value(logits);
        let s = vl.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::invalid(format!(
                "softmax_xent: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} outside {k} classes")));
        }
        let cap = -eps.ln();
        let total = vl
            .data()
            .chunks(k)
            .zip(labels)
            .map(|(row, &y)| log_softmax_row(row)[y].neg().min(cap))
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                eps,
            },
            &[logits],
        ))
    }

    /// Unit-bin mass of `y` under zero-mean Gaussians with scales `sigma`.
    pub fn gaussian_likelihood(&mut self, y: Var, sigma: Var) -> Result<Var> {
        let (vy, vs) = (self.value(y), self.value(sigma));
        if vy.shape() != vs.shape() {
            return Err(shape_err("gaussian_likelihood", vy.shape(), vs.shape()));
        }
        let out = vy.zip_map(vs, |a, s| T::lit(prob::gaussian_bin_mass(a.as_f64(), s.as_f64())));
        Ok(self.push(out, Op::GaussianLik { y, sigma }, &[y, sigma]))
    }

    /// Unit-bin mass of `z` (`[N, C, ...]`) under per-channel logistics.
    pub fn logistic_likelihood(&mut self, z: Var, loc: Var, log_scale: Var) -> Result<Var> {
        let (vz, vl, vs) = (self.value(z), self.value(loc), self.value(log_scale));
        let (_, c, s) = ncs(vz.shape());
        if vl.numel() != c || vs.numel() != c {
            return Err(shape_err("logistic_likelihood", vz.shape(), vl.shape()));
        }
        let mut out = vz.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / s) % c;
            *v = T::lit(prob::logistic_bin_mass(
                v.as_f64(),
                vl.data()[ch].as_f64(),
                vs.data()[ch].as_f64().exp(),
            ));
        }
        Ok(self.push(out, Op::LogisticLik { z, loc, log_scale }, &[z, loc, log_scale]))
    }

    /// `sum(-log2(max(p, floor)))`.
    pub fn neg_log2_sum(&mut self, p: Var, floor: T) -> Var {
        let total = self
            .value(p)
            .data()
            .iter()
            .map(|&v| T::lit(prob::bits(v.max(floor).as_f64())))
            .sum();
        self.push(Tensor::scalar(total), Op::NegLog2Sum { p, floor }, &[p])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, g.map(|v| v * k));
            }
            Op::Shift(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddChannelBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let (_, c, s) = ncs(g.shape());
                    let mut db = vec![T::zero(); c];
                    for (i, &v) in g.data().iter().enumerate() {
                        db[(i / s) % c] += v;
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_vec(&shape, db).unwrap());
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); n * k];
                    T::gemm(n, m, k, T::one(), g.data(), m as isize, 1, vb.data(), 1, m as isize, T::zero(), &mut da, k as isize, 1);
                    self.accumulate(grads, *a, Tensor::from_vec(&[n, k], da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * m];
                    T::gemm(k, n, m, T::one(), va.data(), 1, k as isize, g.data(), m as isize, 1, T::zero(), &mut db, m as isize, 1);
                    self.accumulate(grads, *b, Tensor::from_vec(&[k, m], db).unwrap());
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (sx, sw) = (vx.shape(), vw.shape());
                let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, k) = (sw[0], sw[2]);
                let geom = ConvGeom::forward(c, h, wd, k, *stride, *pad);
                let (in_len, out_len) = (c * h * wd, o * geom.out_len());
                let mut dw = self.wants(*w).then(|| vec![T::zero(); vw.numel()]);
                let mut dx = self.wants(*x).then(|| vec![T::zero(); vx.numel()]);
                let mut cols = Vec::new();
                for b in 0..n {
                    conv_backward(
                        &vx.data()[b * in_len..(b + 1) * in_len],
                        vw.data(),
                        o,
                        &geom,
                        &g.data()[b * out_len..(b + 1) * out_len],
                        dw.as_deref_mut(),
                        dx.as_mut().map(|d| &mut d[b * in_len..(b + 1) * in_len]),
                        &mut cols,
                    );
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::from_vec(sw, dw).unwrap());
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_vec(sx, dx).unwrap());
                }
            }
            Op::ConvT2d { x, w, stride, pad } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (sx, sw) = (vx.shape(), vw.shape());
                let (n, i, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, k) = (sw[1], sw[2]);
                let so = node.value.shape();
                let geom = ConvGeom::forward(o, so[2], so[3], k, *stride, *pad);
                let (in_len, out_len) = (i * h * wd, o * so[2] * so[3]);
                let mut dw = self.wants(*w).then(|| vec![T::zero(); vw.numel()]);
                let mut dx = self.wants(*x).then(|| vec![T::zero(); vx.numel()]);
                let mut cols = Vec::new();
                for b in 0..n {
                    conv_t_backward(
                        &vx.data()[b * in_len..(b + 1) * in_len],
                        vw.data(),
                        i,
                        &geom,
                        &g.data()[b * out_len..(b + 1) * out_len],
                        dw.as_deref_mut(),
                        dx.as_mut().map(|d| &mut d[b * in_len..(b + 1) * in_len]),
                        &mut cols,
                    );
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::from_vec(sw, dw).unwrap());
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_vec(sx, dx).unwrap());
                }
            }
            Op::Relu(x) => {
                let d = self.value(*x).zip_map(g, |v, gv| if v > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                let d = self.value(*x).zip_map(g, |v, gv| if v > T::zero() { gv } else { gv * slope });
                self.accumulate(grads, *x, d);
            }
            Op::Softplus(x) => {
                let d = self
                    .value(*x)
                    .zip_map(g, |v, gv| gv * T::lit(prob::sigmoid(v.as_f64())));
                self.accumulate(grads, *x, d);
            }
            Op::Abs(x) => {
                let d = self.value(*x).zip_map(g, |v, gv| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Gdn { x, beta, gamma, inverse } => {
                let (vx, vb, vg) = (self.value(*x), self.value(*beta), self.value(*gamma));
                let (n, c, s) = ncs(vx.shape());
                let xd = vx.data();
                let norm = gdn_norm(xd, vb.data(), vg.data(), n, c, s);
                let half = T::lit(0.5);
                // a_i = g_i * x_i * d(scale_i)/d(norm_i)
                let mut a = vec![T::zero(); xd.len()];
                let mut dx = vec![T::zero(); xd.len()];
                for i in 0..xd.len() {
                    let r = norm[i].sqrt();
                    if *inverse {
                        dx[i] = g.data()[i] * r;
                        a[i] = half * g.data()[i] * xd[i] / r;
                    } else {
                        dx[i] = g.data()[i] / r;
                        a[i] = -half * g.data()[i] * xd[i] / (norm[i] * r);
                    }
                }
                let gd = vg.data();
                let mut dbeta = vec![T::zero(); c];
                let mut dgamma = vec![T::zero(); c * c];
                for b in 0..n {
                    for p in 0..s {
                        let at = |ch: usize| (b * c + ch) * s + p;
                        for i in 0..c {
                            let ai = a[at(i)];
                            dbeta[i] += ai;
                            for j in 0..c {
                                let xj = xd[at(j)];
                                dgamma[i * c + j] += ai * xj * xj;
                            }
                        }
                        for k in 0..c {
                            let mut acc = T::zero();
                            for i in 0..c {
                                acc += a[at(i)] * gd[i * c + k];
                            }
                            dx[at(k)] += T::lit(2.0) * xd[at(k)] * acc;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), dx).unwrap());
                self.accumulate(grads, *beta, Tensor::from_vec(vb.shape(), dbeta).unwrap());
                self.accumulate(grads, *gamma, Tensor::from_vec(vg.shape(), dgamma).unwrap());
            }
            Op::GlobalAvgPool(x) => {
                let vx = self.value(*x);
                let (_, _, s) = ncs(vx.shape());
                let inv = T::one() / T::from_usize(s).unwrap();
                let mut dx = vec![T::zero(); vx.numel()];
                for (chunk, &gv) in dx.chunks_mut(s).zip(g.data()) {
                    chunk.iter_mut().for_each(|v| *v = gv * inv);
                }
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), dx).unwrap());
            }
            Op::L2NormalizeRows(x) => {
                let vx = self.value(*x);
                let d = vx.shape()[1];
                let mut dx = vec![T::zero(); vx.numel()];
                for ((row, gr), out) in vx.data().chunks(d).zip(g.data().chunks(d)).zip(dx.chunks_mut(d)) {
                    let n = row_norm(row);
                    let dot = row.iter().zip(gr).fold(T::zero(), |a, (&r, &gv)| a + r * gv) / (n * n);
                    for ((o, &r), &gv) in out.iter_mut().zip(row).zip(gr) {
                        *o = (gv - r * dot) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), dx).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape).unwrap());
            }
            Op::Upsample2x(x) => {
                let vx = self.value(*x);
                let s = vx.shape();
                let (h, w) = (s[2], s[3]);
                let mut dx = Vec::with_capacity(vx.numel());
                for plane in g.data().chunks(4 * h * w) {
                    dx.extend(upsample2x_plane_adjoint(plane, h, w));
                }
                self.accumulate(grads, *x, Tensor::from_vec(s, dx).unwrap());
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let d = self
                    .value(*x)
                    .zip_map(g, |v, gv| if v >= lo && v <= hi { gv } else { T::zero() });
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let gv = g.item();
                let d = self.value(*x).map(|_| gv);
                self.accumulate(grads, *x, d);
            }
            Op::SumSq(x) => {
                let gv = g.item() * T::lit(2.0);
                let d = self.value(*x).map(|v| v * gv);
                self.accumulate(grads, *x, d);
            }
            Op::SumAbs(x) => {
                let gv = g.item();
                let d = self.value(*x).map(|v| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Satd { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let s = va.shape();
                let (c, h, w) = (s[1], s[2], s[3]);
                let scale = g.item() / T::from_usize(c * h * w).unwrap();
                let mut da = vec![T::zero(); va.numel()];
                for ((pa, pb), out) in va
                    .data()
                    .chunks(h * w)
                    .zip(vb.data().chunks(h * w))
                    .zip(da.chunks_mut(h * w))
                {
                    let diff: Vec<T> = pa.iter().zip(pb).map(|(&x, &y)| x - y).collect();
                    satd_plane(&diff, h, w, SATD_BLOCK, Some(out));
                    out.iter_mut().for_each(|v| *v *= scale);
                }
                let da = Tensor::from_vec(s, da).unwrap();
                if self.wants(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxXent { logits, labels, eps } => {
                let vl = self.value(*logits);
                let k = vl.shape()[1];
                let cap = -eps.ln();
                let gv = g.item();
                let mut d = vec![T::zero(); vl.numel()];
                for ((row, out), &y) in vl.data().chunks(k).zip(d.chunks_mut(k)).zip(labels) {
                    let ls = log_softmax_row(row);
                    if -ls[y] >= cap {
                        continue;
                    }
                    for (j, o) in out.iter_mut().enumerate() {
                        let p = ls[j].exp();
                        *o = gv * (if j == y { p - T::one() } else { p });
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(vl.shape(), d).unwrap());
            }
            Op::GaussianLik { y, sigma } => {
                let (vy, vs) = (self.value(*y), self.value(*sigma));
                let mut dy = vec![T::zero(); vy.numel()];
                let mut ds = vec![T::zero(); vy.numel()];
                for i in 0..vy.numel() {
                    let (gy, gs) = prob::gaussian_bin_mass_grad(vy.data()[i].as_f64(), vs.data()[i].as_f64());
                    dy[i] = g.data()[i] * T::lit(gy);
                    ds[i] = g.data()[i] * T::lit(gs);
                }
                self.accumulate(grads, *y, Tensor::from_vec(vy.shape(), dy).unwrap());
                self.accumulate(grads, *sigma, Tensor::from_vec(vs.shape(), ds).unwrap());
            }
            Op::LogisticLik { z, loc, log_scale } => {
                let (vz, vl, vs) = (self.value(*z), self.value(*loc), self.value(*log_scale));
                let (_, c, s) = ncs(vz.shape());
                let mut dz = vec![T::zero(); vz.numel()];
                let mut dl = vec![T::zero(); c];
                let mut ds = vec![T::zero(); c];
                for i in 0..vz.numel() {
                    let ch = (i / s) % c;
                    let (gz, gls) = prob::logistic_bin_mass_grad(
                        vz.data()[i].as_f64(),
                        vl.data()[ch].as_f64(),
                        vs.data()[ch].as_f64().exp(),
                    );
                    let gi = g.data()[i];
                    dz[i] = gi * T::lit(gz);
                    dl[ch] -= gi * T::lit(gz);
                    ds[ch] += gi * T::lit(gls);
                }
                self.accumulate(grads, *z, Tensor::from_vec(vz.shape(), dz).unwrap());
                self.accumulate(grads, *loc, Tensor::from_vec(vl.shape(), dl).unwrap());
                self.accumulate(grads, *log_scale, Tensor::from_vec(vs.shape(), ds).unwrap());
            }
            Op::NegLog2Sum { p, floor } => {
                let floor = *floor;
                let k = g.item() / T::lit(std::f64::consts::LN_2);
                let d = self
                    .value(*p)
                    .map(|v| if v > floor { -k / v } else { T::zero() });
                self.accumulate(grads, *p, d);
            }
        }
    }
}

fn row_norm<T: Scalar>(row: &[T]) -> T {
    (row.iter().fold(T::zero(), |a, &v| a + v * v) + T::lit(1e-12)).sqrt()
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    row.iter().map(|&v| v - lse).collect()
}

#[cfg(test)]
mod tests;
