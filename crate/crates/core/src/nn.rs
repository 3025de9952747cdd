//! Parameter storage, layers and the optimizer shared by every learned module.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Convolution layer descriptor: kernel `k`, filters `f`, stride `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub k: usize,
    pub f: usize,
    pub s: usize,
}

impl LayerSpec {
    pub const fn new(k: usize, f: usize, s: usize) -> Self {
        LayerSpec { k, f, s }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.f == 0 || self.s == 0 || self.k % 2 == 0 {
            return Err(Error::Config(format!(
                "layer {self:?} needs an odd kernel and nonzero filters/stride"
            )));
        }
        Ok(())
    }
}

/// Box constraint re-applied after every optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Constraint {
    Free,
    AtLeast(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub constraint: Constraint,
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
}

/// Graph variables for one [`ParamSet`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, constraint: Constraint) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            value,
            constraint,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[Param<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds every tensor to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn project(&mut self) {
        for p in &mut self.entries {
            if let Constraint::AtLeast(lo) = p.constraint {
                let lo = T::lit(lo);
                p.value.data_mut().iter_mut().for_each(|v| *v = v.max(lo));
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.is_finite())
    }

    /// Replaces values by name; shapes must agree and every name must exist.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.entries.len()
            )));
        }
        for p in &mut self.entries {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Data(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.entries.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}

fn glorot<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-limit..limit))).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

/// Fully connected layer, weight `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = ps.add(format!("{name}.w"), glorot(&[inputs, outputs], inputs, outputs, rng), Constraint::Free);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[outputs]), Constraint::Free);
        Linear { w, b, inputs, outputs }
    }

    /// Square identity layer with zero bias.
    pub fn identity<T: Scalar>(ps: &mut ParamSet<T>, name: &str, n: usize) -> Self {
        let mut eye = Tensor::zeros(&[n, n]);
        for i in 0..n {
            eye.data_mut()[i * n + i] = T::one();
        }
        let w = ps.add(format!("{name}.w"), eye, Constraint::Free);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[n]), Constraint::Free);
        Linear { w, b, inputs: n, outputs: n }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        g.add_channel_bias(y, p.var(self.b))
    }
}

/// Same-padded convolution with bias, weight `[out, in, k, k]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: LayerSpec,
}

impl Conv {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, in_ch: usize, spec: LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let kk = spec.k * spec.k;
        let w = ps.add(
            format!("{name}.w"),
            glorot(&[spec.f, in_ch, spec.k, spec.k], in_ch * kk, spec.f * kk, rng),
            Constraint::Free,
        );
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[spec.f]), Constraint::Free);
        Conv { w, b, spec }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.var(self.w), self.spec.s, (self.spec.k - 1) / 2)?;
        g.add_channel_bias(y, p.var(self.b))
    }
}

/// Transposed convolution that multiplies the spatial size by the stride.
#[derive(Debug, Clone, Copy)]
pub struct ConvT {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: LayerSpec,
}

impl ConvT {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, in_ch: usize, spec: LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let kk = spec.k * spec.k;
        let w = ps.add(
            format!("{name}.w"),
            glorot(&[in_ch, spec.f, spec.k, spec.k], in_ch * kk, spec.f * kk, rng),
            Constraint::Free,
        );
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[spec.f]), Constraint::Free);
        ConvT { w, b, spec }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv_t2d(x, p.var(self.w), self.spec.s, (self.spec.k - 1) / 2, self.spec.s - 1)?;
        g.add_channel_bias(y, p.var(self.b))
    }
}

pub const GDN_BETA_MIN: f64 = 1e-6;

/// Divisive normalization over channels (axis 1).
#[derive(Debug, Clone, Copy)]
pub struct GdnLayer {
    pub beta: ParamId,
    pub gamma: ParamId,
    pub inverse: bool,
}

impl GdnLayer {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize, inverse: bool) -> Self {
        let beta = ps.add(
            format!("{name}.beta"),
            Tensor::full(&[channels], T::one()),
            Constraint::AtLeast(GDN_BETA_MIN),
        );
        let mut gamma = Tensor::zeros(&[channels, channels]);
        for i in 0..channels {
            gamma.data_mut()[i * channels + i] = T::lit(0.1);
        }
        let gamma = ps.add(format!("{name}.gamma"), gamma, Constraint::AtLeast(0.0));
        GdnLayer { beta, gamma, inverse }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.gdn(x, p.var(self.beta), p.var(self.gamma), self.inverse)
    }
}

fn check_gdn_params<T: Scalar>(n: usize, beta: &[T], gamma: &[T]) -> Result<()> {
    if beta.len() != n || gamma.len() != n * n {
        return Err(Error::invalid(format!(
            "gdn parameters for {n} channels need {n} betas and {} gammas",
            n * n
        )));
    }
    if beta.iter().any(|&b| !(b > T::zero())) {
        return Err(Error::invalid("gdn beta must be positive"));
    }
    if gamma.iter().any(|&v| !(v >= T::zero())) {
        return Err(Error::invalid("gdn gamma must be nonnegative"));
    }
    Ok(())
}

fn gdn_denominators<T: Scalar>(x: &[T], beta: &[T], gamma: &[T]) -> Vec<T> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let s = (0..n).fold(beta[i], |acc, j| acc + gamma[i * n + j] * x[j] * x[j]);
            s.sqrt()
        })
        .collect()
}

/// `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)` on one vector;
/// `gamma` is row-major `n x n`.
pub fn gdn<T: Scalar>(x: &[T], beta: &[T], gamma: &[T]) -> Result<Vec<T>> {
    check_gdn_params(x.len(), beta, gamma)?;
    let d = gdn_denominators(x, beta, gamma);
    Ok(x.iter().zip(&d).map(|(&v, &s)| v / s).collect())
}

/// Inverse-form layer: multiplies by the same root, evaluated on its input.
pub fn igdn<T: Scalar>(x: &[T], beta: &[T], gamma: &[T]) -> Result<Vec<T>> {
    check_gdn_params(x.len(), beta, gamma)?;
    let d = gdn_denominators(x, beta, gamma);
    Ok(x.iter().zip(&d).map(|(&v, &s)| v * s).collect())
}

/// Exact inverse of [`gdn`] by fixed-point iteration `x = y * sqrt(beta + gamma x^2)`.
///
/// Converges whenever `gdn` is invertible at `y`; returns an error otherwise.
pub fn gdn_inverse<T: Scalar>(y: &[T], beta: &[T], gamma: &[T]) -> Result<Vec<T>> {
    check_gdn_params(y.len(), beta, gamma)?;
    let mut x = igdn(y, beta, gamma)?;
    for _ in 0..500 {
        let d = gdn_denominators(&x, beta, gamma);
        let next: Vec<T> = y.iter().zip(&d).map(|(&v, &s)| v * s).collect();
        let delta = next
            .iter()
            .zip(&x)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
        x = next;
        if delta <= T::epsilon() * T::lit(16.0) * x.iter().fold(T::one(), |m, v| m.max(v.abs())) {
            return Ok(x);
        }
    }
    let back = gdn(&x, beta, gamma)?;
    let err = back.iter().zip(y).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
    if err < T::lit(1e-5) {
        Ok(x)
    } else {
        Err(Error::invalid("gdn is not invertible at this point (|y_i|^2 gamma_ii >= 1)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; state is aligned with one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(ps: &ParamSet<T>, cfg: AdamConfig) -> Self {
        let zeros = || ps.entries().iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Applies one update from `grads`; parameters without a gradient are untouched.
    pub fn step(&mut self, ps: &mut ParamSet<T>, bound: &Bound, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, eps) = (T::lit(lr), T::lit(self.cfg.eps));
        for (i, p) in ps.entries.iter_mut().enumerate() {
            let Some(g) = grads.get(bound.vars[i]) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                if !gi.is_finite() {
                    continue;
                }
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        ps.project();
    }
}

/// Step-decayed learning rate `max(base * factor^floor(epoch / every), floor)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub every: usize,
    pub floor: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            base: lr,
            decay: 1.0,
            every: 1,
            floor: lr,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.every.max(1)) as i32;
        (self.base * self.decay.powi(steps)).max(self.floor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gdn_with_zero_gamma_scales_by_root_beta() {
        let y = gdn(&[2.0f64, -3.0], &[4.0, 9.0], &[0.0; 4]).unwrap();
        assert_eq!(y, vec![1.0, -1.0]);
        let id = gdn(&[0.25f64, 7.0], &[1.0, 1.0], &[0.0; 4]).unwrap();
        assert_eq!(id, vec![0.25, 7.0]);
    }

    #[test]
    fn gdn_rejects_bad_parameters() {
        assert!(gdn(&[1.0f64], &[0.0], &[0.0]).is_err());
        assert!(gdn(&[1.0f64], &[-1.0], &[0.0]).is_err());
        assert!(gdn(&[1.0f64], &[1.0], &[-0.1]).is_err());
        assert!(gdn(&[1.0f64, 2.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap(), Constraint::Free);
        let mut opt = Adam::new(&ps, AdamConfig::default());
        for _ in 0..2000 {
            let mut g = Graph::new();
            let b = ps.bind(&mut g, true);
            let l = g.sum_sq(b.var(id));
            let grads = g.backward(l).unwrap();
            opt.step(&mut ps, &b, &grads, 1e-2);
        }
        assert!(ps.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn projection_enforces_constraints() {
        let mut ps = ParamSet::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let _ = Linear::new(&mut ps, "fc", 2, 2, &mut rng);
        let layer = GdnLayer::new(&mut ps, "gdn", 2, false);
        ps.get_mut(layer.beta).data_mut()[0] = -1.0;
        ps.get_mut(layer.gamma).data_mut()[1] = -0.5;
        ps.project();
        assert_eq!(ps.get(layer.beta).data()[0], GDN_BETA_MIN as f32);
        assert_eq!(ps.get(layer.gamma).data()[1], 0.0);
    }

    #[test]
    fn schedule_decays_and_floors() {
        let s = LrSchedule {
            base: 1e-4,
            decay: 0.9,
            every: 5,
            floor: 1e-5,
        };
        assert_eq!(s.at(0), 1e-4);
        assert_eq!(s.at(4), 1e-4);
        assert!((s.at(5) - 9e-5).abs() < 1e-18);
        assert_eq!(s.at(500), 1e-5);
    }
}
