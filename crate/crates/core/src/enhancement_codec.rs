//! Enhancement layer: a scale-hyperprior image codec applied to the
//! min-max normalized residual `x - x_base`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::coding::{read_varint, seal, take, unseal, write_varint, FreqTable, RangeDecoder, RangeEncoder};
use crate::error::{DecodeError, Error, Result};
use crate::eval::psnr;
use crate::nn::{Adam, Bound, Conv, ConvT, GdnLayer, LayerSpec, ParamSet};
use crate::prob;
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, Tensor};
use crate::train::{Batcher, EpochLog, TermAccumulator, TrainConfig, TrainLog};
use crate::transforms::{minmax_denormalize, minmax_normalize, satd, NormalizationSideInfo};

pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancementConfig {
    /// Strided analysis layers; the last one's filters are the latent channels.
    pub analysis: Vec<LayerSpec>,
    pub hyper_analysis: Vec<LayerSpec>,
    pub num_latent_channels: usize,
    pub rate_weight: f64,
    #[serde(default = "default_scale_min")]
    pub scale_min: f64,
    #[serde(default = "default_scale_max")]
    pub scale_max: f64,
    #[serde(default = "default_num_scales")]
    pub num_scales: usize,
    /// Half-width of each hyper-latent table before escape coding.
    #[serde(default = "default_hyper_radius")]
    pub hyper_radius: usize,
}

fn default_scale_min() -> f64 {
    0.11
}

fn default_scale_max() -> f64 {
    64.0
}

fn default_num_scales() -> usize {
    64
}

fn default_hyper_radius() -> usize {
    24
}

impl EnhancementConfig {
    pub fn new(analysis: Vec<LayerSpec>, hyper_analysis: Vec<LayerSpec>, rate_weight: f64) -> Self {
        let m = analysis.last().map_or(0, |s| s.f);
        EnhancementConfig {
            analysis,
            hyper_analysis,
            num_latent_channels: m,
            rate_weight,
            scale_min: default_scale_min(),
            scale_max: default_scale_max(),
            num_scales: default_num_scales(),
            hyper_radius: default_hyper_radius(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_weight > 0.0 && self.rate_weight.is_finite()) {
            return Err(Error::Config(format!("rate_weight must be positive, got {}", self.rate_weight)));
        }
        if self.analysis.is_empty() || self.hyper_analysis.is_empty() {
            return Err(Error::Config("analysis and hyper-analysis need at least one layer".into()));
        }
        self.analysis.iter().chain(&self.hyper_analysis).try_for_each(LayerSpec::validate)?;
        if self.analysis.last().map(|s| s.f) != Some(self.num_latent_channels) {
            return Err(Error::Config(format!(
                "last analysis layer must have {} filters",
                self.num_latent_channels
            )));
        }
        if !(self.scale_min > 0.0 && self.scale_max > self.scale_min) || self.num_scales < 2 {
            return Err(Error::Config("scale table range is empty".into()));
        }
        if self.hyper_radius == 0 {
            return Err(Error::Config("hyper_radius must be positive".into()));
        }
        Ok(())
    }

    /// Spatial factor between the image and the main latent.
    pub fn main_stride(&self) -> usize {
        self.analysis.iter().map(|s| s.s).product()
    }

    /// Spatial factor between the image and the hyper latent.
    pub fn total_stride(&self) -> usize {
        self.main_stride() * self.hyper_analysis.iter().map(|s| s.s).product::<usize>()
    }
}

#[derive(Debug, Clone)]
pub struct EnhancementModel<T> {
    pub cfg: EnhancementConfig,
    pub params: ParamSet<T>,
    g_a: Vec<Conv>,
    gdn: Vec<GdnLayer>,
    g_s: Vec<ConvT>,
    igdn: Vec<GdnLayer>,
    h_a: Vec<Conv>,
    h_s: Vec<ConvT>,
    hyper_loc: crate::nn::ParamId,
    hyper_log_scale: crate::nn::ParamId,
}

/// Graph nodes of one training forward pass.
pub struct EnhancementOutputs {
    pub x_hat: Var,
    pub y_likelihood: Var,
    pub z_likelihood: Var,
}

impl<T: Scalar> EnhancementModel<T> {
    pub fn new(cfg: EnhancementConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let n = cfg.analysis.len();
        let mut ch = 3;
        let mut g_a = Vec::new();
        let mut gdn = Vec::new();
        for (i, spec) in cfg.analysis.iter().enumerate() {
            g_a.push(Conv::new(&mut ps, &format!("g_a.{i}"), ch, *spec, &mut rng));
            ch = spec.f;
            if i + 1 < n {
                gdn.push(GdnLayer::new(&mut ps, &format!("g_a.gdn{i}"), ch, false));
            }
        }
        let mut g_s = Vec::new();
        let mut igdn = Vec::new();
        for i in (0..n).rev() {
            let out = if i == 0 { 3 } else { cfg.analysis[i - 1].f };
            let spec = LayerSpec::new(cfg.analysis[i].k, out, cfg.analysis[i].s);
            g_s.push(ConvT::new(&mut ps, &format!("g_s.{}", n - 1 - i), ch, spec, &mut rng));
            ch = out;
            if i > 0 {
                igdn.push(GdnLayer::new(&mut ps, &format!("g_s.igdn{}", n - 1 - i), ch, true));
            }
        }
        // start the synthesized residual at mid-range
        let last = g_s.last().expect("nonempty analysis");
        ps.get_mut(last.b).data_mut().iter_mut().for_each(|v| *v = T::lit(0.5));
        let m = cfg.num_latent_channels;
        let nh = cfg.hyper_analysis.len();
        let mut ch = m;
        let mut h_a = Vec::new();
        for (i, spec) in cfg.hyper_analysis.iter().enumerate() {
            h_a.push(Conv::new(&mut ps, &format!("h_a.{i}"), ch, *spec, &mut rng));
            ch = spec.f;
        }
        let hyper_channels = ch;
        let mut h_s = Vec::new();
        for i in (0..nh).rev() {
            let out = if i == 0 { m } else { cfg.hyper_analysis[i - 1].f };
            let spec = LayerSpec::new(cfg.hyper_analysis[i].k, out, cfg.hyper_analysis[i].s);
            h_s.push(ConvT::new(&mut ps, &format!("h_s.{}", nh - 1 - i), ch, spec, &mut rng));
            ch = out;
        }
        let hyper_loc = ps.add("hyper.loc", Tensor::zeros(&[hyper_channels]), crate::nn::Constraint::Free);
        let hyper_log_scale = ps.add("hyper.log_scale", Tensor::zeros(&[hyper_channels]), crate::nn::Constraint::Free);
        Ok(EnhancementModel {
            cfg,
            params: ps,
            g_a,
            gdn,
            g_s,
            igdn,
            h_a,
            h_s,
            hyper_loc,
            hyper_log_scale,
        })
    }

    pub fn hyper_channels(&self) -> usize {
        self.cfg.hyper_analysis.last().map_or(0, |s| s.f)
    }

    fn analysis(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, c) in self.g_a.iter().enumerate() {
            h = c.forward(g, p, h)?;
            if let Some(n) = self.gdn.get(i) {
                h = n.forward(g, p, h)?;
            }
        }
        Ok(h)
    }

    fn synthesis(&self, g: &mut Graph<T>, p: &Bound, y: Var) -> Result<Var> {
        let mut h = y;
        for (i, c) in self.g_s.iter().enumerate() {
            h = c.forward(g, p, h)?;
            if let Some(n) = self.igdn.get(i) {
                h = n.forward(g, p, h)?;
            }
        }
        Ok(h)
    }

    fn hyper_analysis(&self, g: &mut Graph<T>, p: &Bound, y: Var) -> Result<Var> {
        let mut h = g.abs(y);
        for (i, c) in self.h_a.iter().enumerate() {
            h = c.forward(g, p, h)?;
            if i + 1 < self.h_a.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Per-element Gaussian scales of the main latent.
    fn hyper_synthesis(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let mut h = z;
        for (i, c) in self.h_s.iter().enumerate() {
            h = c.forward(g, p, h)?;
            if i + 1 < self.h_s.len() {
                h = g.relu(h);
            }
        }
        let s = g.softplus(h);
        Ok(g.shift_scalar(s, T::lit(self.cfg.scale_min)))
    }

    fn check_input(&self, x: &ImageTensor<T>) -> Result<()> {
        let s = self.cfg.total_stride();
        let (h, w, c) = x.dims();
        if c != 3 || h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::invalid(format!(
                "enhancement input must be 3-channel with sides divisible by {s}, got {:?}",
                x.dims()
            )));
        }
        Ok(())
    }

    /// Training pass on an `[N, 3, H, W]` batch of normalized residuals,
    /// with additive uniform noise in place of rounding.
    pub fn forward_train(&self, g: &mut Graph<T>, p: &Bound, x: Var, rng: &mut ChaCha8Rng) -> Result<EnhancementOutputs> {
        let y = self.analysis(g, p, x)?;
        let z = self.hyper_analysis(g, p, y)?;
        let z_noisy = add_noise(g, z, rng)?;
        let y_noisy = add_noise(g, y, rng)?;
        let sigma = self.hyper_synthesis(g, p, z_noisy)?;
        let y_likelihood = g.gaussian_likelihood(y_noisy, sigma)?;
        let z_likelihood = g.logistic_likelihood(z_noisy, p.var(self.hyper_loc), p.var(self.hyper_log_scale))?;
        let x_hat = self.synthesis(g, p, y_noisy)?;
        Ok(EnhancementOutputs {
            x_hat,
            y_likelihood,
            z_likelihood,
        })
    }

    /// Two-byte identifier of the frozen weights and configuration.
    pub fn id(&self) -> u16 {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.cfg).expect("config serializes"));
        for e in self.params.entries() {
            h.update(e.name.as_bytes());
            for v in e.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        let d = h.finalize();
        u16::from_le_bytes([d[0], d[1]])
    }

    fn tables(&self) -> Result<CodingTables> {
        let loc: Vec<f64> = self.params.get(self.hyper_loc).data().iter().map(|v| v.as_f64()).collect();
        let scale: Vec<f64> = self.params.get(self.hyper_log_scale).data().iter().map(|v| v.as_f64().exp()).collect();
        CodingTables::new(&self.cfg, &loc, &scale)
    }

    /// Runs the analysis transforms and rounds both latents.
    fn quantized_latents(&self, x_norm: &ImageTensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x_norm.to_nchw());
        let y = self.analysis(&mut g, &p, x)?;
        let z = self.hyper_analysis(&mut g, &p, y)?;
        Ok((g.value(y).map(round_half_away), g.value(z).map(round_half_away)))
    }

    fn scales_for(&self, z_hat: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(z_hat.clone());
        let s = self.hyper_synthesis(&mut g, &p, z)?;
        Ok(g.value(s).clone())
    }

    fn synthesize(&self, y_hat: &Tensor<T>) -> Result<ImageTensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let y = g.constant(y_hat.clone());
        let x = self.synthesis(&mut g, &p, y)?;
        Ok(ImageTensor::batch_from_nchw(g.value(x))?.remove(0))
    }
}

fn round_half_away<T: Scalar>(v: T) -> T {
    if v.is_finite() {
        v.round()
    } else {
        T::zero()
    }
}

fn add_noise<T: Scalar>(g: &mut Graph<T>, v: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let noise = Tensor::from_vec(&shape, (0..n).map(|_| T::lit(rng.random_range(-0.5..0.5))).collect())?;
    g.shift(v, &noise)
}

/// Entropy tables shared by encoder and decoder.
struct CodingTables {
    scales: Vec<f64>,
    main: Vec<(FreqTable, i32)>,
    hyper: Vec<(FreqTable, i32, i32)>,
}

impl CodingTables {
    fn new(cfg: &EnhancementConfig, loc: &[f64], scale: &[f64]) -> Result<Self> {
        let (lo, hi) = (cfg.scale_min.ln(), cfg.scale_max.ln());
        let step = (hi - lo) / (cfg.num_scales - 1) as f64;
        let scales: Vec<f64> = (0..cfg.num_scales).map(|i| (lo + step * i as f64).exp()).collect();
        let main = scales
            .iter()
            .map(|&s| {
                let r = ((s * 6.0).ceil() as i32).max(1);
                let mut w: Vec<f64> = (-r..=r).map(|k| prob::gaussian_bin_mass(k as f64, s)).collect();
                w.push(2.0 * prob::normal_cdf(-(r as f64 + 0.5) / s));
                Ok((FreqTable::from_weights(&w)?, r))
            })
            .collect::<Result<_>>()?;
        let r = cfg.hyper_radius as i32;
        let hyper = loc
            .iter()
            .zip(scale)
            .map(|(&l, &s)| {
                let c = l.round().clamp(-1e6, 1e6) as i32;
                let s = if s.is_finite() && s > 0.0 { s } else { 1.0 };
                let w: Vec<f64> = (-r..=r)
                    .map(|k| prob::logistic_bin_mass((c + k) as f64, l, s))
                    .chain(std::iter::once(
                        prob::sigmoid((c as f64 - r as f64 - 0.5 - l) / s)
                            + 1.0
                            - prob::sigmoid((c as f64 + r as f64 + 0.5 - l) / s),
                    ))
                    .collect();
                Ok((FreqTable::from_weights(&w)?, c, r))
            })
            .collect::<Result<_>>()?;
        Ok(CodingTables { scales, main, hyper })
    }

    fn scale_index(&self, sigma: f64) -> usize {
        let (lo, hi) = (self.scales[0].ln(), self.scales[self.scales.len() - 1].ln());
        let t = (sigma.max(self.scales[0]).ln() - lo) / (hi - lo) * (self.scales.len() - 1) as f64;
        (t.round().max(0.0) as usize).min(self.scales.len() - 1)
    }
}

fn encode_escaped(enc: &mut RangeEncoder, table: &FreqTable, r: i32, v: i32) {
    if v.abs() <= r {
        enc.encode(table, (v + r) as usize);
    } else {
        enc.encode(table, (2 * r + 1) as usize);
        enc.encode_exp_golomb((v.unsigned_abs() - r as u32 - 1) as u32);
        enc.encode_bits((v < 0) as u32, 1);
    }
}

fn decode_escaped(dec: &mut RangeDecoder, table: &FreqTable, r: i32) -> Result<i32, DecodeError> {
    let s = dec.decode(table)? as i32;
    if s <= 2 * r {
        return Ok(s - r);
    }
    let mag = dec.decode_exp_golomb()? as i64 + r as i64 + 1;
    if mag > i32::MAX as i64 {
        return Err(DecodeError::Malformed("escaped latent out of range".into()));
    }
    let neg = dec.decode_bits(1)? == 1;
    Ok(if neg { -(mag as i32) } else { mag as i32 })
}

/// Decoded enhancement payload contents.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancementPayload {
    pub model_id: u16,
    /// Main-latent spatial dims.
    pub latent_height: usize,
    pub latent_width: usize,
    pub side: NormalizationSideInfo,
    pub hyper: Vec<u8>,
    pub main: Vec<u8>,
}

impl EnhancementPayload {
    pub fn is_degenerate(&self) -> bool {
        self.side.is_degenerate()
    }

    /// `id | varint h | varint w | side | varint len + hyper | varint len + main | crc`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.model_id.to_le_bytes().to_vec();
        write_varint(&mut out, self.latent_height as u64);
        write_varint(&mut out, self.latent_width as u64);
        out.extend_from_slice(&self.side.to_bytes());
        write_varint(&mut out, self.hyper.len() as u64);
        out.extend_from_slice(&self.hyper);
        write_varint(&mut out, self.main.len() as u64);
        out.extend_from_slice(&self.main);
        seal(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let body = unseal(bytes, "enhancement payload")?;
        let mut pos = 0;
        let id = take(body, &mut pos, 2, "enhancement model id")?;
        let model_id = u16::from_le_bytes([id[0], id[1]]);
        let latent_height = read_varint(body, &mut pos, "enhancement latent height")? as usize;
        let latent_width = read_varint(body, &mut pos, "enhancement latent width")? as usize;
        let side = NormalizationSideInfo::from_bytes(take(body, &mut pos, NormalizationSideInfo::ENCODED_LEN, "side info")?)?;
        let n = read_varint(body, &mut pos, "hyper block length")?;
        let hyper = take(body, &mut pos, usize::try_from(n).unwrap_or(usize::MAX), "hyper block")?.to_vec();
        let n = read_varint(body, &mut pos, "main block length")?;
        let main = take(body, &mut pos, usize::try_from(n).unwrap_or(usize::MAX), "main block")?.to_vec();
        if pos != body.len() {
            return Err(DecodeError::Malformed(format!("{} trailing bytes in enhancement payload", body.len() - pos)));
        }
        Ok(EnhancementPayload {
            model_id,
            latent_height,
            latent_width,
            side,
            hyper,
            main,
        })
    }
}

/// Codes `x - x_base` with `model`.
pub fn encode_enhancement<T: Scalar>(x: &ImageTensor<T>, x_base: &ImageTensor<T>, model: &EnhancementModel<T>) -> Result<EnhancementPayload> {
    x.ensure_same_shape(x_base)?;
    model.check_input(x)?;
    let s = model.cfg.main_stride();
    let (lh, lw) = (x.height() / s, x.width() / s);
    let (x_norm, side) = minmax_normalize(&x.sub(x_base)?)?;
    let mut payload = EnhancementPayload {
        model_id: model.id(),
        latent_height: lh,
        latent_width: lw,
        side,
        hyper: Vec::new(),
        main: Vec::new(),
    };
    if side.is_degenerate() {
        return Ok(payload);
    }
    let tables = model.tables()?;
    let (y_hat, z_hat) = model.quantized_latents(&x_norm)?;
    let mut enc = RangeEncoder::new();
    let zs = z_hat.shape()[2] * z_hat.shape()[3];
    for (i, v) in z_hat.data().iter().enumerate() {
        let (t, c, r) = &tables.hyper[(i / zs) % tables.hyper.len()];
        encode_escaped(&mut enc, t, *r, clamp_i32(v.as_f64()) - c);
    }
    payload.hyper = enc.finish();
    let sigma = model.scales_for(&z_hat)?;
    let mut enc = RangeEncoder::new();
    for (v, sg) in y_hat.data().iter().zip(sigma.data()) {
        let (t, r) = &tables.main[tables.scale_index(sg.as_f64())];
        encode_escaped(&mut enc, t, *r, clamp_i32(v.as_f64()));
    }
    payload.main = enc.finish();
    Ok(payload)
}

fn clamp_i32(v: f64) -> i32 {
    v.clamp(-(1 << 30) as f64, (1 << 30) as f64) as i32
}

/// The denormalized synthesized residual carried by `payload`.
pub fn decode_residual<T: Scalar>(payload: &EnhancementPayload, height: usize, width: usize, model: &EnhancementModel<T>) -> Result<ImageTensor<T>> {
    if payload.model_id != model.id() {
        return Err(DecodeError::ModelMismatch {
            expected: model.id(),
            found: payload.model_id,
        }
        .into());
    }
    let s = model.cfg.main_stride();
    if payload.latent_height * s != height || payload.latent_width * s != width {
        return Err(DecodeError::Malformed(format!(
            "latent {}x{} does not match a {height}x{width} image",
            payload.latent_height, payload.latent_width
        ))
        .into());
    }
    model.check_input(&ImageTensor::zeros(height, width, 3))?;
    if payload.side.is_degenerate() {
        if !payload.hyper.is_empty() || !payload.main.is_empty() {
            return Err(DecodeError::Malformed("degenerate residual with latent data".into()).into());
        }
        return Ok(ImageTensor::filled(height, width, 3, T::lit(payload.side.r_min as f64)));
    }
    let tables = model.tables()?;
    let hs = model.cfg.hyper_analysis.iter().map(|l| l.s).product::<usize>();
    let (zh, zw) = (payload.latent_height / hs, payload.latent_width / hs);
    let hc = model.hyper_channels();
    let mut dec = RangeDecoder::new(&payload.hyper);
    let mut z = Vec::with_capacity(hc * zh * zw);
    for i in 0..hc * zh * zw {
        let (t, c, r) = &tables.hyper[i / (zh * zw)];
        z.push(T::lit((decode_escaped(&mut dec, t, *r)? + c) as f64));
    }
    if dec.overran() {
        return Err(DecodeError::Truncated("hyper block").into());
    }
    let z_hat = Tensor::from_vec(&[1, hc, zh, zw], z)?;
    let sigma = model.scales_for(&z_hat)?;
    let mut dec = RangeDecoder::new(&payload.main);
    let mut y = Vec::with_capacity(sigma.numel());
    for sg in sigma.data() {
        let (t, r) = &tables.main[tables.scale_index(sg.as_f64())];
        y.push(T::lit(decode_escaped(&mut dec, t, *r)? as f64));
    }
    if dec.overran() {
        return Err(DecodeError::Truncated("main block").into());
    }
    let y_hat = Tensor::from_vec(sigma.shape(), y)?;
    let x_norm_hat = model.synthesize(&y_hat)?.clamp01();
    Ok(minmax_denormalize(&x_norm_hat, &payload.side))
}

/// `clamp(x_base + residual, 0, 1)`.
pub fn decode_enhancement<T: Scalar>(payload: &EnhancementPayload, x_base: &ImageTensor<T>, model: &EnhancementModel<T>) -> Result<ImageTensor<T>> {
    let res = decode_residual(payload, x_base.height(), x_base.width(), model)?;
    if x_base.channels() != 3 {
        return Err(Error::invalid("x_base must have 3 channels"));
    }
    Ok(x_base.add(&res)?.clamp01())
}

/// `rate_weight * (-sum log2 p) / (H * W) + SATD(x_norm, x_norm_hat)`.
/// Likelihoods below the floor are raised to it.
pub fn rd_loss<T: Scalar>(x_norm: &ImageTensor<T>, x_norm_hat: &ImageTensor<T>, likelihoods: &[T], rate_weight: f64) -> Result<T> {
    let d = satd(x_norm, x_norm_hat)?;
    let pixels = (x_norm.height() * x_norm.width()).max(1) as f64;
    let mut floored = 0usize;
    let bits: f64 = likelihoods
        .iter()
        .map(|p| {
            let p = p.as_f64();
            if !(p >= LIKELIHOOD_FLOOR) {
                floored += 1;
            }
            prob::bits(if p >= LIKELIHOOD_FLOOR { p } else { LIKELIHOOD_FLOOR })
        })
        .sum();
    if floored > 0 {
        log::warn!("{floored} likelihoods raised to the {LIKELIHOOD_FLOOR:e} floor");
    }
    Ok(T::lit(rate_weight * bits / pixels) + d)
}

/// Graph form of [`rd_loss`] summed over the batch. Returns `(total, bits, satd)`.
pub fn rd_loss_graph<T: Scalar>(g: &mut Graph<T>, x: Var, out: &EnhancementOutputs, rate_weight: f64) -> Result<(Var, Var, Var)> {
    let shape = g.shape(x).to_vec();
    let pixels = T::from_usize(shape[2] * shape[3]).unwrap();
    let by = g.neg_log2_sum(out.y_likelihood, T::lit(LIKELIHOOD_FLOOR));
    let bz = g.neg_log2_sum(out.z_likelihood, T::lit(LIKELIHOOD_FLOOR));
    let bits = g.add(by, bz)?;
    let rate = g.scale(bits, T::lit(rate_weight) / pixels);
    let d = g.satd(out.x_hat, x)?;
    let total = g.add(rate, d)?;
    Ok((total, bits, d))
}

/// Ground truth paired with its base-layer reconstruction.
#[derive(Debug, Clone, Default)]
pub struct ResidualSet<T> {
    pub images: Vec<ImageTensor<T>>,
    pub bases: Vec<ImageTensor<T>>,
}

impl<T: Scalar> ResidualSet<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.images.len() != self.bases.len() {
            return Err(Error::invalid("residual set is unpaired"));
        }
        self.images.iter().zip(&self.bases).try_for_each(|(a, b)| a.ensure_same_shape(b))
    }
}

/// Mean rate and quality of an enhancement model on a residual set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhancementStats {
    /// Enhancement payload bits per pixel.
    pub bpp: f64,
    pub psnr: f64,
    pub base_psnr: f64,
}

pub fn evaluate_enhancement<T: Scalar>(model: &EnhancementModel<T>, data: &ResidualSet<T>) -> Result<EnhancementStats> {
    data.check()?;
    if data.is_empty() {
        return Err(Error::invalid("empty residual set"));
    }
    let (mut bpp, mut q, mut qb) = (0.0, 0.0, 0.0);
    for (x, b) in data.images.iter().zip(&data.bases) {
        let p = encode_enhancement(x, b, model)?;
        let bytes = p.to_bytes();
        let rec = decode_enhancement(&EnhancementPayload::from_bytes(&bytes)?, b, model)?;
        bpp += 8.0 * bytes.len() as f64 / (x.height() * x.width()) as f64;
        q += psnr(&rec, x)?;
        qb += psnr(b, x)?;
    }
    let n = data.len() as f64;
    Ok(EnhancementStats {
        bpp: bpp / n,
        psnr: q / n,
        base_psnr: qb / n,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedEnhancement<T> {
    pub model: EnhancementModel<T>,
    pub log: TrainLog,
    pub validation: EnhancementStats,
}

/// Trains one model at `cfg.rate_weight`.
pub fn train_enhancement<T: Scalar>(
    data: &ResidualSet<T>,
    val: &ResidualSet<T>,
    cfg: &EnhancementConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<TrainedEnhancement<T>> {
    train_enhancement_from(data, val, cfg, train, seed, None)
}

/// Like [`train_enhancement`], starting from the weights of `init` when given.
pub fn train_enhancement_from<T: Scalar>(
    data: &ResidualSet<T>,
    val: &ResidualSet<T>,
    cfg: &EnhancementConfig,
    train: &TrainConfig,
    seed: u64,
    init: Option<&EnhancementModel<T>>,
) -> Result<TrainedEnhancement<T>> {
    data.check()?;
    if data.is_empty() {
        return Err(Error::invalid("empty residual set"));
    }
    train.validate("enhancement")?;
    let mut model = EnhancementModel::new(cfg.clone(), seed)?;
    if let Some(init) = init {
        if init.params.entries().len() != model.params.entries().len()
            || init.params.entries().iter().zip(model.params.entries()).any(|(a, b)| a.value.shape() != b.value.shape())
        {
            return Err(Error::invalid("warm start from a model with a different architecture"));
        }
        model.params = init.params.clone();
    }
    let norms: Vec<ImageTensor<T>> = data
        .images
        .iter()
        .zip(&data.bases)
        .map(|(x, b)| {
            model.check_input(x)?;
            Ok(minmax_normalize(&x.sub(b)?)?.0)
        })
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(&model.params, train.adam);
    let mut batcher = Batcher::new(norms.len(), train.batch_size, seed ^ 0xe4c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut log = TrainLog::default();
    let pixels = (norms[0].height() * norms[0].width()) as f64;
    for epoch in 0..train.epochs {
        let lr = train.lr.at(epoch);
        let mut acc = TermAccumulator::default();
        for batch in batcher.epoch() {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let xs: Vec<ImageTensor<T>> = batch.iter().map(|&i| norms[i].clone()).collect();
            let x = g.constant(ImageTensor::batch_to_nchw(&xs));
            let out = model.forward_train(&mut g, &p, x, &mut rng)?;
            let (loss, bits, d) = rd_loss_graph(&mut g, x, &out, cfg.rate_weight)?;
            acc.add("loss", g.value(loss).item().as_f64());
            acc.add("bpp", g.value(bits).item().as_f64() / pixels);
            acc.add("satd", g.value(d).item().as_f64());
            acc.examples(batch.len());
            let grads = g.backward(loss)?;
            opt.step(&mut model.params, &p, &grads, lr);
        }
        if !model.params.is_finite() {
            return Err(Error::Data(format!("enhancement model diverged at epoch {epoch}")));
        }
        let mut terms = acc.means();
        let loss = terms.remove("loss").unwrap_or(0.0);
        log.push(EpochLog { epoch, lr, loss, terms });
    }
    let validation = evaluate_enhancement(&model, if val.is_empty() { data } else { val })?;
    log::info!(
        "enhancement rate_weight {:e}: {:.4} bpp, {:.2} dB (base {:.2} dB)",
        cfg.rate_weight,
        validation.bpp,
        validation.psnr,
        validation.base_psnr
    );
    Ok(TrainedEnhancement { model, log, validation })
}

/// One model per rate weight, in the given order. Warns when validation
/// rate is not monotone in the rate weight.
pub fn train_enhancement_sweep<T: Scalar>(
    data: &ResidualSet<T>,
    val: &ResidualSet<T>,
    cfg: &EnhancementConfig,
    rate_weights: &[f64],
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<TrainedEnhancement<T>>> {
    // from the lowest rate upwards, each member starts from the previous one
    let mut order: Vec<usize> = (0..rate_weights.len()).collect();
    order.sort_by(|&a, &b| rate_weights[b].total_cmp(&rate_weights[a]));
    let mut trained: Vec<Option<TrainedEnhancement<T>>> = (0..rate_weights.len()).map(|_| None).collect();
    let mut prev: Option<usize> = None;
    for &i in &order {
        let c = EnhancementConfig {
            rate_weight: rate_weights[i],
            ..cfg.clone()
        };
        let init = prev.and_then(|p| trained[p].as_ref()).map(|t| &t.model);
        trained[i] = Some(train_enhancement_from(data, val, &c, train, seed, init)?);
        prev = Some(i);
    }
    let family: Vec<TrainedEnhancement<T>> = trained.into_iter().map(|t| t.expect("every member trained")).collect();
    let inversions = order
        .windows(2)
        .filter(|w| family[w[1]].validation.bpp <= family[w[0]].validation.bpp)
        .count();
    if inversions > 0 {
        log::warn!("enhancement sweep has {inversions} rate inversion(s)");
    }
    Ok(family)
}
