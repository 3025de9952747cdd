//! Learned compressor for the base-layer feature vector.
//!
//! Fully connected analysis/synthesis stacks with GDN/IGDN activations, a
//! clipped latent that is noised while training and rounded at inference,
//! and an adaptive-free range coder driven by a fitted [`SymbolModel`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::base_extractor::TransformHead;
use crate::coding::{read_varint, seal, unseal, write_varint, FreqTable, RangeDecoder, RangeEncoder};
use crate::error::{DecodeError, Error, Result};
use crate::nn::{Adam, Bound, GdnLayer, Linear, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, Tensor};
use crate::train::{Batcher, EpochLog, TermAccumulator, TrainConfig, TrainLog};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureCodecConfig {
    pub feature_dim: usize,
    /// Output widths of the encoder layers; the last one is the latent
    /// width `M`. The decoder mirrors them back to `feature_dim`.
    pub layer_widths: Vec<usize>,
    /// GDN after every hidden encoder layer, IGDN in the decoder.
    #[serde(default = "default_true")]
    pub gdn: bool,
    pub r_clip: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub noise_half_width: f64,
    /// Apply the l1 rate term to the noisy latent (otherwise the clean one).
    #[serde(default = "default_true")]
    pub l1_on_noisy: bool,
    /// One table for every latent dimension instead of one each.
    #[serde(default)]
    pub shared_symbol_model: bool,
    /// Initial gain on the last encoder layer, undone by the first decoder
    /// layer, so training starts with latents spread over the clip range.
    #[serde(default = "one")]
    pub init_latent_gain: f64,
}

fn one() -> f64 {
    1.0
}

impl FeatureCodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.layer_widths.is_empty() || self.layer_widths.contains(&0) {
            return Err(Error::Config("feature codec needs positive feature_dim and layer widths".into()));
        }
        if !(self.r_clip >= 1.0 && self.r_clip.is_finite()) {
            return Err(Error::Config(format!("r_clip must be >= 1, got {}", self.r_clip)));
        }
        if !(self.lambda_1 >= 0.0 && self.lambda_2 >= 0.0) {
            return Err(Error::Config("lambda_1 and lambda_2 must be nonnegative".into()));
        }
        if !(self.init_latent_gain > 0.0 && self.init_latent_gain.is_finite()) {
            return Err(Error::Config("init_latent_gain must be positive".into()));
        }
        if !(self.noise_half_width >= 0.0 && self.noise_half_width <= 0.5) {
            return Err(Error::Config("noise_half_width must lie in [0, 0.5]".into()));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    /// Largest representable symbol magnitude.
    pub fn radius(&self) -> i32 {
        self.r_clip.floor() as i32
    }
}

/// Integer latent symbols, each within `[-radius, radius]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LatentCode {
    pub symbols: Vec<i32>,
}

impl LatentCode {
    pub fn new(symbols: Vec<i32>) -> Self {
        LatentCode { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn to_real<T: Scalar>(&self) -> Vec<T> {
        self.symbols.iter().map(|&s| T::lit(s as f64)).collect()
    }
}

/// Training-time quantization proxy: clip, then add uniform noise in
/// `[-half_width, half_width]`.
pub fn quantize_train<T: Scalar, R: Rng>(latent: &[T], r_clip: f64, half_width: f64, rng: &mut R) -> Vec<T> {
    let r = T::lit(r_clip);
    latent
        .iter()
        .map(|&v| v.max(-r).min(r) + T::lit(uniform(rng, half_width)))
        .collect()
}

/// Inference quantization: clip, then round half away from zero.
pub fn quantize_infer<T: Scalar>(latent: &[T], r_clip: f64) -> LatentCode {
    let r = r_clip.floor();
    LatentCode::new(
        latent
            .iter()
            .map(|v| {
                let x = v.as_f64();
                let x = if x.is_nan() { 0.0 } else { x };
                x.clamp(-r_clip, r_clip).round().clamp(-r, r) as i32
            })
            .collect(),
    )
}

fn uniform<R: Rng>(rng: &mut R, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..=half_width)
    }
}

#[derive(Debug, Clone, Copy)]
struct FcLayer {
    lin: Linear,
    act: Option<GdnLayer>,
}

impl FcLayer {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.lin.forward(g, p, x)?;
        match &self.act {
            Some(a) => a.forward(g, p, y),
            None => Ok(y),
        }
    }
}

/// Encoder, decoder and the fine-tuned feature-structure head.
#[derive(Debug, Clone)]
pub struct FeatureCodec<T> {
    pub cfg: FeatureCodecConfig,
    pub params: ParamSet<T>,
    pub head: TransformHead<T>,
    enc: Vec<FcLayer>,
    dec: Vec<FcLayer>,
}

/// Training-graph handles of one forward pass.
pub struct CodecOutputs {
    pub latent: Var,
    pub noisy: Var,
    pub f_rec: Var,
    pub x_trans: Var,
}

impl<T: Scalar> FeatureCodec<T> {
    /// Random init; `head` is the starting point of the fine-tuned copy.
    pub fn new(cfg: FeatureCodecConfig, head: TransformHead<T>, seed: u64) -> Result<Self> {
        Self::build(cfg, head, Some(seed))
    }

    /// Every layer an identity map; needs all widths equal to `feature_dim`.
    pub fn identity(cfg: FeatureCodecConfig, head: TransformHead<T>) -> Result<Self> {
        if cfg.layer_widths.iter().any(|&w| w != cfg.feature_dim) {
            return Err(Error::invalid("identity init needs every layer width equal to feature_dim"));
        }
        Self::build(cfg, head, None)
    }

    fn build(cfg: FeatureCodecConfig, head: TransformHead<T>, seed: Option<u64>) -> Result<Self> {
        cfg.validate()?;
        if head.feature_dim() != cfg.feature_dim {
            return Err(Error::invalid(format!(
                "head takes {} inputs but feature_dim is {}",
                head.feature_dim(),
                cfg.feature_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
        let mut ps = ParamSet::new();
        let n = cfg.layer_widths.len();
        let mut stack = |prefix: &str, dims: &[usize], inverse: bool, ps: &mut ParamSet<T>| {
            (0..n)
                .map(|i| {
                    let name = format!("{prefix}{i}");
                    let lin = match seed {
                        Some(_) => Linear::new(ps, &name, dims[i], dims[i + 1], &mut rng),
                        None => Linear::identity(ps, &name, dims[i]),
                    };
                    let act = (cfg.gdn && i + 1 < n).then(|| GdnLayer::new(ps, &format!("{name}.gdn"), dims[i + 1], inverse));
                    FcLayer { lin, act }
                })
                .collect::<Vec<_>>()
        };
        let mut enc_dims = vec![cfg.feature_dim];
        enc_dims.extend(&cfg.layer_widths);
        let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
        let enc = stack("enc", &enc_dims, false, &mut ps);
        let dec = stack("dec", &dec_dims, true, &mut ps);
        if seed.is_some() {
            let k = T::lit(cfg.init_latent_gain);
            ps.get_mut(enc[n - 1].lin.w).data_mut().iter_mut().for_each(|w| *w *= k);
            ps.get_mut(dec[0].lin.w).data_mut().iter_mut().for_each(|w| *w /= k);
        }
        Ok(FeatureCodec {
            cfg,
            params: ps,
            head,
            enc,
            dec,
        })
    }

    pub fn enc_graph(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<Var> {
        self.enc.iter().try_fold(f, |x, l| l.forward(g, p, x))
    }

    pub fn dec_graph(&self, g: &mut Graph<T>, p: &Bound, c: Var) -> Result<Var> {
        self.dec.iter().try_fold(c, |x, l| l.forward(g, p, x))
    }

    /// Training forward on an `[N, D]` batch with the given noise `[N, M]`.
    pub fn forward_train(&self, g: &mut Graph<T>, p: &Bound, hp: &Bound, f: Var, noise: &Tensor<T>) -> Result<CodecOutputs> {
        let latent = self.enc_graph(g, p, f)?;
        let r = T::lit(self.cfg.r_clip);
        let clipped = g.clamp(latent, -r, r);
        let noisy = g.shift(clipped, noise)?;
        let f_rec = self.dec_graph(g, p, noisy)?;
        let x_trans = self.head.forward(g, hp, f_rec)?;
        Ok(CodecOutputs {
            latent,
            noisy,
            f_rec,
            x_trans,
        })
    }

    fn run(&self, x: &[T], width: usize, decode: bool) -> Result<Vec<T>> {
        if x.len() != width {
            return Err(Error::invalid(format!("expected {width} values, got {}", x.len())));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let v = g.constant(Tensor::from_vec(&[1, width], x.to_vec())?);
        let out = if decode { self.dec_graph(&mut g, &p, v)? } else { self.enc_graph(&mut g, &p, v)? };
        Ok(g.value(out).data().to_vec())
    }

    /// Pre-quantization latent of one feature.
    pub fn enc_base(&self, f_raw: &[T]) -> Result<Vec<T>> {
        self.run(f_raw, self.cfg.feature_dim, false)
    }

    /// Feature reconstructed from a (possibly noisy) latent.
    pub fn dec_base(&self, c: &[T]) -> Result<Vec<T>> {
        self.run(c, self.cfg.latent_dim(), true)
    }

    pub fn encode(&self, f_raw: &[T]) -> Result<LatentCode> {
        Ok(quantize_infer(&self.enc_base(f_raw)?, self.cfg.r_clip))
    }

    pub fn decode(&self, code: &LatentCode) -> Result<Vec<T>> {
        self.dec_base(&code.to_real())
    }

    /// Fine-tuned `x_trans` for a reconstructed feature.
    pub fn structure_transform(&self, f_rec: &[T]) -> Result<ImageTensor<T>> {
        self.head.apply(f_rec)
    }
}

/// Static per-dimension (or shared) distribution over `[-radius, radius]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SymbolModelRepr", into = "SymbolModelRepr")]
pub struct SymbolModel {
    radius: i32,
    freqs: Vec<Vec<u32>>,
    tables: Vec<FreqTable>,
    id: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SymbolModelRepr {
    radius: i32,
    freqs: Vec<Vec<u32>>,
}

impl TryFrom<SymbolModelRepr> for SymbolModel {
    type Error = Error;

    fn try_from(r: SymbolModelRepr) -> Result<Self> {
        SymbolModel::from_freqs(r.radius, r.freqs)
    }
}

impl From<SymbolModel> for SymbolModelRepr {
    fn from(m: SymbolModel) -> Self {
        SymbolModelRepr {
            radius: m.radius,
            freqs: m.freqs,
        }
    }
}

impl SymbolModel {
    /// One quantized frequency list per table; a single list is shared by
    /// every dimension.
    pub fn from_freqs(radius: i32, freqs: Vec<Vec<u32>>) -> Result<Self> {
        if radius < 0 || freqs.is_empty() {
            return Err(Error::invalid("symbol model needs a nonnegative radius and at least one table"));
        }
        let a = (2 * radius + 1) as usize;
        if freqs.iter().any(|f| f.len() != a) {
            return Err(Error::invalid(format!("every table needs {a} entries")));
        }
        let tables = freqs.iter().map(|f| FreqTable::from_freqs(f)).collect::<Result<Vec<_>>>()?;
        let mut h = Sha256::new();
        h.update(radius.to_le_bytes());
        for f in &freqs {
            h.update((f.len() as u32).to_le_bytes());
            f.iter().for_each(|v| h.update(v.to_le_bytes()));
        }
        let id = h.finalize()[0];
        Ok(SymbolModel {
            radius,
            freqs,
            tables,
            id,
        })
    }

    /// Tables from unnormalized weights over the alphabet.
    pub fn from_weights(radius: i32, weights: &[Vec<f64>]) -> Result<Self> {
        let freqs = weights
            .iter()
            .map(|w| {
                let t = FreqTable::from_weights(w)?;
                Ok((0..t.len()).map(|s| t.freq(s)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_freqs(radius, freqs)
    }

    pub fn radius(&self) -> i32 {
        self.radius
    }

    pub fn alphabet_size(&self) -> usize {
        (2 * self.radius + 1) as usize
    }

    pub fn is_shared(&self) -> bool {
        self.tables.len() == 1
    }

    pub fn num_tables(&self) -> usize {
        self.tables.len()
    }

    /// Content-derived identifier written into every payload.
    pub fn id(&self) -> u8 {
        self.id
    }

    fn table(&self, dim: usize) -> &FreqTable {
        &self.tables[if self.is_shared() { 0 } else { dim }]
    }

    pub fn prob(&self, dim: usize, symbol: i32) -> f64 {
        self.table(dim).prob((symbol + self.radius) as usize)
    }

    fn check(&self, code: &LatentCode) -> Result<()> {
        if !self.is_shared() && code.len() > self.tables.len() {
            return Err(Error::invalid(format!(
                "code has {} symbols but the model covers {} dimensions",
                code.len(),
                self.tables.len()
            )));
        }
        if let Some(s) = code.symbols.iter().find(|s| s.abs() > self.radius) {
            return Err(Error::invalid(format!("symbol {s} outside [-{0}, {0}]", self.radius)));
        }
        Ok(())
    }

    /// Ideal code length of `code` in bits under this model.
    pub fn shannon_bits(&self, code: &LatentCode) -> Result<f64> {
        self.check(code)?;
        Ok(code.symbols.iter().enumerate().map(|(i, &s)| -self.prob(i, s).log2()).sum())
    }
}

/// Add-one smoothed counts of `codes`; one table per dimension unless `shared`.
pub fn fit_symbol_model(codes: &[LatentCode], radius: i32, shared: bool) -> Result<SymbolModel> {
    if codes.is_empty() {
        return Err(Error::invalid("cannot fit a symbol model to no codes"));
    }
    if radius < 0 {
        return Err(Error::invalid("radius must be nonnegative"));
    }
    let a = (2 * radius + 1) as usize;
    let dims = if shared { 1 } else { codes.iter().map(LatentCode::len).max().unwrap_or(0).max(1) };
    let mut counts = vec![vec![1.0f64; a]; dims];
    for code in codes {
        for (i, &s) in code.symbols.iter().enumerate() {
            if s.abs() > radius {
                return Err(Error::invalid(format!("symbol {s} outside [-{radius}, {radius}]")));
            }
            counts[if shared { 0 } else { i }][(s + radius) as usize] += 1.0;
        }
    }
    SymbolModel::from_weights(radius, &counts)
}

/// `model id (1) | varint length | range-coded symbols | crc32c (4)`.
pub fn entropy_encode(code: &LatentCode, model: &SymbolModel) -> Result<Vec<u8>> {
    model.check(code)?;
    let mut out = vec![model.id()];
    write_varint(&mut out, code.len() as u64);
    let mut enc = RangeEncoder::new();
    for (i, &s) in code.symbols.iter().enumerate() {
        enc.encode(model.table(i), (s + model.radius) as usize);
    }
    out.extend(enc.finish());
    seal(&mut out);
    Ok(out)
}

/// Inverse of [`entropy_encode`]; `length` is the expected symbol count.
pub fn entropy_decode(bytes: &[u8], model: &SymbolModel, length: usize) -> Result<LatentCode, DecodeError> {
    let body = unseal(bytes, "feature payload")?;
    let (&id, rest) = body.split_first().ok_or(DecodeError::Truncated("feature payload"))?;
    if id != model.id() {
        return Err(DecodeError::ModelMismatch {
            expected: model.id() as u16,
            found: id as u16,
        });
    }
    let mut pos = 0;
    let n = read_varint(rest, &mut pos, "feature code length")?;
    if n != length as u64 {
        return Err(DecodeError::Malformed(format!("feature code has {n} symbols, expected {length}")));
    }
    if !model.is_shared() && length > model.num_tables() {
        return Err(DecodeError::Malformed("feature code longer than the symbol model".into()));
    }
    let payload = &rest[pos..];
    if length == 0 && !payload.is_empty() {
        return Err(DecodeError::Malformed("trailing bytes after empty feature code".into()));
    }
    let mut dec = RangeDecoder::new(payload);
    let mut symbols = Vec::with_capacity(length);
    for i in 0..length {
        let s = dec.decode(model.table(i))?;
        symbols.push(s as i32 - model.radius);
    }
    if dec.overran() {
        return Err(DecodeError::Truncated("feature payload"));
    }
    Ok(LatentCode::new(symbols))
}

/// The three logged terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureLoss<T> {
    pub total: T,
    pub distortion: T,
    pub rate: T,
    pub structure: T,
}

/// Graph form; returns `(total, distortion, l1 rate, satd)`, each summed
/// over the batch.
#[allow(clippy::too_many_arguments)]
pub fn feature_codec_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    f_raw: Var,
    f_rec: Var,
    c_fea: Var,
    x_s: Var,
    x_trans: Var,
    lambda_1: T,
    lambda_2: T,
) -> Result<(Var, Var, Var, Var)> {
    let diff = g.sub(f_raw, f_rec)?;
    let dist = g.sum_sq(diff);
    let rate = g.sum_abs(c_fea);
    let satd = g.satd(x_s, x_trans)?;
    let a = g.scale(rate, lambda_1);
    let b = g.scale(satd, lambda_2);
    let t = g.add(dist, a)?;
    Ok((g.add(t, b)?, dist, rate, satd))
}

fn rows<T: Scalar>(v: &[Vec<T>]) -> Result<Tensor<T>> {
    let d = v.first().map_or(0, Vec::len);
    if v.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("ragged feature batch"));
    }
    Tensor::from_vec(&[v.len(), d], v.concat())
}

/// `sum_i ||f_raw - f_rec||^2 + lambda_1 ||c||_1 + lambda_2 SATD(x_s, x_trans)`.
#[allow(clippy::too_many_arguments)]
pub fn feature_codec_loss<T: Scalar>(
    f_raw: &[Vec<T>],
    f_rec: &[Vec<T>],
    c_fea: &[Vec<T>],
    x_s: &[ImageTensor<T>],
    x_trans: &[ImageTensor<T>],
    lambda_1: T,
    lambda_2: T,
) -> Result<FeatureLoss<T>> {
    let n = f_raw.len();
    if n == 0 || [f_rec.len(), c_fea.len(), x_s.len(), x_trans.len()].iter().any(|&m| m != n) {
        return Err(Error::invalid("feature loss inputs must share a nonempty batch size"));
    }
    if x_s.iter().chain(x_trans).any(|i| !i.same_shape(&x_s[0])) {
        return Err(Error::invalid("x_s and x_trans images must share one shape"));
    }
    let mut g = Graph::new();
    let a = g.constant(rows(f_raw)?);
    let b = g.constant(rows(f_rec)?);
    if g.shape(a) != g.shape(b) {
        return Err(Error::invalid("f_raw and f_rec differ in shape"));
    }
    let c = g.constant(rows(c_fea)?);
    let xs = g.constant(ImageTensor::batch_to_nchw(x_s));
    let xt = g.constant(ImageTensor::batch_to_nchw(x_trans));
    let (t, d, r, s) = feature_codec_loss_graph(&mut g, a, b, c, xs, xt, lambda_1, lambda_2)?;
    Ok(FeatureLoss {
        total: g.value(t).item(),
        distortion: g.value(d).item(),
        rate: g.value(r).item(),
        structure: g.value(s).item(),
    })
}

/// Features paired with their structural targets `x_s`.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet<T> {
    pub features: Vec<Vec<T>>,
    pub targets: Vec<ImageTensor<T>>,
}

impl<T: Scalar> FeatureSet<T> {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// A trained codec with the symbol model fitted on its training codes.
#[derive(Debug, Clone)]
pub struct TrainedFeatureCodec<T> {
    pub codec: FeatureCodec<T>,
    pub model: SymbolModel,
    pub log: TrainLog,
}

/// Jointly trains encoder, decoder and the head copy, then fits the
/// symbol model to the inference codes of the training set.
pub fn train_feature_codec<T: Scalar>(
    data: &FeatureSet<T>,
    head: &TransformHead<T>,
    cfg: &FeatureCodecConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<TrainedFeatureCodec<T>> {
    if data.is_empty() || data.targets.len() != data.len() {
        return Err(Error::invalid("feature set is empty or has mismatched targets"));
    }
    if data.features.iter().any(|f| f.len() != cfg.feature_dim) {
        return Err(Error::invalid(format!("features must have {} values", cfg.feature_dim)));
    }
    if data.targets.iter().any(|t| t.dims() != (head.cfg.size, head.cfg.size, 3)) {
        return Err(Error::invalid("structural targets must match the head size"));
    }
    train.validate("feature_codec")?;
    let mut codec = FeatureCodec::new(cfg.clone(), head.clone(), seed)?;
    let mut opt = Adam::new(&codec.params, train.adam);
    let mut head_opt = Adam::new(&codec.head.params, train.adam);
    let mut batcher = Batcher::new(data.len(), train.batch_size, seed ^ 0xfea7);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0153);
    let (l1, l2) = (T::lit(cfg.lambda_1), T::lit(cfg.lambda_2));
    let m = cfg.latent_dim();
    let mut log = TrainLog::default();
    for epoch in 0..train.epochs {
        let lr = train.lr.at(epoch);
        let mut acc = TermAccumulator::default();
        for batch in batcher.epoch() {
            let feats: Vec<Vec<T>> = batch.iter().map(|&i| data.features[i].clone()).collect();
            let tgts: Vec<ImageTensor<T>> = batch.iter().map(|&i| data.targets[i].clone()).collect();
            let noise = Tensor::from_vec(
                &[batch.len(), m],
                (0..batch.len() * m).map(|_| T::lit(uniform(&mut rng, cfg.noise_half_width))).collect(),
            )?;
            let mut g = Graph::new();
            let p = codec.params.bind(&mut g, true);
            let hp = codec.head.params.bind(&mut g, true);
            let f = g.constant(rows(&feats)?);
            let xs = g.constant(ImageTensor::batch_to_nchw(&tgts));
            let out = codec.forward_train(&mut g, &p, &hp, f, &noise)?;
            let c = if cfg.l1_on_noisy { out.noisy } else { out.latent };
            let (total, d, r, s) = feature_codec_loss_graph(&mut g, f, out.f_rec, c, xs, out.x_trans, l1, l2)?;
            acc.add("loss", g.value(total).item().as_f64());
            acc.add("distortion", g.value(d).item().as_f64());
            acc.add("rate_l1", g.value(r).item().as_f64());
            acc.add("satd", g.value(s).item().as_f64());
            acc.examples(batch.len());
            let grads = g.backward(total)?;
            opt.step(&mut codec.params, &p, &grads, lr);
            head_opt.step(&mut codec.head.params, &hp, &grads, lr);
        }
        if !codec.params.is_finite() || !codec.head.params.is_finite() {
            return Err(Error::Data(format!("feature codec diverged at epoch {epoch}")));
        }
        let mut terms = acc.means();
        let loss = terms.remove("loss").unwrap_or(0.0);
        log.push(EpochLog { epoch, lr, loss, terms });
    }
    let codes = data.features.iter().map(|f| codec.encode(f)).collect::<Result<Vec<_>>>()?;
    let model = fit_symbol_model(&codes, cfg.radius(), cfg.shared_symbol_model)?;
    Ok(TrainedFeatureCodec { codec, model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_extractor::TransformHeadConfig;
    use crate::nn::{LayerSpec, LrSchedule};

    pub(crate) fn head(dim: usize) -> TransformHead<f64> {
        let cfg = TransformHeadConfig {
            size: 8,
            seed_channels: 4,
            deconvs: vec![LayerSpec::new(3, 4, 2)],
            out_bias: 0.5,
        };
        TransformHead::new(cfg, dim, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn cfg(widths: Vec<usize>, gdn: bool) -> FeatureCodecConfig {
        FeatureCodecConfig {
            feature_dim: 4,
            layer_widths: widths,
            gdn,
            r_clip: 20.0,
            lambda_1: 1e-4,
            lambda_2: 1e-2,
            noise_half_width: 0.5,
            l1_on_noisy: true,
            shared_symbol_model: false,
            init_latent_gain: 1.0,
        }
    }

    #[test]
    fn identity_codec_passes_through() {
        let c = FeatureCodec::identity(cfg(vec![4], false), head(4)).unwrap();
        let f = [0.3, -1.2, 5.0, 0.0];
        assert_eq!(c.enc_base(&f).unwrap(), f.to_vec());
        assert_eq!(c.dec_base(&f).unwrap(), f.to_vec());
    }

    #[test]
    fn shapes_and_errors() {
        let c = FeatureCodec::new(cfg(vec![8, 8, 3], true), head(4), 2).unwrap();
        let f = [0.1, 0.2, -0.3, 0.4];
        let y = c.enc_base(&f).unwrap();
        assert_eq!(y.len(), 3);
        assert_eq!(y, c.enc_base(&f).unwrap());
        assert_eq!(c.dec_base(&y).unwrap().len(), 4);
        assert!(c.enc_base(&[0.0; 3]).is_err());
        assert!(c.dec_base(&[0.0; 4]).is_err());
        assert!(FeatureCodec::new(cfg(vec![8], true), head(5), 0).is_err());
        let mut bad = cfg(vec![4], true);
        bad.r_clip = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_infer(&[20.7, -25.0, 0.4], 20.0).symbols, vec![20, -20, 0]);
        assert_eq!(quantize_infer(&[0.5, -0.5, 1.5, -2.5f64], 20.0).symbols, vec![1, -1, 2, -3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = [30.0, -0.2, 19.9];
        for _ in 0..100 {
            let q = quantize_train(&x, 20.0, 0.5, &mut rng);
            assert!((q[0] - 20.0f64).abs() <= 0.5 && (q[1] + 0.2).abs() <= 0.5 && (q[2] - 19.9).abs() <= 0.5);
        }
    }

    #[test]
    fn training_noise_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = quantize_train(&vec![0.0f64; 100_000], 20.0, 0.5, &mut rng);
        let mean = q.iter().sum::<f64>() / q.len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
    }

    #[test]
    fn add_one_counts() {
        let m = fit_symbol_model(&[LatentCode::new(vec![0, 0, 1])], 20, true).unwrap();
        let a = 41.0;
        assert!((m.prob(0, 0) - 3.0 / (3.0 + a)).abs() < 1e-4);
        assert!((m.prob(0, 1) - 2.0 / (3.0 + a)).abs() < 1e-4);
        assert!((m.prob(0, -7) - 1.0 / (3.0 + a)).abs() < 1e-4);
        assert!(fit_symbol_model(&[], 20, true).is_err());
    }

    #[test]
    fn payload_framing_and_errors() {
        let m = fit_symbol_model(&[LatentCode::new(vec![1, -2, 3])], 4, false).unwrap();
        let code = LatentCode::new(vec![1, -2, 3]);
        let bytes = entropy_encode(&code, &m).unwrap();
        assert_eq!(bytes[0], m.id());
        assert_eq!(entropy_decode(&bytes, &m, 3).unwrap(), code);
        assert!(matches!(entropy_decode(&bytes, &m, 2), Err(DecodeError::Malformed(_))));
        assert!(entropy_encode(&LatentCode::new(vec![5]), &m).is_err());
        assert!(entropy_encode(&LatentCode::new(vec![0; 4]), &m).is_err());
        let other = fit_symbol_model(&[LatentCode::new(vec![0, 0, 0])], 4, false).unwrap();
        assert_ne!(other.id(), m.id());
        assert!(matches!(entropy_decode(&bytes, &other, 3), Err(DecodeError::ModelMismatch { .. })));
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<SymbolModel>(&json).unwrap(), m);
    }

    #[test]
    fn loss_gradients_reach_every_parameter() {
        let c = FeatureCodec::new(cfg(vec![6, 4], true), head(4), 3).unwrap();
        let mut g = Graph::new();
        let p = c.params.bind(&mut g, true);
        let hp = c.head.params.bind(&mut g, true);
        let f = g.constant(Tensor::from_vec(&[2, 4], vec![0.1, -0.4, 0.3, 0.2, 0.5, 0.0, -0.2, 0.7]).unwrap());
        let xs = g.constant(Tensor::full(&[2, 3, 8, 8], 0.3));
        let noise = Tensor::full(&[2, 4], 0.1);
        let out = c.forward_train(&mut g, &p, &hp, f, &noise).unwrap();
        let (t, ..) = feature_codec_loss_graph(&mut g, f, out.f_rec, out.noisy, xs, out.x_trans, 1e-2, 1e-1).unwrap();
        let grads = g.backward(t).unwrap();
        for (e, v) in c.params.entries().iter().zip(p.vars()).chain(c.head.params.entries().iter().zip(hp.vars())) {
            assert!(grads.get(*v).is_some_and(|t| t.data().iter().any(|x| *x != 0.0)), "{}", e.name);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = FeatureSet {
            features: (0..24).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            targets: (0..24).map(|i| ImageTensor::filled(8, 8, 3, 0.3 + 0.01 * i as f64)).collect(),
        };
        let t = TrainConfig {
            epochs: 40,
            batch_size: 8,
            lr: LrSchedule::constant(1e-2),
            adam: Default::default(),
        };
        let out = train_feature_codec(&data, &head(4), &cfg(vec![16, 16, 4], true), &t, 4).unwrap();
        assert!(out.log.last_loss().unwrap() < 0.5 * out.log.first_loss().unwrap());
        assert_eq!(out.model.num_tables(), 4);
    }
}
