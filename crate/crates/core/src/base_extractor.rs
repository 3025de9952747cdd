//! Multi-task face feature extractor: a conv backbone producing the
//! embedding, a softmax identity head, and a transposed-conv head that maps
//! the embedding back to a small image for the structural SATD term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, Bound, Conv, ConvT, LayerSpec, Linear, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, Tensor};
use crate::train::{Batcher, EpochLog, TermAccumulator, TrainConfig, TrainLog};
use crate::transforms::resize_bicubic;

/// Floor on the true-class probability inside the cross-entropy log.
pub const SOFTMAX_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub input_size: usize,
    pub backbone: Vec<LayerSpec>,
    pub embed_dim: usize,
    /// Project embeddings onto the unit sphere.
    #[serde(default)]
    pub normalize_embedding: bool,
    pub head: TransformHeadConfig,
    pub lambda_s: f64,
    /// Weight of the cross-entropy term; 0 leaves pure SATD regression.
    pub ce_weight: f64,
    pub num_classes: usize,
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone.is_empty() || self.embed_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "extractor needs a backbone, embed_dim > 0 and at least 2 classes".into(),
            ));
        }
        self.backbone.iter().try_for_each(LayerSpec::validate)?;
        let stride: usize = self.backbone.iter().map(|l| l.s).product();
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(Error::Config(format!(
                "input size {} is not divisible by the backbone stride {stride}",
                self.input_size
            )));
        }
        if !(self.lambda_s >= 0.0 && self.ce_weight >= 0.0) || self.lambda_s + self.ce_weight == 0.0 {
            return Err(Error::Config("lambda_s and ce_weight must be >= 0 and not both zero".into()));
        }
        self.head.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformHeadConfig {
    /// Side of the square `x_trans` output.
    pub size: usize,
    /// Channels of the seed map produced by the linear layer.
    pub seed_channels: usize,
    /// Transposed-conv stages, each upsampling by its stride.
    pub deconvs: Vec<LayerSpec>,
    /// Initial bias of the final 3-filter projection (mid-grey start).
    pub out_bias: f64,
}

impl TransformHeadConfig {
    pub fn seed_size(&self) -> usize {
        self.size / self.deconvs.iter().map(|l| l.s).product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        self.deconvs.iter().try_for_each(LayerSpec::validate)?;
        let up: usize = self.deconvs.iter().map(|l| l.s).product();
        if self.size == 0 || self.seed_channels == 0 || self.size % up != 0 {
            return Err(Error::Config(format!(
                "transform head size {} is not a multiple of its upsampling factor {up}",
                self.size
            )));
        }
        Ok(())
    }
}

/// Feature-to-image head producing `x_trans`, values hard-clipped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct TransformHead<T> {
    pub cfg: TransformHeadConfig,
    pub params: ParamSet<T>,
    fc: Linear,
    deconvs: Vec<ConvT>,
    proj: Conv,
}

impl<T: Scalar> TransformHead<T> {
    pub fn new(cfg: TransformHeadConfig, feature_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let s0 = cfg.seed_size();
        let fc = Linear::new(&mut ps, "head.fc", feature_dim, cfg.seed_channels * s0 * s0, rng);
        let mut ch = cfg.seed_channels;
        let mut deconvs = Vec::new();
        for (i, spec) in cfg.deconvs.iter().enumerate() {
            deconvs.push(ConvT::new(&mut ps, &format!("head.deconv{i}"), ch, *spec, rng));
            ch = spec.f;
        }
        let proj = Conv::new(&mut ps, "head.proj", ch, LayerSpec::new(3, 3, 1), rng);
        ps.get_mut(proj.b).data_mut().iter_mut().for_each(|b| *b = T::lit(cfg.out_bias));
        Ok(TransformHead {
            cfg,
            params: ps,
            fc,
            deconvs,
            proj,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.fc.inputs
    }

    /// `[N, D] -> [N, 3, size, size]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<Var> {
        let n = g.shape(f)[0];
        let s0 = self.cfg.seed_size();
        let mut x = self.fc.forward(g, p, f)?;
        x = g.reshape(x, &[n, self.cfg.seed_channels, s0, s0])?;
        x = g.relu(x);
        for d in &self.deconvs {
            x = d.forward(g, p, x)?;
            x = g.relu(x);
        }
        x = self.proj.forward(g, p, x)?;
        Ok(g.clamp(x, T::zero(), T::one()))
    }

    pub fn apply(&self, f: &[T]) -> Result<ImageTensor<T>> {
        if f.len() != self.feature_dim() {
            return Err(Error::invalid(format!(
                "feature has {} values, head expects {}",
                f.len(),
                self.feature_dim()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let fv = g.constant(Tensor::from_vec(&[1, f.len()], f.to_vec())?);
        let out = self.forward(&mut g, &p, fv)?;
        Ok(ImageTensor::batch_from_nchw(g.value(out))?.remove(0))
    }
}

/// Identity-labelled images at the extractor input size.
#[derive(Debug, Clone, Default)]
pub struct LabeledFaces<T> {
    pub images: Vec<ImageTensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledFaces<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }
}

#[derive(Debug, Clone)]
pub struct Extractor<T> {
    pub cfg: ExtractorConfig,
    pub params: ParamSet<T>,
    pub head: TransformHead<T>,
    backbone: Vec<Conv>,
    embed: Linear,
    classifier: Linear,
}

/// Graph handles produced by one training forward pass.
pub struct ExtractorOutputs {
    pub features: Var,
    pub logits: Var,
    pub x_trans: Var,
}

impl<T: Scalar> Extractor<T> {
    pub fn new(cfg: ExtractorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut ch = 3;
        let mut backbone = Vec::new();
        for (i, spec) in cfg.backbone.iter().enumerate() {
            backbone.push(Conv::new(&mut ps, &format!("backbone{i}"), ch, *spec, &mut rng));
            ch = spec.f;
        }
        let embed = Linear::new(&mut ps, "embed", ch, cfg.embed_dim, &mut rng);
        let classifier = Linear::new(&mut ps, "classifier", cfg.embed_dim, cfg.num_classes, &mut rng);
        let head = TransformHead::new(cfg.head.clone(), cfg.embed_dim, &mut rng)?;
        Ok(Extractor {
            cfg,
            params: ps,
            head,
            backbone,
            embed,
            classifier,
        })
    }

    fn embed_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.backbone {
            h = c.forward(g, p, h)?;
            h = g.relu(h);
        }
        let pooled = g.global_avg_pool(h)?;
        let f = self.embed.forward(g, p, pooled)?;
        if self.cfg.normalize_embedding {
            g.l2_normalize_rows(f)
        } else {
            Ok(f)
        }
    }

    /// Full multi-task forward on an `[N, 3, S, S]` batch.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, hp: &Bound, x: Var) -> Result<ExtractorOutputs> {
        let features = self.embed_graph(g, p, x)?;
        let logits = self.classifier.forward(g, p, features)?;
        let x_trans = self.head.forward(g, hp, features)?;
        Ok(ExtractorOutputs {
            features,
            logits,
            x_trans,
        })
    }

    fn check_input(&self, img: &ImageTensor<T>) -> Result<()> {
        let s = self.cfg.input_size;
        if img.dims() != (s, s, 3) {
            return Err(Error::invalid(format!(
                "extractor expects {s}x{s}x3 input, got {:?}",
                img.dims()
            )));
        }
        Ok(())
    }

    /// Inference-mode embedding of one image.
    pub fn extract(&self, img: &ImageTensor<T>) -> Result<Vec<T>> {
        Ok(self.extract_batch(std::slice::from_ref(img))?.remove(0))
    }

    /// Embeddings computed one image at a time, so each result is independent
    /// of batch composition.
    pub fn extract_batch(&self, imgs: &[ImageTensor<T>]) -> Result<Vec<Vec<T>>> {
        imgs.iter()
            .map(|img| {
                self.check_input(img)?;
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, false);
                let x = g.constant(img.to_nchw());
                let f = self.embed_graph(&mut g, &p, x)?;
                Ok(g.value(f).data().to_vec())
            })
            .collect()
    }

    /// Pre-softmax identity scores for one feature.
    pub fn verification_logits(&self, f: &[T]) -> Result<Vec<T>> {
        if f.len() != self.cfg.embed_dim {
            return Err(Error::invalid(format!(
                "feature has {} values, expected {}",
                f.len(),
                self.cfg.embed_dim
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let fv = g.constant(Tensor::from_vec(&[1, f.len()], f.to_vec())?);
        let l = self.classifier.forward(&mut g, &p, fv)?;
        Ok(g.value(l).data().to_vec())
    }

    /// `x_trans` for one feature.
    pub fn feature_structure_transform(&self, f: &[T]) -> Result<ImageTensor<T>> {
        self.head.apply(f)
    }

    /// Structural target `x_s`: the image bicubic-resized to the head size.
    pub fn structure_target(&self, img: &ImageTensor<T>) -> ImageTensor<T> {
        structure_target(img, self.cfg.head.size)
    }
}

pub fn structure_target<T: Scalar>(img: &ImageTensor<T>, size: usize) -> ImageTensor<T> {
    if img.height() == size && img.width() == size {
        img.clone()
    } else {
        resize_bicubic(img, size, size)
    }
}

/// Builds the multitask objective on the graph; returns `(total, ce, satd)`.
pub fn multitask_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    x_trans: Var,
    x_s: Var,
    lambda_s: T,
    ce_weight: T,
) -> Result<(Var, Var, Var)> {
    let ce = g.softmax_xent(logits, labels, T::lit(SOFTMAX_EPS))?;
    let satd = g.satd(x_s, x_trans)?;
    let a = g.scale(ce, ce_weight);
    let b = g.scale(satd, lambda_s);
    Ok((g.add(a, b)?, ce, satd))
}

/// Value and gradients of the multitask loss.
#[derive(Debug, Clone)]
pub struct LossWithGrad<T> {
    pub value: T,
    pub d_logits: Tensor<T>,
    pub d_x_trans: Vec<ImageTensor<T>>,
}

fn images_to_var<T: Scalar>(g: &mut Graph<T>, imgs: &[ImageTensor<T>], trainable: bool) -> Result<Var> {
    if imgs.is_empty() {
        return Err(Error::invalid("empty image batch"));
    }
    if imgs.iter().any(|i| !i.same_shape(&imgs[0])) {
        return Err(Error::invalid("images in a batch must share one shape"));
    }
    let t = ImageTensor::batch_to_nchw(imgs);
    Ok(if trainable { g.param(t) } else { g.constant(t) })
}

/// Cross-entropy summed over the batch plus `lambda_s` times the summed
/// per-image SATD between `x_s` and `x_trans`. `logits` is `[N, classes]`.
pub fn multitask_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    x_trans: &[ImageTensor<T>],
    x_s: &[ImageTensor<T>],
    lambda_s: T,
) -> Result<T> {
    Ok(multitask_loss_with_grad(logits, labels, x_trans, x_s, lambda_s)?.value)
}

pub fn multitask_loss_with_grad<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    x_trans: &[ImageTensor<T>],
    x_s: &[ImageTensor<T>],
    lambda_s: T,
) -> Result<LossWithGrad<T>> {
    if x_trans.len() != labels.len() || x_s.len() != labels.len() {
        return Err(Error::invalid("logits, labels and images must have the same batch size"));
    }
    if !(lambda_s >= T::zero()) {
        return Err(Error::invalid("lambda_s must be nonnegative"));
    }
    let mut g = Graph::new();
    let l = g.param(logits.clone());
    let xt = images_to_var(&mut g, x_trans, true)?;
    let xs = images_to_var(&mut g, x_s, false)?;
    let (total, _, _) = multitask_loss_graph(&mut g, l, labels, xt, xs, lambda_s, T::one())?;
    let grads = g.backward(total)?;
    Ok(LossWithGrad {
        value: g.value(total).item(),
        d_logits: grads.get(l).cloned().unwrap_or_else(|| Tensor::zeros(logits.shape())),
        d_x_trans: ImageTensor::batch_from_nchw(grads.get(xt).expect("trainable input"))?,
    })
}

/// Trains backbone, classifier and head jointly with Adam.
pub fn train_extractor<T: Scalar>(
    data: &LabeledFaces<T>,
    cfg: &ExtractorConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(Extractor<T>, TrainLog)> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.num_identities() < 2 {
        return Err(Error::invalid("training set needs at least two identities"));
    }
    if data.labels.iter().any(|&l| l >= cfg.num_classes) {
        return Err(Error::invalid("label outside num_classes"));
    }
    train.validate("extractor")?;
    let mut model = Extractor::new(cfg.clone(), seed)?;
    for img in &data.images {
        model.check_input(img)?;
    }
    let targets: Vec<ImageTensor<T>> = data.images.iter().map(|i| model.structure_target(i)).collect();
    let mut opt = Adam::new(&model.params, train.adam);
    let mut head_opt = Adam::new(&model.head.params, train.adam);
    let mut batcher = Batcher::new(data.len(), train.batch_size, seed ^ 0x5eed);
    let mut log = TrainLog::default();
    let (lambda_s, ce_w) = (T::lit(cfg.lambda_s), T::lit(cfg.ce_weight));
    for epoch in 0..train.epochs {
        let lr = train.lr.at(epoch);
        let mut acc = TermAccumulator::default();
        let mut correct = 0usize;
        for batch in batcher.epoch() {
            let imgs: Vec<_> = batch.iter().map(|&i| data.images[i].clone()).collect();
            let tgts: Vec<_> = batch.iter().map(|&i| targets[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let hp = model.head.params.bind(&mut g, true);
            let x = images_to_var(&mut g, &imgs, false)?;
            let xs = images_to_var(&mut g, &tgts, false)?;
            let out = model.forward(&mut g, &p, &hp, x)?;
            let (total, ce, satd) = multitask_loss_graph(&mut g, out.logits, &labels, out.x_trans, xs, lambda_s, ce_w)?;
            acc.add("loss", g.value(total).item().as_f64());
            acc.add("ce", g.value(ce).item().as_f64());
            acc.add("satd", g.value(satd).item().as_f64());
            acc.examples(batch.len());
            let k = cfg.num_classes;
            for (row, &y) in g.value(out.logits).data().chunks(k).zip(&labels) {
                let arg = row
                    .iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0;
                correct += usize::from(arg == y);
            }
            let grads = g.backward(total)?;
            opt.step(&mut model.params, &p, &grads, lr);
            head_opt.step(&mut model.head.params, &hp, &grads, lr);
        }
        if !model.params.is_finite() || !model.head.params.is_finite() {
            return Err(Error::Data(format!("extractor diverged at epoch {epoch}")));
        }
        let mut terms = acc.means();
        let loss = terms.remove("loss").unwrap_or(0.0);
        terms.insert("train_acc".into(), correct as f64 / data.len() as f64);
        log.push(EpochLog { epoch, lr, loss, terms });
    }
    Ok((model, log))
}
