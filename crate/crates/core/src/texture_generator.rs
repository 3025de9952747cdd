//! Base-layer texture synthesis: the fine-tuned feature-structure head
//! followed by a Laplacian-pyramid refinement, each level a bilinear 2x
//! upsampling of the previous one plus a learned detail branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::base_extractor::TransformHead;
use crate::error::{Error, Result};
use crate::nn::{Adam, Bound, Conv, LayerSpec, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, Tensor};
use crate::train::{Batcher, EpochLog, TermAccumulator, TrainConfig, TrainLog};
use crate::transforms::resize_bicubic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_levels: usize,
    /// Detail-branch layers per level; each list ends in a 3-filter,
    /// stride-1 projection.
    pub stage_specs: Vec<Vec<LayerSpec>>,
    /// Side of `x_trans`.
    pub transform_size: usize,
    pub output_size: usize,
}

impl GeneratorConfig {
    /// Two 3x3 conv layers of `filters` plus the projection at every level.
    pub fn uniform(num_levels: usize, filters: usize, transform_size: usize) -> Self {
        GeneratorConfig {
            num_levels,
            stage_specs: vec![
                vec![LayerSpec::new(3, filters, 1), LayerSpec::new(3, filters, 1), LayerSpec::new(3, 3, 1)];
                num_levels
            ],
            transform_size,
            output_size: transform_size << num_levels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 || self.stage_specs.len() != self.num_levels {
            return Err(Error::Config(format!(
                "generator has {} levels but {} stage specs",
                self.num_levels,
                self.stage_specs.len()
            )));
        }
        if self.transform_size == 0 || self.output_size != self.transform_size << self.num_levels {
            return Err(Error::Config(format!(
                "output size {} must equal transform size {} * 2^{}",
                self.output_size, self.transform_size, self.num_levels
            )));
        }
        for (l, stage) in self.stage_specs.iter().enumerate() {
            stage.iter().try_for_each(LayerSpec::validate)?;
            if stage.iter().any(|s| s.s != 1) {
                return Err(Error::Config(format!("level {l}: detail layers must have stride 1")));
            }
            if stage.last().map(|s| s.f) != Some(3) {
                return Err(Error::Config(format!("level {l}: detail branch must end in a 3-filter projection")));
            }
        }
        Ok(())
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        (1..=self.num_levels).map(|l| self.transform_size << l).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub cfg: GeneratorConfig,
    pub params: ParamSet<T>,
    /// Frozen feature-structure head.
    pub head: TransformHead<T>,
    stages: Vec<Vec<Conv>>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(cfg: GeneratorConfig, head: TransformHead<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if head.cfg.size != cfg.transform_size {
            return Err(Error::Config(format!(
                "head produces {}x{} but the generator expects {}",
                head.cfg.size, head.cfg.size, cfg.transform_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let stages = cfg
            .stage_specs
            .iter()
            .enumerate()
            .map(|(l, specs)| {
                let mut ch = 3;
                specs
                    .iter()
                    .enumerate()
                    .map(|(i, spec)| {
                        let c = Conv::new(&mut ps, &format!("level{l}.conv{i}"), ch, *spec, &mut rng);
                        ch = spec.f;
                        c
                    })
                    .collect()
            })
            .collect();
        Ok(Generator {
            cfg,
            params: ps,
            head,
            stages,
        })
    }

    /// Sets every detail branch to output zero.
    pub fn zero_details(&mut self) {
        for stage in &self.stages {
            let last = stage.last().expect("validated");
            self.params.get_mut(last.w).data_mut().iter_mut().for_each(|v| *v = T::zero());
            self.params.get_mut(last.b).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Pyramid levels from an `[N, 3, s, s]` batch of `x_trans`, coarse to fine.
    pub fn levels_graph(&self, g: &mut Graph<T>, p: &Bound, x_trans: Var) -> Result<Vec<Var>> {
        let mut cur = x_trans;
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let up = g.upsample2x(cur)?;
            let mut h = up;
            for (i, conv) in stage.iter().enumerate() {
                h = conv.forward(g, p, h)?;
                if i + 1 < stage.len() {
                    h = g.relu(h);
                }
            }
            let sum = g.add(up, h)?;
            cur = g.clamp(sum, T::zero(), T::one());
            out.push(cur);
        }
        Ok(out)
    }

    /// Levels for one precomputed `x_trans`.
    pub fn rec_from_transform(&self, x_trans: &ImageTensor<T>) -> Result<Vec<ImageTensor<T>>> {
        let s = self.cfg.transform_size;
        if x_trans.dims() != (s, s, 3) {
            return Err(Error::invalid(format!("x_trans must be {s}x{s}x3, got {:?}", x_trans.dims())));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x_trans.to_nchw());
        self.levels_graph(&mut g, &p, x)?
            .into_iter()
            .map(|v| Ok(ImageTensor::batch_from_nchw(g.value(v))?.remove(0)))
            .collect()
    }

    /// `[x_base^1, ..., x_base^L]` for one decoded feature.
    pub fn rec_base(&self, f_rec: &[T]) -> Result<Vec<ImageTensor<T>>> {
        self.rec_from_transform(&self.head.apply(f_rec)?)
    }

    /// Finest level only.
    pub fn x_base(&self, f_rec: &[T]) -> Result<ImageTensor<T>> {
        Ok(self.rec_base(f_rec)?.pop().expect("at least one level"))
    }
}

/// Ground-truth pyramid: `x` bicubic-resized to every level size.
pub fn target_pyramid<T: Scalar>(x: &ImageTensor<T>, sizes: &[usize]) -> Vec<ImageTensor<T>> {
    sizes
        .iter()
        .map(|&s| if x.height() == s && x.width() == s { x.clone() } else { resize_bicubic(x, s, s) })
        .collect()
}

/// Graph form: sum over levels of per-image SATD, summed over the batch.
pub fn generator_loss_graph<T: Scalar>(g: &mut Graph<T>, levels: &[Var], targets: &[Var]) -> Result<Var> {
    if levels.is_empty() || levels.len() != targets.len() {
        return Err(Error::invalid("generator loss needs one target per level"));
    }
    let mut total: Option<Var> = None;
    for (&l, &t) in levels.iter().zip(targets) {
        let s = g.satd(l, t)?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    Ok(total.expect("nonempty"))
}

/// `sum_l SATD(levels[l], bicubic(x, size_l))` for one image, with the
/// gradient with respect to every level.
pub fn generator_loss_with_grad<T: Scalar>(levels: &[ImageTensor<T>], x: &ImageTensor<T>) -> Result<(T, Vec<ImageTensor<T>>)> {
    if levels.is_empty() {
        return Err(Error::invalid("no pyramid levels"));
    }
    if levels.iter().any(|l| l.height() != l.width() || l.channels() != x.channels()) {
        return Err(Error::invalid("levels must be square with the image's channel count"));
    }
    if levels.last().map(|l| l.dims()) != Some(x.dims()) {
        return Err(Error::invalid("finest level must match the ground-truth image"));
    }
    let sizes: Vec<usize> = levels.iter().map(|l| l.height()).collect();
    let targets = target_pyramid(x, &sizes);
    let mut g = Graph::new();
    let lv: Vec<Var> = levels.iter().map(|l| g.param(l.to_nchw())).collect();
    let tv: Vec<Var> = targets.iter().map(|t| g.constant(t.to_nchw())).collect();
    let loss = generator_loss_graph(&mut g, &lv, &tv)?;
    let grads = g.backward(loss)?;
    let d = lv
        .iter()
        .map(|&v| Ok(ImageTensor::batch_from_nchw(grads.get(v).expect("level gradient"))?.remove(0)))
        .collect::<Result<Vec<_>>>()?;
    Ok((g.value(loss).item(), d))
}

pub fn generator_loss<T: Scalar>(levels: &[ImageTensor<T>], x: &ImageTensor<T>) -> Result<T> {
    Ok(generator_loss_with_grad(levels, x)?.0)
}

/// Pairs of frozen `x_trans` (from the decoded features) and ground-truth
/// images at the output size.
#[derive(Debug, Clone, Default)]
pub struct TextureSet<T> {
    pub x_trans: Vec<ImageTensor<T>>,
    pub images: Vec<ImageTensor<T>>,
}

impl<T: Scalar> TextureSet<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Trains only the pyramid stages; the head stays frozen.
pub fn train_generator<T: Scalar>(
    data: &TextureSet<T>,
    head: &TransformHead<T>,
    cfg: &GeneratorConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(Generator<T>, TrainLog)> {
    if data.is_empty() || data.x_trans.len() != data.len() {
        return Err(Error::invalid("texture set is empty or unpaired"));
    }
    train.validate("generator")?;
    let mut model = Generator::new(cfg.clone(), head.clone(), seed)?;
    let (s, o) = (cfg.transform_size, cfg.output_size);
    if data.x_trans.iter().any(|x| x.dims() != (s, s, 3)) || data.images.iter().any(|x| x.dims() != (o, o, 3)) {
        return Err(Error::invalid(format!("texture set needs {s}x{s} transforms and {o}x{o} images")));
    }
    let sizes = cfg.level_sizes();
    let targets: Vec<Vec<ImageTensor<T>>> = data.images.iter().map(|x| target_pyramid(x, &sizes)).collect();
    let mut opt = Adam::new(&model.params, train.adam);
    let mut batcher = Batcher::new(data.len(), train.batch_size, seed ^ 0x9e4e);
    let mut log = TrainLog::default();
    for epoch in 0..train.epochs {
        let lr = train.lr.at(epoch);
        let mut acc = TermAccumulator::default();
        for batch in batcher.epoch() {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let xt: Vec<ImageTensor<T>> = batch.iter().map(|&i| data.x_trans[i].clone()).collect();
            let x = g.constant(ImageTensor::batch_to_nchw(&xt));
            let levels = model.levels_graph(&mut g, &p, x)?;
            let tv: Vec<Var> = (0..sizes.len())
                .map(|l| {
                    let t: Vec<ImageTensor<T>> = batch.iter().map(|&i| targets[i][l].clone()).collect();
                    g.constant(ImageTensor::batch_to_nchw(&t))
                })
                .collect();
            for (l, (&lv, &t)) in levels.iter().zip(&tv).enumerate() {
                let sd = g.satd(lv, t)?;
                acc.add(&format!("satd_level{}", l + 1), g.value(sd).item().as_f64());
            }
            let loss = generator_loss_graph(&mut g, &levels, &tv)?;
            acc.add("loss", g.value(loss).item().as_f64());
            acc.examples(batch.len());
            let grads = g.backward(loss)?;
            opt.step(&mut model.params, &p, &grads, lr);
        }
        if !model.params.is_finite() {
            return Err(Error::Data(format!("generator diverged at epoch {epoch}")));
        }
        let mut terms = acc.means();
        let loss = terms.remove("loss").unwrap_or(0.0);
        log.push(EpochLog { epoch, lr, loss, terms });
    }
    Ok((model, log))
}

/// Stacks `x_trans` tensors for a batch of features through the head.
pub fn transforms_for<T: Scalar>(head: &TransformHead<T>, features: &[Vec<T>]) -> Result<Vec<ImageTensor<T>>> {
    if features.is_empty() {
        return Ok(Vec::new());
    }
    let d = head.feature_dim();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid(format!("features must have {d} values")));
    }
    let mut g = Graph::new();
    let p = head.params.bind(&mut g, false);
    let f = g.constant(Tensor::from_vec(&[features.len(), d], features.concat())?);
    let out = head.forward(&mut g, &p, f)?;
    ImageTensor::batch_from_nchw(g.value(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_extractor::TransformHeadConfig;
    use crate::nn::LrSchedule;
    use crate::transforms::{satd, upsample2x_bilinear};

    fn head() -> TransformHead<f64> {
        let cfg = TransformHeadConfig {
            size: 8,
            seed_channels: 4,
            deconvs: vec![LayerSpec::new(3, 4, 2)],
            out_bias: 0.5,
        };
        TransformHead::new(cfg, 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn level_sizes_double() {
        let paper = GeneratorConfig::uniform(3, 8, 32);
        assert_eq!(paper.level_sizes(), vec![64, 128, 256]);
        assert_eq!(paper.output_size, 256);
        let g = Generator::new(GeneratorConfig::uniform(2, 4, 8), head(), 1).unwrap();
        let lv = g.rec_base(&[0.1, -0.2, 0.3, 0.0, 0.5]).unwrap();
        assert_eq!(lv.iter().map(|l| l.dims()).collect::<Vec<_>>(), vec![(16, 16, 3), (32, 32, 3)]);
        assert!(lv.iter().all(|l| l.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(lv, g.rec_base(&[0.1, -0.2, 0.3, 0.0, 0.5]).unwrap());
        assert!(g.rec_base(&[0.0; 4]).is_err());
    }

    #[test]
    fn config_checks() {
        let mut c = GeneratorConfig::uniform(2, 4, 8);
        c.output_size = 64;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::uniform(2, 4, 8);
        c.stage_specs[1].pop();
        assert!(c.validate().is_err());
        assert!(Generator::new(GeneratorConfig::uniform(2, 4, 16), head(), 0).is_err());
    }

    #[test]
    fn zero_details_is_a_bilinear_chain() {
        let mut g = Generator::new(GeneratorConfig::uniform(2, 4, 8), head(), 1).unwrap();
        g.zero_details();
        let f = [0.3, 0.1, -0.4, 0.2, 0.0];
        let xt = g.head.apply(&f).unwrap();
        let chain = upsample2x_bilinear(&upsample2x_bilinear(&xt));
        let out = g.x_base(&f).unwrap();
        assert!(out.data().iter().zip(chain.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn loss_is_sum_of_level_satd() {
        let x = ImageTensor::<f64>::from_fn(16, 16, 3, |y, x, c| ((y * 3 + x * 5 + c) % 11) as f64 / 11.0);
        let truth = target_pyramid(&x, &[4, 8, 16]);
        assert_eq!(generator_loss(&truth, &x).unwrap(), 0.0);
        let levels: Vec<_> = truth.iter().map(|l| l.map(|v| 1.0 - v)).collect();
        let expect: f64 = levels.iter().zip(&truth).map(|(a, b)| satd(a, b).unwrap()).sum();
        assert!((generator_loss(&levels, &x).unwrap() - expect).abs() < 1e-9);
        assert!(generator_loss(&levels[..2], &x).is_err());
    }

    #[test]
    fn training_halves_loss() {
        let h = head();
        let images: Vec<_> = (0..8)
            .map(|i| ImageTensor::from_fn(32, 32, 3, |y, x, c| 0.5 + 0.4 * ((y + i) as f64 * 0.4 + c as f64).sin() * (x as f64 * 0.3).cos()))
            .collect();
        let x_trans = images.iter().map(|x| resize_bicubic(x, 8, 8)).collect();
        let t = TrainConfig {
            epochs: 20,
            batch_size: 4,
            lr: LrSchedule::constant(3e-3),
            adam: Default::default(),
        };
        let data = TextureSet { x_trans, images };
        let (_, log) = train_generator(&data, &h, &GeneratorConfig::uniform(2, 8, 8), &t, 3).unwrap();
        let (a, b) = (log.first_loss().unwrap(), log.last_loss().unwrap());
        assert!(b < 0.5 * a, "{a} -> {b}");
        let (_, log2) = train_generator(&data, &h, &GeneratorConfig::uniform(2, 8, 8), &t, 3).unwrap();
        assert_eq!(log.epochs[0].loss.to_bits(), log2.epochs[0].loss.to_bits());
    }
}
