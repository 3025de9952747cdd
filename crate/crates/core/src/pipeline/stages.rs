//! Stage runner: ingest, the four training stages and model loading.

use std::collections::BTreeMap;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::codec::{CodecModels, SelectedCodec};
use super::config::ExperimentConfig;
use super::manifest::{self, DatasetManifest, Split};
use super::store::Store;
use super::{write_atomic, StoredScalar};
use crate::base_extractor::{train_extractor, Extractor, ExtractorConfig, LabeledFaces};
use crate::enhancement_codec::{
    train_enhancement, train_enhancement_sweep, EnhancementConfig, EnhancementModel, EnhancementStats, ResidualSet,
};
use crate::error::{Error, Result};
use crate::eval::{make_pairs, saturation_point, verification_accuracy, Distance, Layer, Metric, RatePoint, SATURATION_EPS};
use crate::feature_codec::{entropy_encode, train_feature_codec, FeatureCodec, FeatureCodecConfig, FeatureSet, SymbolModel};
use crate::tensor::{ImageTensor, Tensor};
use crate::texture_generator::{train_generator, Generator, GeneratorConfig, TextureSet};
use crate::train::TrainLog;
use crate::transforms::resize_bicubic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extractor,
    FeatureCodec,
    Generator,
    Enhancement,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Extractor, Stage::FeatureCodec, Stage::Generator, Stage::Enhancement];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Extractor => "extractor",
            Stage::FeatureCodec => "feature_codec",
            Stage::Generator => "generator",
            Stage::Enhancement => "enhancement",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::invalid(format!("unknown stage `{s}`; expected one of extractor, feature_codec, generator, enhancement")))
    }

    /// Direct predecessors whose checkpoints this stage consumes.
    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Extractor => &[],
            Stage::FeatureCodec => &[Stage::Extractor],
            Stage::Generator => &[Stage::FeatureCodec],
            Stage::Enhancement => &[Stage::Generator],
        }
    }

    fn seed(self, base: u64) -> u64 {
        base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (self as u64 + 1)
    }
}

type Named<T> = Vec<(String, Tensor<T>)>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractorCheckpoint<T> {
    pub dtype: String,
    pub config: ExtractorConfig,
    pub params: Named<T>,
    pub head: Named<T>,
    pub log: TrainLog,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecMember<T> {
    pub config: FeatureCodecConfig,
    pub params: Named<T>,
    pub head: Named<T>,
    pub symbol_model: SymbolModel,
    pub log: TrainLog,
    /// Mean base-layer bits per output pixel on the validation split.
    pub val_bpp: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureCodecCheckpoint<T> {
    pub dtype: String,
    pub members: Vec<CodecMember<T>>,
    /// Saturation point of the validation accuracy sweep.
    pub selected: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorCheckpoint<T> {
    pub dtype: String,
    pub config: GeneratorConfig,
    pub params: Named<T>,
    pub log: TrainLog,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnhancementMember<T> {
    pub config: EnhancementConfig,
    pub params: Named<T>,
    pub log: TrainLog,
    pub validation: EnhancementStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnhancementCheckpoint<T> {
    pub dtype: String,
    pub members: Vec<EnhancementMember<T>>,
}

/// Images of one split at the coding size, with labels.
#[derive(Debug, Clone)]
pub struct SplitData<T> {
    pub images: Vec<ImageTensor<T>>,
    pub labels: Vec<usize>,
}

/// Everything the reproducibility record captures about one command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reproducibility {
    pub command: String,
    pub seed: u64,
    pub dtype: String,
    pub config: ExperimentConfig,
    pub manifest_hash: Option<String>,
    pub checkpoints: BTreeMap<String, String>,
}

pub struct Pipeline<T> {
    pub cfg: ExperimentConfig,
    pub store: Store,
    _scalar: PhantomData<T>,
}

fn check_dtype<T: StoredScalar>(stage: Stage, dtype: &str) -> Result<()> {
    if dtype != T::DTYPE {
        return Err(Error::dependency(
            stage.as_str(),
            format!("checkpoint holds {dtype} weights, this build runs {}", T::DTYPE),
        ));
    }
    Ok(())
}

impl<T: StoredScalar> Pipeline<T> {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let store = Store::new(cfg.output_root());
        Ok(Pipeline {
            cfg,
            store,
            _scalar: PhantomData,
        })
    }

    pub fn root(&self) -> &Path {
        self.store.root()
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root().join("manifest.json")
    }

    /// Scans `root` (or the configured data root) and saves the manifest.
    pub fn ingest(&self, root: Option<&Path>) -> Result<DatasetManifest> {
        let root = root
            .map(Path::to_path_buf)
            .or_else(|| self.cfg.data.root.clone())
            .ok_or_else(|| Error::Config("no data root given and data.root is unset".into()))?;
        let m = manifest::ingest(&root, self.cfg.data.split, self.cfg.seed)?;
        log::info!(
            "ingested {} images of {} identities ({} train, {} val, {} test), skipped {}",
            m.entries.len(),
            [Split::Train, Split::Val, Split::Test].iter().map(|s| m.identities(*s).len()).sum::<usize>(),
            m.identities(Split::Train).len(),
            m.identities(Split::Val).len(),
            m.identities(Split::Test).len(),
            m.skipped.len()
        );
        m.save(&self.manifest_path())?;
        Ok(m)
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let p = self.manifest_path();
        if !p.exists() {
            return Err(Error::dependency("ingest", format!("{} not found; run `ingest` first", p.display())));
        }
        DatasetManifest::load_from(&p)
    }

    pub fn split(&self, split: Split) -> Result<SplitData<T>> {
        let (images, labels) = self.manifest()?.load(split, self.cfg.sizes.output)?;
        Ok(SplitData { images, labels })
    }

    /// Resizes coding-size images to the extractor input size.
    pub fn extractor_inputs(&self, images: &[ImageTensor<T>]) -> Vec<ImageTensor<T>> {
        let s = self.cfg.sizes.input;
        images
            .iter()
            .map(|x| if x.height() == s && x.width() == s { x.clone() } else { resize_bicubic(x, s, s).clamp01() })
            .collect()
    }

    pub fn features(&self, extractor: &Extractor<T>, images: &[ImageTensor<T>]) -> Result<Vec<Vec<T>>> {
        extractor.extract_batch(&self.extractor_inputs(images))
    }

    /// Trains `stage` (its whole sweep when `sweep` is set) and records the
    /// checkpoint. Returns the checkpoint hash.
    pub fn run_stage(&self, stage: Stage, sweep: bool) -> Result<String> {
        for dep in stage.dependencies() {
            self.store.require(*dep)?;
        }
        let manifest = self.manifest()?;
        manifest.verify()?;
        let seed = stage.seed(self.cfg.seed);
        log::info!("training {}{}", stage.as_str(), if sweep { " sweep" } else { "" });
        let hash = match stage {
            Stage::Extractor => self.train_extractor_stage(seed)?,
            Stage::FeatureCodec => self.train_codec_stage(sweep, seed)?,
            Stage::Generator => self.train_generator_stage(seed)?,
            Stage::Enhancement => self.train_enhancement_stage(sweep, seed)?,
        };
        self.write_reproducibility(&format!("{}_{}", if sweep { "sweep" } else { "train" }, stage.as_str()))?;
        Ok(hash)
    }

    fn train_extractor_stage(&self, seed: u64) -> Result<String> {
        let train = self.split(Split::Train)?;
        let mut cfg = self.cfg.extractor.model.clone();
        let mut ids = train.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        let n = ids.len();
        if cfg.num_classes != n {
            log::info!("classifier width set to the {n} training identities");
            cfg.num_classes = n;
        }
        let data = LabeledFaces {
            images: self.extractor_inputs(&train.images),
            labels: train.labels,
        };
        let (m, log) = train_extractor(&data, &cfg, &self.cfg.extractor.train, seed)?;
        self.store.put(
            Stage::Extractor,
            &ExtractorCheckpoint {
                dtype: T::DTYPE.into(),
                config: cfg,
                params: m.params.named(),
                head: m.head.params.named(),
                log,
            },
        )
    }

    pub fn extractor(&self) -> Result<Extractor<T>> {
        let (c, _): (ExtractorCheckpoint<T>, _) = self.store.get(Stage::Extractor)?;
        check_dtype::<T>(Stage::Extractor, &c.dtype)?;
        let mut m = Extractor::new(c.config, 0)?;
        m.params.load_named(&c.params)?;
        m.head.params.load_named(&c.head)?;
        Ok(m)
    }

    fn train_codec_stage(&self, sweep: bool, seed: u64) -> Result<String> {
        let extractor = self.extractor()?;
        let train = self.split(Split::Train)?;
        let val = self.split(Split::Val)?;
        let data = FeatureSet {
            features: self.features(&extractor, &train.images)?,
            targets: train.images.iter().map(|x| extractor.structure_target(x)).collect(),
        };
        let val_features = self.features(&extractor, &val.images)?;
        let pairs = make_pairs(&val.labels, self.cfg.data.verification_pairs, seed)?;
        let configs = if sweep { self.cfg.feature_codec_sweep() } else { vec![self.cfg.feature_codec.model.clone()] };
        let pixels = (self.cfg.sizes.output * self.cfg.sizes.output) as f64;
        let mut members = Vec::new();
        let mut points = Vec::new();
        for (i, cfg) in configs.iter().enumerate() {
            let t = train_feature_codec(&data, &extractor.head, cfg, &self.cfg.feature_codec.train, seed)?;
            let mut bytes = 0usize;
            let rec = val_features
                .iter()
                .map(|f| {
                    let code = t.codec.encode(f)?;
                    bytes += entropy_encode(&code, &t.model)?.len();
                    t.codec.decode(&code)
                })
                .collect::<Result<Vec<_>>>()?;
            let val_bpp = 8.0 * bytes as f64 / (pixels * val_features.len() as f64);
            let val_accuracy = verification_accuracy(&pairs, &rec, Distance::Cosine)?.accuracy;
            log::info!(
                "codec {i}: lambda_1 {:.1e} lambda_2 {:.1e} val bpp {val_bpp:.5} accuracy {val_accuracy:.4}",
                cfg.lambda_1,
                cfg.lambda_2
            );
            points.push(RatePoint::new(val_bpp, Layer::Base, Metric::Accuracy, val_accuracy, format!("codec{i}"))?);
            members.push(CodecMember {
                config: cfg.clone(),
                params: t.codec.params.named(),
                head: t.codec.head.params.named(),
                symbol_model: t.model,
                log: t.log,
                val_bpp,
                val_accuracy,
            });
        }
        let selected = saturation_point(&points, SATURATION_EPS)?;
        log::info!("selected codec {selected} at the validation saturation point");
        self.store.put(
            Stage::FeatureCodec,
            &FeatureCodecCheckpoint {
                dtype: T::DTYPE.into(),
                members,
                selected,
            },
        )
    }

    /// Every trained codec, in sweep order, and the selected index.
    pub fn feature_codecs(&self, extractor: &Extractor<T>) -> Result<(Vec<SelectedCodec<T>>, usize)> {
        let (c, _): (FeatureCodecCheckpoint<T>, _) = self.store.get(Stage::FeatureCodec)?;
        check_dtype::<T>(Stage::FeatureCodec, &c.dtype)?;
        let codecs = c
            .members
            .into_iter()
            .map(|m| {
                let mut codec = FeatureCodec::new(m.config, extractor.head.clone(), 0)?;
                codec.params.load_named(&m.params)?;
                codec.head.params.load_named(&m.head)?;
                Ok(SelectedCodec {
                    codec,
                    model: m.symbol_model,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if c.selected >= codecs.len() {
            return Err(Error::dependency(Stage::FeatureCodec.as_str(), "selected codec index out of range"));
        }
        Ok((codecs, c.selected))
    }

    pub fn selected_codec(&self, extractor: &Extractor<T>) -> Result<SelectedCodec<T>> {
        let (mut all, i) = self.feature_codecs(extractor)?;
        Ok(all.swap_remove(i))
    }

    fn train_generator_stage(&self, seed: u64) -> Result<String> {
        let extractor = self.extractor()?;
        let codec = self.selected_codec(&extractor)?;
        let train = self.split(Split::Train)?;
        let features = self.features(&extractor, &train.images)?;
        let x_trans = features
            .iter()
            .map(|f| codec.codec.structure_transform(&codec.f_rec(f)?))
            .collect::<Result<Vec<_>>>()?;
        let data = TextureSet {
            x_trans,
            images: train.images,
        };
        let (g, log) = train_generator(&data, &codec.codec.head, &self.cfg.generator.model, &self.cfg.generator.train, seed)?;
        self.store.put(
            Stage::Generator,
            &GeneratorCheckpoint {
                dtype: T::DTYPE.into(),
                config: g.cfg.clone(),
                params: g.params.named(),
                log,
            },
        )
    }

    pub fn generator(&self, codec: &SelectedCodec<T>) -> Result<Generator<T>> {
        let (c, _): (GeneratorCheckpoint<T>, _) = self.store.get(Stage::Generator)?;
        check_dtype::<T>(Stage::Generator, &c.dtype)?;
        let mut g = Generator::new(c.config, codec.codec.head.clone(), 0)?;
        g.params.load_named(&c.params)?;
        Ok(g)
    }

    /// Base-layer reconstructions of `images` through the coded features.
    pub fn residual_set(&self, models: &CodecModels<T>, images: Vec<ImageTensor<T>>) -> Result<ResidualSet<T>> {
        let bases = images.iter().map(|x| models.x_base_of(x)).collect::<Result<Vec<_>>>()?;
        Ok(ResidualSet { images, bases })
    }

    fn train_enhancement_stage(&self, sweep: bool, seed: u64) -> Result<String> {
        let models = self.base_models()?;
        let data = self.residual_set(&models, self.split(Split::Train)?.images)?;
        let val = self.residual_set(&models, self.split(Split::Val)?.images)?;
        let cfg = &self.cfg.enhancement;
        let family = if sweep {
            train_enhancement_sweep(&data, &val, &cfg.model, &self.cfg.sweeps.rate_weight, &cfg.train, seed)?
        } else {
            vec![train_enhancement(&data, &val, &cfg.model, &cfg.train, seed)?]
        };
        let members = family
            .into_iter()
            .map(|t| {
                log::info!(
                    "enhancement rate_weight {:.1e}: val bpp {:.4} psnr {:.2} (base {:.2})",
                    t.model.cfg.rate_weight,
                    t.validation.bpp,
                    t.validation.psnr,
                    t.validation.base_psnr
                );
                EnhancementMember {
                    config: t.model.cfg.clone(),
                    params: t.model.params.named(),
                    log: t.log,
                    validation: t.validation,
                }
            })
            .collect();
        self.store.put(
            Stage::Enhancement,
            &EnhancementCheckpoint {
                dtype: T::DTYPE.into(),
                members,
            },
        )
    }

    pub fn enhancement_members(&self) -> Result<Vec<(EnhancementModel<T>, EnhancementStats)>> {
        let (c, _): (EnhancementCheckpoint<T>, _) = self.store.get(Stage::Enhancement)?;
        check_dtype::<T>(Stage::Enhancement, &c.dtype)?;
        c.members
            .into_iter()
            .map(|m| {
                let mut model = EnhancementModel::new(m.config, 0)?;
                model.params.load_named(&m.params)?;
                Ok((model, m.validation))
            })
            .collect()
    }

    /// Extractor, selected codec and generator; no enhancement models.
    pub fn base_models(&self) -> Result<CodecModels<T>> {
        let extractor = self.extractor()?;
        let codec = self.selected_codec(&extractor)?;
        let generator = self.generator(&codec)?;
        CodecModels::new(self.cfg.sizes, extractor, codec, generator, Vec::new())
    }

    /// Base models plus every enhancement model.
    pub fn models(&self) -> Result<CodecModels<T>> {
        let mut m = self.base_models()?;
        m.enhancement = self.enhancement_members()?.into_iter().map(|(e, _)| e).collect();
        Ok(m)
    }

    pub fn write_reproducibility(&self, command: &str) -> Result<PathBuf> {
        let manifest_hash = self.manifest().ok().map(|m| m.content_hash);
        let rec = Reproducibility {
            command: command.to_string(),
            seed: self.cfg.seed,
            dtype: T::DTYPE.into(),
            config: self.cfg.clone(),
            manifest_hash,
            checkpoints: self.store.hashes()?,
        };
        let path = self.root().join("reproducibility").join(format!("{command}.json"));
        write_atomic(&path, serde_json::to_string_pretty(&rec)?.as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_roundtrip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.as_str()).unwrap(), s);
        }
        assert_eq!(Stage::parse("feature-codec").unwrap(), Stage::FeatureCodec);
        assert!(Stage::parse("decoder").is_err());
    }
}
