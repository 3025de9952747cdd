//! Experiment configuration, read from TOML with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::base_extractor::{ExtractorConfig, TransformHeadConfig};
use crate::enhancement_codec::EnhancementConfig;
use crate::error::{Error, Result};
use crate::feature_codec::FeatureCodecConfig;
use crate::nn::{LayerSpec, LrSchedule};
use crate::texture_generator::GeneratorConfig;
use crate::train::TrainConfig;

/// Overrides `output_dir` when set.
pub const OUTPUT_ENV: &str = "SFC_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig<M> {
    pub model: M,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of per-identity subdirectories, used by `ingest`.
    #[serde(default)]
    pub root: Option<PathBuf>,
    pub split: SplitRatios,
    /// Same-identity pairs drawn for verification, matched by as many
    /// different-identity pairs.
    pub verification_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sizes {
    /// Extractor input side.
    pub input: usize,
    /// Side of `x_trans`.
    pub transform: usize,
    /// Reconstruction side; also the side images are coded at.
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweeps {
    /// Paired element-wise with `lambda_2`.
    pub lambda_1: Vec<f64>,
    pub lambda_2: Vec<f64>,
    pub rate_weight: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub sizes: Sizes,
    pub extractor: StageConfig<ExtractorConfig>,
    pub feature_codec: StageConfig<FeatureCodecConfig>,
    pub generator: StageConfig<GeneratorConfig>,
    pub enhancement: StageConfig<EnhancementConfig>,
    pub sweeps: Sweeps,
}

/// `n` log-spaced values from `a` to `b`, endpoints exact.
fn log_space(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| match i {
            0 => a,
            i if i + 1 == n => b,
            i => (a.ln() + (b.ln() - a.ln()) * i as f64 / (n - 1) as f64).exp(),
        })
        .collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ExperimentConfig {
    /// Full-geometry configuration with the published training constants.
    pub fn paper() -> Self {
        let constant = |epochs, batch_size| TrainConfig {
            epochs,
            batch_size,
            lr: LrSchedule::constant(1e-4),
            adam: Default::default(),
        };
        ExperimentConfig {
            seed: 1,
            output_dir: PathBuf::from("runs/paper"),
            data: DataConfig {
                root: None,
                split: SplitRatios {
                    train: 8.0,
                    val: 1.0,
                    test: 1.0,
                },
                verification_pairs: 3000,
            },
            sizes: Sizes {
                input: 160,
                transform: 32,
                output: 256,
            },
            extractor: StageConfig {
                model: ExtractorConfig {
                    input_size: 160,
                    backbone: vec![
                        LayerSpec::new(3, 32, 2),
                        LayerSpec::new(3, 64, 2),
                        LayerSpec::new(3, 128, 2),
                        LayerSpec::new(3, 256, 2),
                        LayerSpec::new(3, 256, 2),
                    ],
                    embed_dim: 128,
                    normalize_embedding: false,
                    head: TransformHeadConfig {
                        size: 32,
                        seed_channels: 128,
                        deconvs: vec![LayerSpec::new(3, 64, 2), LayerSpec::new(3, 32, 2)],
                        out_bias: 0.5,
                    },
                    lambda_s: 50.0,
                    ce_weight: 1.0,
                    num_classes: 2,
                },
                train: constant(30, 64),
            },
            feature_codec: StageConfig {
                model: FeatureCodecConfig {
                    feature_dim: 128,
                    layer_widths: vec![128, 128, 64],
                    gdn: true,
                    r_clip: 20.0,
                    lambda_1: 1e-6,
                    lambda_2: 8.4e-5,
                    noise_half_width: 0.5,
                    l1_on_noisy: true,
                    shared_symbol_model: false,
                    init_latent_gain: 1.0,
                },
                train: constant(30, 64),
            },
            generator: StageConfig {
                model: GeneratorConfig::uniform(3, 32, 32),
                train: TrainConfig {
                    epochs: 30,
                    batch_size: 16,
                    lr: LrSchedule {
                        base: 1e-4,
                        decay: 0.9,
                        every: 5,
                        floor: 1e-5,
                    },
                    adam: Default::default(),
                },
            },
            enhancement: StageConfig {
                model: EnhancementConfig::new(
                    vec![LayerSpec::new(5, 128, 2), LayerSpec::new(5, 128, 2), LayerSpec::new(5, 192, 2)],
                    vec![LayerSpec::new(3, 128, 1), LayerSpec::new(5, 128, 2)],
                    1e-2,
                ),
                train: constant(30, 8),
            },
            sweeps: Sweeps {
                lambda_1: log_space(1e-4, 1e-8, 5),
                lambda_2: log_space(7e-2, 1e-7, 5),
                rate_weight: log_space(1e-1, 1e-4, 4),
            },
        }
    }

    /// Desk-scale configuration for 64x64 synthetic faces.
    pub fn toy() -> Self {
        let lambda_1 = vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-6, 1e-8];
        // lambda_2 follows lambda_1 log-linearly over the published ranges,
        // capped at the top of its range for the extended points
        let slope = (1e-7f64 / 7e-2).ln() / (1e-8f64 / 1e-4).ln();
        let lambda_2 = lambda_1.iter().map(|&l: &f64| (7e-2 * (l / 1e-4).powf(slope)).min(7e-2)).collect();
        ExperimentConfig {
            seed: 1,
            output_dir: PathBuf::from("runs/toy"),
            data: DataConfig {
                root: None,
                split: SplitRatios {
                    train: 10.0,
                    val: 4.0,
                    test: 16.0,
                },
                verification_pairs: 3000,
            },
            sizes: Sizes {
                input: 64,
                transform: 16,
                output: 64,
            },
            extractor: StageConfig {
                model: ExtractorConfig {
                    input_size: 64,
                    backbone: vec![
                        LayerSpec::new(3, 16, 2),
                        LayerSpec::new(3, 32, 2),
                        LayerSpec::new(3, 64, 2),
                        LayerSpec::new(3, 64, 2),
                    ],
                    embed_dim: 16,
                    normalize_embedding: true,
                    head: TransformHeadConfig {
                        size: 16,
                        seed_channels: 64,
                        deconvs: vec![LayerSpec::new(3, 32, 2), LayerSpec::new(3, 16, 2)],
                        out_bias: 0.5,
                    },
                    lambda_s: 50.0,
                    ce_weight: 1.0,
                    num_classes: 10,
                },
                train: TrainConfig {
                    epochs: 40,
                    batch_size: 16,
                    lr: LrSchedule::constant(2e-3),
                    adam: Default::default(),
                },
            },
            feature_codec: StageConfig {
                model: FeatureCodecConfig {
                    feature_dim: 16,
                    layer_widths: vec![64, 64, 16],
                    gdn: true,
                    r_clip: 20.0,
                    lambda_1: 1e-8,
                    lambda_2: 1e-7,
                    noise_half_width: 0.5,
                    l1_on_noisy: true,
                    shared_symbol_model: false,
                    init_latent_gain: 8.0,
                },
                train: TrainConfig {
                    epochs: 60,
                    batch_size: 32,
                    lr: LrSchedule {
                        base: 1e-2,
                        decay: 0.9,
                        every: 6,
                        floor: 1e-3,
                    },
                    adam: Default::default(),
                },
            },
            generator: StageConfig {
                model: GeneratorConfig::uniform(2, 16, 16),
                train: TrainConfig {
                    epochs: 8,
                    batch_size: 16,
                    lr: LrSchedule {
                        base: 2e-3,
                        decay: 0.9,
                        every: 5,
                        floor: 2e-4,
                    },
                    adam: Default::default(),
                },
            },
            enhancement: StageConfig {
                model: EnhancementConfig::new(
                    vec![LayerSpec::new(5, 32, 2), LayerSpec::new(5, 32, 2), LayerSpec::new(5, 32, 2)],
                    vec![LayerSpec::new(3, 32, 1), LayerSpec::new(3, 16, 2)],
                    1e-3,
                ),
                train: TrainConfig {
                    epochs: 12,
                    batch_size: 8,
                    lr: LrSchedule {
                        base: 2e-3,
                        decay: 0.9,
                        every: 3,
                        floor: 2e-4,
                    },
                    adam: Default::default(),
                },
            },
            sweeps: Sweeps {
                lambda_1,
                lambda_2,
                rate_weight: vec![1e-1, 1e-2, 1e-3, 1e-4],
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (expected paper or toy)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Output root, honoring [`OUTPUT_ENV`].
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        self.extractor.model.validate()?;
        self.feature_codec.model.validate()?;
        self.generator.model.validate()?;
        self.enhancement.model.validate()?;
        for (name, t) in [
            ("extractor", &self.extractor.train),
            ("feature_codec", &self.feature_codec.train),
            ("generator", &self.generator.train),
            ("enhancement", &self.enhancement.train),
        ] {
            t.validate(name)?;
        }
        let s = self.sizes;
        if s.input != self.extractor.model.input_size {
            return cfg_err(format!("sizes.input {} != extractor input_size {}", s.input, self.extractor.model.input_size));
        }
        if s.transform != self.extractor.model.head.size || s.transform != self.generator.model.transform_size {
            return cfg_err(format!("sizes.transform {} must match the head and generator", s.transform));
        }
        if s.output != self.generator.model.output_size || s.output != s.transform << self.generator.model.num_levels {
            return cfg_err(format!(
                "sizes.output {} must equal transform {} * 2^{}",
                s.output, s.transform, self.generator.model.num_levels
            ));
        }
        if s.output % self.enhancement.model.total_stride() != 0 {
            return cfg_err(format!(
                "sizes.output {} is not divisible by the enhancement stride {}",
                s.output,
                self.enhancement.model.total_stride()
            ));
        }
        if self.feature_codec.model.feature_dim != self.extractor.model.embed_dim {
            return cfg_err("feature_codec feature_dim must equal extractor embed_dim".into());
        }
        let sw = &self.sweeps;
        if sw.lambda_1.is_empty() || sw.rate_weight.is_empty() || sw.lambda_1.len() != sw.lambda_2.len() {
            return cfg_err("sweeps must be nonempty and lambda_1/lambda_2 paired".into());
        }
        if sw.lambda_1.iter().chain(&sw.lambda_2).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return cfg_err("sweep lambdas must be finite and nonnegative".into());
        }
        if sw.rate_weight.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return cfg_err("sweep rate weights must be positive".into());
        }
        let r = self.data.split;
        if [r.train, r.val, r.test].iter().any(|v| !(*v >= 0.0 && v.is_finite())) || r.train <= 0.0 || r.test <= 0.0 {
            return cfg_err("split ratios must be nonnegative with positive train and test".into());
        }
        if self.data.verification_pairs == 0 {
            return cfg_err("verification_pairs must be positive".into());
        }
        Ok(())
    }

    /// Feature-codec configs of the lambda sweep, in sweep order.
    pub fn feature_codec_sweep(&self) -> Vec<FeatureCodecConfig> {
        self.sweeps
            .lambda_1
            .iter()
            .zip(&self.sweeps.lambda_2)
            .map(|(&l1, &l2)| FeatureCodecConfig {
                lambda_1: l1,
                lambda_2: l2,
                ..self.feature_codec.model.clone()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_roundtrip() {
        for cfg in [ExperimentConfig::paper(), ExperimentConfig::toy()] {
            cfg.validate().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
        assert!(ExperimentConfig::preset("huge").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ExperimentConfig::toy().to_toml().replace("seed = 1", "seed = 1\nsede = 2");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
        let text = ExperimentConfig::toy().to_toml().replace("lambda_s = 50.0", "lambda_s = 50.0\nlamda = 1.0");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn inconsistent_sizes_are_rejected() {
        let mut c = ExperimentConfig::toy();
        c.sizes.output = 128;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::toy();
        c.sweeps.lambda_2.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn toy_lambda_2_stays_in_range() {
        let c = ExperimentConfig::toy();
        assert!(c.sweeps.lambda_2.iter().all(|&v| (1e-7 * (1.0 - 1e-9)..=7e-2).contains(&v)));
        assert_eq!(c.feature_codec_sweep().len(), c.sweeps.lambda_1.len());
    }
}
