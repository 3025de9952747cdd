//! Test-split evaluation of every trained operating point.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::Split;
use super::stages::Pipeline;
use super::{write_atomic, StoredScalar};
use crate::bitstream::demux;
use crate::error::Result;
use crate::eval::{
    make_pairs, ms_ssim, psnr, saturation_point, verification_accuracy, Distance, Layer, Metric, RateCurve, RatePoint,
    SATURATION_EPS,
};
use crate::feature_codec::entropy_encode;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationScore {
    pub accuracy: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecPoint {
    pub id: String,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub base_bpp: f64,
    pub accuracy: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageQuality {
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancementPoint {
    pub id: String,
    pub rate_weight: f64,
    /// Whole-stream bits per pixel, both layers and the header.
    pub total_bpp: f64,
    pub enhancement_bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    /// Smallest per-image PSNR gain over the base-only decode.
    pub min_psnr_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_images: usize,
    pub uncompressed: VerificationScore,
    pub codecs: Vec<CodecPoint>,
    /// Codec picked on the validation split and used for image coding.
    pub selected_codec: usize,
    /// Saturation point of the test accuracy sweep.
    pub test_saturation: usize,
    /// Base-only decode through the selected codec.
    pub base: ImageQuality,
    pub enhancement: Vec<EnhancementPoint>,
    pub points: Vec<RatePoint>,
}

impl EvalReport {
    pub fn curve(&self) -> Result<RateCurve> {
        RateCurve::new(self.points.clone())
    }

    /// Writes `metrics.json` and `rate_points.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("metrics.json"), serde_json::to_string_pretty(self)?.as_bytes())?;
        write_atomic(&dir.join("rate_points.csv"), self.curve()?.to_csv().as_bytes())
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

impl<T: StoredScalar> Pipeline<T> {
    pub fn eval_dir(&self) -> PathBuf {
        self.root().join("eval")
    }

    /// Evaluates every codec and enhancement member on the test split.
    /// `max_images` caps the images used for the image-quality metrics.
    pub fn evaluate(&self, max_images: Option<usize>) -> Result<EvalReport> {
        let mut models = self.models()?;
        let extractor = &models.extractor;
        let test = self.split(Split::Test)?;
        let seed = self.cfg.seed ^ 0xe7a1;
        let pairs = make_pairs(&test.labels, self.cfg.data.verification_pairs, seed)?;
        let features = self.features(extractor, &test.images)?;
        let v = verification_accuracy(&pairs, &features, Distance::Cosine)?;
        let uncompressed = VerificationScore {
            accuracy: v.accuracy,
            auc: v.auc,
        };
        let pixels = (self.cfg.sizes.output * self.cfg.sizes.output) as f64;
        let (codecs, selected_codec) = self.feature_codecs(extractor)?;
        let mut points = Vec::new();
        let mut codec_points = Vec::new();
        for (i, c) in codecs.iter().enumerate() {
            let mut bytes = 0usize;
            let rec = features
                .iter()
                .map(|f| {
                    let code = c.codec.encode(f)?;
                    bytes += entropy_encode(&code, &c.model)?.len();
                    c.codec.decode(&code)
                })
                .collect::<Result<Vec<_>>>()?;
            let v = verification_accuracy(&pairs, &rec, Distance::Cosine)?;
            let id = format!("codec{i}");
            let base_bpp = 8.0 * bytes as f64 / (pixels * features.len() as f64);
            points.push(RatePoint::new(base_bpp, Layer::Base, Metric::Accuracy, v.accuracy, &id)?);
            points.push(RatePoint::new(base_bpp, Layer::Base, Metric::Auc, v.auc, &id)?);
            codec_points.push(CodecPoint {
                id,
                lambda_1: c.codec.cfg.lambda_1,
                lambda_2: c.codec.cfg.lambda_2,
                base_bpp,
                accuracy: v.accuracy,
                auc: v.auc,
            });
        }
        let acc: Vec<RatePoint> = points.iter().filter(|p| p.metric == Metric::Accuracy).cloned().collect();
        let test_saturation = saturation_point(&acc, SATURATION_EPS)?;

        let n = max_images.unwrap_or(test.images.len()).min(test.images.len());
        let images: Vec<&ImageTensor<T>> = test.images.iter().take(n).collect();
        let family = std::mem::take(&mut models.enhancement);
        let mut base_q = Vec::new();
        let mut streams: Vec<Vec<Vec<u8>>> = vec![Vec::new(); family.len()];
        models.enhancement = family;
        for x in &images {
            let bytes = models.encode_image(x, None)?;
            let s = demux(&bytes)?;
            let rec = models.decode_image(&bytes)?.image;
            base_q.push((s.bpp(Layer::Base), psnr(&rec, x)?, ms_ssim(&rec, x)?));
            for (k, out) in streams.iter_mut().enumerate() {
                out.push(models.encode_image(x, Some(k))?);
            }
        }
        let base = ImageQuality {
            bpp: mean(base_q.iter().map(|q| q.0)),
            psnr: mean(base_q.iter().map(|q| q.1)),
            ms_ssim: mean(base_q.iter().map(|q| q.2)),
        };
        points.push(RatePoint::new(base.bpp, Layer::Base, Metric::Psnr, base.psnr, "base")?);
        points.push(RatePoint::new(base.bpp, Layer::Base, Metric::MsSsim, base.ms_ssim, "base")?);
        let mut enhancement = Vec::new();
        for (k, out) in streams.iter().enumerate() {
            let mut q = Vec::new();
            let mut min_gain = f64::INFINITY;
            for ((x, bytes), b) in images.iter().zip(out).zip(&base_q) {
                let s = demux(bytes)?;
                let rec = models.decode_image(bytes)?.image;
                let p = psnr(&rec, x)?;
                min_gain = min_gain.min(p - b.1);
                q.push((s.bpp(Layer::Total), s.bpp(Layer::Enhancement), p, ms_ssim(&rec, x)?));
            }
            let id = format!("enh{k}");
            let p = EnhancementPoint {
                id: id.clone(),
                rate_weight: models.enhancement[k].cfg.rate_weight,
                total_bpp: mean(q.iter().map(|v| v.0)),
                enhancement_bpp: mean(q.iter().map(|v| v.1)),
                psnr: mean(q.iter().map(|v| v.2)),
                ms_ssim: mean(q.iter().map(|v| v.3)),
                min_psnr_gain: min_gain,
            };
            log::info!(
                "enhancement {k} (rate_weight {:.1e}): total bpp {:.4} psnr {:.2} ms-ssim {:.4}",
                p.rate_weight,
                p.total_bpp,
                p.psnr,
                p.ms_ssim
            );
            points.push(RatePoint::new(p.total_bpp, Layer::Total, Metric::Psnr, p.psnr, &id)?);
            points.push(RatePoint::new(p.total_bpp, Layer::Total, Metric::MsSsim, p.ms_ssim, &id)?);
            enhancement.push(p);
        }
        Ok(EvalReport {
            test_images: n,
            uncompressed,
            codecs: codec_points,
            selected_codec,
            test_saturation,
            base,
            enhancement,
            points,
        })
    }
}
