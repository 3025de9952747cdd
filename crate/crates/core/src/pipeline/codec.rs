//! Image encode and the two decode modes over the trained models.

use super::config::Sizes;
use crate::base_extractor::Extractor;
use crate::bitstream::{demux, demux_base, mux};
use crate::enhancement_codec::{decode_enhancement, encode_enhancement, EnhancementModel, EnhancementPayload};
use crate::error::{DecodeError, Error, Result};
use crate::eval::Layer;
use crate::feature_codec::{entropy_decode, entropy_encode, FeatureCodec, SymbolModel};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;
use crate::texture_generator::Generator;
use crate::transforms::resize_bicubic;

/// A trained feature codec with its symbol model.
#[derive(Debug, Clone)]
pub struct SelectedCodec<T> {
    pub codec: FeatureCodec<T>,
    pub model: SymbolModel,
}

impl<T: Scalar> SelectedCodec<T> {
    /// Quantize and dequantize without entropy coding.
    pub fn f_rec(&self, f: &[T]) -> Result<Vec<T>> {
        self.codec.decode(&self.codec.encode(f)?)
    }
}

#[derive(Debug, Clone)]
pub struct CodecModels<T> {
    pub sizes: Sizes,
    pub extractor: Extractor<T>,
    pub codec: SelectedCodec<T>,
    pub generator: Generator<T>,
    /// Enhancement family; the decoder picks a member by payload id.
    pub enhancement: Vec<EnhancementModel<T>>,
}

/// Output of a full decode.
#[derive(Debug, Clone)]
pub struct Decoded<T> {
    pub image: ImageTensor<T>,
    /// `Enhancement` when the residual was applied, else `Base`.
    pub layer: Layer,
}

impl<T: Scalar> CodecModels<T> {
    pub fn new(
        sizes: Sizes,
        extractor: Extractor<T>,
        codec: SelectedCodec<T>,
        generator: Generator<T>,
        enhancement: Vec<EnhancementModel<T>>,
    ) -> Result<Self> {
        if generator.cfg.output_size != sizes.output {
            return Err(Error::Config(format!(
                "generator output {} differs from the coding size {}",
                generator.cfg.output_size, sizes.output
            )));
        }
        Ok(CodecModels {
            sizes,
            extractor,
            codec,
            generator,
            enhancement,
        })
    }

    fn check_image(&self, x: &ImageTensor<T>) -> Result<()> {
        let s = self.sizes.output;
        if x.dims() != (s, s, 3) {
            return Err(Error::invalid(format!("expected a {s}x{s} RGB image, got {:?}", x.dims())));
        }
        Ok(())
    }

    pub fn feature(&self, x: &ImageTensor<T>) -> Result<Vec<T>> {
        self.check_image(x)?;
        let s = self.sizes.input;
        if s == self.sizes.output {
            self.extractor.extract(x)
        } else {
            self.extractor.extract(&resize_bicubic(x, s, s).clamp01())
        }
    }

    /// Base reconstruction as the decoder will see it.
    pub fn x_base_of(&self, x: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        let f_rec = self.codec.f_rec(&self.feature(x)?)?;
        self.generator.x_base(&f_rec)
    }

    /// Index of the member trained closest (in log rate weight) to `rate_weight`.
    pub fn enhancement_for(&self, rate_weight: f64) -> Option<usize> {
        (0..self.enhancement.len()).min_by(|&a, &b| {
            let d = |i: usize| (self.enhancement[i].cfg.rate_weight.ln() - rate_weight.ln()).abs();
            d(a).total_cmp(&d(b))
        })
    }

    /// Encodes `x` (at the coding size). With `enhancement = None` only the
    /// base layer is written.
    pub fn encode_image(&self, x: &ImageTensor<T>, enhancement: Option<usize>) -> Result<Vec<u8>> {
        let f = self.feature(x)?;
        let code = self.codec.codec.encode(&f)?;
        let base = entropy_encode(&code, &self.codec.model)?;
        let enh = match enhancement {
            None => None,
            Some(i) => {
                let model = self
                    .enhancement
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("no enhancement model {i}; {} trained", self.enhancement.len())))?;
                let x_base = self.generator.x_base(&self.codec.codec.decode(&code)?)?;
                Some(encode_enhancement(x, &x_base, model)?.to_bytes())
            }
        };
        mux(&base, enh.as_deref(), x.height(), x.width())
    }

    fn base_feature(&self, base: &[u8]) -> Result<Vec<T>> {
        let code = entropy_decode(base, &self.codec.model, self.codec.codec.cfg.latent_dim())?;
        self.codec.codec.decode(&code)
    }

    /// Reconstructed feature from the base layer only; enhancement bytes
    /// are never read.
    pub fn decode_feature(&self, bytes: &[u8]) -> Result<Vec<T>> {
        let view = demux_base(bytes)?;
        self.base_feature(view.base)
    }

    /// Full image decode. Falls back to the base reconstruction, with a
    /// warning, when the stream has no enhancement layer.
    pub fn decode_image(&self, bytes: &[u8]) -> Result<Decoded<T>> {
        let s = demux(bytes)?;
        if (s.height, s.width) != (self.sizes.output, self.sizes.output) {
            return Err(DecodeError::Malformed(format!(
                "stream is {}x{} but the models decode {}x{}",
                s.height, s.width, self.sizes.output, self.sizes.output
            ))
            .into());
        }
        let x_base = self.generator.x_base(&self.base_feature(&s.base)?)?;
        let Some(enh) = s.enhancement else {
            log::warn!("stream has no enhancement layer; returning the base reconstruction");
            return Ok(Decoded {
                image: x_base,
                layer: Layer::Base,
            });
        };
        let payload = EnhancementPayload::from_bytes(&enh)?;
        let model = self.enhancement.iter().find(|m| m.id() == payload.model_id).ok_or_else(|| {
            Error::from(DecodeError::ModelMismatch {
                expected: self.enhancement.first().map_or(0, |m| m.id()),
                found: payload.model_id,
            })
        })?;
        Ok(Decoded {
            image: decode_enhancement(&payload, &x_base, model)?,
            layer: Layer::Enhancement,
        })
    }
}
