use serde::{Deserialize, Serialize};

use crate::error::{DecodeError, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

/// Residual range carried next to the enhancement payload. Stored as `f32`
/// so encoder and decoder see the same bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSideInfo {
    pub r_min: f32,
    pub r_max: f32,
}

impl NormalizationSideInfo {
    pub const ENCODED_LEN: usize = 8;

    pub fn is_degenerate(&self) -> bool {
        self.r_max == self.r_min
    }

    /// Two little-endian IEEE-754 `f32`: `r_min` then `r_max`.
    pub fn to_bytes(&self) -> [u8; 8] {
        let mut out = [0u8; 8];
        out[..4].copy_from_slice(&self.r_min.to_le_bytes());
        out[4..].copy_from_slice(&self.r_max.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() < Self::ENCODED_LEN {
            return Err(DecodeError::Truncated("normalization side info"));
        }
        let r_min = f32::from_le_bytes(bytes[..4].try_into().unwrap());
        let r_max = f32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if !r_min.is_finite() || !r_max.is_finite() || r_min > r_max {
            return Err(DecodeError::Malformed(format!(
                "invalid residual range [{r_min}, {r_max}]"
            )));
        }
        Ok(NormalizationSideInfo { r_min, r_max })
    }
}

/// Maps a residual into `[0, 1]` with its own min and max.
///
/// The range is rounded to `f32` before use. A constant residual yields an
/// all-zero image with side info `(c, c)`.
pub fn minmax_normalize<T: Scalar>(resi: &ImageTensor<T>) -> Result<(ImageTensor<T>, NormalizationSideInfo)> {
    if !resi.data().iter().all(|v| v.is_finite()) {
        return Err(crate::Error::invalid("residual contains non-finite values"));
    }
    let (lo, hi) = resi.min_max();
    let side = NormalizationSideInfo {
        r_min: lo.as_f64() as f32,
        r_max: hi.as_f64() as f32,
    };
    if side.is_degenerate() || resi.data().is_empty() {
        let (h, w, c) = resi.dims();
        return Ok((ImageTensor::zeros(h, w, c), side));
    }
    let (lo, hi) = (T::lit(side.r_min as f64), T::lit(side.r_max as f64));
    let span = hi - lo;
    let norm = resi.map(|v| ((v - lo) / span).max(T::zero()).min(T::one()));
    Ok((norm, side))
}

/// `norm * (r_max - r_min) + r_min`.
pub fn minmax_denormalize<T: Scalar>(norm: &ImageTensor<T>, side: &NormalizationSideInfo) -> ImageTensor<T> {
    let lo = T::lit(side.r_min as f64);
    let span = T::lit(side.r_max as f64) - lo;
    norm.map(|v| v * span + lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_map_to_unit_interval() {
        let r = ImageTensor::<f32>::from_vec(1, 3, 1, vec![-0.5, 0.0, 0.5]).unwrap();
        let (n, side) = minmax_normalize(&r).unwrap();
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
        assert_eq!((side.r_min, side.r_max), (-0.5, 0.5));
    }

    #[test]
    fn constant_residual_is_degenerate() {
        let r = ImageTensor::<f32>::filled(4, 4, 3, 0.3);
        let (n, side) = minmax_normalize(&r).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
        assert_eq!((side.r_min, side.r_max), (0.3, 0.3));
        let back = minmax_denormalize(&n, &side);
        assert!(back.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn unit_side_info_is_identity() {
        let n = ImageTensor::<f32>::from_fn(3, 3, 1, |y, x, _| (y * 3 + x) as f32 / 8.0);
        let side = NormalizationSideInfo { r_min: 0.0, r_max: 1.0 };
        assert_eq!(minmax_denormalize(&n, &side), n);
    }

    #[test]
    fn side_info_bytes_round_trip_and_reject_garbage() {
        let s = NormalizationSideInfo { r_min: -0.123_456_7, r_max: 0.987_654_3 };
        assert_eq!(NormalizationSideInfo::from_bytes(&s.to_bytes()).unwrap(), s);
        assert!(NormalizationSideInfo::from_bytes(&[0u8; 5]).is_err());
        let bad = NormalizationSideInfo { r_min: 1.0, r_max: 0.0 }.to_bytes();
        assert!(NormalizationSideInfo::from_bytes(&bad).is_err());
    }
}
