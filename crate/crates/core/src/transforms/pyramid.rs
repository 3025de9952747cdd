use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

use super::resample::{downsample2x_bilinear, upsample2x_bilinear};

/// Gaussian pyramid, coarsest level first. Each level doubles the previous
/// level's height and width.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid<T> {
    levels: Vec<ImageTensor<T>>,
}

impl<T: Scalar> Pyramid<T> {
    pub fn from_levels(levels: Vec<ImageTensor<T>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("pyramid needs at least one level"));
        }
        for pair in levels.windows(2) {
            let (h, w, c) = pair[0].dims();
            if pair[1].dims() != (2 * h, 2 * w, c) {
                return Err(Error::invalid(format!(
                    "pyramid level {:?} does not double {:?}",
                    pair[1].dims(),
                    pair[0].dims()
                )));
            }
        }
        Ok(Pyramid { levels })
    }

    pub fn levels(&self) -> &[ImageTensor<T>] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn coarsest(&self) -> &ImageTensor<T> {
        &self.levels[0]
    }

    pub fn finest(&self) -> &ImageTensor<T> {
        self.levels.last().expect("non-empty pyramid")
    }
}

/// Builds a `levels`-deep pyramid of `x` plus the Laplacian detail bands.
///
/// `details[i]` is the band that lifts level `i` to level `i + 1`:
/// `levels[i + 1] - up(levels[i])`.
pub fn pyramid_build<T: Scalar>(
    x: &ImageTensor<T>,
    levels: usize,
) -> Result<(Pyramid<T>, Vec<ImageTensor<T>>)> {
    if levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    let f = 1usize << (levels - 1);
    let (h, w, _) = x.dims();
    if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible by 2^{}",
            levels - 1
        )));
    }
    let mut fine_to_coarse = vec![x.clone()];
    for _ in 1..levels {
        let next = downsample2x_bilinear(fine_to_coarse.last().unwrap());
        fine_to_coarse.push(next);
    }
    fine_to_coarse.reverse();
    let details = fine_to_coarse
        .windows(2)
        .map(|pair| pair[1].sub(&upsample2x_bilinear(&pair[0])))
        .collect::<Result<Vec<_>>>()?;
    Ok((Pyramid::from_levels(fine_to_coarse)?, details))
}

/// Inverse of [`pyramid_build`]: upsample the coarsest level and add back
/// each stored detail band.
pub fn pyramid_collapse<T: Scalar>(p: &Pyramid<T>, details: &[ImageTensor<T>]) -> Result<ImageTensor<T>> {
    if details.len() + 1 != p.len() {
        return Err(Error::invalid(format!(
            "pyramid has {} levels but {} detail bands",
            p.len(),
            details.len()
        )));
    }
    let mut cur = p.coarsest().clone();
    for band in details {
        cur = upsample2x_bilinear(&cur).add(band)?;
    }
    Ok(cur)
}
