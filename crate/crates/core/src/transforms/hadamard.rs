use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

/// Block size used by [`satd`].
pub const SATD_BLOCK: usize = 8;

/// In-place unnormalized Walsh-Hadamard transform (Sylvester ordering).
fn fwht<T: Scalar>(v: &mut [T]) {
    let n = v.len();
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(h * 2) {
            for j in i..i + h {
                let (a, b) = (v[j], v[j + h]);
                v[j] = a + b;
                v[j + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// 2-D transform of a row-major `b x b` block in place: `H * X * H^T`.
fn transform_in_place<T: Scalar>(block: &mut [T], b: usize) {
    for row in block.chunks_mut(b) {
        fwht(row);
    }
    let mut col = vec![T::zero(); b];
    for x in 0..b {
        for y in 0..b {
            col[y] = block[y * b + x];
        }
        fwht(&mut col);
        for y in 0..b {
            block[y * b + x] = col[y];
        }
    }
}

/// Returns `H * block * H^T` for the `b x b` Sylvester Hadamard matrix with
/// `+-1` entries. Applying it twice scales the input by `b^2`.
pub fn hadamard_block_transform<T: Scalar>(block: &[T], b: usize) -> Result<Vec<T>> {
    if b == 0 || !b.is_power_of_two() {
        return Err(Error::invalid(format!(
            "hadamard block size {b} is not a power of two"
        )));
    }
    if block.len() != b * b {
        return Err(Error::invalid(format!(
            "hadamard block needs {} values, got {}",
            b * b,
            block.len()
        )));
    }
    let mut out = block.to_vec();
    transform_in_place(&mut out, b);
    Ok(out)
}

/// Sum of absolute Hadamard coefficients over one zero-padded plane.
///
/// When `grad` is given it receives `d(sum)/d(diff)` for every plane sample.
pub(crate) fn satd_plane<T: Scalar>(
    diff: &[T],
    height: usize,
    width: usize,
    b: usize,
    mut grad: Option<&mut [T]>,
) -> T {
    let mut total = T::zero();
    let mut block = vec![T::zero(); b * b];
    for by in (0..height).step_by(b) {
        for bx in (0..width).step_by(b) {
            for y in 0..b {
                for x in 0..b {
                    let (py, px) = (by + y, bx + x);
                    block[y * b + x] = if py < height && px < width {
                        diff[py * width + px]
                    } else {
                        T::zero()
                    };
                }
            }
            transform_in_place(&mut block, b);
            for v in block.iter_mut() {
                total += v.abs();
                // H is symmetric: d|H D H|/dD = H sign(T) H
                *v = if *v > T::zero() {
                    T::one()
                } else if *v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
            }
            if let Some(g) = grad.as_deref_mut() {
                transform_in_place(&mut block, b);
                for y in 0..b {
                    for x in 0..b {
                        let (py, px) = (by + y, bx + x);
                        if py < height && px < width {
                            g[py * width + px] = block[y * b + x];
                        }
                    }
                }
            }
        }
    }
    total
}

/// SATD with an explicit block size. See [`satd`].
pub fn satd_with_block<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>, block: usize) -> Result<T> {
    a.ensure_same_shape(b)?;
    if block == 0 || !block.is_power_of_two() {
        return Err(Error::invalid(format!(
            "satd block size {block} is not a power of two"
        )));
    }
    let (h, w, c) = a.dims();
    if h * w * c == 0 {
        return Ok(T::zero());
    }
    let diff = a.sub(b)?;
    let mut total = T::zero();
    for ch in 0..c {
        total += satd_plane(&diff.plane(ch), h, w, block, None);
    }
    Ok(total / T::from_usize(h * w * c).unwrap())
}

/// Sum of absolute 8x8 Hadamard coefficients of `a - b`, per channel with
/// zero-padded edge blocks, divided by the number of samples `H * W * C`.
pub fn satd<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<T> {
    satd_with_block(a, b, SATD_BLOCK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_power_of_two() {
        assert!(hadamard_block_transform(&[0.0f32; 9], 3).is_err());
        assert!(hadamard_block_transform(&[0.0f32; 36], 6).is_err());
    }

    #[test]
    fn two_by_two_impulse() {
        let out = hadamard_block_transform(&[1.0f64, 0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(out, vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_block_stays_zero() {
        let out = hadamard_block_transform(&[0.0f32; 64], 8).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_transform_is_involution() {
        let block: Vec<f64> = (0..64).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let once = hadamard_block_transform(&block, 8).unwrap();
        let twice = hadamard_block_transform(&once, 8).unwrap();
        for (a, b) in block.iter().zip(&twice) {
            assert!((a - b / 64.0).abs() < 1e-12);
        }
    }

    #[test]
    fn satd_shape_mismatch_is_error() {
        let a = ImageTensor::<f32>::zeros(8, 8, 1);
        let b = ImageTensor::<f32>::zeros(8, 16, 1);
        assert!(satd(&a, &b).is_err());
    }

    #[test]
    fn satd_plane_gradient_matches_finite_difference() {
        let (h, w) = (5usize, 11usize);
        let diff: Vec<f64> = (0..h * w)
            .map(|i| (i as f64 * 1.618).sin() + 0.1 * (i as f64 * 0.37).cos())
            .collect();
        let mut grad = vec![0.0; h * w];
        satd_plane(&diff, h, w, 8, Some(&mut grad));
        let eps = 1e-7;
        for i in 0..h * w {
            let mut p = diff.clone();
            p[i] += eps;
            let mut m = diff.clone();
            m[i] -= eps;
            let fd = (satd_plane(&p, h, w, 8, None) - satd_plane(&m, h, w, 8, None)) / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-5, "{i}: {fd} vs {}", grad[i]);
        }
    }
}
