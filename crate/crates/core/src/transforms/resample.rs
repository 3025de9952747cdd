//! Factor-2 bilinear resampling (half-pixel centers, clamped edges) and an
//! antialiased bicubic resizer.

use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

/// Bilinear 2x upsampling of a row-major `h x w` plane.
///
/// Each output sample is written as `a + t * (b - a)`, so constant regions
/// upsample to exactly the same constant.
pub(crate) fn upsample2x_plane<T: Scalar>(src: &[T], h: usize, w: usize) -> Vec<T> {
    let q = T::lit(0.25);
    let lerp = |a: T, b: T| a + q * (b - a);
    let (oh, ow) = (2 * h, 2 * w);
    let mut rows = vec![T::zero(); h * ow];
    for y in 0..h {
        let r = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let left = r[x.saturating_sub(1)];
            let right = r[(x + 1).min(w - 1)];
            rows[y * ow + 2 * x] = lerp(r[x], left);
            rows[y * ow + 2 * x + 1] = lerp(r[x], right);
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..h {
        let up = y.saturating_sub(1);
        let down = (y + 1).min(h - 1);
        for x in 0..ow {
            let c = rows[y * ow + x];
            out[(2 * y) * ow + x] = lerp(c, rows[up * ow + x]);
            out[(2 * y + 1) * ow + x] = lerp(c, rows[down * ow + x]);
        }
    }
    out
}

/// Adjoint of [`upsample2x_plane`]: maps a `2h x 2w` gradient back to `h x w`.
pub(crate) fn upsample2x_plane_adjoint<T: Scalar>(grad: &[T], h: usize, w: usize) -> Vec<T> {
    let (near, far) = (T::lit(0.75), T::lit(0.25));
    let ow = 2 * w;
    let mut rows = vec![T::zero(); h * ow];
    for y in 0..h {
        let up = y.saturating_sub(1);
        let down = (y + 1).min(h - 1);
        for x in 0..ow {
            let g0 = grad[(2 * y) * ow + x];
            let g1 = grad[(2 * y + 1) * ow + x];
            rows[y * ow + x] += near * (g0 + g1);
            rows[up * ow + x] += far * g0;
            rows[down * ow + x] += far * g1;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let g0 = rows[y * ow + 2 * x];
            let g1 = rows[y * ow + 2 * x + 1];
            out[y * w + x] += near * (g0 + g1);
            out[y * w + x.saturating_sub(1)] += far * g0;
            out[y * w + (x + 1).min(w - 1)] += far * g1;
        }
    }
    out
}

fn per_plane<T: Scalar>(
    img: &ImageTensor<T>,
    oh: usize,
    ow: usize,
    f: impl Fn(&[T]) -> Vec<T>,
) -> ImageTensor<T> {
    let c = img.channels();
    let planes: Vec<Vec<T>> = (0..c).map(|ch| f(&img.plane(ch))).collect();
    ImageTensor::from_fn(oh, ow, c, |y, x, ch| planes[ch][y * ow + x])
}

pub fn upsample2x_bilinear<T: Scalar>(img: &ImageTensor<T>) -> ImageTensor<T> {
    let (h, w, _) = img.dims();
    per_plane(img, 2 * h, 2 * w, |p| upsample2x_plane(p, h, w))
}

/// Bilinear 2x decimation with half-pixel centers, i.e. the mean of each
/// 2x2 cell. Height and width must be even.
pub fn downsample2x_bilinear<T: Scalar>(img: &ImageTensor<T>) -> ImageTensor<T> {
    let (h, w, c) = img.dims();
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let q = T::lit(0.25);
    ImageTensor::from_fn(h / 2, w / 2, c, |y, x, ch| {
        let s = img.get(2 * y, 2 * x, ch)
            + img.get(2 * y, 2 * x + 1, ch)
            + img.get(2 * y + 1, 2 * x, ch)
            + img.get(2 * y + 1, 2 * x + 1, ch);
        s * q
    })
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Per output index: first source index and normalized tap weights.
fn cubic_taps(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    let support = 2.0 * scale.max(1.0);
    let kscale = scale.max(1.0);
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = ((center - support).floor() as isize).max(0) as usize;
            let hi = ((center + support).ceil() as usize).min(src);
            let mut ws: Vec<f64> = (lo..hi)
                .map(|i| cubic((i as f64 + 0.5 - center) / kscale))
                .collect();
            let sum: f64 = ws.iter().sum();
            for v in ws.iter_mut() {
                *v /= sum;
            }
            (lo, ws)
        })
        .collect()
}

/// Separable bicubic (Keys, a = -0.5) resize. Downscaling widens the kernel
/// by the scale factor so the result is antialiased.
pub fn resize_bicubic<T: Scalar>(img: &ImageTensor<T>, out_h: usize, out_w: usize) -> ImageTensor<T> {
    let (h, w, c) = img.dims();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let tx = cubic_taps(w, out_w);
    let ty = cubic_taps(h, out_h);
    let mut tmp = vec![0.0f64; h * out_w * c];
    for y in 0..h {
        for (ox, (lo, ws)) in tx.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, wt) in ws.iter().enumerate() {
                    acc += wt * img.get(y, lo + k, ch).as_f64();
                }
                tmp[(y * out_w + ox) * c + ch] = acc;
            }
        }
    }
    ImageTensor::from_fn(out_h, out_w, c, |oy, ox, ch| {
        let (lo, ws) = &ty[oy];
        let mut acc = 0.0;
        for (k, wt) in ws.iter().enumerate() {
            acc += wt * tmp[((lo + k) * out_w + ox) * c + ch];
        }
        T::lit(acc)
    })
}
