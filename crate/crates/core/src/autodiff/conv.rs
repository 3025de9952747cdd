//! im2col based 2-D convolution and its transpose, one image at a time.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn forward(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let out = |n: usize| (n + 2 * pad - kernel) / stride + 1;
        ConvGeom {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: out(in_h),
            out_w: out(in_w),
        }
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// `[C, H, W]` -> `[C*k*k, OH*OW]`.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, l) = (g.kernel, g.out_len());
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns into `[C, H, W]`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (k, l) = (g.kernel, g.out_len());
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of one image. `w` is `[O, C, k, k]`, output `[O, OH*OW]`.
pub(crate) fn conv_forward<T: Scalar>(x: &[T], w: &[T], out_ch: usize, g: &ConvGeom, out: &mut [T], cols: &mut Vec<T>) {
    let (p, l) = (g.patch_len(), g.out_len());
    cols.resize(p * l, T::zero());
    im2col(x, g, cols);
    T::gemm(out_ch, p, l, T::one(), w, p as isize, 1, cols, l as isize, 1, T::zero(), out, l as isize, 1);
}

/// Accumulates weight and input gradients of [`conv_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    out_ch: usize,
    g: &ConvGeom,
    dout: &[T],
    dw: Option<&mut [T]>,
    dx: Option<&mut [T]>,
    cols: &mut Vec<T>,
) {
    let (p, l) = (g.patch_len(), g.out_len());
    cols.resize(p * l, T::zero());
    if let Some(dw) = dw {
        im2col(x, g, cols);
        T::gemm(out_ch, l, p, T::one(), dout, l as isize, 1, cols, 1, l as isize, T::one(), dw, p as isize, 1);
    }
    if let Some(dx) = dx {
        T::gemm(p, out_ch, l, T::one(), w, 1, p as isize, dout, l as isize, 1, T::zero(), cols, l as isize, 1);
        col2im(cols, g, dx);
    }
}

/// Transposed convolution of one image. `x` is `[I, H*W]`, `w` is `[I, O, k, k]`,
/// `g` describes the matching forward convolution from the `[O, OH, OW]`
/// output back to `H x W`.
pub(crate) fn conv_t_forward<T: Scalar>(x: &[T], w: &[T], in_ch: usize, g: &ConvGeom, out: &mut [T], cols: &mut Vec<T>) {
    let (p, l) = (g.patch_len(), g.out_len());
    cols.resize(p * l, T::zero());
    T::gemm(p, in_ch, l, T::one(), w, 1, p as isize, x, l as isize, 1, T::zero(), cols, l as isize, 1);
    out.iter_mut().for_each(|v| *v = T::zero());
    col2im(cols, g, out);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    in_ch: usize,
    g: &ConvGeom,
    dout: &[T],
    dw: Option<&mut [T]>,
    dx: Option<&mut [T]>,
    cols: &mut Vec<T>,
) {
    let (p, l) = (g.patch_len(), g.out_len());
    cols.resize(p * l, T::zero());
    im2col(dout, g, cols);
    if let Some(dx) = dx {
        T::gemm(in_ch, p, l, T::one(), w, p as isize, 1, cols, l as isize, 1, T::one(), dx, l as isize, 1);
    }
    if let Some(dw) = dw {
        T::gemm(in_ch, l, p, T::one(), x, l as isize, 1, cols, 1, l as isize, T::one(), dw, p as isize, 1);
    }
}
