//! im2col / col2im kernels backing the `Conv2d` tape op.

use ndarray::{Array2, ArrayView3, ArrayViewMut3};

use super::Scalar;

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one image `[C, H, W]` into a patch matrix `[C*kh*kw, Ho*Wo]`.
/// Out-of-bounds taps read as zero.
pub fn im2col<T: Scalar>(
    x: &ArrayView3<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (c_in, h, w) = x.dim();
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    let mut cols = Array2::<T>::zeros((c_in * kh * kw, ho * wo));
    for c in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = x[[c, iy, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a patch-gradient matrix back onto the input image, accumulating
/// overlapping taps.
pub fn col2im<T: Scalar>(
    cols: &Array2<T>,
    dx: &mut ArrayViewMut3<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (c_in, h, w) = dx.dim();
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    debug_assert_eq!(cols.dim(), (c_in * kh * kw, ho * wo));
    for c in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[c, iy, ix as usize]] = dx[[c, iy, ix as usize]] + cols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}
