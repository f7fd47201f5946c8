//! Dense kernels behind the tape ops: im2col convolution and stride-1
//! max pooling. All loops are plain and deterministic; matrix products go
//! through `ndarray`'s GEMM.

use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};

use super::Real;

/// Output spatial size of a convolution with floor semantics.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Unfolds one image (C, H, W) into (C·kh·kw, OH·OW) patch columns.
pub fn im2col<F: Real>(
    x: &ArrayView3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<F>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Transpose of [`im2col`]: folds patch-column gradients back onto the image.
pub fn col2im<F: Real>(
    cols: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut out = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[[ci, iy as usize, ix as usize]] =
                            out[[ci, iy as usize, ix as usize]] + cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    out
}

/// Stride-1 max pool over a (kh, kw) window centred via (kh/2, kw/2)
/// padding; out-of-bounds positions are ignored (treated as −∞). Output
/// shape equals input shape.
pub fn max_pool_s1<F: Real>(x: &ArrayView4<F>, kh: usize, kw: usize) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                let y0 = y.saturating_sub(ph);
                let y1 = (y + kh - ph).min(h);
                for x_ in 0..w {
                    let x0 = x_.saturating_sub(pw);
                    let x1 = (x_ + kw - pw).min(w);
                    let mut best = x[[bi, ci, y0, x0]];
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let v = x[[bi, ci, iy, ix]];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[[bi, ci, y, x_]] = best;
                }
            }
        }
    }
    out
}

/// Backward of [`max_pool_s1`]: routes each output gradient to the first
/// maximal input position of its window (raster order, deterministic).
pub fn max_pool_s1_backward<F: Real>(
    x: &ArrayView4<F>,
    grad_out: &ArrayView4<F>,
    kh: usize,
    kw: usize,
) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let (ph, pw) = (kh / 2, kw / 2);
    let mut grad_in = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                let y0 = y.saturating_sub(ph);
                let y1 = (y + kh - ph).min(h);
                for x_ in 0..w {
                    let x0 = x_.saturating_sub(pw);
                    let x1 = (x_ + kw - pw).min(w);
                    let mut best = x[[bi, ci, y0, x0]];
                    let mut at = (y0, x0);
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let v = x[[bi, ci, iy, ix]];
                            if v > best {
                                best = v;
                                at = (iy, ix);
                            }
                        }
                    }
                    grad_in[[bi, ci, at.0, at.1]] =
                        grad_in[[bi, ci, at.0, at.1]] + grad_out[[bi, ci, y, x_]];
                }
            }
        }
    }
    grad_in
}

/// Area-average downsample of (B, C, H, W) by integer factors.
pub fn area_downsample<F: Real>(x: &ArrayView4<F>, fy: usize, fx: usize) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    assert!(h % fy == 0 && w % fx == 0, "downsample factors must divide dims");
    let (oh, ow) = (h / fy, w / fx);
    let norm = F::from_usize(fy * fx).unwrap();
    let mut out = Array4::<F>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = F::zero();
                    for iy in oy * fy..(oy + 1) * fy {
                        for ix in ox * fx..(ox + 1) * fx {
                            acc = acc + x[[bi, ci, iy, ix]];
                        }
                    }
                    out[[bi, ci, oy, ox]] = acc / norm;
                }
            }
        }
    }
    out
}

/// Sums a (B, C, H, W) gradient over the batch and spatial axes into (C,).
pub fn sum_over_bhw<F: Real>(g: &ArrayView4<F>) -> ndarray::Array1<F> {
    g.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1))
}
