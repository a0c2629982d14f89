//! Channels-last convolutions with zero "same" padding, and the index maps
//! behind im2col, pixel shuffle and nearest-neighbour upscaling.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, PAD_INDEX};

fn map_dims(x: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *x {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::Shape(format!("{op} expects [B,H,W,C], got {x:?}"))),
    }
}

/// Neighbour `(y + dy - 1, x + dx - 1)` if inside the map.
#[inline]
fn tap(y: usize, x: usize, dy: usize, dx: usize, h: usize, w: usize) -> Option<(usize, usize)> {
    let (yy, xx) = ((y + dy).checked_sub(1)?, (x + dx).checked_sub(1)?);
    (yy < h && xx < w).then_some((yy, xx))
}

/// `x: [B,H,W,C]`, `kernel: [3,3,C]`.
pub fn depthwise3x3<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = map_dims(x.dims(), "depthwise3x3")?;
    if kernel.dims() != [3, 3, c] {
        return Err(Error::dims("depthwise3x3 kernel", kernel.dims(), &[3, 3, c]));
    }
    let (xs, ks) = (x.as_slice(), kernel.as_slice());
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for y in 0..h {
            for xi in 0..w {
                let o = ((bi * h + y) * w + xi) * c;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let Some((yy, xx)) = tap(y, xi, dy, dx, h, w) else {
                            continue;
                        };
                        let s = ((bi * h + yy) * w + xx) * c;
                        let kk = (dy * 3 + dx) * c;
                        for ch in 0..c {
                            out[o + ch] = out[o + ch] + xs[s + ch] * ks[kk + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x.dims().to_vec(), out)
}

/// Gradients of [`depthwise3x3`] wrt input and kernel.
pub fn depthwise3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, h, w, c) = map_dims(x.dims(), "depthwise3x3_backward")?;
    if grad.dims() != x.dims() {
        return Err(Error::dims("depthwise3x3 grad", grad.dims(), x.dims()));
    }
    let (xs, ks, gs) = (x.as_slice(), kernel.as_slice(), grad.as_slice());
    let mut gx = vec![T::zero(); x.numel()];
    let mut gk = vec![T::zero(); kernel.numel()];
    for bi in 0..b {
        for y in 0..h {
            for xi in 0..w {
                let o = ((bi * h + y) * w + xi) * c;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let Some((yy, xx)) = tap(y, xi, dy, dx, h, w) else {
                            continue;
                        };
                        let s = ((bi * h + yy) * w + xx) * c;
                        let kk = (dy * 3 + dx) * c;
                        for ch in 0..c {
                            gx[s + ch] = gx[s + ch] + gs[o + ch] * ks[kk + ch];
                            gk[kk + ch] = gk[kk + ch] + gs[o + ch] * xs[s + ch];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.dims().to_vec(), gx)?,
        Tensor::new(kernel.dims().to_vec(), gk)?,
    ))
}

/// Gather index from `[B,H,W,C]` to 3x3 patches `[B,H,W,9C]`, tap-major
/// (`(dy, dx, c)`), padding taps at [`PAD_INDEX`].
pub fn im2col3x3_index(b: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * h * w * 9 * c);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                for dy in 0..3 {
                    for dx in 0..3 {
                        match tap(y, x, dy, dx, h, w) {
                            Some((yy, xx)) => {
                                let s = ((bi * h + yy) * w + xx) * c;
                                idx.extend(s..s + c);
                            }
                            None => idx.extend(std::iter::repeat_n(PAD_INDEX, c)),
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Full 3x3 convolution; `weight: [9 C_in, C_out]` in tap-major row order.
pub fn conv3x3<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (b, h, w, c) = map_dims(x.dims(), "conv3x3")?;
    let cols = x.gather(&im2col3x3_index(b, h, w, c), [b, h, w, 9 * c])?;
    let y = cols.matmul(weight)?;
    match bias {
        Some(bb) => y.add_bias(bb),
        None => Ok(y),
    }
}

/// Gather index for pixel shuffle `[B,H,W,r^2 C] -> [B,rH,rW,C]`:
/// `out[b, y r + i, x r + j, c] = in[b, y, x, c r^2 + i r + j]`.
pub fn pixel_shuffle_index(b: usize, h: usize, w: usize, c: usize, r: usize) -> Vec<usize> {
    let (oh, ow, cin) = (h * r, w * r, c * r * r);
    let mut idx = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, i, x, j) = (oy / r, oy % r, ox / r, ox % r);
                let base = ((bi * h + y) * w + x) * cin;
                idx.extend((0..c).map(|ch| base + ch * r * r + i * r + j));
            }
        }
    }
    idx
}

pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (b, h, w, cin) = map_dims(x.dims(), "pixel_shuffle")?;
    if r == 0 || cin % (r * r) != 0 {
        return Err(Error::Shape(format!("{cin} channels do not shuffle by {r}")));
    }
    let c = cin / (r * r);
    x.gather(&pixel_shuffle_index(b, h, w, c, r), [b, h * r, w * r, c])
}

/// Gather index for nearest-neighbour upscaling by `r`.
pub fn nearest_index(b: usize, h: usize, w: usize, c: usize, r: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * h * r * w * r * c);
    for bi in 0..b {
        for oy in 0..h * r {
            for ox in 0..w * r {
                let base = ((bi * h + oy / r) * w + ox / r) * c;
                idx.extend(base..base + c);
            }
        }
    }
    idx
}

pub fn upscale_nearest<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = map_dims(x.dims(), "upscale_nearest")?;
    x.gather(&nearest_index(b, h, w, c, r), [b, h * r, w * r, c])
}
