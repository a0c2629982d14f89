use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Mean over images; `f64::INFINITY` when every image matches exactly.
    pub psnr: f64,
    pub ssim: f64,
    /// `(psnr, ssim)` per image.
    pub per_image: Vec<(f64, f64)>,
}

/// Rounds `[0, 1]` values to the nearest 8-bit level, as `0..=255` floats.
pub fn to_u8_domain<T: Scalar>(x: T) -> f64 {
    (x.as_f64().clamp(0.0, 1.0) * 255.0).round()
}

/// Luma from an `[H, W, C]` image (C = 1 or 3) in the 8-bit domain.
/// Full-range BT.601 weights.
pub fn rgb_to_y<T: Scalar>(img: &Tensor<T>) -> Result<Vec<f64>> {
    let c = match *img.dims() {
        [_, _, c @ (1 | 3)] => c,
        ref d => return Err(Error::Shape(format!("expected [H,W,1|3], got {d:?}"))),
    };
    let s = img.as_slice();
    Ok(if c == 1 {
        s.iter().map(|&v| to_u8_domain(v)).collect()
    } else {
        s.chunks_exact(3)
            .map(|p| 0.299 * to_u8_domain(p[0]) + 0.587 * to_u8_domain(p[1]) + 0.114 * to_u8_domain(p[2]))
            .collect()
    })
}

/// Splits `[H,W,C]` or `[B,H,W,C]` into per-image cropped luma planes.
fn cropped_planes<T: Scalar>(img: &Tensor<T>, border: usize) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let (b, h, w, c) = match *img.dims() {
        [h, w, c] => (1, h, w, c),
        [b, h, w, c] => (b, h, w, c),
        ref d => return Err(Error::Shape(format!("expected an image, got {d:?}"))),
    };
    if h <= 2 * border || w <= 2 * border {
        return Err(Error::Shape(format!("border {border} leaves nothing of {h}x{w}")));
    }
    let per = h * w * c;
    (0..b)
        .map(|i| {
            let one = Tensor::new([h, w, c], img.as_slice()[i * per..(i + 1) * per].to_vec())?;
            let y = rgb_to_y(&one)?;
            let (ch, cw) = (h - 2 * border, w - 2 * border);
            let mut out = Vec::with_capacity(ch * cw);
            for r in border..h - border {
                out.extend_from_slice(&y[r * w + border..r * w + w - border]);
            }
            Ok((ch, cw, out))
        })
        .collect()
}

/// `(height, width, values)` of one cropped Y plane.
type Plane = (usize, usize, Vec<f64>);

fn pair_planes<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>, border: usize) -> Result<Vec<(Plane, Plane)>> {
    if sr.dims() != hr.dims() {
        return Err(Error::dims("eval", sr.dims(), hr.dims()));
    }
    Ok(cropped_planes(sr, border)?.into_iter().zip(cropped_planes(hr, border)?).collect())
}

fn psnr_plane(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Mean SSIM over all valid 11x11 window positions.
fn ssim_plane(h: usize, w: usize, a: &[f64], b: &[f64]) -> Result<f64> {
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Shape(format!("ssim needs at least {k}x{k}, got {h}x{w}")));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 255.0).powi(2);
    let c2 = (SSIM_K2 * 255.0).powi(2);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..k {
                for dx in 0..k {
                    let wgt = g[dy] * g[dx];
                    let i = (y + dy) * w + x + dx;
                    ma += wgt * a[i];
                    mb += wgt * b[i];
                    saa += wgt * a[i] * a[i];
                    sbb += wgt * b[i] * b[i];
                    sab += wgt * a[i] * b[i];
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

fn summarise(per_image: Vec<(f64, f64)>) -> EvalResult {
    let n = per_image.len() as f64;
    EvalResult {
        psnr: per_image.iter().map(|p| p.0).sum::<f64>() / n,
        ssim: per_image.iter().map(|p| p.1).sum::<f64>() / n,
        per_image,
    }
}

/// PSNR on the luma channel after cropping `border` pixels from each side.
/// The `ssim` fields are left at NaN; use [`ssim_y`] for both metrics.
pub fn psnr_y<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>, border: usize) -> Result<EvalResult> {
    let per = pair_planes(sr, hr, border)?
        .into_iter()
        .map(|((_, _, a), (_, _, b))| (psnr_plane(&a, &b), f64::NAN))
        .collect();
    Ok(summarise(per))
}

/// PSNR and SSIM on the cropped luma channel.
pub fn ssim_y<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>, border: usize) -> Result<EvalResult> {
    let per = pair_planes(sr, hr, border)?
        .into_iter()
        .map(|((h, w, a), (_, _, b))| Ok((psnr_plane(&a, &b), ssim_plane(h, w, &a, &b)?)))
        .collect::<Result<_>>()?;
    Ok(summarise(per))
}
