use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

fn hwc(img: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    match *img.dims() {
        [h, w, c] => Ok((h, w, c)),
        ref d => Err(Error::Shape(format!("expected an [H,W,C] image, got {d:?}"))),
    }
}

/// One RGB image: a smooth low-frequency field times a repeated stripe
/// pattern blending two colours. Values are multiples of 1/255.
pub fn synthetic_image<R: Rng + ?Sized>(side: usize, rng: &mut R) -> Tensor<f32> {
    let s = side as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let period = rng.gen_range(0.5 * s..2.0 * s);
            let theta = rng.gen_range(0.0..TAU);
            (theta.cos() / period, theta.sin() / period, rng.gen_range(0.0..TAU), rng.gen_range(0.1..0.3))
        })
        .collect();
    let period = rng.gen_range(3.0..8.0);
    let theta = rng.gen_range(0.0..TAU);
    let (sx, sy, sp) = (theta.cos() / period, theta.sin() / period, rng.gen_range(0.0..TAU));
    let sharp = rng.gen_range(1.0..6.0);
    let ca: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
    let cb: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
    Tensor::from_fn([side, side, 3], |i| {
        let (y, x, c) = ((i / 3 / side) as f64, ((i / 3) % side) as f64, i % 3);
        let smooth: f64 = waves.iter().map(|&(fx, fy, ph, a)| a * (TAU * (fx * x + fy * y) + ph).cos()).sum();
        let stripe = 0.5 + 0.5 * (sharp * (TAU * (sx * x + sy * y) + sp).sin()).tanh();
        let v = (ca[c] * stripe + cb[c] * (1.0 - stripe)) * (1.0 + smooth);
        ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
    })
    .expect("dims match generator")
}

/// Mean over non-overlapping `r`x`r` blocks.
pub fn box_downsample<T: Scalar>(img: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(img)?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by {r}")));
    }
    let (oh, ow) = (h / r, w / r);
    let src = img.as_slice();
    let norm = (r * r) as f64;
    // f64 accumulation is exact for 8-bit data, so the result does not
    // depend on summation order (and so commutes with flips)
    Tensor::from_fn([oh, ow, c], |i| {
        let (y, x, ch) = (i / c / ow, (i / c) % ow, i % c);
        let mut acc = 0.0;
        for dy in 0..r {
            for dx in 0..r {
                acc += src[((y * r + dy) * w + x * r + dx) * c + ch].as_f64();
            }
        }
        lit::<T>(acc / norm)
    })
}

pub fn flip_horizontal<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, w, c) = hwc(img)?;
    let src = img.as_slice();
    Tensor::from_fn(img.dims().to_vec(), |i| {
        let (y, x, ch) = (i / c / w, (i / c) % w, i % c);
        src[(y * w + w - 1 - x) * c + ch]
    })
}

/// Paired HR/LR images generated from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub scale: usize,
    pub hr: Vec<Tensor<f32>>,
    pub lr: Vec<Tensor<f32>>,
}

impl SyntheticSet {
    pub fn new(samples: usize, hr_side: usize, scale: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hr: Vec<_> = (0..samples).map(|_| synthetic_image(hr_side, &mut rng)).collect();
        let lr = hr.iter().map(|h| box_downsample(h, scale)).collect::<Result<_>>()?;
        Ok(Self { scale, hr, lr })
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }
}

/// Draws aligned random LR/HR patch batches from a [`SyntheticSet`].
#[derive(Debug, Clone)]
pub struct PairSampler {
    rng: ChaCha8Rng,
    patch: usize,
    batch: usize,
}

impl PairSampler {
    pub fn new(seed: u64, patch: usize, batch: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            patch,
            batch,
        }
    }

    /// Returns `(lr [B,p,p,C], hr [B,p r,p r,C])`.
    pub fn next_batch(&mut self, set: &SyntheticSet) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if set.is_empty() {
            return Err(Error::Config("empty dataset".into()));
        }
        let (p, r) = (self.patch, set.scale);
        let (lh, lw, c) = hwc(&set.lr[0])?;
        if p > lh || p > lw {
            return Err(Error::Config(format!("patch {p} larger than LR image {lh}x{lw}")));
        }
        let mut lo = Vec::with_capacity(self.batch * p * p * c);
        let mut hi = Vec::with_capacity(self.batch * p * p * r * r * c);
        for _ in 0..self.batch {
            let k = self.rng.gen_range(0..set.len());
            let oy = self.rng.gen_range(0..=lh - p);
            let ox = self.rng.gen_range(0..=lw - p);
            let (l, h) = (set.lr[k].as_slice(), set.hr[k].as_slice());
            for y in 0..p {
                let row = ((oy + y) * lw + ox) * c;
                lo.extend_from_slice(&l[row..row + p * c]);
            }
            let hw = lw * r;
            for y in 0..p * r {
                let row = ((oy * r + y) * hw + ox * r) * c;
                hi.extend_from_slice(&h[row..row + p * r * c]);
            }
        }
        Ok((
            Tensor::new([self.batch, p, p, c], lo)?,
            Tensor::new([self.batch, p * r, p * r, c], hi)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_downsample_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::<f64>::uniform([6, 4, 2], 1.0, &mut rng).unwrap();
        let d = box_downsample(&img, 2).unwrap();
        assert_eq!(d.dims(), &[3, 2, 2]);
        for y in 0..3 {
            for x in 0..2 {
                for c in 0..2 {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += img.get(&[2 * y + dy, 2 * x + dx, c]).unwrap();
                        }
                    }
                    assert!((d.get(&[y, x, c]).unwrap() - s / 4.0).abs() < 1e-15);
                }
            }
        }
        assert!(box_downsample(&img, 4).is_err());
    }

    #[test]
    fn downsample_commutes_with_flip() {
        let img = synthetic_image(12, &mut ChaCha8Rng::seed_from_u64(1));
        for r in [2, 3, 4] {
            let a = box_downsample(&flip_horizontal(&img).unwrap(), r).unwrap();
            let b = flip_horizontal(&box_downsample(&img, r).unwrap()).unwrap();
            assert!(a.bitwise_eq(&b));
        }
    }

    #[test]
    fn synthetic_set_is_seeded_and_quantised() {
        let a = SyntheticSet::new(3, 16, 2, 5).unwrap();
        assert_eq!(a, SyntheticSet::new(3, 16, 2, 5).unwrap());
        assert_ne!(a, SyntheticSet::new(3, 16, 2, 6).unwrap());
        for h in &a.hr {
            assert!(h.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(h.as_slice().iter().all(|&v| ((v * 255.0).round() - v * 255.0).abs() < 1e-4));
        }
        assert_eq!(a.lr[0].dims(), &[8, 8, 3]);
    }

    #[test]
    fn sampler_patches_stay_aligned() {
        let set = SyntheticSet::new(4, 16, 2, 9).unwrap();
        let mut s = PairSampler::new(3, 4, 5);
        let (lo, hi) = s.next_batch(&set).unwrap();
        assert_eq!((lo.dims(), hi.dims()), (&[5, 4, 4, 3][..], &[5, 8, 8, 3][..]));
        // the LR patch is the box-downsampled HR patch
        for b in 0..5 {
            let h = Tensor::new([8, 8, 3], hi.as_slice()[b * 192..(b + 1) * 192].to_vec()).unwrap();
            let l = Tensor::new([4, 4, 3], lo.as_slice()[b * 48..(b + 1) * 48].to_vec()).unwrap();
            assert!(box_downsample(&h, 2).unwrap().max_abs_diff(&l).unwrap() < 1e-6);
        }
        assert!(PairSampler::new(0, 9, 1).next_batch(&set).is_err());
    }
}
