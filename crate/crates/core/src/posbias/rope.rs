//! Axial 2D rotary position embedding.
//!
//! The first half of each head's channels is rotated by the token's row,
//! the second half by its column. Within a half, channels `(2t, 2t + 1)`
//! form a plane rotated by `pos * theta_t`.

use super::geometry::WindowGeometry;
use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

pub const ROPE_BASE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    /// `[head_dim / 4]` per-axis frequencies.
    pub theta: Vec<f64>,
}

impl RopeConfig {
    /// `theta_t = 100^(-2t / (D/2))` for `t < D/4`.
    pub fn axial(head_dim: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "rope needs a head dim divisible by 4, got {head_dim}"
            )));
        }
        let half = (head_dim / 2) as f64;
        let theta = (0..head_dim / 4)
            .map(|t| ROPE_BASE.powf(-2.0 * t as f64 / half))
            .collect();
        Ok(Self { head_dim, theta })
    }
}

/// Precomputed cos/sin per `(token, plane)` for one window size.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable<T> {
    tokens: usize,
    head_dim: usize,
    /// `[N, D/2]`, plane order: y planes then x planes.
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(geom: &WindowGeometry<T>, cfg: &RopeConfig) -> Result<Self> {
        let positions: Vec<(usize, usize)> = (0..geom.tokens()).map(|t| geom.position(t)).collect();
        Self::from_positions(&positions, cfg)
    }

    /// Table for an arbitrary list of integer `(y, x)` positions.
    pub fn from_positions(positions: &[(usize, usize)], cfg: &RopeConfig) -> Result<Self> {
        if !cfg.head_dim.is_multiple_of(4) || cfg.theta.len() != cfg.head_dim / 4 {
            return Err(Error::Config(format!(
                "rope config with head dim {} and {} frequencies",
                cfg.head_dim,
                cfg.theta.len()
            )));
        }
        let planes = cfg.head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * planes);
        let mut sin = Vec::with_capacity(positions.len() * planes);
        for &(y, x) in positions {
            for pos in [y, x] {
                for &th in &cfg.theta {
                    let a = pos as f64 * th;
                    cos.push(lit(a.cos()));
                    sin.push(lit(a.sin()));
                }
            }
        }
        Ok(Self {
            tokens: positions.len(),
            head_dim: cfg.head_dim,
            cos,
            sin,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn apply(&self, x: &Tensor<T>, sign: T) -> Result<Tensor<T>> {
        let d = x.dims();
        if d.len() < 2 || d[d.len() - 1] != self.head_dim || d[d.len() - 2] != self.tokens {
            return Err(Error::dims("rope", d, &[self.tokens, self.head_dim]));
        }
        let planes = self.head_dim / 2;
        let mut out = x.as_slice().to_vec();
        for (r, row) in out.chunks_exact_mut(self.head_dim).enumerate() {
            let t = r % self.tokens;
            for p in 0..planes {
                let (c, s) = (self.cos[t * planes + p], sign * self.sin[t * planes + p]);
                let (a, b) = (row[2 * p], row[2 * p + 1]);
                row[2 * p] = a * c - b * s;
                row[2 * p + 1] = a * s + b * c;
            }
        }
        Tensor::new(d.to_vec(), out)
    }

    /// Rotates `x: [.., N, D_head]`.
    pub fn rotate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x, T::one())
    }

    /// Transpose (= inverse) rotation; the backward map of [`Self::rotate`].
    pub fn rotate_transpose(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x, -T::one())
    }
}

pub fn rope_rotate<T: Scalar>(
    x: &Tensor<T>,
    geom: &WindowGeometry<T>,
    cfg: &RopeConfig,
) -> Result<Tensor<T>> {
    RopeTable::new(geom, cfg)?.rotate(x)
}
