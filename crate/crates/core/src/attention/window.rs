//! Non-overlapping M x M window partitioning of `[B, H, W, D]` maps.
//!
//! Maps are zero-padded at the bottom/right up to multiples of `M`. Windows
//! are ordered (batch, window row, window column); tokens inside a window
//! are row-major.

use super::kernel::KeyMask;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, PAD_INDEX};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowPlan {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl WindowPlan {
    pub fn new(batch: usize, height: usize, width: usize, window: usize) -> Result<Self> {
        if batch == 0 || height == 0 || width == 0 || window == 0 {
            return Err(Error::Shape(format!(
                "window plan needs positive sizes, got B={batch} H={height} W={width} M={window}"
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            window,
            padded_height: height.div_ceil(window) * window,
            padded_width: width.div_ceil(window) * window,
        })
    }

    pub fn window_rows(&self) -> usize {
        self.padded_height / self.window
    }

    pub fn window_cols(&self) -> usize {
        self.padded_width / self.window
    }

    pub fn windows_per_image(&self) -> usize {
        self.window_rows() * self.window_cols()
    }

    pub fn windows(&self) -> usize {
        self.batch * self.windows_per_image()
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    pub fn is_padded(&self) -> bool {
        self.padded_height != self.height || self.padded_width != self.width
    }

    /// Position `(b, y, x)` in the map of token `t` of window `w`.
    fn locate(&self, w: usize, t: usize) -> (usize, usize, usize) {
        let per = self.windows_per_image();
        let (b, wi) = (w / per, w % per);
        let (wy, wx) = (wi / self.window_cols(), wi % self.window_cols());
        let (ty, tx) = (t / self.window, t % self.window);
        (b, wy * self.window + ty, wx * self.window + tx)
    }

    /// Valid (non-padding) keys per window.
    pub fn mask(&self) -> KeyMask {
        let n = self.tokens();
        let mut valid = Vec::with_capacity(self.windows() * n);
        for w in 0..self.windows() {
            for t in 0..n {
                let (_, y, x) = self.locate(w, t);
                valid.push(y < self.height && x < self.width);
            }
        }
        KeyMask::new(n, valid).expect("tokens > 0")
    }

    /// Gather index from a `[B, H, W, D]` map to `[windows, N, D]`.
    pub fn partition_index(&self, channels: usize) -> Vec<usize> {
        let n = self.tokens();
        let mut idx = Vec::with_capacity(self.windows() * n * channels);
        for w in 0..self.windows() {
            for t in 0..n {
                let (b, y, x) = self.locate(w, t);
                let inside = y < self.height && x < self.width;
                let base = ((b * self.height + y) * self.width + x) * channels;
                idx.extend((0..channels).map(|c| if inside { base + c } else { PAD_INDEX }));
            }
        }
        idx
    }

    /// Gather index from `[windows, N, D]` back to the unpadded map.
    pub fn reverse_index(&self, channels: usize) -> Vec<usize> {
        let (m, n) = (self.window, self.tokens());
        let mut idx = Vec::with_capacity(self.batch * self.height * self.width * channels);
        for b in 0..self.batch {
            for y in 0..self.height {
                for x in 0..self.width {
                    let w = b * self.windows_per_image()
                        + (y / m) * self.window_cols()
                        + x / m;
                    let t = (y % m) * m + x % m;
                    let base = (w * n + t) * channels;
                    idx.extend(base..base + channels);
                }
            }
        }
        idx
    }

    pub fn map_dims(&self, channels: usize) -> [usize; 4] {
        [self.batch, self.height, self.width, channels]
    }

    pub fn window_dims(&self, channels: usize) -> [usize; 3] {
        [self.windows(), self.tokens(), channels]
    }
}

/// Splits `x: [B, H, W, D]` into `[B * nW, M * M, D]` windows, zero-padding
/// the map up to multiples of `window`.
pub fn window_partition<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
) -> Result<(Tensor<T>, WindowPlan)> {
    let d = x.dims();
    if d.len() != 4 {
        return Err(Error::Shape(format!("window_partition expects [B,H,W,D], got {d:?}")));
    }
    let plan = WindowPlan::new(d[0], d[1], d[2], window)?;
    let out = x.gather(&plan.partition_index(d[3]), plan.window_dims(d[3]))?;
    Ok((out, plan))
}

/// Inverse of [`window_partition`], dropping the padded region.
pub fn window_reverse<T: Scalar>(windows: &Tensor<T>, plan: &WindowPlan) -> Result<Tensor<T>> {
    let d = windows.dims();
    if d.len() != 3 || d[0] != plan.windows() || d[1] != plan.tokens() {
        return Err(Error::dims("window_reverse", d, &plan.window_dims(0)));
    }
    windows.gather(&plan.reverse_index(d[2]), plan.map_dims(d[2]))
}
