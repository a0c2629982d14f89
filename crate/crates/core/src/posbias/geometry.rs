use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Token layout of one M x M window.
///
/// Token `t` sits at grid position `(t / M, t % M)` (row-major, y outer).
/// Its normalized coordinate is `(y, x)` with each axis taking `M` evenly
/// spaced values from -1 to 1 inclusive; a 1 x 1 window sits at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGeometry<T> {
    side: usize,
    coords: Tensor<T>,
}

/// Normalized coordinate of grid index `i` on an axis of `m` samples.
pub fn axis_coordinate(i: usize, m: usize) -> f64 {
    if m == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (m - 1) as f64
    }
}

impl<T: Scalar> WindowGeometry<T> {
    pub fn new(side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::Config("window side must be positive".into()));
        }
        let n = side * side;
        let coords = Tensor::from_fn([n, 2], |i| {
            let (t, axis) = (i / 2, i % 2);
            let g = if axis == 0 { t / side } else { t % side };
            lit(axis_coordinate(g, side))
        })?;
        Ok(Self { side, coords })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn tokens(&self) -> usize {
        self.side * self.side
    }

    /// `[N, 2]` normalized `(y, x)` coordinates.
    pub fn coords(&self) -> &Tensor<T> {
        &self.coords
    }

    /// Integer grid position `(y, x)` of token `t`.
    pub fn position(&self, t: usize) -> (usize, usize) {
        (t / self.side, t % self.side)
    }

    /// Same layout with tokens listed in `order` (token `i` of the result is
    /// token `order[i]` of `self`).
    pub fn permuted(&self, order: &[usize]) -> Result<Tensor<T>> {
        let idx: Vec<usize> = order.iter().flat_map(|&t| [2 * t, 2 * t + 1]).collect();
        self.coords.gather(&idx, [order.len(), 2])
    }
}
