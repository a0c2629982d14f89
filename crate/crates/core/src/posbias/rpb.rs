//! Table-lookup relative positional bias.

use std::sync::Arc;

use rand::Rng;

use super::geometry::WindowGeometry;
use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Number of distinct 2D offsets inside an M x M window.
pub fn offset_count(m: usize) -> usize {
    (2 * m - 1) * (2 * m - 1)
}

/// `heads * (2M - 1)^2`.
pub fn rpb_param_count(m: usize, heads: usize) -> usize {
    heads * offset_count(m)
}

/// Table slot of offset `(dy, dx)`, each in `-(M-1)..=(M-1)`.
pub fn offset_slot(dy: isize, dx: isize, m: usize) -> usize {
    let span = 2 * m as isize - 1;
    let off = m as isize - 1;
    ((dy + off) * span + (dx + off)) as usize
}

/// Inverse of [`offset_slot`].
pub fn slot_offset(slot: usize, m: usize) -> (isize, isize) {
    let span = 2 * m - 1;
    let off = m as isize - 1;
    ((slot / span) as isize - off, (slot % span) as isize - off)
}

/// `idx[i * N + j]` = slot of `pos_i - pos_j`.
pub fn rpb_offset_index(m: usize) -> Vec<usize> {
    let n = m * m;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = ((i / m) as isize, (i % m) as isize);
        for j in 0..n {
            let (yj, xj) = ((j / m) as isize, (j % m) as isize);
            idx.push(offset_slot(yi - yj, xi - xj, m));
        }
    }
    idx
}

/// Gather index from a flat `[heads, (2M-1)^2]` table to `[heads, N, N]`.
pub fn rpb_gather_index(m: usize, heads: usize) -> Vec<usize> {
    let base = rpb_offset_index(m);
    let t = offset_count(m);
    (0..heads)
        .flat_map(|h| base.iter().map(move |&s| h * t + s))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpbTable<T> {
    side: usize,
    heads: usize,
    /// `[heads, (2M-1)^2]`
    table: Tensor<T>,
    index: Arc<[usize]>,
}

impl<T: Scalar> RpbTable<T> {
    pub fn new(side: usize, table: Tensor<T>) -> Result<Self> {
        if side == 0 || table.rank() != 2 || table.dims()[1] != offset_count(side) {
            return Err(Error::dims(
                "rpb table",
                table.dims(),
                &[table.dims()[0], offset_count(side.max(1))],
            ));
        }
        Ok(Self {
            side,
            heads: table.dims()[0],
            table,
            index: rpb_offset_index(side).into(),
        })
    }

    pub fn zeros(side: usize, heads: usize) -> Result<Self> {
        Self::new(side, Tensor::zeros([heads, offset_count(side)])?)
    }

    pub fn uniform<R: Rng + ?Sized>(side: usize, heads: usize, bound: f64, rng: &mut R) -> Result<Self> {
        Self::new(side, Tensor::uniform([heads, offset_count(side)], bound, rng)?)
    }

    /// Each head's table entry is `f(head, dy, dx)`.
    pub fn from_offsets(side: usize, heads: usize, f: impl Fn(usize, isize, isize) -> f64) -> Result<Self> {
        let t = offset_count(side);
        let table = Tensor::from_fn([heads, t], |i| {
            let (dy, dx) = slot_offset(i % t, side);
            lit(f(i / t, dy, dx))
        })?;
        Self::new(side, table)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn table(&self) -> &Tensor<T> {
        &self.table
    }

    /// `[N * N]` offset slots, row-major over `(i, j)`.
    pub fn index(&self) -> &[usize] {
        &self.index
    }

    pub fn param_count(&self) -> usize {
        self.table.numel()
    }

    pub fn geometry(&self) -> Result<WindowGeometry<T>> {
        WindowGeometry::new(self.side)
    }
}

/// `B[h, i, j] = table[h, idx[i, j]]`.
pub fn rpb_bias_matrix<T: Scalar>(t: &RpbTable<T>) -> Result<Tensor<T>> {
    let n = t.side * t.side;
    let slots = offset_count(t.side);
    let flat = t.table.as_slice();
    let mut out = Vec::with_capacity(t.heads * n * n);
    for h in 0..t.heads {
        for &s in t.index.iter() {
            if s >= slots {
                return Err(Error::Contract(format!("rpb index {s} outside table of {slots}")));
            }
            out.push(flat[h * slots + s]);
        }
    }
    Tensor::new([t.heads, n, n], out)
}

/// Isotropic Gaussian bump over grid offsets, `amp * exp(-|d|^2 / (2 sigma^2))`,
/// identical for every head.
pub fn gaussian_bump<T: Scalar>(side: usize, heads: usize, sigma: f64, amp: f64) -> Result<RpbTable<T>> {
    RpbTable::from_offsets(side, heads, |_, dy, dx| {
        let r2 = (dy * dy + dx * dx) as f64;
        amp * (-r2 / (2.0 * sigma * sigma)).exp()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashMap};

    #[test]
    fn counts() {
        assert_eq!(rpb_param_count(64, 6), 96_774);
        assert_eq!(rpb_param_count(1, 1), 1);
        assert_eq!(rpb_param_count(8, 1), 225);
    }

    #[test]
    fn two_by_two_uses_nine_slots() {
        // enumerate pairs directly from grid positions
        let mut seen = BTreeSet::new();
        for i in 0..4usize {
            for j in 0..4usize {
                let d = ((i / 2) as isize - (j / 2) as isize, (i % 2) as isize - (j % 2) as isize);
                seen.insert(d);
            }
        }
        assert_eq!(seen.len(), 9);
        let idx: BTreeSet<usize> = rpb_offset_index(2).into_iter().collect();
        assert_eq!(idx.len(), 9);
        assert_eq!(idx, (0..9).collect());
    }

    #[test]
    fn zero_table_gives_zero_bias() {
        let t = RpbTable::<f32>::zeros(3, 2).unwrap();
        assert_eq!(rpb_bias_matrix(&t).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn diagonal_is_constant() {
        let mut rng = rand::thread_rng();
        let t = RpbTable::<f64>::uniform(4, 2, 1.0, &mut rng).unwrap();
        let b = rpb_bias_matrix(&t).unwrap();
        for h in 0..2 {
            let d0 = b.get(&[h, 0, 0]).unwrap();
            assert!((0..16).all(|i| b.get(&[h, i, i]) == Some(d0)));
        }
    }

    #[test]
    fn slot_round_trip() {
        for m in 1..6 {
            for s in 0..offset_count(m) {
                let (dy, dx) = slot_offset(s, m);
                assert_eq!(offset_slot(dy, dx, m), s);
            }
        }
    }

    #[test]
    fn same_offset_same_bias() {
        let mut rng = rand::thread_rng();
        let m = 5;
        let t = RpbTable::<f32>::uniform(m, 1, 1.0, &mut rng).unwrap();
        let b = rpb_bias_matrix(&t).unwrap();
        let mut by_offset: HashMap<(isize, isize), f32> = HashMap::new();
        for i in 0..m * m {
            for j in 0..m * m {
                let d = (
                    (i / m) as isize - (j / m) as isize,
                    (i % m) as isize - (j % m) as isize,
                );
                let v = b.get(&[0, i, j]).unwrap();
                assert_eq!(*by_offset.entry(d).or_insert(v), v);
            }
        }
    }

    #[test]
    fn gather_index_matches_bias_matrix() {
        let t = RpbTable::<f64>::from_offsets(3, 2, |h, dy, dx| (h * 100) as f64 + (dy * 10 + dx) as f64).unwrap();
        let flat = t.table().reshape([2 * offset_count(3)]).unwrap();
        let g = flat.gather(&rpb_gather_index(3, 2), [2, 9, 9]).unwrap();
        assert_eq!(g, rpb_bias_matrix(&t).unwrap());
    }
}
