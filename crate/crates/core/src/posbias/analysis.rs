use std::fmt::Write as _;

use super::rpb::{offset_count, offset_slot, slot_offset};
use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Mean score per relative offset, laid out like an RPB table.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetTable<T> {
    pub side: usize,
    /// `[(2M-1)^2]`
    pub mean: Tensor<T>,
    /// Pairs contributing to each slot.
    pub counts: Vec<usize>,
}

impl<T: Scalar> OffsetTable<T> {
    pub fn get(&self, dy: isize, dx: isize) -> T {
        self.mean.as_slice()[offset_slot(dy, dx, self.side)]
    }

    /// `dy,dx,mean_bias` rows in slot order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dy,dx,mean_bias\n");
        for (slot, v) in self.mean.as_slice().iter().enumerate() {
            let (dy, dx) = slot_offset(slot, self.side);
            writeln!(s, "{dy},{dx},{v}").expect("write to string");
        }
        s
    }
}

/// `(M - |dy|)(M - |dx|)`, the number of token pairs at offset `(dy, dx)`.
pub fn offset_group_size(dy: isize, dx: isize, m: usize) -> usize {
    (m - dy.unsigned_abs()) * (m - dx.unsigned_abs())
}

/// Averages a single head's `[N, N]` score matrix over token pairs sharing
/// the same offset `pos_i - pos_j`.
pub fn bias_by_offset<T: Scalar>(s: &Tensor<T>, m: usize) -> Result<OffsetTable<T>> {
    let n = m * m;
    if m == 0 || s.dims() != [n, n] {
        return Err(Error::dims("bias_by_offset", s.dims(), &[n, n]));
    }
    let slots = offset_count(m);
    let mut sum = vec![0.0f64; slots];
    let mut counts = vec![0usize; slots];
    let data = s.as_slice();
    for i in 0..n {
        for j in 0..n {
            let dy = (i / m) as isize - (j / m) as isize;
            let dx = (i % m) as isize - (j % m) as isize;
            let k = offset_slot(dy, dx, m);
            sum[k] += data[i * n + j].as_f64();
            counts[k] += 1;
        }
    }
    let mean = sum.iter().zip(&counts).map(|(&s, &c)| lit(s / c as f64)).collect();
    Ok(OffsetTable {
        side: m,
        mean: Tensor::new([slots], mean)?,
        counts,
    })
}
