//! Plain-Rust conversions between nested lists and tensors.

use rib_core::{Error, Result, Tensor};

pub type Nested3 = Vec<Vec<Vec<f64>>>;

/// `[a][b][c]` nested rows to a `[a, b, c]` tensor; rows must be rectangular.
pub fn tensor3(rows: &Nested3, what: &str) -> Result<Tensor<f64>> {
    let a = rows.len();
    let b = rows.first().map_or(0, Vec::len);
    let c = rows.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if a == 0 || b == 0 || c == 0 {
        return Err(Error::Shape(format!("{what} must be a non-empty [heads][tokens][width] list")));
    }
    let mut data = Vec::with_capacity(a * b * c);
    for (i, plane) in rows.iter().enumerate() {
        if plane.len() != b {
            return Err(Error::Shape(format!("{what}[{i}] has {} rows, expected {b}", plane.len())));
        }
        for (j, row) in plane.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Shape(format!("{what}[{i}][{j}] has {} values, expected {c}", row.len())));
            }
            data.extend_from_slice(row);
        }
    }
    Tensor::new([a, b, c], data)
}

/// Inverse of [`tensor3`].
pub fn nested3(t: &Tensor<f64>) -> Result<Nested3> {
    let &[a, b, c] = t.dims() else {
        return Err(Error::Shape(format!("expected rank 3, got {:?}", t.dims())));
    };
    let d = t.as_slice();
    Ok((0..a)
        .map(|i| (0..b).map(|j| d[(i * b + j) * c..(i * b + j + 1) * c].to_vec()).collect())
        .collect())
}
