use crate::error::{Error, Result};

/// Window size of layer `layer` under the cyclic strategy: the per-block
/// size list repeats, so layer `i` uses `sizes[i % sizes.len()]`.
pub fn cyclic_schedule(sizes: &[usize], layer: usize) -> Result<usize> {
    if sizes.is_empty() {
        return Err(Error::Config("window size list is empty".into()));
    }
    Ok(sizes[layer % sizes.len()])
}

/// Window sizes for the first `layers` layers.
pub fn expand_schedule(sizes: &[usize], layers: usize) -> Result<Vec<usize>> {
    (0..layers).map(|i| cyclic_schedule(sizes, i)).collect()
}
