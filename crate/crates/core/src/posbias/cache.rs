use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use super::geometry::WindowGeometry;
use super::rib::{rib_positional_tokens, RibParams};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Positional queries and keys for one window size, each `[heads, N, R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosTokens<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
}

/// Positional tokens keyed by `(window side, params fingerprint)`.
///
/// Entries are computed outside the lock and inserted whole, so readers
/// never see a partial entry. If two threads race on a miss the first
/// insert wins and both get the same `Arc`.
type Entries<T> = HashMap<(usize, u64), Arc<PosTokens<T>>>;

#[derive(Debug, Default)]
pub struct PosTokenCache<T> {
    entries: RwLock<Entries<T>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<T: Scalar> PosTokenCache<T> {
    pub fn new() -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn get(&self, side: usize, params: &RibParams<T>) -> Option<Arc<PosTokens<T>>> {
        let key = (side, params.fingerprint());
        self.entries.read().expect("cache lock poisoned").get(&key).cloned()
    }

    pub fn get_or_compute(&self, side: usize, params: &RibParams<T>) -> Result<Arc<PosTokens<T>>> {
        let key = (side, params.fingerprint());
        if let Some(hit) = self.entries.read().expect("cache lock poisoned").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(hit));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let geom = WindowGeometry::new(side)?;
        let (q, k) = rib_positional_tokens(&geom, params)?;
        let fresh = Arc::new(PosTokens { q, k });
        let mut map = self.entries.write().expect("cache lock poisoned");
        Ok(Arc::clone(map.entry(key).or_insert(fresh)))
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    /// Drops every entry, e.g. after a parameter update.
    pub fn clear(&self) {
        self.entries.write().expect("cache lock poisoned").clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> RibParams<f32> {
        RibParams::init(4, 8, 4, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn hit_is_bitwise_fresh() {
        let cache = PosTokenCache::new();
        let p = params(0);
        let a = cache.get_or_compute(8, &p).unwrap();
        let b = cache.get_or_compute(8, &p).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!((cache.hits(), cache.misses()), (1, 1));
        let (q, k) = rib_positional_tokens(&WindowGeometry::new(8).unwrap(), &p).unwrap();
        assert!(b.q.bitwise_eq(&q) && b.k.bitwise_eq(&k));
    }

    #[test]
    fn keys_separate_sizes_and_weights() {
        let cache = PosTokenCache::new();
        cache.get_or_compute(4, &params(0)).unwrap();
        cache.get_or_compute(8, &params(0)).unwrap();
        cache.get_or_compute(4, &params(1)).unwrap();
        assert_eq!(cache.len(), 3);
        cache.clear();
        assert!(cache.is_empty());
    }

    #[test]
    fn concurrent_readers_agree() {
        let cache = Arc::new(PosTokenCache::new());
        let p = Arc::new(params(2));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (c, p) = (Arc::clone(&cache), Arc::clone(&p));
                std::thread::spawn(move || c.get_or_compute(6, &p).unwrap())
            })
            .collect();
        let got: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert!(got.iter().all(|t| t.q.bitwise_eq(&got[0].q) && t.k.bitwise_eq(&got[0].k)));
        assert_eq!(cache.len(), 1);
    }
}
