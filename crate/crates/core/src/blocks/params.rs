use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{load_tensor, save_tensor, Scalar, Tensor};

/// Named model parameters in a deterministic (sorted) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn uniform<R: Rng + ?Sized>(&mut self, name: &str, dims: &[usize], fan_in: usize, rng: &mut R) -> Result<()> {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(name, Tensor::uniform(dims.to_vec(), a, rng)?);
        Ok(())
    }

    pub fn zeros(&mut self, name: &str, dims: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(dims.to_vec())?);
        Ok(())
    }

    pub fn ones(&mut self, name: &str, dims: &[usize]) -> Result<()> {
        self.insert(name, Tensor::ones(dims.to_vec())?);
        Ok(())
    }

    /// Sets every parameter whose name satisfies `pred` to zero.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.tensors.iter_mut() {
            if pred(name) {
                *t = t.map(|_| T::zero());
            }
        }
    }

    /// Registers every parameter on `tape` under its own name.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), tape.param(n.clone(), t.clone())))
                .collect(),
        }
    }

    /// Registers every parameter as a constant (inference, no gradients).
    pub fn bind_constant(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// One `<name>.ribt` file per parameter.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in &self.tensors {
            save_tensor(dir.join(format!("{name}.ribt")), t)?;
        }
        Ok(())
    }

    /// Loads exactly the parameters named in `like`, checking shapes.
    pub fn load_dir(dir: &Path, like: &ParamStore<T>) -> Result<Self> {
        let mut out = ParamStore::new();
        for (name, t) in &like.tensors {
            let loaded: Tensor<T> = load_tensor(dir.join(format!("{name}.ribt")))?;
            if loaded.dims() != t.dims() {
                return Err(Error::dims("checkpoint tensor", loaded.dims(), t.dims()));
            }
            out.insert(name.clone(), loaded);
        }
        Ok(out)
    }
}

/// Tape handles for a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Pairs names with already-registered vars.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(n, v)| (n.to_string(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamStore::<f32>::new();
        p.uniform("a.w", &[3, 4], 3, &mut rng).unwrap();
        p.ones("a.g", &[4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save_dir(dir.path()).unwrap();
        let q = ParamStore::load_dir(dir.path(), &p).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.count(), 16);
        let mut wrong = p.clone();
        wrong.zeros("a.w", &[4, 3]).unwrap();
        assert!(ParamStore::load_dir(dir.path(), &wrong).is_err());
    }

    #[test]
    fn missing_name_is_error() {
        let p = ParamStore::<f64>::new();
        assert!(p.get("nope").is_err());
        let mut tape = Tape::new();
        assert!(p.bind(&mut tape).get("nope").is_err());
    }
}
