use std::collections::BTreeMap;

use crate::blocks::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Multiplies the base rate by `gamma` at each milestone step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= step).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

/// Adam without weight decay; moments are kept in the parameter dtype.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// One update with learning rate `lr`. Every gradient must name a parameter.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t, epst) = (lit::<T>(b1), lit::<T>(b2), lit::<T>(self.eps));
        let (one_b1, one_b2) = (lit::<T>(1.0 - b1), lit::<T>(1.0 - b2));
        let step = lit::<T>(lr / c1);
        let c2s = lit::<T>(c2.sqrt());
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.dims() != g.dims() {
                return Err(Error::dims("adam", p.dims(), g.dims()));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| g.map(|_| T::zero()));
            let v = self.v.entry(name.clone()).or_insert_with(|| g.map(|_| T::zero()));
            let upd: Vec<T> = {
                let (gs, ms, vs) = (g.as_slice(), m.as_slice(), v.as_slice());
                let mut mn = Vec::with_capacity(gs.len());
                let mut vn = Vec::with_capacity(gs.len());
                let mut out = Vec::with_capacity(gs.len());
                for i in 0..gs.len() {
                    let mi = b1t * ms[i] + one_b1 * gs[i];
                    let vi = b2t * vs[i] + one_b2 * gs[i] * gs[i];
                    out.push(p.as_slice()[i] - step * mi / (vi.sqrt() / c2s + epst));
                    mn.push(mi);
                    vn.push(vi);
                }
                *m = Tensor::new(g.dims().to_vec(), mn)?;
                *v = Tensor::new(g.dims().to_vec(), vn)?;
                out
            };
            *p = Tensor::new(p.dims().to_vec(), upd)?;
        }
        Ok(())
    }
}
