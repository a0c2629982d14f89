//! Rank-factorized implicit positional bias.
//!
//! A coordinate MLP maps each token's Fourier-embedded position to a shared
//! hidden vector `h = ReLU(gamma(x) W_h + b_h)`. Each head then projects `h`
//! to rank-`R` positional queries `Q_p = h W_pq` and keys `K_p = h W_pk`.
//! The bias `Q_p K_p^T / sqrt(R)` appears in the logits once these are
//! concatenated to the content queries and keys.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::fourier::{embed_width, fourier_embed};
use super::geometry::WindowGeometry;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RibParams<T> {
    pub bands: usize,
    pub hidden: usize,
    pub rank: usize,
    pub heads: usize,
    /// `[2 + 4L, d_h]`
    pub w_h: Tensor<T>,
    /// `[d_h]`
    pub b_h: Tensor<T>,
    /// `[heads, d_h, R]`
    pub w_pq: Tensor<T>,
    /// `[heads, d_h, R]`
    pub w_pk: Tensor<T>,
}

pub const RIB_PARAM_NAMES: [&str; 4] = ["w_h", "b_h", "w_pq", "w_pk"];

impl<T: Scalar> RibParams<T> {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero hidden bias.
    pub fn init<R: Rng + ?Sized>(
        bands: usize,
        hidden: usize,
        rank: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let e = embed_width(bands);
        let a_in = 1.0 / (e as f64).sqrt();
        let a_hid = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            bands,
            hidden,
            rank,
            heads,
            w_h: Tensor::uniform([e, hidden], a_in, rng)?,
            b_h: Tensor::zeros([hidden])?,
            w_pq: Tensor::uniform([heads, hidden, rank], a_hid, rng)?,
            w_pk: Tensor::uniform([heads, hidden, rank], a_hid, rng)?,
        })
    }

    pub fn zeros(bands: usize, hidden: usize, rank: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            bands,
            hidden,
            rank,
            heads,
            w_h: Tensor::zeros([embed_width(bands), hidden])?,
            b_h: Tensor::zeros([hidden])?,
            w_pq: Tensor::zeros([heads, hidden, rank])?,
            w_pk: Tensor::zeros([heads, hidden, rank])?,
        })
    }

    /// Rebuilds params from named tensors, checking their shapes.
    pub fn from_tensors(
        bands: usize,
        hidden: usize,
        rank: usize,
        heads: usize,
        tensors: [Tensor<T>; 4],
    ) -> Result<Self> {
        let [w_h, b_h, w_pq, w_pk] = tensors;
        let p = Self {
            bands,
            hidden,
            rank,
            heads,
            w_h,
            b_h,
            w_pq,
            w_pk,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.w_h, &self.b_h, &self.w_pq, &self.w_pk]
    }

    pub fn validate(&self) -> Result<()> {
        let e = embed_width(self.bands);
        let want: [Vec<usize>; 4] = [
            vec![e, self.hidden],
            vec![self.hidden],
            vec![self.heads, self.hidden, self.rank],
            vec![self.heads, self.hidden, self.rank],
        ];
        for (t, w) in self.tensors().iter().zip(want.iter()) {
            if t.dims() != w.as_slice() {
                return Err(Error::dims("rib params", t.dims(), w));
            }
        }
        if self.rank == 0 || self.heads == 0 || self.hidden == 0 {
            return Err(Error::Config("rib rank, heads and hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        rib_param_count(self)
    }

    /// Content hash of hyperparameters and every weight bit; the cache key
    /// for positional tokens.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        (self.bands, self.hidden, self.rank, self.heads, T::DTYPE).hash(&mut h);
        for t in self.tensors() {
            t.dims().hash(&mut h);
            for v in t.as_slice() {
                v.bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn cast<U: Scalar>(&self) -> RibParams<U> {
        RibParams {
            bands: self.bands,
            hidden: self.hidden,
            rank: self.rank,
            heads: self.heads,
            w_h: self.w_h.cast(),
            b_h: self.b_h.cast(),
            w_pq: self.w_pq.cast(),
            w_pk: self.w_pk.cast(),
        }
    }
}

/// `(2 + 4L) d_h + d_h + 2 heads d_h R`, independent of the window size.
pub fn rib_param_count<T>(p: &RibParams<T>) -> usize {
    rib_param_count_for(p.bands, p.hidden, p.rank, p.heads)
}

pub fn rib_param_count_for(bands: usize, hidden: usize, rank: usize, heads: usize) -> usize {
    embed_width(bands) * hidden + hidden + 2 * heads * hidden * rank
}

/// Positional queries and keys, each `[heads, N, R]`. Depends only on the
/// window geometry and the MLP weights.
pub fn rib_positional_tokens<T: Scalar>(
    geom: &WindowGeometry<T>,
    p: &RibParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    p.validate()?;
    let emb = fourier_embed(geom.coords(), p.bands)?;
    let h = emb.matmul(&p.w_h)?.add_bias(&p.b_h)?.relu();
    let h = h.reshape([1, geom.tokens(), p.hidden])?;
    Ok((h.matmul(&p.w_pq)?, h.matmul(&p.w_pk)?))
}

/// Taped RIB weights.
#[derive(Debug, Clone, Copy)]
pub struct RibVars {
    pub w_h: Var,
    pub b_h: Var,
    pub w_pq: Var,
    pub w_pk: Var,
}

impl RibVars {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, prefix: &str, p: &RibParams<T>) -> Self {
        let name = |n: &str| format!("{prefix}{n}");
        Self {
            w_h: tape.param(name("w_h"), p.w_h.clone()),
            b_h: tape.param(name("b_h"), p.b_h.clone()),
            w_pq: tape.param(name("w_pq"), p.w_pq.clone()),
            w_pk: tape.param(name("w_pk"), p.w_pk.clone()),
        }
    }
}

/// Taped [`rib_positional_tokens`]; produces the same values bit for bit.
pub fn rib_tokens_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    geom: &WindowGeometry<T>,
    bands: usize,
    vars: &RibVars,
) -> Result<(Var, Var)> {
    let emb = tape.constant(fourier_embed(geom.coords(), bands)?);
    let h = tape.linear(emb, vars.w_h, Some(vars.b_h))?;
    let h = tape.relu(h);
    let hidden = tape.dims(vars.w_h)[1];
    let h = tape.reshape(h, [1, geom.tokens(), hidden])?;
    let q = tape.matmul(h, vars.w_pq)?;
    let k = tape.matmul(h, vars.w_pk)?;
    Ok((q, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Differentiable, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_projections_give_zero_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = RibParams::<f32>::init(4, 8, 3, 2, &mut rng).unwrap();
        p.w_pq = Tensor::zeros([2, 8, 3]).unwrap();
        p.w_pk = Tensor::zeros([2, 8, 3]).unwrap();
        let g = WindowGeometry::new(4).unwrap();
        let (q, k) = rib_positional_tokens(&g, &p).unwrap();
        assert_eq!(q.max_abs(), 0.0);
        assert_eq!(k.max_abs(), 0.0);
    }

    #[test]
    fn token_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = RibParams::<f32>::init(10, 32, 16, 3, &mut rng).unwrap();
        let g = WindowGeometry::new(8).unwrap();
        let (q1, k1) = rib_positional_tokens(&g, &p).unwrap();
        assert_eq!(q1.dims(), &[3, 64, 16]);
        let (q2, k2) = rib_positional_tokens(&g, &p).unwrap();
        assert!(q1.bitwise_eq(&q2) && k1.bitwise_eq(&k2));
    }

    #[test]
    fn taped_tokens_match_eager_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = RibParams::<f32>::init(3, 6, 4, 2, &mut rng).unwrap();
        let g = WindowGeometry::new(5).unwrap();
        let (q, k) = rib_positional_tokens(&g, &p).unwrap();
        let mut tape = Tape::new();
        let vars = RibVars::register(&mut tape, "", &p);
        let (tq, tk) = rib_tokens_on_tape(&mut tape, &g, 3, &vars).unwrap();
        assert!(tape.value(tq).bitwise_eq(&q));
        assert!(tape.value(tk).bitwise_eq(&k));
    }

    #[test]
    fn param_counts() {
        assert_eq!(rib_param_count_for(10, 32, 18, 6), 8288);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = RibParams::<f32>::init(10, 32, 18, 6, &mut rng).unwrap();
        let stored: usize = p.tensors().iter().map(|t| t.numel()).sum();
        assert_eq!(stored, p.param_count());
    }

    #[test]
    fn fingerprint_tracks_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = RibParams::<f64>::init(2, 4, 2, 1, &mut rng).unwrap();
        let mut q = p.clone();
        assert_eq!(p.fingerprint(), q.fingerprint());
        q.b_h = Tensor::full([4], 1e-9).unwrap();
        assert_ne!(p.fingerprint(), q.fingerprint());
    }

    struct BiasEnergy {
        side: usize,
        bands: usize,
    }

    impl Differentiable for BiasEnergy {
        fn eval<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var]) -> Result<Var> {
            let geom = WindowGeometry::<S>::new(self.side)?;
            let vars = RibVars {
                w_h: p[0],
                b_h: p[1],
                w_pq: p[2],
                w_pk: p[3],
            };
            let (q, k) = rib_tokens_on_tape(tape, &geom, self.bands, &vars)?;
            let kt = tape.permute(k, &[0, 2, 1])?;
            let s = tape.matmul(q, kt)?;
            let g = tape.gelu(s);
            Ok(tape.mean(g))
        }
    }

    #[test]
    fn gradient_wrt_mlp_weights_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = RibParams::<f64>::init(2, 6, 3, 2, &mut rng).unwrap();
        p.b_h = Tensor::uniform([6], 0.3, &mut rng).unwrap();
        let params: Vec<Tensor<f64>> = p.tensors().into_iter().cloned().collect();
        let f = BiasEnergy { side: 4, bands: 2 };
        let report = grad_check(&f, &params, &GradCheckConfig::f64_default()).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
