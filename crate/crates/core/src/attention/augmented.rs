//! Projection of window tokens into the per-head Q/K/V layout each bias
//! variant needs, and kernel dispatch.
//!
//! With RIB the kernel sees `Q = [Q_c / sqrt(D_head), Q_p / sqrt(R)]` and
//! `K = [K_c, K_p]`, so the logits are the content term plus the positional
//! term without any explicit `N x N` bias.

use super::config::{AttentionConfig, BiasKind, KernelKind};
use super::kernel::{attend_naive, attend_streaming, AttentionStats, KeyMask};
use crate::error::{Error, Result};
use crate::posbias::{PosTokens, RopeTable};
use crate::tensor::{lit, Scalar, Tensor};

/// Content projections, each `[D, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnProjections<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

/// Positional input matching [`AttentionConfig::bias`].
#[derive(Debug, Clone, Copy)]
pub enum Positional<'a, T> {
    None,
    Rope(&'a RopeTable<T>),
    Rib(&'a PosTokens<T>),
    /// `[heads, N, N]`, naive kernel only.
    Rpb(&'a Tensor<T>),
}

impl<T> Positional<'_, T> {
    pub fn kind(&self) -> BiasKind {
        match self {
            Positional::None => BiasKind::None,
            Positional::Rope(_) => BiasKind::Rope,
            Positional::Rib(_) => BiasKind::Rib,
            Positional::Rpb(_) => BiasKind::Rpb,
        }
    }
}

/// Kernel inputs, each `[windows, heads, N, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedQkv<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

/// `[W, N, D] -> [W, heads, N, D / heads]`.
pub fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let d = x.dims();
    if d.len() != 3 || heads == 0 || !d[2].is_multiple_of(heads) {
        return Err(Error::Shape(format!("cannot split {d:?} into {heads} heads")));
    }
    x.reshape([d[0], d[1], heads, d[2] / heads])?.permute(&[0, 2, 1, 3])
}

/// `[W, heads, N, d] -> [W, N, heads * d]`.
pub fn merge_heads<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.dims();
    if d.len() != 4 {
        return Err(Error::Shape(format!("merge_heads expects rank 4, got {d:?}")));
    }
    x.permute(&[0, 2, 1, 3])?.reshape([d[0], d[2], d[1] * d[3]])
}

/// Repeats a `[heads, N, R]` tensor over `windows` and scales it.
fn tile_windows<T: Scalar>(t: &Tensor<T>, windows: usize, c: T) -> Result<Tensor<T>> {
    let n = t.numel();
    let mut dims = vec![windows];
    dims.extend_from_slice(t.dims());
    Tensor::from_fn(dims, |i| t.as_slice()[i % n] * c)
}

/// Projects `x: [W, N, D]` and lays out Q/K/V for `cfg.bias`.
pub fn build_augmented_qk<T: Scalar>(
    x: &Tensor<T>,
    proj: &AttnProjections<T>,
    pos: Positional<'_, T>,
    cfg: &AttentionConfig,
) -> Result<AugmentedQkv<T>> {
    cfg.validate()?;
    if pos.kind() != cfg.bias {
        return Err(Error::Config(format!(
            "positional input {} does not match configured bias {}",
            pos.kind(),
            cfg.bias
        )));
    }
    let d = x.dims();
    if d.len() != 3 || d[2] != cfg.dim {
        return Err(Error::dims("attention input", d, &[0, 0, cfg.dim]));
    }
    let (windows, n, heads) = (d[0], d[1], cfg.heads);
    let qc = split_heads(&x.matmul(&proj.w_q)?, heads)?;
    let kc = split_heads(&x.matmul(&proj.w_k)?, heads)?;
    let v = split_heads(&x.matmul(&proj.w_v)?, heads)?;
    let content_scale: T = lit(1.0 / (cfg.head_dim() as f64).sqrt());
    let (q, k) = match pos {
        Positional::None | Positional::Rpb(_) => (qc.scale(content_scale), kc),
        Positional::Rope(table) => (table.rotate(&qc)?.scale(content_scale), table.rotate(&kc)?),
        Positional::Rib(tokens) => {
            let want = [heads, n, cfg.rank];
            if tokens.q.dims() != want || tokens.k.dims() != want {
                return Err(Error::dims("positional tokens", tokens.q.dims(), &want));
            }
            let pos_scale: T = lit(1.0 / (cfg.rank as f64).sqrt());
            let qp = tile_windows(&tokens.q, windows, pos_scale)?;
            let kp = tile_windows(&tokens.k, windows, T::one())?;
            (qc.scale(content_scale).concat_last(&qp)?, kc.concat_last(&kp)?)
        }
    };
    Ok(AugmentedQkv { q, k, v })
}

/// Runs the configured kernel; returns `[W, heads, N, D_head]` and stats.
pub fn attend<T: Scalar>(
    qkv: &AugmentedQkv<T>,
    mask: Option<&KeyMask>,
    pos: Positional<'_, T>,
    cfg: &AttentionConfig,
) -> Result<(Tensor<T>, AttentionStats<T>)> {
    cfg.validate()?;
    let bias = match pos {
        Positional::Rpb(b) => Some(b),
        _ => None,
    };
    match cfg.kernel {
        KernelKind::Naive => {
            let out = attend_naive(&qkv.q, &qkv.k, &qkv.v, mask, bias)?;
            Ok((out.o, out.stats))
        }
        KernelKind::Streaming => attend_streaming(&qkv.q, &qkv.k, &qkv.v, mask, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posbias::{rib_positional_tokens, RibParams, RopeConfig, WindowGeometry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn projections(d: usize, rng: &mut ChaCha8Rng) -> AttnProjections<f64> {
        let a = 1.0 / (d as f64).sqrt();
        AttnProjections {
            w_q: Tensor::uniform([d, d], a, rng).unwrap(),
            w_k: Tensor::uniform([d, d], a, rng).unwrap(),
            w_v: Tensor::uniform([d, d], a, rng).unwrap(),
        }
    }

    #[test]
    fn heads_round_trip() {
        let x = Tensor::<f32>::from_fn([2, 5, 6], |i| i as f32).unwrap();
        let h = split_heads(&x, 3).unwrap();
        assert_eq!(h.dims(), &[2, 3, 5, 2]);
        assert_eq!(merge_heads(&h).unwrap(), x);
    }

    #[test]
    fn rib_width_and_zero_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (m, d, heads, r) = (4, 60, 2, 18);
        let geom = WindowGeometry::<f64>::new(m).unwrap();
        let mut p = RibParams::init(3, 8, r, heads, &mut rng).unwrap();
        let proj = projections(d, &mut rng);
        let x = Tensor::randn([2, m * m, d], &mut rng).unwrap();
        let cfg = AttentionConfig::new(heads, d, r, BiasKind::Rib, KernelKind::Naive);
        assert_eq!(cfg.qk_width(), 48);
        let (q, k) = rib_positional_tokens(&geom, &p).unwrap();
        let toks = PosTokens { q, k };
        let aug = build_augmented_qk(&x, &proj, Positional::Rib(&toks), &cfg).unwrap();
        assert_eq!(aug.q.dims(), &[2, heads, 16, 48]);

        p.w_pq = Tensor::zeros(p.w_pq.dims().to_vec()).unwrap();
        p.w_pk = Tensor::zeros(p.w_pk.dims().to_vec()).unwrap();
        let (q, k) = rib_positional_tokens(&geom, &p).unwrap();
        let zero = PosTokens { q, k };
        let aug = build_augmented_qk(&x, &proj, Positional::Rib(&zero), &cfg).unwrap();
        let plain_cfg = AttentionConfig::new(heads, d, 0, BiasKind::None, KernelKind::Naive);
        let plain = build_augmented_qk(&x, &proj, Positional::None, &plain_cfg).unwrap();
        let s_rib = attend_naive(&aug.q, &aug.k, &aug.v, None, None).unwrap().s;
        let s_plain = attend_naive(&plain.q, &plain.k, &plain.v, None, None).unwrap().s;
        assert!(s_rib.bitwise_eq(&s_plain));
    }

    #[test]
    fn mismatched_positional_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = projections(8, &mut rng);
        let x = Tensor::randn([1, 4, 8], &mut rng).unwrap();
        let cfg = AttentionConfig::new(2, 8, 4, BiasKind::Rib, KernelKind::Streaming);
        assert!(build_augmented_qk(&x, &proj, Positional::None, &cfg).is_err());
    }

    #[test]
    fn rope_and_streaming_agree_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geom = WindowGeometry::<f64>::new(3).unwrap();
        let table = RopeTable::new(&geom, &RopeConfig::axial(4).unwrap()).unwrap();
        let proj = projections(8, &mut rng);
        let x = Tensor::randn([3, 9, 8], &mut rng).unwrap();
        let naive = AttentionConfig::new(2, 8, 0, BiasKind::Rope, KernelKind::Naive);
        let stream = AttentionConfig::new(2, 8, 0, BiasKind::Rope, KernelKind::Streaming).with_tile(4);
        let aug = build_augmented_qk(&x, &proj, Positional::Rope(&table), &naive).unwrap();
        let (a, _) = attend(&aug, None, Positional::Rope(&table), &naive).unwrap();
        let (b, _) = attend(&aug, None, Positional::Rope(&table), &stream).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }
}
