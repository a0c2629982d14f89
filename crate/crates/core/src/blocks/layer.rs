//! Taped SST layer pieces: windowed multi-head attention with a positional
//! prior, the gate on its output, and the ConvFFN.
//!
//! Maps are channels-last `[B, H, W, D]` throughout; the window partition
//! and head split are fused into a single gather.

use std::sync::Arc;

use rand::Rng;

use super::config::{GateKind, SstConfig};
use super::conv::im2col3x3_index;
use super::params::{BoundParams, ParamStore};
use crate::attention::{BiasKind, KernelKind, KeyMask, WindowPlan, DEFAULT_TILE};
use crate::autodiff::{AttnKernel, Tape, Var};
use crate::error::{Error, Result};
use crate::posbias::{
    embed_width, offset_count, rib_tokens_on_tape, rpb_gather_index, PosTokenCache, RibParams,
    RibVars, RopeConfig, RopeTable, WindowGeometry,
};
use crate::tensor::{lit, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;
const RPB_INIT: f64 = 0.02;

/// Everything one layer needs to know about its own shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub rank: usize,
    pub bands: usize,
    pub hidden: usize,
    pub ffn_hidden: usize,
    pub bias: BiasKind,
    pub kernel: KernelKind,
    pub gate: GateKind,
    pub tile: Option<usize>,
}

impl LayerSpec {
    /// Spec of layer `layer` (position inside its block).
    pub fn from_config(cfg: &SstConfig, layer: usize) -> Self {
        Self {
            dim: cfg.dim,
            heads: cfg.heads,
            window: cfg.window(layer),
            rank: cfg.rank(layer),
            bands: cfg.bands,
            hidden: cfg.hidden,
            ffn_hidden: cfg.ffn_hidden(),
            bias: cfg.bias,
            kernel: cfg.kernel,
            gate: cfg.gate,
            tile: cfg.tile,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn attn_kernel(&self) -> AttnKernel {
        let n = self.window * self.window;
        match self.kernel {
            KernelKind::Naive => AttnKernel::Naive,
            KernelKind::Streaming => AttnKernel::Streaming {
                tile: self.tile.unwrap_or(n.min(DEFAULT_TILE)),
            },
        }
    }
}

/// Adds one layer's parameters under `prefix`.
pub fn init_layer_params<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    s: &LayerSpec,
    rng: &mut R,
) -> Result<()> {
    let (d, e, h) = (s.dim, s.ffn_hidden, s.heads);
    let n = |k: &str| format!("{prefix}{k}");
    store.ones(&n("norm1.g"), &[d])?;
    store.zeros(&n("norm1.b"), &[d])?;
    store.uniform(&n("attn.w_q"), &[d, d], d, rng)?;
    store.uniform(&n("attn.w_k"), &[d, d], d, rng)?;
    store.uniform(&n("attn.w_v"), &[d, d], d, rng)?;
    store.uniform(&n("attn.w_o"), &[d, d], d, rng)?;
    store.zeros(&n("attn.b_o"), &[d])?;
    match s.bias {
        BiasKind::Rib => {
            let p = RibParams::<T>::init(s.bands, s.hidden, s.rank, h, rng)?;
            for (name, t) in crate::posbias::RIB_PARAM_NAMES.iter().zip(p.tensors()) {
                store.insert(n(&format!("rib.{name}")), t.clone());
            }
        }
        BiasKind::Rpb => store.insert(
            n("attn.rpb"),
            Tensor::uniform([h, offset_count(s.window)], RPB_INIT, rng)?,
        ),
        BiasKind::Rope | BiasKind::None => {}
    }
    match s.gate {
        GateKind::Cla => {
            store.uniform(&n("gate.dw"), &[3, 3, d], 9, rng)?;
            store.zeros(&n("gate.dw_b"), &[d])?;
            store.uniform(&n("gate.pw"), &[d, d], d, rng)?;
            store.zeros(&n("gate.pw_b"), &[d])?;
        }
        GateKind::PwConv => {
            store.uniform(&n("gate.pw"), &[d, d], d, rng)?;
            store.zeros(&n("gate.pw_b"), &[d])?;
        }
        GateKind::None => {}
    }
    store.ones(&n("norm2.g"), &[d])?;
    store.zeros(&n("norm2.b"), &[d])?;
    store.uniform(&n("ffn.w1"), &[d, e], d, rng)?;
    store.zeros(&n("ffn.b1"), &[e])?;
    store.uniform(&n("ffn.dw"), &[3, 3, e], 9, rng)?;
    store.zeros(&n("ffn.dw_b"), &[e])?;
    store.uniform(&n("ffn.w2"), &[e, d], e, rng)?;
    store.zeros(&n("ffn.b2"), &[d])?;
    Ok(())
}

/// Forward-time options shared by every layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a, T> {
    /// Serve RIB positional tokens from a cache; gradients do not flow to
    /// the RIB weights when set.
    pub pos_cache: Option<&'a PosTokenCache<T>>,
}

/// `x @ w + b` over the last dim of a tensor of any rank.
pub fn dense<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let dims = tape.dims(x).to_vec();
    let c = *dims.last().ok_or_else(|| Error::Shape("dense on a scalar".into()))?;
    let rows = dims.iter().product::<usize>() / c.max(1);
    let flat = tape.reshape(x, [rows, c])?;
    let y = tape.linear(flat, w, b)?;
    let mut out = dims;
    *out.last_mut().expect("rank >= 1") = tape.dims(y)[1];
    tape.reshape(y, out)
}

/// Zero-padded 3x3 convolution; `w: [9 C_in, C_out]`.
pub fn conv3x3_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let (bsz, h, wd, c) = match *tape.dims(x) {
        [b, h, w, c] => (b, h, w, c),
        ref d => return Err(Error::Shape(format!("conv3x3 expects [B,H,W,C], got {d:?}"))),
    };
    let cols = tape.gather(x, im2col3x3_index(bsz, h, wd, c).into(), [bsz, h, wd, 9 * c])?;
    dense(tape, cols, w, b)
}

/// Index maps between a `[B, H, W, D]` map and per-head windows
/// `[B nW, heads, N, D / heads]`.
#[derive(Debug, Clone)]
pub struct WindowHeads {
    pub plan: WindowPlan,
    pub heads: usize,
    pub dim: usize,
    split: Arc<[usize]>,
    merge: Arc<[usize]>,
    mask: Option<Arc<KeyMask>>,
}

impl WindowHeads {
    pub fn new(batch: usize, height: usize, width: usize, window: usize, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let plan = WindowPlan::new(batch, height, width, window)?;
        let (n, dh) = (plan.tokens(), dim / heads);
        let part = plan.partition_index(dim);
        let mut split = Vec::with_capacity(part.len());
        for w in 0..plan.windows() {
            for h in 0..heads {
                for t in 0..n {
                    let base = (w * n + t) * dim + h * dh;
                    split.extend_from_slice(&part[base..base + dh]);
                }
            }
        }
        let merge = plan
            .reverse_index(dim)
            .into_iter()
            .map(|i| {
                let (wt, c) = (i / dim, i % dim);
                let (w, t) = (wt / n, wt % n);
                ((w * heads + c / dh) * n + t) * dh + c % dh
            })
            .collect::<Vec<_>>();
        let mask = plan.is_padded().then(|| Arc::new(plan.mask()));
        Ok(Self {
            plan,
            heads,
            dim,
            split: split.into(),
            merge: merge.into(),
            mask,
        })
    }

    pub fn head_dims(&self) -> [usize; 4] {
        [self.plan.windows(), self.heads, self.plan.tokens(), self.dim / self.heads]
    }

    pub fn mask(&self) -> Option<Arc<KeyMask>> {
        self.mask.clone()
    }

    /// `[B,H,W,D] -> [B nW, heads, N, D/heads]`, zero at padding.
    pub fn split(&self, tape: &mut Tape<impl Scalar>, x: Var) -> Result<Var> {
        tape.gather(x, Arc::clone(&self.split), self.head_dims())
    }

    /// Inverse of [`Self::split`] on the unpadded region.
    pub fn merge(&self, tape: &mut Tape<impl Scalar>, o: Var) -> Result<Var> {
        tape.gather(o, Arc::clone(&self.merge), self.plan.map_dims(self.dim))
    }
}

/// Window attention with the configured positional prior. Takes the
/// normalized map and returns the merged head outputs `O` (before gate and
/// output projection).
pub fn window_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    prefix: &str,
    xn: Var,
    s: &LayerSpec,
    opts: &ForwardOptions<'_, T>,
) -> Result<Var> {
    let [b, h, w, d] = match *tape.dims(xn) {
        [b, h, w, d] if d == s.dim => [b, h, w, d],
        ref got => return Err(Error::dims("window_attention", got, &[0, 0, 0, s.dim])),
    };
    let n = |k: &str| format!("{prefix}{k}");
    let wh = WindowHeads::new(b, h, w, s.window, d, s.heads)?;
    let q = dense(tape, xn, p.get(&n("attn.w_q"))?, None)?;
    let k = dense(tape, xn, p.get(&n("attn.w_k"))?, None)?;
    let v = dense(tape, xn, p.get(&n("attn.w_v"))?, None)?;
    let (qc, kc, v) = (wh.split(tape, q)?, wh.split(tape, k)?, wh.split(tape, v)?);
    let content_scale = lit::<T>(1.0 / (s.head_dim() as f64).sqrt());
    let windows = wh.plan.windows();

    let mut bias = None;
    let (q, k) = match s.bias {
        BiasKind::None => (tape.scale(qc, content_scale), kc),
        BiasKind::Rope => {
            let geom = WindowGeometry::<T>::new(s.window)?;
            let table = Arc::new(RopeTable::new(&geom, &RopeConfig::axial(s.head_dim())?)?);
            let qr = tape.rope(qc, Arc::clone(&table))?;
            (tape.scale(qr, content_scale), tape.rope(kc, table)?)
        }
        BiasKind::Rpb => {
            let table = p.get(&n("attn.rpb"))?;
            let flat = tape.reshape(table, [s.heads * offset_count(s.window)])?;
            let nn = s.window * s.window;
            bias = Some(tape.gather(flat, rpb_gather_index(s.window, s.heads).into(), [s.heads, nn, nn])?);
            (tape.scale(qc, content_scale), kc)
        }
        BiasKind::Rib => {
            let vars = RibVars {
                w_h: p.get(&n("rib.w_h"))?,
                b_h: p.get(&n("rib.b_h"))?,
                w_pq: p.get(&n("rib.w_pq"))?,
                w_pk: p.get(&n("rib.w_pk"))?,
            };
            let (qp, kp) = match opts.pos_cache {
                Some(cache) => {
                    let params = RibParams::from_tensors(
                        s.bands,
                        s.hidden,
                        s.rank,
                        s.heads,
                        [vars.w_h, vars.b_h, vars.w_pq, vars.w_pk].map(|v| tape.value(v).clone()),
                    )?;
                    let toks = cache.get_or_compute(s.window, &params)?;
                    (tape.constant(toks.q.clone()), tape.constant(toks.k.clone()))
                }
                None => {
                    if tape.dims(vars.w_h)[0] != embed_width(s.bands) {
                        return Err(Error::dims("rib w_h", tape.dims(vars.w_h), &[embed_width(s.bands), s.hidden]));
                    }
                    let geom = WindowGeometry::<T>::new(s.window)?;
                    rib_tokens_on_tape(tape, &geom, s.bands, &vars)?
                }
            };
            let qp = tape.broadcast_leading(qp, windows)?;
            let kp = tape.broadcast_leading(kp, windows)?;
            let qp = tape.scale(qp, lit(1.0 / (s.rank as f64).sqrt()));
            let qc = tape.scale(qc, content_scale);
            (tape.concat_last(qc, qp)?, tape.concat_last(kc, kp)?)
        }
    };
    let o = tape.attention(q, k, v, wh.mask(), bias, s.attn_kernel())?;
    wh.merge(tape, o)
}

/// `O' = O * G` with `G` from the configured gate on the layer input `xn`.
pub fn cla_gate<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    prefix: &str,
    xn: Var,
    o: Var,
    gate: GateKind,
) -> Result<Var> {
    let g = gate_map(tape, p, prefix, xn, gate)?;
    match g {
        Some(g) => tape.mul(o, g),
        None => Ok(o),
    }
}

/// The gate map `G` itself, `None` when the gate is disabled.
pub fn gate_map<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    prefix: &str,
    xn: Var,
    gate: GateKind,
) -> Result<Option<Var>> {
    let n = |k: &str| format!("{prefix}{k}");
    let pre = match gate {
        GateKind::None => return Ok(None),
        GateKind::PwConv => xn,
        GateKind::Cla => {
            let dw = tape.dwconv3x3(xn, p.get(&n("gate.dw"))?)?;
            tape.add_bias(dw, p.get(&n("gate.dw_b"))?)?
        }
    };
    let z = dense(tape, pre, p.get(&n("gate.pw"))?, Some(p.get(&n("gate.pw_b"))?))?;
    Ok(Some(tape.sigmoid(z)))
}

/// Expand, depthwise 3x3, GELU, project.
pub fn conv_ffn<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let n = |k: &str| format!("{prefix}{k}");
    let h = dense(tape, x, p.get(&n("ffn.w1"))?, Some(p.get(&n("ffn.b1"))?))?;
    let h = tape.dwconv3x3(h, p.get(&n("ffn.dw"))?)?;
    let h = tape.add_bias(h, p.get(&n("ffn.dw_b"))?)?;
    let h = tape.gelu(h);
    dense(tape, h, p.get(&n("ffn.w2"))?, Some(p.get(&n("ffn.b2"))?))
}

/// Pre-norm layer: `x + Wo(gate(attn(LN x)))`, then `x + ConvFFN(LN x)`.
pub fn sst_layer<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    s: &LayerSpec,
    opts: &ForwardOptions<'_, T>,
) -> Result<Var> {
    let n = |k: &str| format!("{prefix}{k}");
    let xn = tape.layer_norm(x, p.get(&n("norm1.g"))?, p.get(&n("norm1.b"))?, LN_EPS)?;
    let o = window_attention(tape, p, prefix, xn, s, opts)?;
    let o = cla_gate(tape, p, prefix, xn, o, s.gate)?;
    let y = dense(tape, o, p.get(&n("attn.w_o"))?, Some(p.get(&n("attn.b_o"))?))?;
    let x = tape.add(x, y)?;
    let xn = tape.layer_norm(x, p.get(&n("norm2.g"))?, p.get(&n("norm2.b"))?, LN_EPS)?;
    let f = conv_ffn(tape, p, prefix, xn)?;
    tape.add(x, f)
}
