//! Exact attention kernels.
//!
//! Both kernels compute `O = softmax(Q K^T [+ B]) V` over independent groups
//! (the flattened leading dims of `Q`). Any logit scaling must already be
//! folded into `Q`, so the kernels themselves are bias-agnostic.
//!
//! The naive kernel materializes `S` and `P`. The streaming kernel visits
//! key tiles once per query block and keeps only the online-softmax state
//! `(m, l, acc)` for the block, so its scratch is `O(tile^2 + tile * d)`
//! plus the per-row statistics it returns.

use rayon::prelude::*;

use super::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::instrument::ProbeScope;
use crate::tensor::{Scalar, Tensor};

/// Key validity per window: `valid[w * tokens + j]` is false for padded
/// key `j` of window `w`. Group `g` of a kernel call uses window
/// `g / (groups / windows)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyMask {
    tokens: usize,
    valid: Vec<bool>,
}

impl KeyMask {
    pub fn new(tokens: usize, valid: Vec<bool>) -> Result<Self> {
        if tokens == 0 || valid.is_empty() || !valid.len().is_multiple_of(tokens) {
            return Err(Error::Shape(format!(
                "mask of length {} is not a multiple of {tokens} tokens",
                valid.len()
            )));
        }
        Ok(Self { tokens, valid })
    }

    pub fn all_valid(windows: usize, tokens: usize) -> Self {
        Self {
            tokens,
            valid: vec![true; windows * tokens],
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn windows(&self) -> usize {
        self.valid.len() / self.tokens
    }

    pub fn window(&self, w: usize) -> &[bool] {
        &self.valid[w * self.tokens..(w + 1) * self.tokens]
    }

    pub fn is_trivial(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    fn row_for(&self, group: usize, groups: usize) -> &[bool] {
        let per = groups / self.windows();
        self.window(group / per)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionStats<T> {
    /// Final running max per query row; dims = leading dims + `[N]`.
    pub row_max: Tensor<T>,
    /// Final softmax denominator per query row.
    pub row_sum: Tensor<T>,
    /// Scalars the kernel allocated for its own working state, including
    /// the returned statistics but not the output.
    pub aux_scalars: usize,
    /// Scalars held by the score matrix (zero for the streaming kernel).
    pub score_scalars: usize,
    /// Peak live bytes seen by the counting allocator inside the kernel,
    /// when that allocator is installed.
    pub measured_peak_bytes: Option<u64>,
    /// Multiply-adds counted as 2 flops: `2 d_qk` per scored pair and
    /// `2 d_v` per accumulated pair.
    pub flops: u64,
}

#[derive(Debug, Clone)]
pub struct NaiveOutput<T> {
    pub o: Tensor<T>,
    pub s: Tensor<T>,
    pub p: Tensor<T>,
    pub stats: AttentionStats<T>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub groups: usize,
    pub n: usize,
    pub dq: usize,
    pub dv: usize,
}

pub(crate) fn layout<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&KeyMask>,
) -> Result<(Layout, Vec<usize>)> {
    let r = q.rank();
    if r < 2 || k.rank() != r || v.rank() != r {
        return Err(Error::dims("attention", q.dims(), k.dims()));
    }
    if q.dims() != k.dims() {
        return Err(Error::dims("attention q/k", q.dims(), k.dims()));
    }
    if v.dims()[..r - 1] != q.dims()[..r - 1] {
        return Err(Error::dims("attention q/v", q.dims(), v.dims()));
    }
    let lead = q.dims()[..r - 2].to_vec();
    let l = Layout {
        groups: lead.iter().product(),
        n: q.dims()[r - 2],
        dq: q.dims()[r - 1],
        dv: v.dims()[r - 1],
    };
    if let Some(m) = mask {
        if m.tokens() != l.n || !l.groups.is_multiple_of(m.windows()) {
            return Err(Error::Shape(format!(
                "mask with {} windows x {} tokens does not fit {} groups x {} tokens",
                m.windows(),
                m.tokens(),
                l.groups,
                l.n
            )));
        }
    }
    Ok((l, lead))
}

fn check_finite<T: Scalar>(ts: &[&Tensor<T>]) -> Result<()> {
    if ts.iter().any(|t| t.as_slice().iter().any(|v| v.is_nan())) {
        return Err(Error::Numeric("NaN in attention input".into()));
    }
    Ok(())
}

fn bias_groups<T: Scalar>(bias: &Tensor<T>, l: &Layout) -> Result<usize> {
    let d = bias.dims();
    let nb = bias.numel() / (l.n * l.n).max(1);
    if d.len() < 2 || d[d.len() - 1] != l.n || d[d.len() - 2] != l.n || !l.groups.is_multiple_of(nb) {
        return Err(Error::dims("attention bias", d, &[l.groups, l.n, l.n]));
    }
    Ok(nb)
}

#[inline]
fn with_n(lead: &[usize], n: usize) -> Vec<usize> {
    let mut d = lead.to_vec();
    d.push(n);
    d
}

/// Reference attention: `S = Q K^T + B`, masked keys at `-inf`,
/// `P = softmax(S)`, `O = P V`.
pub fn attend_naive<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&KeyMask>,
    bias: Option<&Tensor<T>>,
) -> Result<NaiveOutput<T>> {
    let (l, lead) = layout(q, k, v, mask)?;
    check_finite(&[q, k, v])?;
    let nb = bias.map(|b| bias_groups(b, &l)).transpose()?;
    let Layout { groups, n, dq, dv } = l;
    let (qs, ks, vs) = (q.as_slice(), k.as_slice(), v.as_slice());

    let scope = ProbeScope::enter();
    let mut s = vec![T::zero(); groups * n * n];
    let score_scalars = s.len();
    let mut p = vec![T::zero(); groups * n * n];
    let mut o = vec![T::zero(); groups * n * dv];
    let mut row_max = vec![T::zero(); groups * n];
    let mut row_sum = vec![T::zero(); groups * n];
    let mut flops = 0u64;

    // per-row work is carried in f64; the row max is rounded to T first so
    // the saved statistics describe exactly the shift that was used
    let mut wide = vec![0.0f64; n];
    let mut orow_w = vec![0.0f64; dv];
    for g in 0..groups {
        let valid = mask.map(|m| m.row_for(g, groups));
        let brow = match (bias, nb) {
            (Some(b), Some(nb)) => Some(&b.as_slice()[(g % nb) * n * n..(g % nb + 1) * n * n]),
            _ => None,
        };
        for i in 0..n {
            let qi = &qs[(g * n + i) * dq..(g * n + i + 1) * dq];
            let srow = &mut s[(g * n + i) * n..(g * n + i + 1) * n];
            for j in 0..n {
                if valid.is_some_and(|vm| !vm[j]) {
                    srow[j] = T::neg_infinity();
                    wide[j] = f64::NEG_INFINITY;
                    continue;
                }
                let kj = &ks[(g * n + j) * dq..(g * n + j + 1) * dq];
                let mut sij = dot_wide(qi, kj);
                flops += 2 * dq as u64;
                if let Some(b) = brow {
                    sij += b[i * n + j].as_f64();
                }
                wide[j] = sij;
                srow[j] = T::from_f64(sij);
            }
            let m = wide.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
            let m = T::from_f64(m);
            let prow = &mut p[(g * n + i) * n..(g * n + i + 1) * n];
            let mut denom = 0.0f64;
            orow_w.fill(0.0);
            if m != T::neg_infinity() {
                let mw = m.as_f64();
                for w in wide.iter_mut() {
                    *w = (*w - mw).exp();
                    denom += *w;
                }
                for j in 0..n {
                    let pj = wide[j] / denom;
                    prow[j] = T::from_f64(pj);
                    if valid.is_some_and(|vm| !vm[j]) {
                        continue;
                    }
                    let vj = &vs[(g * n + j) * dv..(g * n + j + 1) * dv];
                    for (ov, &x) in orow_w.iter_mut().zip(vj) {
                        *ov += pj * x.as_f64();
                    }
                    flops += 2 * dv as u64;
                }
            }
            row_max[g * n + i] = m;
            row_sum[g * n + i] = T::from_f64(denom);
            let orow = &mut o[(g * n + i) * dv..(g * n + i + 1) * dv];
            for (ov, &w) in orow.iter_mut().zip(&orow_w) {
                *ov = T::from_f64(w);
            }
        }
    }
    let aux_scalars = s.len() + p.len() + row_max.len() + row_sum.len();
    let measured_peak_bytes = scope.finish().map(|m| m.peak_bytes);

    let mut sd = lead.clone();
    sd.extend([n, n]);
    let mut od = lead.clone();
    od.extend([n, dv]);
    Ok(NaiveOutput {
        o: Tensor::from_parts(od, o),
        s: Tensor::from_parts(sd.clone(), s),
        p: Tensor::from_parts(sd, p),
        stats: AttentionStats {
            row_max: Tensor::from_parts(with_n(&lead, n), row_max),
            row_sum: Tensor::from_parts(with_n(&lead, n), row_sum),
            aux_scalars,
            score_scalars,
            measured_peak_bytes,
            flops,
        },
    })
}

/// Streaming kernel for one group. Writes `o` (n x dv), `m`, `l` (n) and
/// returns the flop count.
#[allow(clippy::too_many_arguments)]
fn stream_group<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    valid: Option<&[bool]>,
    l: Layout,
    tile: usize,
    scratch: &mut Scratch,
    o: &mut [T],
    row_max: &mut [T],
    row_sum: &mut [T],
) -> u64 {
    let Layout { n, dq, dv, .. } = l;
    let mut flops = 0u64;
    for qb in (0..n).step_by(tile) {
        let bq = tile.min(n - qb);
        let (m, den, acc, s) = (
            &mut scratch.m[..bq],
            &mut scratch.l[..bq],
            &mut scratch.acc[..bq * dv],
            &mut scratch.s,
        );
        m.fill(f64::NEG_INFINITY);
        den.fill(0.0);
        acc.fill(0.0);
        for kb in (0..n).step_by(tile) {
            let bk = tile.min(n - kb);
            for i in 0..bq {
                let qi = &q[(qb + i) * dq..(qb + i + 1) * dq];
                for j in 0..bk {
                    let key = kb + j;
                    s[i * tile + j] = if valid.is_some_and(|vm| !vm[key]) {
                        f64::NEG_INFINITY
                    } else {
                        flops += 2 * dq as u64;
                        dot_wide(qi, &k[key * dq..(key + 1) * dq])
                    };
                }
            }
            for i in 0..bq {
                let srow = &s[i * tile..i * tile + bk];
                let tile_max = srow.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
                // shifts are kept representable in T so row_max is exact
                let new_m = T::from_f64(m[i].max(tile_max)).as_f64();
                if new_m == f64::NEG_INFINITY {
                    continue;
                }
                let alpha = (m[i] - new_m).exp();
                let arow = &mut acc[i * dv..(i + 1) * dv];
                if alpha != 1.0 {
                    den[i] *= alpha;
                    for a in arow.iter_mut() {
                        *a *= alpha;
                    }
                }
                for (j, &sij) in srow.iter().enumerate() {
                    if sij == f64::NEG_INFINITY {
                        continue;
                    }
                    let pij = (sij - new_m).exp();
                    den[i] += pij;
                    let vj = &v[(kb + j) * dv..(kb + j + 1) * dv];
                    for (a, &x) in arow.iter_mut().zip(vj) {
                        *a += pij * x.as_f64();
                    }
                    flops += 2 * dv as u64;
                }
                m[i] = new_m;
            }
        }
        for i in 0..bq {
            let orow = &mut o[(qb + i) * dv..(qb + i + 1) * dv];
            if den[i] > 0.0 {
                for (ov, &a) in orow.iter_mut().zip(&acc[i * dv..(i + 1) * dv]) {
                    *ov = T::from_f64(a / den[i]);
                }
            } else {
                orow.fill(T::zero());
            }
            row_max[qb + i] = T::from_f64(m[i]);
            row_sum[qb + i] = T::from_f64(den[i]);
        }
    }
    flops
}

/// Per-thread working set of the streaming kernel, in f64.
struct Scratch {
    s: Vec<f64>,
    acc: Vec<f64>,
    m: Vec<f64>,
    l: Vec<f64>,
}

impl Scratch {
    fn new(tile: usize, dv: usize) -> Self {
        Self {
            s: vec![0.0; tile * tile],
            acc: vec![0.0; tile * dv],
            m: vec![0.0; tile],
            l: vec![0.0; tile],
        }
    }

    fn scalars(&self) -> usize {
        self.s.len() + self.acc.len() + self.m.len() + self.l.len()
    }
}

/// Streaming (online-softmax) attention. Rejects `cfg.bias == Rpb`.
pub fn attend_streaming<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&KeyMask>,
    cfg: &AttentionConfig,
) -> Result<(Tensor<T>, AttentionStats<T>)> {
    cfg.validate()?;
    let (l, lead) = layout(q, k, v, mask)?;
    check_finite(&[q, k, v])?;
    let tile = cfg.effective_tile(l.n).min(l.n);
    let Layout { groups, n, dq, dv } = l;
    let (qs, ks, vs) = (q.as_slice(), k.as_slice(), v.as_slice());

    let scope = ProbeScope::enter();
    let mut o = vec![T::zero(); groups * n * dv];
    let mut row_max = vec![T::zero(); groups * n];
    let mut row_sum = vec![T::zero(); groups * n];

    let run = |g: usize, scratch: &mut Scratch, o: &mut [T], m: &mut [T], s: &mut [T]| {
        stream_group(
            &qs[g * n * dq..(g + 1) * n * dq],
            &ks[g * n * dq..(g + 1) * n * dq],
            &vs[g * n * dv..(g + 1) * n * dv],
            mask.map(|mk| mk.row_for(g, groups)),
            l,
            tile,
            scratch,
            o,
            m,
            s,
        )
    };

    let (flops, scratch_scalars) = if cfg.threads <= 1 || groups == 1 {
        let mut scratch = Scratch::new(tile, dv);
        let mut flops = 0;
        for (g, ((og, mg), sg)) in o
            .chunks_mut(n * dv)
            .zip(row_max.chunks_mut(n))
            .zip(row_sum.chunks_mut(n))
            .enumerate()
        {
            flops += run(g, &mut scratch, og, mg, sg);
        }
        (flops, scratch.scalars())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let flops = pool.install(|| {
            o.par_chunks_mut(n * dv)
                .zip(row_max.par_chunks_mut(n))
                .zip(row_sum.par_chunks_mut(n))
                .enumerate()
                .map_init(
                    || Scratch::new(tile, dv),
                    |scratch, (g, ((og, mg), sg))| run(g, scratch, og, mg, sg),
                )
                .collect::<Vec<u64>>()
                .into_iter()
                .sum()
        });
        (flops, Scratch::new(tile, dv).scalars() * cfg.threads)
    };
    let aux_scalars = scratch_scalars + row_max.len() + row_sum.len();
    let measured_peak_bytes = scope.finish().map(|m| m.peak_bytes);

    let mut od = lead.clone();
    od.extend([n, dv]);
    Ok((
        Tensor::from_parts(od, o),
        AttentionStats {
            row_max: Tensor::from_parts(with_n(&lead, n), row_max),
            row_sum: Tensor::from_parts(with_n(&lead, n), row_sum),
            aux_scalars,
            score_scalars: 0,
            measured_peak_bytes,
            flops,
        },
    ))
}

pub struct AttentionGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    /// Gradient of the additive bias, summed over the groups sharing it.
    pub dbias: Option<Tensor<T>>,
}

#[inline]
fn dot_wide<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x.as_f64() * y.as_f64())
}

fn narrow<T: Scalar>(dims: &[usize], wide: Vec<f64>) -> Tensor<T> {
    Tensor::from_parts(dims.to_vec(), wide.into_iter().map(T::from_f64).collect())
}

/// Backward of [`attend_naive`] from the saved probabilities. Sums are
/// carried in f64 and rounded once.
pub fn naive_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    p: &Tensor<T>,
    d_o: &Tensor<T>,
    bias_dims: Option<&[usize]>,
) -> Result<AttentionGrads<T>> {
    let (l, _) = layout(q, k, v, None)?;
    let Layout { groups, n, dq, dv } = l;
    let (qs, ks, vs, ps, dos) = (
        q.as_slice(),
        k.as_slice(),
        v.as_slice(),
        p.as_slice(),
        d_o.as_slice(),
    );
    let mut gq = vec![0.0f64; q.numel()];
    let mut gk = vec![0.0f64; k.numel()];
    let mut gv = vec![0.0f64; v.numel()];
    let nb = bias_dims.map(|d| d.iter().product::<usize>() / (n * n));
    let mut gb = nb.map(|nb| vec![0.0f64; nb * n * n]);
    let mut ds = vec![0.0f64; n];
    for g in 0..groups {
        for i in 0..n {
            let prow = &ps[(g * n + i) * n..(g * n + i + 1) * n];
            let doi = &dos[(g * n + i) * dv..(g * n + i + 1) * dv];
            // dP_ij = dO_i . V_j ; dS_ij = P_ij (dP_ij - sum_k P_ik dP_ik)
            let mut rowdot = 0.0;
            for j in 0..n {
                let vj = &vs[(g * n + j) * dv..(g * n + j + 1) * dv];
                let dp = dot_wide(doi, vj);
                let pij = prow[j].as_f64();
                ds[j] = dp;
                rowdot += pij * dp;
                let gvj = &mut gv[(g * n + j) * dv..(g * n + j + 1) * dv];
                for (a, &x) in gvj.iter_mut().zip(doi) {
                    *a += pij * x.as_f64();
                }
            }
            for j in 0..n {
                let dsij = prow[j].as_f64() * (ds[j] - rowdot);
                if dsij == 0.0 {
                    continue;
                }
                let kj = &ks[(g * n + j) * dq..(g * n + j + 1) * dq];
                let gqi = &mut gq[(g * n + i) * dq..(g * n + i + 1) * dq];
                for (a, &x) in gqi.iter_mut().zip(kj) {
                    *a += dsij * x.as_f64();
                }
                let qi = &qs[(g * n + i) * dq..(g * n + i + 1) * dq];
                let gkj = &mut gk[(g * n + j) * dq..(g * n + j + 1) * dq];
                for (a, &x) in gkj.iter_mut().zip(qi) {
                    *a += dsij * x.as_f64();
                }
                if let (Some(gb), Some(nb)) = (gb.as_mut(), nb) {
                    gb[(g % nb) * n * n + i * n + j] += dsij;
                }
            }
        }
    }
    Ok(AttentionGrads {
        dq: narrow(q.dims(), gq),
        dk: narrow(k.dims(), gk),
        dv: narrow(v.dims(), gv),
        dbias: gb.map(|b| narrow(bias_dims.unwrap(), b)),
    })
}

/// Backward of [`attend_streaming`]. Probabilities are recomputed tile by
/// tile from the saved row statistics, so no N x N buffer appears here
/// either. Sums are carried in f64 and rounded once.
#[allow(clippy::too_many_arguments)]
pub fn streaming_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    o: &Tensor<T>,
    d_o: &Tensor<T>,
    stats: (&Tensor<T>, &Tensor<T>),
    mask: Option<&KeyMask>,
    tile: usize,
) -> Result<AttentionGrads<T>> {
    let (l, _) = layout(q, k, v, mask)?;
    let Layout { groups, n, dq, dv } = l;
    let tile = tile.clamp(1, n);
    let (qs, ks, vs, os, dos) = (
        q.as_slice(),
        k.as_slice(),
        v.as_slice(),
        o.as_slice(),
        d_o.as_slice(),
    );
    let (ms, ls) = (stats.0.as_slice(), stats.1.as_slice());
    let mut gq = vec![0.0f64; q.numel()];
    let mut gk = vec![0.0f64; k.numel()];
    let mut gv = vec![0.0f64; v.numel()];
    let mut delta = vec![0.0f64; n];
    let mut pt = vec![0.0f64; tile * tile];
    for g in 0..groups {
        let valid = mask.map(|mk| mk.row_for(g, groups));
        for (i, di) in delta.iter_mut().enumerate() {
            let r = g * n + i;
            *di = dot_wide(&dos[r * dv..(r + 1) * dv], &os[r * dv..(r + 1) * dv]);
        }
        for qb in (0..n).step_by(tile) {
            let bq = tile.min(n - qb);
            for kb in (0..n).step_by(tile) {
                let bk = tile.min(n - kb);
                for i in 0..bq {
                    let r = g * n + qb + i;
                    let qi = &qs[r * dq..(r + 1) * dq];
                    let (m, l) = (ms[r].as_f64(), ls[r].as_f64());
                    for j in 0..bk {
                        let key = kb + j;
                        pt[i * tile + j] = if l == 0.0 || valid.is_some_and(|vm| !vm[key]) {
                            0.0
                        } else {
                            let sij = dot_wide(qi, &ks[(g * n + key) * dq..(g * n + key + 1) * dq]);
                            (sij - m).exp() / l
                        };
                    }
                }
                for i in 0..bq {
                    let r = g * n + qb + i;
                    let doi = &dos[r * dv..(r + 1) * dv];
                    for j in 0..bk {
                        let pij = pt[i * tile + j];
                        if pij == 0.0 {
                            continue;
                        }
                        let c = g * n + kb + j;
                        let vj = &vs[c * dv..(c + 1) * dv];
                        let dsij = pij * (dot_wide(doi, vj) - delta[qb + i]);
                        for (a, &x) in gv[c * dv..(c + 1) * dv].iter_mut().zip(doi) {
                            *a += pij * x.as_f64();
                        }
                        for (a, &x) in gq[r * dq..(r + 1) * dq]
                            .iter_mut()
                            .zip(&ks[c * dq..(c + 1) * dq])
                        {
                            *a += dsij * x.as_f64();
                        }
                        for (a, &x) in gk[c * dq..(c + 1) * dq]
                            .iter_mut()
                            .zip(&qs[r * dq..(r + 1) * dq])
                        {
                            *a += dsij * x.as_f64();
                        }
                    }
                }
            }
        }
    }
    Ok(AttentionGrads {
        dq: narrow(q.dims(), gq),
        dk: narrow(k.dims(), gk),
        dv: narrow(v.dims(), gv),
        dbias: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{BiasKind, KernelKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(tile: usize) -> AttentionConfig {
        AttentionConfig::new(1, 4, 0, BiasKind::None, KernelKind::Streaming).with_tile(tile)
    }

    fn rand_qkv(
        rng: &mut ChaCha8Rng,
        lead: &[usize],
        n: usize,
        dq: usize,
        dv: usize,
    ) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let mut d = lead.to_vec();
        d.extend([n, dq]);
        let q = Tensor::randn(d.clone(), rng).unwrap();
        let k = Tensor::randn(d.clone(), rng).unwrap();
        *d.last_mut().unwrap() = dv;
        let v = Tensor::randn(d, rng).unwrap();
        (q, k, v)
    }

    #[test]
    fn single_token_reads_out_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (q, k, v) = rand_qkv(&mut rng, &[1], 1, 3, 2);
        let out = attend_naive(&q, &k, &v, None, None).unwrap();
        assert_eq!(out.p.as_slice(), &[1.0]);
        assert_eq!(out.o, v);
    }

    #[test]
    fn one_hot_values_read_out_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 5;
        let (q, k, _) = rand_qkv(&mut rng, &[1], n, 3, n);
        let v = Tensor::from_fn([1, n, n], |i| if i / n == i % n { 1.0 } else { 0.0 }).unwrap();
        let out = attend_naive(&q, &k, &v, None, None).unwrap();
        assert!(out.o.max_abs_diff(&out.p).unwrap() <= 1e-7);
    }

    #[test]
    fn identical_tokens_give_uniform_rows() {
        let n = 6;
        let q = Tensor::<f64>::full([1, n, 4], 0.3).unwrap();
        let v = Tensor::from_fn([1, n, 2], |i| i as f64).unwrap();
        let mut valid = vec![true; n];
        valid[4] = false;
        let mask = KeyMask::new(n, valid).unwrap();
        let out = attend_naive(&q, &q, &v, Some(&mask), None).unwrap();
        for i in 0..n {
            for j in 0..n {
                let expect = if j == 4 { 0.0 } else { 1.0 / 5.0 };
                assert!((out.p.get(&[0, i, j]).unwrap() - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nan_inputs_are_rejected() {
        let q = Tensor::<f32>::new([1, 1, 1], vec![f32::NAN]).unwrap();
        let z = Tensor::<f32>::zeros([1, 1, 1]).unwrap();
        assert!(matches!(
            attend_naive(&q, &z, &z, None, None),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            attend_streaming(&q, &z, &z, None, &cfg(1)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn streaming_matches_naive_with_ragged_tiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = rand_qkv(&mut rng, &[2], 100, 8, 5);
        let naive = attend_naive(&q, &k, &v, None, None).unwrap();
        for tile in [17, 100, 250] {
            let (o, stats) = attend_streaming(&q, &k, &v, None, &cfg(tile)).unwrap();
            assert!(o.max_abs_diff(&naive.o).unwrap() <= 1e-5, "tile {tile}");
            assert_eq!(stats.score_scalars, 0);
            assert_eq!(stats.flops, naive.stats.flops);
        }
    }

    #[test]
    fn all_masked_but_one_key_copies_that_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 9;
        let (q, k, v) = rand_qkv(&mut rng, &[1], n, 4, 3);
        let mut valid = vec![false; n];
        valid[6] = true;
        let mask = KeyMask::new(n, valid).unwrap();
        let (o, _) = attend_streaming(&q, &k, &v, Some(&mask), &cfg(4)).unwrap();
        for i in 0..n {
            for d in 0..3 {
                assert_eq!(o.get(&[0, i, d]), v.get(&[0, 6, d]));
            }
        }
    }

    #[test]
    fn flop_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d) = (33, 6);
        let (q, k, v) = rand_qkv(&mut rng, &[1], n, d, d);
        let (_, stats) = attend_streaming(&q, &k, &v, None, &cfg(8)).unwrap();
        assert_eq!(stats.flops, 2 * 2 * (n * n * d) as u64);
    }

    #[test]
    fn threaded_streaming_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = rand_qkv(&mut rng, &[6, 2], 20, 4, 4);
        let (a, _) = attend_streaming(&q, &k, &v, None, &cfg(7)).unwrap();
        let (b, _) = attend_streaming(&q, &k, &v, None, &cfg(7).with_threads(3)).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn streaming_backward_matches_naive_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 23;
        let (q, k, v) = rand_qkv(&mut rng, &[2], n, 5, 3);
        let valid: Vec<bool> = (0..2 * n).map(|_| rng.gen_bool(0.8)).collect();
        let mask = KeyMask::new(n, valid).unwrap();
        let d_o = Tensor::<f32>::randn([2, n, 3], &mut rng).unwrap();
        let naive = attend_naive(&q, &k, &v, Some(&mask), None).unwrap();
        let gn = naive_backward(&q, &k, &v, &naive.p, &d_o, None).unwrap();
        let (o, stats) = attend_streaming(&q, &k, &v, Some(&mask), &cfg(6)).unwrap();
        let gs = streaming_backward(
            &q,
            &k,
            &v,
            &o,
            &d_o,
            (&stats.row_max, &stats.row_sum),
            Some(&mask),
            6,
        )
        .unwrap();
        assert!(gn.dq.max_abs_diff(&gs.dq).unwrap() <= 1e-5);
        assert!(gn.dk.max_abs_diff(&gs.dk).unwrap() <= 1e-5);
        assert!(gn.dv.max_abs_diff(&gs.dv).unwrap() <= 1e-5);
    }
}
