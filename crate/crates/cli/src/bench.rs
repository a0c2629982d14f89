//! Attention micro-benchmark over square windows of `N = M^2` tokens.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rib_core::attention::{
    attend, build_augmented_qk, AttentionConfig, AugmentedQkv, AttnProjections, BiasKind, KernelKind, Positional,
};
use rib_core::instrument::allocator_installed;
use rib_core::posbias::{
    rib_positional_tokens, rpb_bias_matrix, PosTokens, RibParams, RopeConfig, RopeTable, RpbTable, WindowGeometry,
};
use rib_core::{Error, Result, Tensor};

use crate::report::Record;

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub n: Vec<usize>,
    pub bias: BiasKind,
    pub kernel: KernelKind,
    pub heads: usize,
    /// Content width per head.
    pub head_dim: usize,
    pub rank: usize,
    pub tile: Option<usize>,
    pub runs: usize,
    pub threads: usize,
    pub seed: u64,
    /// Naive cases whose score and probability buffers would exceed this
    /// many bytes are skipped.
    pub max_naive_bytes: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            n: vec![256, 1024, 4096],
            bias: BiasKind::Rib,
            kernel: KernelKind::Streaming,
            heads: 1,
            head_dim: 32,
            rank: 8,
            tile: None,
            runs: 5,
            threads: 1,
            seed: 0,
            max_naive_bytes: 1 << 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub case: usize,
    pub n: usize,
    pub m: usize,
    pub heads: usize,
    pub bias: BiasKind,
    pub kernel: KernelKind,
    /// Median wall time of the kernel call.
    pub median_ns: u128,
    pub peak_aux_bytes: u64,
    pub peak_aux_scalars: u64,
    pub score_scalars: usize,
    pub flops: u64,
}

impl BenchReport {
    pub fn record(&self) -> Record {
        Record::new("bench")
            .field("case", self.case)
            .field("n", self.n)
            .field("m", self.m)
            .field("heads", self.heads)
            .field("bias", self.bias)
            .field("kernel", self.kernel)
            .field("peak_aux_bytes", self.peak_aux_bytes)
            .field("peak_aux_scalars", self.peak_aux_scalars)
            .field("score_scalars", self.score_scalars)
            .field("flops", self.flops)
            .field("time_median_ns", self.median_ns)
    }
}

/// Outcome of one requested size.
#[derive(Debug, Clone)]
pub enum BenchRow {
    Done(BenchReport),
    Skipped { n: usize, reason: String },
}

fn window_side(n: usize) -> Result<usize> {
    let m = (n as f64).sqrt().round() as usize;
    if m == 0 || m * m != n {
        return Err(Error::Config(format!("bench sizes must be square token counts, got {n}")));
    }
    Ok(m)
}

fn inputs(opts: &BenchOptions, m: usize, rng: &mut ChaCha8Rng) -> Result<(AugmentedQkv<f32>, Option<Tensor<f32>>)> {
    let n = m * m;
    let d = opts.heads * opts.head_dim;
    let rank = if opts.bias == BiasKind::Rib { opts.rank } else { 0 };
    let cfg = AttentionConfig::new(opts.heads, d, rank, opts.bias, opts.kernel);
    let x = Tensor::<f32>::randn([1, n, d], rng)?;
    let bound = 1.0 / (d as f64).sqrt();
    let proj = AttnProjections {
        w_q: Tensor::uniform([d, d], bound, rng)?,
        w_k: Tensor::uniform([d, d], bound, rng)?,
        w_v: Tensor::uniform([d, d], bound, rng)?,
    };
    let geom = WindowGeometry::<f32>::new(m)?;
    match opts.bias {
        BiasKind::None => Ok((build_augmented_qk(&x, &proj, Positional::None, &cfg)?, None)),
        BiasKind::Rope => {
            let table = RopeTable::new(&geom, &RopeConfig::axial(opts.head_dim)?)?;
            Ok((build_augmented_qk(&x, &proj, Positional::Rope(&table), &cfg)?, None))
        }
        BiasKind::Rib => {
            let p = RibParams::<f32>::init(10, 32, opts.rank, opts.heads, rng)?;
            let (q, k) = rib_positional_tokens(&geom, &p)?;
            let tokens = PosTokens { q, k };
            Ok((build_augmented_qk(&x, &proj, Positional::Rib(&tokens), &cfg)?, None))
        }
        BiasKind::Rpb => {
            let table = RpbTable::<f32>::uniform(m, opts.heads, 0.02, rng)?;
            let b = rpb_bias_matrix(&table)?;
            let qkv = build_augmented_qk(&x, &proj, Positional::Rpb(&b), &cfg)?;
            Ok((qkv, Some(b)))
        }
    }
}

fn median(mut xs: Vec<u128>) -> u128 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

/// Runs every size in `opts.n`. Positional inputs are built outside the
/// timed region; only the kernel call is timed and measured.
pub fn run_bench(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.runs < 5 {
        return Err(Error::Config(format!("need at least 5 runs for a median, got {}", opts.runs)));
    }
    if opts.threads == 0 || opts.heads == 0 || opts.head_dim == 0 {
        return Err(Error::Config("threads, heads and head_dim must be positive".into()));
    }
    if !allocator_installed() {
        return Err(Error::Unsupported("bench needs the counting allocator installed".into()));
    }
    let mut rows = Vec::new();
    for (case, &n) in opts.n.iter().enumerate() {
        let m = window_side(n)?;
        if opts.kernel == KernelKind::Naive {
            let bytes = 2 * (n as u64) * (n as u64) * opts.heads as u64 * 4;
            if bytes > opts.max_naive_bytes {
                rows.push(BenchRow::Skipped {
                    n,
                    reason: format!("naive buffers need {bytes} bytes, limit {}", opts.max_naive_bytes),
                });
                continue;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(case as u64));
        let (qkv, rpb) = inputs(opts, m, &mut rng)?;
        let pos = match &rpb {
            Some(b) => Positional::Rpb(b),
            None => Positional::None,
        };
        let d = opts.heads * opts.head_dim;
        let rank = if opts.bias == BiasKind::Rib { opts.rank } else { 0 };
        let mut cfg = AttentionConfig::new(opts.heads, d, rank, opts.bias, opts.kernel).with_threads(opts.threads);
        if let Some(t) = opts.tile {
            cfg = cfg.with_tile(t);
        }

        let mut times = Vec::with_capacity(opts.runs);
        let mut last = None;
        for _ in 0..opts.runs {
            let t = Instant::now();
            let out = attend(&qkv, None, pos, &cfg)?;
            times.push(t.elapsed().as_nanos());
            last = Some(out);
        }
        let (o, stats) = last.expect("at least one run");
        if opts.threads > 1 {
            let (single, _) = attend(&qkv, None, pos, &cfg.clone().with_threads(1))?;
            if !single.bitwise_eq(&o) {
                return Err(Error::Numeric(format!("threaded output differs from single-thread at n={n}")));
            }
        }
        let peak = stats
            .measured_peak_bytes
            .ok_or_else(|| Error::Unsupported("kernel reported no allocator measurement".into()))?;
        rows.push(BenchRow::Done(BenchReport {
            case,
            n,
            m,
            heads: opts.heads,
            bias: opts.bias,
            kernel: opts.kernel,
            median_ns: median(times),
            peak_aux_bytes: peak,
            peak_aux_scalars: peak / std::mem::size_of::<f32>() as u64,
            score_scalars: stats.score_scalars,
            flops: stats.flops,
        }));
    }
    Ok(rows)
}
