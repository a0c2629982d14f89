use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A scalar function of a list of tensors that can be evaluated on a tape at
/// any precision. Generic evaluation is what lets the finite-difference
/// oracle run in f64 while the analytic gradient runs in f32.
pub trait Differentiable {
    fn eval<S: Scalar>(&self, tape: &mut Tape<S>, params: &[Var]) -> Result<Var>;
}

/// Precision the central differences are evaluated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdPrecision {
    /// Same scalar type as the analytic gradient.
    Native,
    /// Always f64, regardless of the analytic type.
    F64,
}

/// Central-difference formula used by the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error O(h^2).
    ThreePoint,
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, error O(h^4).
    FivePoint,
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Absolute floor for the relative-error denominator.
    pub floor: f64,
    /// Number of coordinates sampled across all params; `None` checks all.
    pub coords: Option<usize>,
    pub seed: u64,
    pub precision: FdPrecision,
    pub stencil: Stencil,
}

impl GradCheckConfig {
    /// The five-point stencil at h = 1e-3 keeps both truncation (~h^4) and
    /// cancellation (~u/h) well below the 1e-6 bar, even for gradients near
    /// the floor.
    pub fn f64_default() -> Self {
        Self {
            eps: 1e-3,
            tol: 1e-6,
            floor: 1e-6,
            coords: None,
            seed: 0,
            precision: FdPrecision::Native,
            stencil: Stencil::FivePoint,
        }
    }

    pub fn f32_default() -> Self {
        Self {
            eps: 1e-3,
            tol: 1e-3,
            floor: 1e-3,
            coords: None,
            seed: 0,
            precision: FdPrecision::F64,
            stencil: Stencil::ThreePoint,
        }
    }

    pub fn with_coords(mut self, coords: usize, seed: u64) -> Self {
        self.coords = Some(coords);
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(param index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

fn eval_loss<S: Scalar, F: Differentiable>(f: &F, params: &[Tensor<S>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(format!("p{i}"), p.clone()))
        .collect();
    let loss = f.eval(&mut tape, &vars)?;
    let value = tape.value(loss).item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite function value {value}")));
    }
    Ok(value)
}

/// Analytic gradients of `f` at `params`, in parameter order.
pub fn analytic_grads<T: Scalar, F: Differentiable>(
    f: &F,
    params: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(format!("p{i}"), p.clone()))
        .collect();
    let loss = f.eval(&mut tape, &vars)?;
    let g = tape.backward(loss)?;
    Ok((0..params.len())
        .map(|i| g.get(&format!("p{i}")).unwrap().clone())
        .collect())
}

fn central_difference<S: Scalar, F: Differentiable>(
    f: &F,
    params: &[Tensor<S>],
    which: usize,
    coord: usize,
    eps: f64,
    stencil: Stencil,
) -> Result<f64> {
    let shifted = |delta: f64| -> Result<f64> {
        let mut ps = params.to_vec();
        let mut data = ps[which].as_slice().to_vec();
        data[coord] = data[coord] + S::from_f64(delta);
        ps[which] = Tensor::new(params[which].dims().to_vec(), data)?;
        eval_loss(f, &ps)
    };
    let near = shifted(eps)? - shifted(-eps)?;
    Ok(match stencil {
        Stencil::ThreePoint => near / (2.0 * eps),
        Stencil::FivePoint => {
            let far = shifted(2.0 * eps)? - shifted(-2.0 * eps)?;
            (8.0 * near - far) / (12.0 * eps)
        }
    })
}

/// Compares the tape gradient of `f` with central differences.
///
/// Per coordinate the error is `|a - n| / max(|a|, |n|, floor)`; the check
/// passes iff the maximum is at most `tol`.
pub fn grad_check<T: Scalar, F: Differentiable>(
    f: &F,
    params: &[Tensor<T>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(1e-5..=1e-2).contains(&cfg.eps) {
        return Err(Error::Config(format!("eps {} outside [1e-5, 1e-2]", cfg.eps)));
    }
    let analytic = analytic_grads(f, params)?;
    let sizes: Vec<usize> = params.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = match cfg.coords {
        Some(c) if c < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut v = sample(&mut rng, total, c).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..total).collect(),
    };
    let wide: Vec<Tensor<f64>> = params.iter().map(|p| p.cast()).collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        passed: true,
    };
    for flat in picks {
        let (mut which, mut coord) = (0, flat);
        while coord >= sizes[which] {
            coord -= sizes[which];
            which += 1;
        }
        let numeric = match cfg.precision {
            FdPrecision::Native => central_difference(f, params, which, coord, cfg.eps, cfg.stencil)?,
            FdPrecision::F64 => central_difference(f, &wide, which, coord, cfg.eps, cfg.stencil)?,
        };
        let a = analytic[which].as_slice()[coord].as_f64();
        let denom = a.abs().max(numeric.abs()).max(cfg.floor);
        let err = (a - numeric).abs() / denom;
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = err;
            report.worst = Some((which, coord));
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report.passed = report.max_rel_err <= cfg.tol;
    Ok(report)
}
