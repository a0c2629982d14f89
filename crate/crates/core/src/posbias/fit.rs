//! Fitting RIB weights to a fixed bias matrix by plain gradient descent.

use super::geometry::WindowGeometry;
use super::rib::{rib_tokens_on_tape, RibParams, RibVars};
use super::rpb::{rpb_bias_matrix, RpbTable};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub params: RibParams<T>,
    pub mse: f64,
    /// Loss before each step, then the final loss.
    pub curve: Vec<f64>,
}

/// `Q_p K_p^T / sqrt(R)` for every head, `[heads, N, N]`.
pub fn rib_bias_matrix<T: Scalar>(geom: &WindowGeometry<T>, p: &RibParams<T>) -> Result<Tensor<T>> {
    let (q, k) = super::rib::rib_positional_tokens(geom, p)?;
    let s = q.matmul(&k.transpose_last2()?)?;
    Ok(s.scale(lit(1.0 / (p.rank as f64).sqrt())))
}

fn loss_and_grads<T: Scalar>(
    geom: &WindowGeometry<T>,
    p: &RibParams<T>,
    target: &Tensor<T>,
) -> Result<(f64, [Tensor<T>; 4])> {
    let mut tape = Tape::new();
    let vars = RibVars::register(&mut tape, "", p);
    let (q, k) = rib_tokens_on_tape(&mut tape, geom, p.bands, &vars)?;
    let kt = tape.permute(k, &[0, 2, 1])?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, lit(1.0 / (p.rank as f64).sqrt()));
    let t = tape.constant(target.clone());
    let loss = tape.mse_loss(s, t)?;
    let value = tape.value(loss).item()?.as_f64();
    let g = tape.backward(loss)?;
    let grad = |v| g.wrt(v).expect("param gradient").clone();
    Ok((
        value,
        [grad(vars.w_h), grad(vars.b_h), grad(vars.w_pq), grad(vars.w_pk)],
    ))
}

/// Minimizes `mean((Q_p K_p^T / sqrt(R) - target)^2)` from `p0`.
///
/// `target` is `[heads, N, N]` with `N = side^2`. A non-finite loss aborts
/// with the step it occurred at.
pub fn fit_rib_to_bias<T: Scalar>(
    target: &Tensor<T>,
    side: usize,
    p0: &RibParams<T>,
    cfg: &FitConfig,
) -> Result<FitResult<T>> {
    let n = side * side;
    if target.dims() != [p0.heads, n, n] {
        return Err(Error::dims("fit target", target.dims(), &[p0.heads, n, n]));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Config(format!("fit lr {} must be finite and non-negative", cfg.lr)));
    }
    let geom = WindowGeometry::new(side)?;
    let mut p = p0.clone();
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    let lr: T = lit(cfg.lr);
    for step in 0..cfg.steps {
        let (loss, grads) = loss_and_grads(&geom, &p, target)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, value: loss });
        }
        curve.push(loss);
        let [gw, gb, gq, gk] = grads;
        let upd = |w: &Tensor<T>, g: &Tensor<T>| w.zip_map(g, "gd step", |a, b| a - lr * b);
        p.w_h = upd(&p.w_h, &gw)?;
        p.b_h = upd(&p.b_h, &gb)?;
        p.w_pq = upd(&p.w_pq, &gq)?;
        p.w_pk = upd(&p.w_pk, &gk)?;
    }
    let b = rib_bias_matrix(&geom, &p)?;
    let mse = b.sub(target)?.map(|x| x * x).mean().as_f64();
    if !mse.is_finite() {
        return Err(Error::Divergence {
            step: cfg.steps,
            value: mse,
        });
    }
    curve.push(mse);
    Ok(FitResult { params: p, mse, curve })
}

/// [`fit_rib_to_bias`] against the bias matrix of an RPB table.
pub fn fit_rib_to_rpb<T: Scalar>(
    target: &RpbTable<T>,
    p0: &RibParams<T>,
    cfg: &FitConfig,
) -> Result<FitResult<T>> {
    if target.heads() != p0.heads {
        return Err(Error::Config(format!(
            "rpb table has {} heads, rib params {}",
            target.heads(),
            p0.heads
        )));
    }
    fit_rib_to_bias(&rpb_bias_matrix(target)?, target.side(), p0, cfg)
}
