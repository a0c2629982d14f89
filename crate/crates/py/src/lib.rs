//! Python bindings: verification, attention kernels, positional bias
//! helpers and checkpoint inference.

pub mod convert;

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rib_core::attention::{attend_naive, attend_streaming, AttentionConfig, BiasKind, KernelKind};
use rib_core::blocks::conv::upscale_nearest;
use rib_core::blocks::SstModel;
use rib_core::posbias::{
    fit_rib_to_rpb, gaussian_bump, rib_bias_matrix, rib_param_count_for, rpb_param_count, FitConfig, RibParams,
    RpbTable, WindowGeometry,
};
use rib_core::train::{load_ppm, psnr_y, save_ppm, ssim_y};
use rib_core::verify::{run_check, VerifyOptions, CHECK_NAMES};
use rib_core::Error;

use convert::{nested3, tensor3, Nested3};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) | Error::Divergence { .. } | Error::Contract(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Names of the verification checks, in id order.
#[pyfunction]
fn check_names() -> Vec<&'static str> {
    CHECK_NAMES.to_vec()
}

/// Runs verification checks (all by default) and returns one dict per check.
#[pyfunction]
#[pyo3(signature = (ids=None, f64=false, seed=0))]
fn verify<'py>(py: Python<'py>, ids: Option<Vec<usize>>, f64: bool, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let ids = ids.unwrap_or_else(|| (1..=CHECK_NAMES.len()).collect());
    if let Some(bad) = ids.iter().find(|&&i| i == 0 || i > CHECK_NAMES.len()) {
        return Err(PyValueError::new_err(format!("no check {bad}")));
    }
    let opts = VerifyOptions {
        seed,
        f64,
        ..VerifyOptions::default()
    };
    let reports = py.detach(|| ids.iter().map(|&i| run_check(i, &opts)).collect::<Vec<_>>());
    reports
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("id", r.id)?;
            d.set_item("name", r.name)?;
            d.set_item("passed", r.passed)?;
            d.set_item("detail", r.detail)?;
            d.set_item("seconds", r.elapsed.as_secs_f64())?;
            Ok(d)
        })
        .collect()
}

/// Softmax attention over `[heads][tokens][width]` lists, computed in f64.
/// `q` and `k` share a width; `v` may differ.
#[pyfunction]
#[pyo3(signature = (q, k, v, kernel="streaming", tile=None))]
fn attention(py: Python<'_>, q: Nested3, k: Nested3, v: Nested3, kernel: &str, tile: Option<usize>) -> PyResult<Nested3> {
    let kernel: KernelKind = kernel.parse().map_err(py_err)?;
    let (q, k, v) = (
        tensor3(&q, "q").map_err(py_err)?,
        tensor3(&k, "k").map_err(py_err)?,
        tensor3(&v, "v").map_err(py_err)?,
    );
    py.detach(|| {
        let o = match kernel {
            KernelKind::Naive => attend_naive(&q, &k, &v, None, None)?.o,
            KernelKind::Streaming => {
                let mut cfg = AttentionConfig::new(1, 1, 0, BiasKind::None, kernel);
                if let Some(t) = tile {
                    cfg = cfg.with_tile(t);
                }
                attend_streaming(&q, &k, &v, None, &cfg)?.0
            }
        };
        nested3(&o)
    })
    .map_err(py_err)
}

fn rib_params(bands: usize, hidden: usize, rank: usize, heads: usize, seed: u64) -> rib_core::Result<RibParams<f64>> {
    RibParams::init(bands, hidden, rank, heads, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Positional bias `[heads][N][N]` of freshly initialised weights on an
/// `m x m` window.
#[pyfunction]
#[pyo3(signature = (m, rank, heads=1, bands=4, hidden=32, seed=0))]
fn rib_bias(m: usize, rank: usize, heads: usize, bands: usize, hidden: usize, seed: u64) -> PyResult<Nested3> {
    let p = rib_params(bands, hidden, rank, heads, seed).map_err(py_err)?;
    let geom = WindowGeometry::new(m).map_err(py_err)?;
    nested3(&rib_bias_matrix(&geom, &p).map_err(py_err)?).map_err(py_err)
}

/// Parameter counts of the implicit bias and of a relative-position table.
#[pyfunction]
#[pyo3(signature = (m, heads, rank=16, bands=10, hidden=32))]
fn param_counts<'py>(
    py: Python<'py>,
    m: usize,
    heads: usize,
    rank: usize,
    bands: usize,
    hidden: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("rib", rib_param_count_for(bands, hidden, rank, heads))?;
    d.set_item("rpb", rpb_param_count(m, heads))?;
    Ok(d)
}

/// Fits the implicit bias to a fixed offset table; returns the mse curve
/// endpoints.
#[pyfunction]
#[pyo3(signature = (m, rank, steps, lr=0.5, target="gaussian", sigma=3.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn fit_rpb<'py>(
    py: Python<'py>,
    m: usize,
    rank: usize,
    steps: usize,
    lr: f64,
    target: &str,
    sigma: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let table = match target {
        "gaussian" => gaussian_bump::<f64>(m, 1, sigma, 1.0),
        "separable" => RpbTable::from_offsets(m, 1, |_, dy, dx| 0.5 * (0.1 * dy as f64 + 0.1 * dx as f64).exp()),
        other => return Err(PyValueError::new_err(format!("unknown target '{other}'"))),
    }
    .map_err(py_err)?;
    let p0 = rib_params(4, 32, rank, 1, seed).map_err(py_err)?;
    let res = py
        .detach(|| fit_rib_to_rpb(&table, &p0, &FitConfig { steps, lr }))
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("initial_mse", res.curve.first().copied().unwrap_or(f64::NAN))?;
    d.set_item("mse", res.mse)?;
    Ok(d)
}

/// A trained checkpoint.
#[pyclass(frozen)]
struct Model {
    inner: SstModel<f32>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SstModel::load(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn scale(&self) -> usize {
        self.inner.cfg.scale
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.cfg.to_text()
    }

    /// Upscales a PPM/PGM file into `output`.
    fn infer_ppm(&self, py: Python<'_>, input: PathBuf, output: PathBuf) -> PyResult<()> {
        py.detach(|| {
            let img = load_ppm(&input)?;
            let sr = self.inner.infer(&img, None)?;
            save_ppm(&output, &sr)
        })
        .map_err(py_err)
    }
}

/// Y-channel PSNR and SSIM between two image files, with `border` pixels
/// cropped on each side.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, sr: PathBuf, hr: PathBuf, border: usize) -> PyResult<Bound<'py, PyDict>> {
    let (sr, hr) = (load_ppm(&sr).map_err(py_err)?, load_ppm(&hr).map_err(py_err)?);
    let d = PyDict::new(py);
    d.set_item("psnr", psnr_y(&sr, &hr, border).map_err(py_err)?.psnr)?;
    d.set_item("ssim", ssim_y(&sr, &hr, border).map_err(py_err)?.ssim)?;
    Ok(d)
}

/// Nearest-neighbour upscale of a PPM/PGM file, the baseline for `evaluate`.
#[pyfunction]
fn upscale_nearest_ppm(input: PathBuf, output: PathBuf, scale: usize) -> PyResult<()> {
    let img = load_ppm(&input).map_err(py_err)?;
    let d = img.dims().to_vec();
    let up = img
        .reshape([1, d[0], d[1], d[2]])
        .and_then(|x| upscale_nearest(&x, scale))
        .and_then(|x| x.reshape([d[0] * scale, d[1] * scale, d[2]]))
        .map_err(py_err)?;
    save_ppm(&output, &up).map_err(py_err)
}

#[pymodule]
fn ribpy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(check_names, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(attention, m)?)?;
    m.add_function(wrap_pyfunction!(rib_bias, m)?)?;
    m.add_function(wrap_pyfunction!(param_counts, m)?)?;
    m.add_function(wrap_pyfunction!(fit_rpb, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(upscale_nearest_ppm, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
