//! Python bindings. Fields cross the boundary as flat lists in grid order
//! (`x` fastest); gradients are `dim` values per node and Hessians are packed
//! (`[xx, yy, xy]` in 2D, `[xx, yy, zz, xy, xz, yz]` in 3D).

use afmm::analysis::{self, ErrorReport, Method, Region, Shape};
use afmm::grid::{hess_len, GridSpec, JetField};
use afmm::march::{run_afmm, run_standard_fmm, RunStats};
use afmm::seed::SeedOptions;
use afmm::AfmmError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: AfmmError) -> PyErr {
    match e {
        AfmmError::InvalidGrid(_) | AfmmError::InvalidInput(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn method(name: &str) -> PyResult<Method> {
    match name {
        "fmm" => Ok(Method::Fmm),
        "afmm" => Ok(Method::Afmm),
        _ => Err(PyValueError::new_err(format!(
            "method must be 'fmm' or 'afmm', got {name:?}"
        ))),
    }
}

fn shape(name: &str) -> PyResult<Shape> {
    Shape::from_name(name).ok_or_else(|| PyValueError::new_err(format!("unknown shape {name:?}")))
}

fn field_dict<'py>(py: Python<'py>, f: &JetField, m: Method) -> PyResult<Bound<'py, PyDict>> {
    let dim = f.grid.dim();
    let d = PyDict::new(py);
    d.set_item("dim", dim)?;
    d.set_item("n", f.grid.n())?;
    d.set_item("h", f.grid.h())?;
    d.set_item("lo", f.grid.lo()[..dim].to_vec())?;
    d.set_item("phi", f.phi.clone())?;
    if m == Method::Afmm {
        d.set_item(
            "psi",
            f.psi
                .iter()
                .flat_map(|p| p[..dim].to_vec())
                .collect::<Vec<f64>>(),
        )?;
        d.set_item(
            "hess",
            f.hess
                .iter()
                .flat_map(|h| h[..hess_len(dim)].to_vec())
                .collect::<Vec<f64>>(),
        )?;
        let kappa: Vec<Option<f64>> = (0..f.grid.node_count())
            .map(|k| analysis::curvature(&f.jet(k), dim).ok())
            .collect();
        d.set_item("kappa", kappa)?;
    }
    Ok(d)
}

fn stats_dict<'py>(py: Python<'py>, s: &RunStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("seeds", s.seeds)?;
    d.set_item("marched", s.marched)?;
    d.set_item("tier_counts", s.tier_counts.to_vec())?;
    d.set_item("reupdates", s.reupdates)?;
    d.set_item("key_clamps", s.key_clamps)?;
    d.set_item("patch_retries", s.patch_retries)?;
    d.set_item("max_gradient_residual", s.max_gradient_residual)?;
    d.set_item("hessian_fallbacks", s.hessian_fallbacks)?;
    d.set_item("max_hessian_residual", s.max_hessian_residual)?;
    Ok(d)
}

fn report_dict<'py>(py: Python<'py>, r: &ErrorReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("quantity", r.quantity.label())?;
    d.set_item("region", r.region.label())?;
    d.set_item("n", r.n)?;
    d.set_item("h", r.h)?;
    d.set_item("l2", r.l2)?;
    d.set_item("linf", r.linf)?;
    d.set_item("count", r.count)?;
    d.set_item("excluded", r.excluded)?;
    Ok(d)
}

fn chunks<const K: usize>(
    flat: &[f64],
    nodes: usize,
    width: usize,
    what: &str,
) -> PyResult<Vec<[f64; K]>> {
    if flat.len() != nodes * width {
        return Err(PyValueError::new_err(format!(
            "{what} needs {} values, got {}",
            nodes * width,
            flat.len()
        )));
    }
    Ok(flat
        .chunks(width)
        .map(|c| {
            let mut v = [0.0; K];
            v[..width].copy_from_slice(c);
            v
        })
        .collect())
}

/// Reinitialize a sampled level set on the grid `lo + h * (i, j[, k])` with
/// `n` nodes per axis. Returns a dict with `phi`, and for the augmented
/// method `psi`, `hess`, `kappa` (None where the gradient degenerates) and
/// `stats`.
#[pyfunction]
#[pyo3(signature = (phi0, n, h, lo, psi0=None, method="afmm", alpha=0.1, tol=1e-10))]
#[allow(clippy::too_many_arguments)]
fn reinit<'py>(
    py: Python<'py>,
    phi0: Vec<f64>,
    n: usize,
    h: f64,
    lo: Vec<f64>,
    psi0: Option<Vec<f64>>,
    method: &str,
    alpha: f64,
    tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let m = self::method(method)?;
    let dim = lo.len();
    let mut lo3 = [0.0; 3];
    lo3[..dim.min(3)].copy_from_slice(&lo[..dim.min(3)]);
    let grid = GridSpec::new(dim, lo3, n, h).map_err(to_py)?;
    let psi0 = psi0
        .map(|p| chunks::<3>(&p, grid.node_count(), dim, "psi0"))
        .transpose()?;
    let opts = SeedOptions { alpha, tol };
    let (field, stats) = py
        .detach(|| -> afmm::Result<_> {
            match m {
                Method::Fmm => {
                    let (phi, _) = run_standard_fmm(&phi0, psi0.as_deref(), &grid, opts)?;
                    let mut f = JetField::zeros(grid);
                    f.phi = phi;
                    Ok((f, None))
                }
                Method::Afmm => {
                    let run = run_afmm(&phi0, psi0.as_deref(), &grid, opts)?;
                    Ok((run.field, Some(run.stats)))
                }
            }
        })
        .map_err(to_py)?;
    let d = field_dict(py, &field, m)?;
    if let Some(s) = stats {
        d.set_item("stats", stats_dict(py, &s)?)?;
    }
    Ok(d)
}

/// Reinitialize one of the named test shapes and report errors against its
/// exact distance field over the whole grid and the `band_width * h` band.
#[pyfunction]
#[pyo3(signature = (name, n, method="afmm", band_width=9.0))]
fn reinit_shape<'py>(
    py: Python<'py>,
    name: &str,
    n: usize,
    method: &str,
    band_width: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let (s, m) = (shape(name)?, self::method(method)?);
    let (run, errs) = py
        .detach(|| -> afmm::Result<_> {
            let run = analysis::run_shape(s, n, m, SeedOptions::default())?;
            let errs = analysis::case_errors(&run, &[Region::Whole, Region::Band(band_width)])?;
            Ok((run, errs))
        })
        .map_err(to_py)?;
    let d = field_dict(py, &run.field, m)?;
    if let Some(st) = &run.stats {
        d.set_item("stats", stats_dict(py, st)?)?;
    }
    d.set_item("causal", run.causal)?;
    d.set_item(
        "errors",
        errs.iter()
            .map(|r| report_dict(py, r))
            .collect::<PyResult<Vec<_>>>()?,
    )?;
    Ok(d)
}

/// Error reports over several grids and, with three or more grids, fitted
/// orders keyed by `"quantity/region"` as `(l2, linf)` pairs.
#[pyfunction]
#[pyo3(signature = (name, ns, method="afmm", band_width=9.0))]
fn convergence<'py>(
    py: Python<'py>,
    name: &str,
    ns: Vec<usize>,
    method: &str,
    band_width: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let (s, m) = (shape(name)?, self::method(method)?);
    let reports = py
        .detach(|| -> afmm::Result<Vec<ErrorReport>> {
            let mut all = Vec::new();
            for &n in &ns {
                let run = analysis::run_shape(s, n, m, SeedOptions::default())?;
                all.extend(analysis::case_errors(
                    &run,
                    &[Region::Whole, Region::Band(band_width)],
                )?);
            }
            Ok(all)
        })
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item(
        "errors",
        reports
            .iter()
            .map(|r| report_dict(py, r))
            .collect::<PyResult<Vec<_>>>()?,
    )?;
    let orders = PyDict::new(py);
    if ns.len() >= 3 {
        for f in analysis::fit_orders(&reports).map_err(to_py)? {
            orders.set_item(
                format!("{}/{}", f.quantity.label(), f.region.label()),
                (f.l2, f.linf),
            )?;
        }
    }
    d.set_item("orders", orders)?;
    Ok(d)
}

/// Closed-form errors of the two-neighbor diagonal stencil near a circle.
#[pyfunction]
#[pyo3(signature = (x, h, r0=1.0))]
fn stencil_study<'py>(py: Python<'py>, x: f64, h: f64, r0: f64) -> PyResult<Bound<'py, PyDict>> {
    let s = analysis::stencil_study(x, h, r0).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("phi", s.phi)?;
    d.set_item("psi", s.psi)?;
    d.set_item("level_set_error", s.level_set_error)?;
    d.set_item("gradient_error", s.gradient_error)?;
    Ok(d)
}

/// Mean-curvature sum of a jet: `psi` has `dim` entries, `hess` is packed.
#[pyfunction]
fn curvature(psi: Vec<f64>, hess: Vec<f64>) -> PyResult<f64> {
    let dim = psi.len();
    if !(dim == 2 || dim == 3) || hess.len() != hess_len(dim) {
        return Err(PyValueError::new_err(
            "psi needs 2 or 3 entries and hess the matching packed length",
        ));
    }
    let mut jet = afmm::grid::Jet::default();
    jet.psi[..dim].copy_from_slice(&psi);
    jet.hess[..hess.len()].copy_from_slice(&hess);
    analysis::curvature(&jet, dim).map_err(to_py)
}

#[pyfunction]
fn shapes() -> Vec<&'static str> {
    Shape::ALL.iter().map(|s| s.name()).collect()
}

#[pymodule]
fn afmm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(reinit, m)?)?;
    m.add_function(wrap_pyfunction!(reinit_shape, m)?)?;
    m.add_function(wrap_pyfunction!(convergence, m)?)?;
    m.add_function(wrap_pyfunction!(stencil_study, m)?)?;
    m.add_function(wrap_pyfunction!(curvature, m)?)?;
    m.add_function(wrap_pyfunction!(shapes, m)?)?;
    Ok(())
}
