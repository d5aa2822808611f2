use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use afmm::analysis::{
    exact_field, fit_order, fit_orders, jet_errors, phi_errors, run_shape, stencil_study,
    ErrorReport, Method, Shape,
};
use afmm::grid::{GridSpec, JetField};
use afmm::interp::gradient_from_phi;
use afmm::io::{read_vtk, write_raw, write_vtk};
use afmm::march::{gradient_pass, hessian_pass, run_standard_fmm, RunStats};
use afmm::seed::SeedOptions;
use afmm::AfmmError;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::settings::{RunSettings, StencilSettings};
use crate::CliError;

pub const BUILD_ID: &str = env!("AFMM_BUILD_ID");

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).expect("summary serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn seed_options(s: &RunSettings) -> SeedOptions {
    SeedOptions {
        alpha: s.alpha,
        tol: s.tol,
    }
}

/// `| |psi| - 1 |` over all nodes and over the band `|phi| <= width * h`.
#[derive(Debug, Serialize)]
pub struct UnitGradient {
    pub max: f64,
    pub l2: f64,
    pub band_max: f64,
    pub band_l2: f64,
}

fn unit_gradient(phi: &[f64], psi: &[[f64; 3]], grid: &GridSpec, width: f64) -> UnitGradient {
    let dim = grid.dim();
    let res: Vec<(f64, bool)> = phi
        .iter()
        .zip(psi)
        .map(|(p, g)| {
            (
                (g[..dim].iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs(),
                p.abs() <= width * grid.h(),
            )
        })
        .collect();
    let norms = |it: &mut dyn Iterator<Item = f64>| {
        let (mut m, mut s, mut c) = (0.0f64, 0.0, 0usize);
        for v in it {
            m = m.max(v);
            s += v * v;
            c += 1;
        }
        (m, if c > 0 { (s / c as f64).sqrt() } else { 0.0 })
    };
    let (max, l2) = norms(&mut res.iter().map(|r| r.0));
    let (band_max, band_l2) = norms(&mut res.iter().filter(|r| r.1).map(|r| r.0));
    UnitGradient {
        max,
        l2,
        band_max,
        band_l2,
    }
}

struct Initial {
    grid: GridSpec,
    phi0: Vec<f64>,
    psi0: Option<Vec<[f64; 3]>>,
    shape: Option<Shape>,
}

fn initial(s: &RunSettings) -> Result<Initial, CliError> {
    let n = match s.n.as_slice() {
        [] => None,
        [n] => Some(*n),
        _ => return Err(CliError::Usage("reinit takes a single --n".into())),
    };
    if let Some(shape) = s.shape {
        let n = n.unwrap_or(if shape.dim() == 2 { 100 } else { 50 });
        let grid = shape.grid(n)?;
        return Ok(Initial {
            phi0: shape.sample_phi0(&grid),
            psi0: Some(shape.sample_psi0(&grid)),
            grid,
            shape: Some(shape),
        });
    }
    let path = s
        .input
        .as_ref()
        .ok_or_else(|| CliError::Usage("reinit needs --shape or --input".into()))?;
    if n.is_some() {
        return Err(CliError::Usage(
            "--n does not apply to --input; the grid comes from the file".into(),
        ));
    }
    let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let v = read_vtk(BufReader::new(file))?;
    Ok(Initial {
        grid: v.grid,
        phi0: v.phi,
        psi0: v.psi,
        shape: None,
    })
}

pub fn reinit(s: &RunSettings) -> Result<Value, CliError> {
    let init = initial(s)?;
    let grid = init.grid;
    let opts = seed_options(s);
    let psi0 = init.psi0.as_deref();
    let start = Instant::now();
    let mut timings = serde_json::Map::new();
    let (field, stats, causal): (JetField, Option<RunStats>, bool) = match Method::from(s.method) {
        Method::Fmm => {
            let (phi, order) = run_standard_fmm(&init.phi0, psi0, &grid, opts)?;
            timings.insert("march_ms".into(), json!(ms(start)));
            let mut field = JetField::zeros(grid);
            field.phi = phi;
            (field, None, order.is_causal())
        }
        Method::Afmm => {
            let mut run = gradient_pass(&init.phi0, psi0, &grid, opts)?;
            timings.insert("gradient_pass_ms".into(), json!(ms(start)));
            let t = Instant::now();
            let (fallbacks, res) = hessian_pass(&mut run.field, &run.order);
            timings.insert("hessian_pass_ms".into(), json!(ms(t)));
            run.stats.hessian_fallbacks = fallbacks;
            run.stats.max_hessian_residual = res;
            (run.field, Some(run.stats), run.order.is_causal())
        }
    };
    timings.insert("run_ms".into(), json!(ms(start)));
    if field.phi.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numerical(AfmmError::UpdateFailure {
            node: field.phi.iter().position(|v| !v.is_finite()).unwrap_or(0),
        }));
    }

    let grad = match s.method.into() {
        Method::Fmm => unit_gradient(
            &field.phi,
            &gradient_from_phi(&field.phi, &grid),
            &grid,
            s.band_width,
        ),
        Method::Afmm => unit_gradient(&field.phi, &field.psi, &grid, s.band_width),
    };

    let errors: Option<Vec<ErrorReport>> = match init.shape {
        Some(shape) => {
            let t = Instant::now();
            let exact = exact_field(shape, &grid)?;
            let mut out = Vec::new();
            for r in s.regions() {
                match s.method.into() {
                    Method::Fmm => out.push(phi_errors(&field.phi, &exact, r)?),
                    Method::Afmm => out.extend(jet_errors(&field, &exact, r)?),
                }
            }
            timings.insert("errors_ms".into(), json!(ms(t)));
            Some(out)
        }
        None => None,
    };

    create_out(&s.common.out)?;
    let mut outputs: Vec<PathBuf> = vec![s.common.out.join("field.vtk")];
    let title = format!(
        "afmm {} {}",
        BUILD_ID,
        init.shape.map(|v| v.name()).unwrap_or("input")
    );
    write_vtk(create(&outputs[0])?, &field, &title)?;
    if s.raw {
        outputs.push(s.common.out.join("field.raw"));
        write_raw(create(&outputs[1])?, &field)?;
    }
    let summary_path = s.common.out.join("summary.json");
    outputs.push(summary_path.clone());
    let summary = json!({
        "build": BUILD_ID,
        "verb": "reinit",
        "parameters": s,
        "grid": { "dim": grid.dim(), "n": grid.n(), "h": grid.h(), "lo": grid.lo() },
        "causal": causal,
        "stats": stats,
        "unit_gradient": grad,
        "errors": errors,
        "timings": timings,
        "outputs": outputs,
    });
    write_json(&summary_path, &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
struct ErrorRow<'a> {
    shape: &'a str,
    method: &'a str,
    n: usize,
    h: f64,
    quantity: &'a str,
    region: String,
    norm: &'a str,
    error: f64,
    count: usize,
    excluded: usize,
}

#[derive(Debug, Serialize)]
struct OrderRow<'a> {
    shape: &'a str,
    method: &'a str,
    quantity: &'a str,
    region: String,
    norm: &'a str,
    order: f64,
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Fmm => "fmm",
        Method::Afmm => "afmm",
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// Grid size, wall time in ms, march stats, causality and error reports.
type Case = (usize, f64, Option<RunStats>, bool, Vec<ErrorReport>);

pub fn convergence(s: &RunSettings) -> Result<Value, CliError> {
    let shape = s
        .shape
        .ok_or_else(|| CliError::Usage("convergence needs --shape".into()))?;
    let method: Method = s.method.into();
    let mut ns = if s.n.is_empty() {
        if shape.dim() == 2 {
            vec![25, 50, 100, 200]
        } else {
            vec![25, 50]
        }
    } else {
        s.n.clone()
    };
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 2 {
        return Err(CliError::Usage(
            "convergence needs at least two distinct --n values".into(),
        ));
    }
    let regions = s.regions();
    let opts = seed_options(s);
    let start = Instant::now();
    let cases: Vec<Case> = ns
        .par_iter()
        .map(|&n| {
            let t = Instant::now();
            let run = run_shape(shape, n, method, opts)?;
            let errs = afmm::analysis::case_errors(&run, &regions)?;
            Ok((n, ms(t), run.stats, run.causal, errs))
        })
        .collect::<Result<_, AfmmError>>()?;
    let reports: Vec<ErrorReport> = cases.iter().flat_map(|c| c.4.iter().cloned()).collect();
    // two grids give error ratios instead of a fitted slope
    let orders = if ns.len() >= 3 {
        Some(fit_orders(&reports)?)
    } else {
        None
    };

    create_out(&s.common.out)?;
    let errors_path = s.common.out.join("errors.csv");
    let mut w = csv_writer(&errors_path)?;
    for r in &reports {
        for (norm, error) in [("l2", r.l2), ("linf", r.linf)] {
            w.serialize(ErrorRow {
                shape: shape.name(),
                method: method_name(method),
                n: r.n,
                h: r.h,
                quantity: r.quantity.label(),
                region: r.region.label(),
                norm,
                error,
                count: r.count,
                excluded: r.excluded,
            })
            .map_err(csv_err(&errors_path))?;
        }
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    let mut outputs = vec![errors_path.clone()];
    let mut ratios = Vec::new();
    if let Some(fits) = &orders {
        let orders_path = s.common.out.join("orders.csv");
        let mut w = csv_writer(&orders_path)?;
        for f in fits {
            for (norm, order) in [("l2", f.l2), ("linf", f.linf)] {
                w.serialize(OrderRow {
                    shape: shape.name(),
                    method: method_name(method),
                    quantity: f.quantity.label(),
                    region: f.region.label(),
                    norm,
                    order,
                })
                .map_err(csv_err(&orders_path))?;
            }
        }
        w.flush().map_err(|e| CliError::Io(e.to_string()))?;
        outputs.push(orders_path);
    } else {
        let (a, b) = (&cases[0].4, &cases[1].4);
        for (ra, rb) in a.iter().zip(b) {
            ratios.push(json!({
                "quantity": ra.quantity.label(),
                "region": ra.region.label(),
                "l2_ratio": ra.l2 / rb.l2,
                "linf_ratio": ra.linf / rb.linf,
            }));
        }
    }
    let summary_path = s.common.out.join("summary.json");
    outputs.push(summary_path.clone());
    let summary = json!({
        "build": BUILD_ID,
        "verb": "convergence",
        "parameters": s,
        "grids": ns,
        "cases": cases.iter().map(|c| json!({ "n": c.0, "run_ms": c.1, "stats": c.2, "causal": c.3 })).collect::<Vec<_>>(),
        "errors": reports,
        "orders": orders,
        "ratios": ratios,
        "total_ms": ms(start),
        "outputs": outputs,
    });
    write_json(&summary_path, &summary)?;
    Ok(summary)
}

pub fn stencil(s: &StencilSettings) -> Result<Value, CliError> {
    let rows: Vec<_> =
        s.h.iter()
            .flat_map(|&h| s.x.iter().map(move |&x| (x, h)))
            .map(|(x, h)| stencil_study(x, h, s.r0))
            .collect::<Result<_, _>>()?;
    create_out(&s.common.out)?;
    let path = s.common.out.join("stencil.csv");
    let mut w = csv_writer(&path)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    // per-position slopes when the h sweep is long enough to fit one
    let slopes: Vec<Value> = if s.h.len() >= 3 {
        s.x.iter()
            .map(|&x| {
                let at: Vec<_> = rows.iter().filter(|r| r.x == x).collect();
                let fit = |f: &dyn Fn(&afmm::analysis::StencilStudy) -> f64| {
                    fit_order(&at.iter().map(|r| (r.h, f(r))).collect::<Vec<_>>()).ok()
                };
                json!({ "x": x, "level_set_order": fit(&|r| r.level_set_error), "gradient_order": fit(&|r| r.gradient_error) })
            })
            .collect()
    } else {
        Vec::new()
    };
    let summary_path = s.common.out.join("summary.json");
    let summary = json!({
        "build": BUILD_ID,
        "verb": "stencil-study",
        "parameters": s,
        "rows": rows.len(),
        "slopes": slopes,
        "outputs": [path, summary_path.clone()],
    });
    write_json(&summary_path, &summary)?;
    Ok(summary)
}
