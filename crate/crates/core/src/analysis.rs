//! Curvature, error norms, convergence fits, the diagonal-stencil study and
//! the test shapes with their exact signed-distance oracles.

use std::f64::consts::{E, FRAC_1_SQRT_2, PI};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AfmmError, Result};
use crate::grid::{GridSpec, Jet, JetField};
use crate::march::{run_afmm, run_standard_fmm, RunStats};
use crate::seed::{seed_nodes, SeedOptions};

const MIN_GRAD: f64 = 0.1;
/// Nodes whose exact curvature is below this are left out of relative
/// curvature norms.
pub const FLAT_KAPPA: f64 = 1e-6;

/// Mean-curvature sum `div(psi / |psi|)` from a node jet.
pub fn curvature(jet: &Jet, dim: usize) -> Result<f64> {
    let g = &jet.psi[..dim];
    let g2: f64 = g.iter().map(|v| v * v).sum();
    let norm = g2.sqrt();
    if norm < MIN_GRAD {
        return Err(AfmmError::DegenerateGradient { norm });
    }
    let h = |a: usize, b: usize| jet.hess[crate::grid::hess_slot(dim, a, b)];
    let trace: f64 = (0..dim).map(|a| h(a, a)).sum();
    let mut quad = 0.0;
    for a in 0..dim {
        for b in 0..dim {
            quad += g[a] * h(a, b) * g[b];
        }
    }
    Ok((g2 * trace - quad) / (g2 * norm))
}

/// Where errors are measured. Serialized by its label (`whole`, `band9`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Region {
    Whole,
    /// Nodes with exact `|distance| <= width * h`.
    Band(f64),
}

impl Region {
    pub fn label(&self) -> String {
        match self {
            Region::Whole => "whole".into(),
            Region::Band(w) => format!("band{w}"),
        }
    }

    pub fn from_label(label: &str) -> Option<Region> {
        match label {
            "whole" => Some(Region::Whole),
            _ => label
                .strip_prefix("band")?
                .parse()
                .ok()
                .filter(|w: &f64| *w > 0.0)
                .map(Region::Band),
        }
    }

    fn contains(&self, distance: f64, h: f64) -> bool {
        match self {
            Region::Whole => true,
            Region::Band(w) => distance.abs() <= w * h,
        }
    }
}

impl From<Region> for String {
    fn from(r: Region) -> String {
        r.label()
    }
}

impl TryFrom<String> for Region {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Region, String> {
        Region::from_label(&s).ok_or_else(|| format!("unknown region {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Phi,
    Psi,
    Kappa,
}

impl Quantity {
    pub fn label(&self) -> &'static str {
        match self {
            Quantity::Phi => "phi",
            Quantity::Psi => "psi",
            Quantity::Kappa => "kappa",
        }
    }
}

/// One error measurement. `psi` errors are Euclidean norms of the gradient
/// difference; `kappa` errors are relative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub quantity: Quantity,
    pub region: Region,
    pub n: usize,
    pub h: f64,
    pub l2: f64,
    pub linf: f64,
    pub count: usize,
    /// Region nodes left out (undefined exact value, flat or degenerate).
    pub excluded: usize,
}

/// `(L2, Linf)` with L2 the root mean square.
pub fn error_norms(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(AfmmError::EmptyRegion);
    }
    let l2 = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    let linf = errors.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    Ok((l2, linf))
}

/// Least-squares slope of `log(error)` against `log(h)`.
pub fn fit_order(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.len() < 3 || samples.iter().any(|&(h, e)| !(h > 0.0 && e > 0.0)) {
        return Err(AfmmError::NonPositiveError);
    }
    let pts: Vec<(f64, f64)> = samples.iter().map(|&(h, e)| (h.ln(), e.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Closed-form solution of the diagonal two-neighbor stencil inside a
/// circle of radius `r0`, and its errors against the true distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StencilStudy {
    pub x: f64,
    pub h: f64,
    pub r0: f64,
    pub phi: f64,
    /// Both gradient components are equal.
    pub psi: f64,
    pub level_set_error: f64,
    pub gradient_error: f64,
}

pub fn stencil_study(x: f64, h: f64, r0: f64) -> Result<StencilStudy> {
    if !(x > 0.0 && 2f64.sqrt() * x < r0 && h > 0.0) {
        return Err(AfmmError::InvalidInput(format!(
            "stencil study needs 0 < sqrt(2) x < R0 and h > 0 (x={x}, h={h}, R0={r0})"
        )));
    }
    let q = (h * h + 2.0 * h * x + 2.0 * x * x).sqrt();
    let phi = 2.0 * x * q / (h + 2.0 * x) - r0;
    let psi = (h + 2.0 * x) / (2.0 * q);
    let exact = (2.0 * x * x).sqrt() - r0;
    Ok(StencilStudy {
        x,
        h,
        r0,
        phi,
        psi,
        level_set_error: (phi - exact).abs(),
        gradient_error: 2f64.sqrt() * (psi - FRAC_1_SQRT_2).abs(),
    })
}

/// Exact data at a point. `kappa` is the curvature of the distance level set
/// through the point (not at its foot).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Exact {
    pub distance: f64,
    pub psi: Option<[f64; 3]>,
    pub hess: Option<[f64; 6]>,
    pub kappa: Option<f64>,
}

/// The test interfaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Ellipse,
    DualCircles,
    Cassini2d,
    Star,
    Sphere,
    Ellipsoid,
    Cassini3d,
}

const ELLIPSE: [f64; 2] = [1.5, 0.5];
const ELLIPSOID: [f64; 3] = [1.6, 1.2, 0.5];
const DUAL_R: f64 = 0.75;
const DUAL_C: [f64; 2] = [0.8125, 0.4125];
const CASSINI_2D: (f64, f64) = (0.99, 1.01);
const CASSINI_3D: (f64, f64) = (1.29, 1.3);

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Circle,
        Shape::Ellipse,
        Shape::DualCircles,
        Shape::Cassini2d,
        Shape::Star,
        Shape::Sphere,
        Shape::Ellipsoid,
        Shape::Cassini3d,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Ellipse => "ellipse",
            Shape::DualCircles => "dual-circles",
            Shape::Cassini2d => "cassini2d",
            Shape::Star => "star",
            Shape::Sphere => "sphere",
            Shape::Ellipsoid => "ellipsoid",
            Shape::Cassini3d => "cassini3d",
        }
    }

    pub fn from_name(name: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn dim(&self) -> usize {
        match self {
            Shape::Sphere | Shape::Ellipsoid | Shape::Cassini3d => 3,
            _ => 2,
        }
    }

    /// The `[-2, 2]^d` grid with `n` nodes per axis.
    pub fn grid(&self, n: usize) -> Result<GridSpec> {
        GridSpec::cube(self.dim(), -2.0, 2.0, n)
    }

    /// Initial (non-distance) level set.
    pub fn phi0(&self, p: [f64; 3]) -> f64 {
        let [x, y, z] = p;
        match self {
            Shape::Circle => (x * x + y * y).exp() - E,
            Shape::Ellipse => (x / ELLIPSE[0]).powi(2) + (y / ELLIPSE[1]).powi(2) - 1.0,
            Shape::DualCircles => {
                let q = |c: [f64; 2]| (x - c[0]).powi(2) + (y - c[1]).powi(2) - DUAL_R * DUAL_R;
                q(DUAL_C).min(q([-DUAL_C[0], -DUAL_C[1]]))
            }
            Shape::Cassini2d => cassini_value(CASSINI_2D, x, y * y),
            Shape::Star => {
                let r = (x * x + y * y).sqrt();
                r - 1.0 + (5.0 * y.atan2(x)).sin() / 4.0
            }
            Shape::Sphere => x * x + y * y + z * z - 1.0,
            Shape::Ellipsoid => {
                ((x / ELLIPSOID[0]).powi(2)
                    + (y / ELLIPSOID[1]).powi(2)
                    + (z / ELLIPSOID[2]).powi(2))
                .sqrt()
                    - 1.0
            }
            Shape::Cassini3d => cassini_value(CASSINI_3D, x, y * y + z * z),
        }
    }

    /// Analytic gradient of [`Shape::phi0`] (zero where it is undefined).
    pub fn psi0(&self, p: [f64; 3]) -> [f64; 3] {
        let [x, y, z] = p;
        match self {
            Shape::Circle => {
                let ex = (x * x + y * y).exp();
                [2.0 * x * ex, 2.0 * y * ex, 0.0]
            }
            Shape::Ellipse => [
                2.0 * x / ELLIPSE[0].powi(2),
                2.0 * y / ELLIPSE[1].powi(2),
                0.0,
            ],
            Shape::DualCircles => {
                let c2 = [-DUAL_C[0], -DUAL_C[1]];
                let q = |c: [f64; 2]| (x - c[0]).powi(2) + (y - c[1]).powi(2);
                let c = if q(DUAL_C) <= q(c2) { DUAL_C } else { c2 };
                [2.0 * (x - c[0]), 2.0 * (y - c[1]), 0.0]
            }
            Shape::Cassini2d => {
                let (gx, gr) = cassini_grad(CASSINI_2D, x, y * y);
                [gx, gr * y, 0.0]
            }
            Shape::Star => {
                let r2 = x * x + y * y;
                if r2 == 0.0 {
                    return [0.0; 3];
                }
                let r = r2.sqrt();
                let c = 1.25 * (5.0 * y.atan2(x)).cos();
                [x / r - c * y / r2, y / r + c * x / r2, 0.0]
            }
            Shape::Sphere => [2.0 * x, 2.0 * y, 2.0 * z],
            Shape::Ellipsoid => {
                let e = ELLIPSOID;
                let s = ((x / e[0]).powi(2) + (y / e[1]).powi(2) + (z / e[2]).powi(2)).sqrt();
                if s == 0.0 {
                    return [0.0; 3];
                }
                [
                    x / (e[0] * e[0] * s),
                    y / (e[1] * e[1] * s),
                    z / (e[2] * e[2] * s),
                ]
            }
            Shape::Cassini3d => {
                let (gx, gr) = cassini_grad(CASSINI_3D, x, y * y + z * z);
                [gx, gr * y, gr * z]
            }
        }
    }

    /// Exact signed distance and, where defined, its gradient, Hessian and
    /// level-set curvature.
    pub fn exact(&self, p: [f64; 3]) -> Result<Exact> {
        match self {
            Shape::Circle => Ok(ball(p, [0.0; 3], 1.0, 2)),
            Shape::Sphere => Ok(ball(p, [0.0; 3], 1.0, 3)),
            Shape::DualCircles => {
                let a = ball(p, [DUAL_C[0], DUAL_C[1], 0.0], DUAL_R, 2);
                let b = ball(p, [-DUAL_C[0], -DUAL_C[1], 0.0], DUAL_R, 2);
                Ok(if a.distance <= b.distance { a } else { b })
            }
            Shape::Ellipse => Ok(ellipse_exact(p)),
            Shape::Ellipsoid => Ok(ellipsoid_exact(p)),
            Shape::Star => Ok(polar_exact(&STAR, [p[0], p[1]], self.phi0(p))),
            Shape::Cassini2d => Ok(polar_exact(
                &Polar::Cassini(CASSINI_2D),
                [p[0], p[1]],
                self.phi0(p),
            )),
            Shape::Cassini3d => {
                let rho = (p[1] * p[1] + p[2] * p[2]).sqrt();
                let m = polar_exact(&Polar::Cassini(CASSINI_3D), [p[0], rho], self.phi0(p));
                Ok(revolve(m, p, rho))
            }
        }
    }

    pub fn sample_phi0(&self, grid: &GridSpec) -> Vec<f64> {
        grid.sample(|p| self.phi0(p))
    }

    pub fn sample_psi0(&self, grid: &GridSpec) -> Vec<[f64; 3]> {
        grid.sample(|p| self.psi0(p))
    }
}

fn cassini_value((a, b): (f64, f64), x: f64, rho2: f64) -> f64 {
    ((x - a).powi(2) + rho2) * ((x + a).powi(2) + rho2) - b.powi(4)
}

/// `(d/dx, d/drho / rho)` of the Cassini product.
fn cassini_grad((a, _): (f64, f64), x: f64, rho2: f64) -> (f64, f64) {
    let (p, q) = ((x - a).powi(2) + rho2, (x + a).powi(2) + rho2);
    (2.0 * (x - a) * q + 2.0 * (x + a) * p, 2.0 * (p + q))
}

fn ball(p: [f64; 3], c: [f64; 3], r0: f64, dim: usize) -> Exact {
    let d: Vec<f64> = (0..dim).map(|a| p[a] - c[a]).collect();
    let r = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if r < 1e-12 {
        return Exact {
            distance: -r0,
            psi: None,
            hess: None,
            kappa: None,
        };
    }
    let mut psi = [0.0; 3];
    for a in 0..dim {
        psi[a] = d[a] / r;
    }
    let mut hess = [0.0; 6];
    for a in 0..dim {
        for b in a..dim {
            let delta = if a == b { 1.0 } else { 0.0 };
            hess[crate::grid::hess_slot(dim, a, b)] = (delta - psi[a] * psi[b]) / r;
        }
    }
    Exact {
        distance: r - r0,
        psi: Some(psi),
        hess: Some(hess),
        kappa: Some((dim - 1) as f64 / r),
    }
}

/// Closest point on the axis-aligned ellipsoid with semi-axes `e` (sorted
/// descending) to `y` (all components nonnegative), by bisection on the
/// Lagrange parameter.
fn ellipsoid_foot(e: &[f64], y: &[f64]) -> Vec<f64> {
    let n = e.len();
    debug_assert!(e.windows(2).all(|w| w[0] >= w[1]));
    let positive: Vec<usize> = (0..n).filter(|&i| y[i] > 0.0).collect();
    if positive.len() == n || (n == 1) {
        if n == 1 {
            return vec![e[0]];
        }
        let emin = e[n - 1];
        let f = |t: f64| {
            (0..n)
                .map(|i| (e[i] * y[i] / (t + e[i] * e[i])).powi(2))
                .sum::<f64>()
                - 1.0
        };
        let mut lo = -emin * emin + emin * y[n - 1];
        let mut hi = -emin * emin + (0..n).map(|i| (e[i] * y[i]).powi(2)).sum::<f64>().sqrt();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        return (0..n)
            .map(|i| e[i] * e[i] * y[i] / (t + e[i] * e[i]))
            .collect();
    }
    if y[n - 1] > 0.0 {
        // some larger axis has y = 0: that coordinate of the foot is 0
        let keep: Vec<usize> = (0..n).filter(|&i| y[i] > 0.0).collect();
        let sub = ellipsoid_foot(
            &keep.iter().map(|&i| e[i]).collect::<Vec<_>>(),
            &keep.iter().map(|&i| y[i]).collect::<Vec<_>>(),
        );
        let mut x = vec![0.0; n];
        for (k, &i) in keep.iter().enumerate() {
            x[i] = sub[k];
        }
        return x;
    }
    // y along the smallest axis is 0: the foot may leave the plane
    let m = n - 1;
    let em2 = e[m] * e[m];
    let mut inside = true;
    let mut xde = vec![0.0; m];
    for i in 0..m {
        let denom = e[i] * e[i] - em2;
        let numer = e[i] * y[i];
        if numer >= denom {
            inside = false;
            break;
        }
        xde[i] = numer / denom;
    }
    if inside {
        let disc = 1.0 - xde.iter().map(|v| v * v).sum::<f64>();
        if disc > 0.0 {
            let mut x: Vec<f64> = (0..m).map(|i| e[i] * xde[i]).collect();
            x.push(e[m] * disc.sqrt());
            return x;
        }
    }
    let mut x = ellipsoid_foot(&e[..m], &y[..m]);
    x.push(0.0);
    x
}

/// Signed distance data for an axis-aligned ellipse/ellipsoid, axes sorted
/// descending.
fn quadric_exact(e: &[f64], p: &[f64]) -> Exact {
    let n = e.len();
    let y: Vec<f64> = p.iter().map(|v| v.abs()).collect();
    let foot_abs = ellipsoid_foot(e, &y);
    let foot: Vec<f64> = (0..n)
        .map(|i| foot_abs[i].copysign(if p[i] == 0.0 { 1.0 } else { p[i] }))
        .collect();
    let level: f64 = (0..n).map(|i| (p[i] / e[i]).powi(2)).sum::<f64>() - 1.0;
    let sign = if level < 0.0 { -1.0 } else { 1.0 };
    let dist = (0..n).map(|i| (p[i] - foot[i]).powi(2)).sum::<f64>().sqrt();
    let distance = sign * dist;
    // outward normal and principal curvatures at the foot
    let grad: Vec<f64> = (0..n).map(|i| 2.0 * foot[i] / (e[i] * e[i])).collect();
    let gnorm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let normal: Vec<f64> = grad.iter().map(|v| v / gnorm).collect();
    let mut psi = [0.0; 3];
    if dist > 1e-12 {
        for i in 0..n {
            psi[i] = sign * (p[i] - foot[i]) / dist;
        }
    } else {
        psi[..n].copy_from_slice(&normal);
    }
    let mut pad = Matrix3::zeros();
    let mut nv = Vector3::zeros();
    for i in 0..n {
        nv[i] = normal[i];
    }
    for i in 0..n {
        for j in 0..n {
            let pij = if i == j { 1.0 } else { 0.0 } - nv[i] * nv[j];
            pad[(i, j)] = pij;
        }
    }
    let hess = Matrix3::from_fn(|i, j| {
        if i == j && i < n {
            2.0 / (e[i] * e[i])
        } else {
            0.0
        }
    });
    let shape_op = pad * hess * pad / gnorm;
    let eig = SymmetricEigen::new(shape_op);
    // drop the normal direction (and the padding direction in 2D)
    let mut principal: Vec<(f64, f64)> = (0..3)
        .map(|k| {
            let v = eig.eigenvectors.column(k);
            let off_plane = if n == 2 { v[2].abs() } else { 0.0 };
            (eig.eigenvalues[k], v.dot(&nv).abs() + off_plane)
        })
        .collect();
    principal.sort_by(|a, b| a.1.total_cmp(&b.1));
    let kappa: f64 = principal[..n - 1]
        .iter()
        .map(|&(k, _)| k / (1.0 + distance * k))
        .sum();
    Exact {
        distance,
        psi: Some(psi),
        hess: None,
        kappa: Some(kappa),
    }
}

fn ellipse_exact(p: [f64; 3]) -> Exact {
    quadric_exact(&ELLIPSE, &p[..2])
}

fn ellipsoid_exact(p: [f64; 3]) -> Exact {
    quadric_exact(&ELLIPSOID, &p)
}

/// A closed curve star-shaped about the origin, `r = r(theta)`.
#[derive(Clone, Copy, Debug)]
enum Polar {
    Star,
    Cassini((f64, f64)),
}

const STAR: Polar = Polar::Star;
const COARSE: usize = 4096;

impl Polar {
    fn r(&self, t: f64) -> f64 {
        match *self {
            Polar::Star => 1.0 - (5.0 * t).sin() / 4.0,
            Polar::Cassini((a, b)) => {
                let s2 = (2.0 * t).sin();
                ((a * a) * (2.0 * t).cos() + (b.powi(4) - a.powi(4) * s2 * s2).sqrt()).sqrt()
            }
        }
    }

    fn dr(&self, t: f64) -> f64 {
        match *self {
            Polar::Star => -1.25 * (5.0 * t).cos(),
            Polar::Cassini((a, b)) => {
                let (s2, c2) = ((2.0 * t).sin(), (2.0 * t).cos());
                let root = (b.powi(4) - a.powi(4) * s2 * s2).sqrt();
                let du = -2.0 * a * a * s2 - 2.0 * a.powi(4) * s2 * c2 / root;
                du / (2.0 * self.r(t))
            }
        }
    }

    fn ddr(&self, t: f64) -> f64 {
        match *self {
            Polar::Star => 6.25 * (5.0 * t).sin(),
            Polar::Cassini(_) => {
                let d = 1e-5;
                (self.dr(t + d) - self.dr(t - d)) / (2.0 * d)
            }
        }
    }

    fn point(&self, t: f64) -> [f64; 2] {
        let r = self.r(t);
        [r * t.cos(), r * t.sin()]
    }

    fn tangent(&self, t: f64) -> [f64; 2] {
        let (r, dr) = (self.r(t), self.dr(t));
        [dr * t.cos() - r * t.sin(), dr * t.sin() + r * t.cos()]
    }

    fn second(&self, t: f64) -> [f64; 2] {
        let (r, dr, ddr) = (self.r(t), self.dr(t), self.ddr(t));
        let (c, s) = (t.cos(), t.sin());
        [
            ddr * c - 2.0 * dr * s - r * c,
            ddr * s + 2.0 * dr * c - r * s,
        ]
    }

    fn curvature(&self, t: f64) -> f64 {
        let (r, dr, ddr) = (self.r(t), self.dr(t), self.ddr(t));
        (r * r + 2.0 * dr * dr - r * ddr) / (r * r + dr * dr).powf(1.5)
    }

    /// Parameter of the closest point to `q`: coarse scan, golden-section
    /// refinement around every competitive local minimum, Newton polish.
    fn foot(&self, q: [f64; 2]) -> f64 {
        let step = 2.0 * PI / COARSE as f64;
        let d2 = |t: f64| {
            let p = self.point(t);
            (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
        };
        let samples: Vec<f64> = (0..COARSE).map(|k| d2(k as f64 * step)).collect();
        let best = samples.iter().cloned().fold(f64::INFINITY, f64::min).sqrt();
        let mut chord: f64 = 0.0;
        for k in 0..COARSE {
            let (a, b) = (
                self.point(k as f64 * step),
                self.point((k + 1) as f64 * step),
            );
            chord = chord.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
        }
        let mut result = (f64::INFINITY, 0.0);
        for k in 0..COARSE {
            let (prev, next) = (
                samples[(k + COARSE - 1) % COARSE],
                samples[(k + 1) % COARSE],
            );
            if samples[k] > prev || samples[k] > next || samples[k].sqrt() > best + 2.0 * chord {
                continue;
            }
            let (mut a, mut b) = ((k as f64 - 1.0) * step, (k as f64 + 1.0) * step);
            let g = 0.5 * (5f64.sqrt() - 1.0);
            let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
            let (mut fc, mut fd) = (d2(c), d2(d));
            for _ in 0..80 {
                if fc < fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - g * (b - a);
                    fc = d2(c);
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + g * (b - a);
                    fd = d2(d);
                }
            }
            let mut t = 0.5 * (a + b);
            for _ in 0..4 {
                let (p, tg, sc) = (self.point(t), self.tangent(t), self.second(t));
                let diff = [p[0] - q[0], p[1] - q[1]];
                let g1 = diff[0] * tg[0] + diff[1] * tg[1];
                let g2 = tg[0] * tg[0] + tg[1] * tg[1] + diff[0] * sc[0] + diff[1] * sc[1];
                if g2 <= 0.0 {
                    break;
                }
                let tn = t - g1 / g2;
                if (tn - t).abs() > step || d2(tn) > d2(t) {
                    break;
                }
                t = tn;
            }
            let v = d2(t);
            if v < result.0 {
                result = (v, t);
            }
        }
        result.1
    }
}

fn polar_exact(curve: &Polar, q: [f64; 2], phi0: f64) -> Exact {
    let t = curve.foot(q);
    let f = curve.point(t);
    let diff = [q[0] - f[0], q[1] - f[1]];
    let dist = diff[0].hypot(diff[1]);
    let sign = if phi0 < 0.0 { -1.0 } else { 1.0 };
    let distance = sign * dist;
    let tg = curve.tangent(t);
    let tn = tg[0].hypot(tg[1]);
    let normal = [tg[1] / tn, -tg[0] / tn];
    let psi = if dist > 1e-12 {
        [sign * diff[0] / dist, sign * diff[1] / dist, 0.0]
    } else {
        [normal[0], normal[1], 0.0]
    };
    let k0 = curve.curvature(t);
    Exact {
        distance,
        psi: Some(psi),
        hess: None,
        kappa: Some(k0 / (1.0 + distance * k0)),
    }
}

/// Lifts a meridian-plane result `(x, rho)` to a surface of revolution about
/// the x axis.
fn revolve(m: Exact, p: [f64; 3], rho: f64) -> Exact {
    let mpsi = m.psi.expect("meridian gradient");
    let (cy, cz) = if rho > 0.0 {
        (p[1] / rho, p[2] / rho)
    } else {
        (1.0, 0.0)
    };
    let psi = [mpsi[0], mpsi[1] * cy, mpsi[1] * cz];
    // meridian curvature at the foot from the 2D level-set curvature
    let k_node = m.kappa.expect("meridian curvature");
    let k1 = k_node / (1.0 - m.distance * k_node);
    // parallel curvature at the foot: rho-component of the normal over rho
    let foot_rho = rho - m.distance * mpsi[1];
    let k2 = if foot_rho.abs() > 1e-8 {
        mpsi[1] / foot_rho
    } else {
        k1
    };
    let kappa = k1 / (1.0 + m.distance * k1) + k2 / (1.0 + m.distance * k2);
    Exact {
        distance: m.distance,
        psi: Some(psi),
        hess: None,
        kappa: Some(kappa),
    }
}

/// Exact data sampled on every node of a grid.
#[derive(Clone, Debug)]
pub struct ExactField {
    pub grid: GridSpec,
    pub values: Vec<Exact>,
}

pub fn exact_field(shape: Shape, grid: &GridSpec) -> Result<ExactField> {
    let values = (0..grid.node_count())
        .into_par_iter()
        .map(|n| shape.exact(grid.position(n)))
        .collect::<Result<_>>()?;
    Ok(ExactField {
        grid: *grid,
        values,
    })
}

fn report(
    quantity: Quantity,
    region: Region,
    grid: &GridSpec,
    errs: &[f64],
    excluded: usize,
) -> Result<ErrorReport> {
    let (l2, linf) = error_norms(errs)?;
    Ok(ErrorReport {
        quantity,
        region,
        n: grid.n(),
        h: grid.h(),
        l2,
        linf,
        count: errs.len(),
        excluded,
    })
}

/// Level-set error only (for the classical method).
pub fn phi_errors(phi: &[f64], exact: &ExactField, region: Region) -> Result<ErrorReport> {
    let h = exact.grid.h();
    let errs: Vec<f64> = exact
        .values
        .iter()
        .zip(phi)
        .filter(|(e, _)| region.contains(e.distance, h))
        .map(|(e, p)| (p - e.distance).abs())
        .collect();
    report(Quantity::Phi, region, &exact.grid, &errs, 0)
}

/// Errors of `phi`, `psi` and relative curvature over a region.
pub fn jet_errors(
    field: &JetField,
    exact: &ExactField,
    region: Region,
) -> Result<Vec<ErrorReport>> {
    let grid = &exact.grid;
    let dim = grid.dim();
    let h = grid.h();
    let (mut ephi, mut epsi, mut ekap) = (Vec::new(), Vec::new(), Vec::new());
    let (mut xpsi, mut xkap) = (0, 0);
    for (node, e) in exact.values.iter().enumerate() {
        if !region.contains(e.distance, h) {
            continue;
        }
        ephi.push((field.phi[node] - e.distance).abs());
        match e.psi {
            Some(ps) => {
                let d: f64 = (0..dim).map(|a| (field.psi[node][a] - ps[a]).powi(2)).sum();
                epsi.push(d.sqrt());
            }
            None => xpsi += 1,
        }
        match (e.kappa, curvature(&field.jet(node), dim)) {
            (Some(k), Ok(kc)) if k.abs() >= FLAT_KAPPA && k.is_finite() => {
                ekap.push(((kc - k) / k).abs())
            }
            _ => xkap += 1,
        }
    }
    Ok(vec![
        report(Quantity::Phi, region, grid, &ephi, 0)?,
        report(Quantity::Psi, region, grid, &epsi, xpsi)?,
        report(Quantity::Kappa, region, grid, &ekap, xkap)?,
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Fmm,
    Afmm,
}

/// A finished reinitialization of a named shape.
#[derive(Clone, Debug)]
pub struct CaseRun {
    pub shape: Shape,
    pub method: Method,
    pub field: JetField,
    pub stats: Option<RunStats>,
    pub causal: bool,
}

pub fn run_shape(shape: Shape, n: usize, method: Method, opts: SeedOptions) -> Result<CaseRun> {
    let grid = shape.grid(n)?;
    let phi0 = shape.sample_phi0(&grid);
    let psi0 = shape.sample_psi0(&grid);
    match method {
        Method::Fmm => {
            let (phi, order) = run_standard_fmm(&phi0, Some(&psi0), &grid, opts)?;
            let mut field = JetField::zeros(grid);
            field.phi = phi;
            Ok(CaseRun {
                shape,
                method,
                field,
                stats: None,
                causal: order.is_causal(),
            })
        }
        Method::Afmm => {
            let run = run_afmm(&phi0, Some(&psi0), &grid, opts)?;
            Ok(CaseRun {
                shape,
                method,
                field: run.field,
                stats: Some(run.stats),
                causal: run.order.is_causal(),
            })
        }
    }
}

/// Errors of a finished run over each region (the classical method reports
/// `phi` only).
pub fn case_errors(run: &CaseRun, regions: &[Region]) -> Result<Vec<ErrorReport>> {
    let exact = exact_field(run.shape, &run.field.grid)?;
    let mut out = Vec::new();
    for &r in regions {
        match run.method {
            Method::Fmm => out.push(phi_errors(&run.field.phi, &exact, r)?),
            Method::Afmm => out.extend(jet_errors(&run.field, &exact, r)?),
        }
    }
    Ok(out)
}

/// Fitted order for one `(quantity, region)` series, per norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub quantity: Quantity,
    pub region: Region,
    pub l2: f64,
    pub linf: f64,
}

/// Fits orders over all `(quantity, region)` series present in `reports`.
pub fn fit_orders(reports: &[ErrorReport]) -> Result<Vec<OrderFit>> {
    let mut keys: Vec<(Quantity, Region)> = Vec::new();
    for r in reports {
        if !keys.contains(&(r.quantity, r.region)) {
            keys.push((r.quantity, r.region));
        }
    }
    keys.into_iter()
        .map(|(q, reg)| {
            let series: Vec<&ErrorReport> = reports
                .iter()
                .filter(|r| r.quantity == q && r.region == reg)
                .collect();
            let l2 = fit_order(&series.iter().map(|r| (r.h, r.l2)).collect::<Vec<_>>())?;
            let linf = fit_order(&series.iter().map(|r| (r.h, r.linf)).collect::<Vec<_>>())?;
            Ok(OrderFit {
                quantity: q,
                region: reg,
                l2,
                linf,
            })
        })
        .collect()
}

/// Seeded-node errors of one grid for shapes with an exact Hessian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedErrors {
    pub n: usize,
    pub h: f64,
    pub seeds: usize,
    /// `(L2, Linf)` for phi, psi (Euclidean), and each Hessian slot.
    pub phi: (f64, f64),
    pub psi: (f64, f64),
    pub hess: Vec<(f64, f64)>,
}

pub fn seed_errors(shape: Shape, n: usize, opts: SeedOptions) -> Result<SeedErrors> {
    let grid = shape.grid(n)?;
    let dim = grid.dim();
    let phi0 = shape.sample_phi0(&grid);
    let psi0 = shape.sample_psi0(&grid);
    let s = seed_nodes(&phi0, Some(&psi0), &grid, opts)?;
    let nh = crate::grid::hess_len(dim);
    let (mut ep, mut eg) = (Vec::new(), Vec::new());
    let mut eh = vec![Vec::new(); nh];
    for &node in &s.seeds {
        let e = shape.exact(grid.position(node))?;
        let (psi, hess) = match (e.psi, e.hess) {
            (Some(p), Some(h)) => (p, h),
            _ => return Err(AfmmError::OracleUnavailable),
        };
        ep.push((s.field.phi[node] - e.distance).abs());
        eg.push(
            (0..dim)
                .map(|a| (s.field.psi[node][a] - psi[a]).powi(2))
                .sum::<f64>()
                .sqrt(),
        );
        for k in 0..nh {
            eh[k].push((s.field.hess[node][k] - hess[k]).abs());
        }
    }
    Ok(SeedErrors {
        n,
        h: grid.h(),
        seeds: s.seeds.len(),
        phi: error_norms(&ep)?,
        psi: error_norms(&eg)?,
        hess: eh.iter().map(|v| error_norms(v)).collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The contour oracles agree with a dense 1e5-sample search. Sampling
    /// overestimates the distance by at most about (spacing)^2 / 2d.
    #[test]
    fn contour_oracles_match_dense_sampling() {
        const M: usize = 100_000;
        let ellipse = |t: f64| [ELLIPSE[0] * t.cos(), ELLIPSE[1] * t.sin()];
        let star = |t: f64| STAR.point(t);
        let cassini = |t: f64| Polar::Cassini(CASSINI_2D).point(t);
        let cases: [(Shape, &dyn Fn(f64) -> [f64; 2]); 3] = [
            (Shape::Ellipse, &ellipse),
            (Shape::Star, &star),
            (Shape::Cassini2d, &cassini),
        ];
        let mut k = 0u32;
        for (shape, curve) in cases {
            let pts: Vec<[f64; 2]> = (0..M)
                .map(|i| curve(2.0 * PI * i as f64 / M as f64))
                .collect();
            for _ in 0..40 {
                // deterministic scatter over the domain
                k += 1;
                let q = [
                    -1.9 + 3.8 * ((k as f64 * 0.754_877_7) % 1.0),
                    -1.9 + 3.8 * ((k as f64 * 0.569_840_3) % 1.0),
                ];
                let brute = pts
                    .iter()
                    .map(|p| (p[0] - q[0]).hypot(p[1] - q[1]))
                    .fold(f64::INFINITY, f64::min);
                let d = shape.exact([q[0], q[1], 0.0]).unwrap().distance.abs();
                assert!(d <= brute + 1e-12, "{shape:?} {q:?}: {d} > {brute}");
                assert!(brute - d < 1e-7, "{shape:?} {q:?}: {d} vs {brute}");
            }
        }
    }

    #[test]
    fn region_labels_round_trip() {
        for r in [Region::Whole, Region::Band(9.0), Region::Band(2.5)] {
            assert_eq!(Region::from_label(&r.label()), Some(r));
        }
        for bad in ["band", "band-1", "bandx", "all"] {
            assert_eq!(Region::from_label(bad), None);
        }
    }

    #[test]
    fn curvature_examples() {
        let jet = Jet {
            phi: 0.0,
            psi: [1.0, 0.0, 0.0],
            hess: [0.0, 0.7, 0.0, 0.0, 0.0, 0.0],
        };
        assert!((curvature(&jet, 2).unwrap() - 0.7).abs() < 1e-15);
        let e = Shape::Circle.exact([0.3, 0.4, 0.0]).unwrap();
        let j = Jet {
            phi: e.distance,
            psi: e.psi.unwrap(),
            hess: e.hess.unwrap(),
        };
        assert!((curvature(&j, 2).unwrap() - 2.0).abs() < 1e-12);
        let e = Shape::Sphere.exact([0.0, 0.6, 0.8]).unwrap();
        let j = Jet {
            phi: e.distance,
            psi: e.psi.unwrap(),
            hess: e.hess.unwrap(),
        };
        assert!((curvature(&j, 3).unwrap() - 2.0).abs() < 1e-12);
        let flat = Jet {
            psi: [0.01, 0.0, 0.0],
            ..Default::default()
        };
        assert!(matches!(
            curvature(&flat, 2),
            Err(AfmmError::DegenerateGradient { .. })
        ));
    }

    #[test]
    fn curvature_reduces_to_trace_when_h_psi_vanishes() {
        use rand::{rngs::StdRng, Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..100 {
            let t: f64 = rng.random_range(0.0..6.3);
            let (c, s) = (t.cos(), t.sin());
            let k: f64 = rng.random_range(-3.0..3.0);
            // H = k t t^T with t perpendicular to psi
            let jet = Jet {
                phi: 0.0,
                psi: [c, s, 0.0],
                hess: [k * s * s, k * c * c, -k * s * c, 0.0, 0.0, 0.0],
            };
            assert!((curvature(&jet, 2).unwrap() - k).abs() < 1e-12);
        }
    }

    #[test]
    fn norms_examples() {
        let mut e = vec![0.0; 100];
        e[17] = 0.01;
        let (l2, linf) = error_norms(&e).unwrap();
        assert!((linf - 0.01).abs() < 1e-15 && (l2 - 0.001).abs() < 1e-15);
        assert_eq!(error_norms(&[]), Err(AfmmError::EmptyRegion));
        assert_eq!(error_norms(&[0.0; 4]).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn order_fits() {
        let hs = [0.1, 0.05, 0.025, 0.0125];
        let s2: Vec<_> = hs.iter().map(|&h| (h, 3.0 * h * h)).collect();
        assert!((fit_order(&s2).unwrap() - 2.0).abs() < 1e-12);
        let s25: Vec<_> = hs.iter().map(|&h| (h, 0.5 * f64::powf(h, 2.5))).collect();
        assert!((fit_order(&s25).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(fit_order(&s2[..2]), Err(AfmmError::NonPositiveError));
        assert_eq!(
            fit_order(&[(0.1, 1.0), (0.05, 0.0), (0.02, 1.0)]),
            Err(AfmmError::NonPositiveError)
        );
    }

    #[test]
    fn stencil_study_examples() {
        let s = stencil_study(0.2, 0.1, 1.0).unwrap();
        assert!((s.phi - -0.7115559).abs() < 5e-8);
        assert!((s.level_set_error - 0.0056014).abs() < 5e-8);
        assert!((s.psi - 0.6933752).abs() < 5e-8);
        // the reference value was formed from the rounded component
        assert!((s.gradient_error - 0.0194194).abs() < 2e-7);
        let limit = (2f64.sqrt() - 1.0) / 2f64.sqrt();
        for h in [0.1, 0.05, 0.025] {
            assert!((stencil_study(1e-9, h, 1.0).unwrap().gradient_error - limit).abs() < 1e-6);
        }
        assert!(stencil_study(0.8, 0.1, 1.0).is_err());
        let mut prev = f64::INFINITY;
        for h in [1e-2, 5e-3, 2.5e-3] {
            let e = stencil_study(0.3, h, 1.0).unwrap().level_set_error;
            assert!(e >= 0.0 && e < prev);
            prev = e;
        }
    }

    #[test]
    fn oracle_examples() {
        let e = Shape::Circle.exact([2.0, 0.0, 0.0]).unwrap();
        assert!((e.distance - 1.0).abs() < 1e-15);
        assert!((e.kappa.unwrap() - 0.5).abs() < 1e-15);
        let e = Shape::Ellipse.exact([3.0, 0.0, 0.0]).unwrap();
        assert!((e.distance - 1.5).abs() < 1e-12);
        let e = Shape::Ellipse.exact([0.0, 2.0, 0.0]).unwrap();
        assert!((e.distance - 1.5).abs() < 1e-12);
        let e = Shape::Ellipse.exact([0.0, 0.0, 0.0]).unwrap();
        assert!((e.distance + 0.5).abs() < 1e-12);
        let e = Shape::DualCircles.exact([0.0; 3]).unwrap();
        let r = (DUAL_C[0].powi(2) + DUAL_C[1].powi(2)).sqrt();
        assert!((e.distance - (r - DUAL_R)).abs() < 1e-15);
        let e = Shape::Ellipsoid.exact([0.0, 0.0, 1.5]).unwrap();
        assert!((e.distance - 1.0).abs() < 1e-12);
        let e = Shape::Ellipsoid.exact([2.6, 0.0, 0.0]).unwrap();
        assert!((e.distance - 1.0).abs() < 1e-12);
        // ellipse vertex curvature a/b^2 at (1.5, 0)
        let e = Shape::Ellipse.exact([1.5, 1e-15, 0.0]).unwrap();
        assert!((e.kappa.unwrap() - 1.5 / 0.25).abs() < 1e-6, "{:?}", e);
        // star tips and valleys
        let e = Shape::Star.exact([0.0, 0.0, 0.0]).unwrap();
        assert!((e.distance + 0.75).abs() < 1e-12, "{e:?}");
        // cassini neck: r^2 = b^2 - a^2 at theta = pi/2 in 2D
        let (a, b) = CASSINI_2D;
        let neck = (b * b - a * a).sqrt();
        let e = Shape::Cassini2d.exact([0.0, 0.1, 0.0]).unwrap();
        assert!((e.distance - (0.1 - neck)).abs() < 1e-9, "{e:?}");
    }

    #[test]
    fn oracles_vanish_on_phi0_zero_set() {
        // points on the zero set of phi0 found by bisection along rays
        for shape in Shape::ALL {
            for k in 0..24 {
                let t = 0.13 + k as f64 * 2.0 * PI / 24.0;
                let dir = if shape.dim() == 2 {
                    [t.cos(), t.sin(), 0.0]
                } else {
                    let u = 0.3 + 0.1 * k as f64;
                    [u.cos(), u.sin() * t.cos(), u.sin() * t.sin()]
                };
                let f = |s: f64| shape.phi0([s * dir[0], s * dir[1], s * dir[2]]);
                let (mut lo, mut hi) = (1e-3, 1.99);
                if f(lo).signum() == f(hi).signum() {
                    continue;
                }
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid).signum() == f(lo).signum() {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let p = [lo * dir[0], lo * dir[1], lo * dir[2]];
                let e = shape.exact(p).unwrap();
                assert!(
                    e.distance.abs() < 1e-9,
                    "{} at {p:?}: {}",
                    shape.name(),
                    e.distance
                );
            }
        }
    }

    #[test]
    fn oracle_gradient_matches_finite_differences() {
        let d = 1e-6;
        for shape in Shape::ALL {
            let dim = shape.dim();
            let mut checked = 0;
            for k in 0..200 {
                let u = k as f64 * 0.618_033_988_75 % 1.0;
                let v = (k as f64 * 0.414_213_562_37) % 1.0;
                let w = (k as f64 * 0.732_050_807_57) % 1.0;
                let p = [
                    -1.9 + 3.8 * u,
                    -1.9 + 3.8 * v,
                    if dim == 3 { -1.9 + 3.8 * w } else { 0.0 },
                ];
                let e = shape.exact(p).unwrap();
                let Some(psi) = e.psi else { continue };
                let mut fd = [0.0; 3];
                for a in 0..dim {
                    let (mut pp, mut pm) = (p, p);
                    pp[a] += d;
                    pm[a] -= d;
                    fd[a] = (shape.exact(pp).unwrap().distance - shape.exact(pm).unwrap().distance)
                        / (2.0 * d);
                }
                let unit = (0..dim).map(|a| fd[a] * fd[a]).sum::<f64>().sqrt();
                // skip medial-axis kinks where the central difference straddles two feet
                if (unit - 1.0).abs() > 1e-3 {
                    continue;
                }
                checked += 1;
                for a in 0..dim {
                    assert!(
                        (fd[a] - psi[a]).abs() < 1e-4,
                        "{} at {p:?}: {fd:?} vs {psi:?}",
                        shape.name()
                    );
                }
            }
            assert!(checked > 150, "{}: {checked}", shape.name());
        }
    }

    #[test]
    fn oracle_curvature_matches_level_set_curvature() {
        // curvature of the distance level set through p from second differences
        let d = 1e-4;
        for shape in [
            Shape::Ellipse,
            Shape::Star,
            Shape::Cassini2d,
            Shape::Ellipsoid,
            Shape::Cassini3d,
        ] {
            let dim = shape.dim();
            for p in [[0.9, 0.45, 0.1], [-1.2, 0.3, -0.2], [0.2, -0.9, 0.3]] {
                let mut p = p;
                if dim == 2 {
                    p[2] = 0.0;
                }
                let e = shape.exact(p).unwrap();
                let f = |q: [f64; 3]| shape.exact(q).unwrap().distance;
                let mut lap = 0.0;
                for a in 0..dim {
                    let (mut pp, mut pm) = (p, p);
                    pp[a] += d;
                    pm[a] -= d;
                    lap += (f(pp) - 2.0 * f(p) + f(pm)) / (d * d);
                }
                let k = e.kappa.unwrap();
                assert!(
                    (lap - k).abs() < 1e-3 * (1.0 + k.abs()),
                    "{} at {p:?}: {lap} vs {k}",
                    shape.name()
                );
            }
        }
    }

    #[test]
    fn jet_errors_of_exact_field_vanish() {
        let grid = Shape::Circle.grid(20).unwrap();
        let exact = exact_field(Shape::Circle, &grid).unwrap();
        let mut field = JetField::zeros(grid);
        for (n, e) in exact.values.iter().enumerate() {
            field.phi[n] = e.distance;
            field.psi[n] = e.psi.unwrap();
            field.hess[n] = e.hess.unwrap();
        }
        for r in jet_errors(&field, &exact, Region::Whole).unwrap() {
            assert!(r.l2 < 1e-12 && r.linf < 1e-12, "{r:?}");
            assert!(r.linf >= r.l2);
        }
        let band = jet_errors(&field, &exact, Region::Band(3.0)).unwrap();
        assert!(band[0].count < grid.node_count());
    }
}
