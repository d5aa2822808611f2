//! Closest point on the zero set of a cubic patch.
//!
//! Solves `min |y - x0|^2` subject to `P(y) = 0` with Newton's method on the
//! KKT system `y - x0 + lambda grad P(y) = 0, P(y) = 0`, working in the
//! patch's local coordinates. A lattice search over the cell provides a
//! starting point when the direct iteration fails.

use nalgebra::{DMatrix, DVector};

use crate::error::{AfmmError, Result};
use crate::interp::CubicPatch;

pub const DEFAULT_TOL: f64 = 1e-10;
const MAX_ITER: usize = 50;
const LATTICE: usize = 32;

/// Result of a projection, in physical units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub point: [f64; 3],
    pub distance: f64,
    /// Sign of `P(x0)`: `-1`, `0` or `1`.
    pub sign: f64,
}

impl Projection {
    pub fn signed_distance(&self) -> f64 {
        self.sign * self.distance
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cross_norm(dim: usize, a: [f64; 3], b: [f64; 3]) -> f64 {
    if dim == 2 {
        (a[0] * b[1] - a[1] * b[0]).abs()
    } else {
        norm(&[
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ])
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Post-conditions in local units: on the zero set and normal-collinear.
fn satisfied(patch: &CubicPatch, u0: [f64; 3], u: [f64; 3], tol: f64) -> bool {
    let dim = patch.dim();
    let j = patch.jet_local(u);
    let g = norm(&j.grad[..dim]);
    if g == 0.0 || !j.value.is_finite() {
        return false;
    }
    let d = sub(u0, u);
    let dist = norm(&d[..dim]);
    j.value.abs() / g <= tol && (dist <= tol || cross_norm(dim, j.grad, d) <= tol * g * dist)
}

/// Second-order condition: the Lagrangian Hessian `I + lambda H_P` must be
/// positive semidefinite on the tangent space, otherwise the stationary
/// point is not a local minimum of the distance.
fn is_local_min(patch: &CubicPatch, u0: [f64; 3], u: [f64; 3]) -> bool {
    let dim = patch.dim();
    let j = patch.jet_local(u);
    let g2: f64 = j.grad[..dim].iter().map(|v| v * v).sum();
    if g2 == 0.0 {
        return false;
    }
    let d = sub(u, u0);
    let lambda = -(0..dim).map(|a| d[a] * j.grad[a]).sum::<f64>() / g2;
    let m = DMatrix::from_fn(
        dim,
        dim,
        |a, b| if a == b { 1.0 } else { 0.0 } + lambda * j.hess[a][b],
    );
    // projector onto the tangent space
    let p = DMatrix::from_fn(
        dim,
        dim,
        |a, b| if a == b { 1.0 } else { 0.0 } - j.grad[a] * j.grad[b] / g2,
    );
    let t = &p * m * &p;
    let eig = nalgebra::SymmetricEigen::new(t);
    eig.eigenvalues.iter().all(|&e| e >= -1e-6)
}

fn kkt_newton(patch: &CubicPatch, u0: [f64; 3], start: [f64; 3], tol: f64) -> Option<[f64; 3]> {
    let dim = patch.dim();
    let mut u = start;
    let j = patch.jet_local(u);
    let g2: f64 = j.grad[..dim].iter().map(|v| v * v).sum();
    if g2 == 0.0 {
        return None;
    }
    let mut lambda = -(0..dim).map(|a| (u[a] - u0[a]) * j.grad[a]).sum::<f64>() / g2;
    let mut converged_once = false;
    for _ in 0..MAX_ITER {
        let j = patch.jet_local(u);
        let mut f = DVector::zeros(dim + 1);
        for a in 0..dim {
            f[a] = u[a] - u0[a] + lambda * j.grad[a];
        }
        f[dim] = j.value;
        if !f.iter().all(|v| v.is_finite()) {
            return None;
        }
        if satisfied(patch, u0, u, tol) {
            if converged_once || f.amax() == 0.0 {
                return Some(u);
            }
            // one extra step to reach round-off
            converged_once = true;
        }
        let mut jac = DMatrix::zeros(dim + 1, dim + 1);
        for a in 0..dim {
            for b in 0..dim {
                jac[(a, b)] = lambda * j.hess[a][b] + if a == b { 1.0 } else { 0.0 };
            }
            jac[(a, dim)] = j.grad[a];
            jac[(dim, a)] = j.grad[a];
        }
        let step = jac.lu().solve(&(-f))?;
        let du = norm(&step.as_slice()[..dim]);
        let scale = if du > 0.5 { 0.5 / du } else { 1.0 };
        let prev = u;
        for a in 0..dim {
            u[a] += scale * step[a];
        }
        lambda += scale * step[dim];
        if converged_once && u == prev {
            return Some(u);
        }
    }
    satisfied(patch, u0, u, tol).then_some(u)
}

/// Scalar Newton along the gradient until `P = 0`.
fn drop_to_surface(patch: &CubicPatch, mut u: [f64; 3]) -> Option<[f64; 3]> {
    let dim = patch.dim();
    for _ in 0..30 {
        let j = patch.jet_local(u);
        let g2: f64 = j.grad[..dim].iter().map(|v| v * v).sum();
        if g2 == 0.0 {
            return None;
        }
        if j.value.abs() <= 1e-13 * g2.sqrt() {
            return Some(u);
        }
        for a in 0..dim {
            u[a] -= j.value * j.grad[a] / g2;
        }
        if u[..dim].iter().any(|v| !(-1.0..=2.0).contains(v)) {
            return None;
        }
    }
    None
}

fn lattice_search(patch: &CubicPatch, u0: [f64; 3], tol: f64) -> Option<[f64; 3]> {
    let dim = patch.dim();
    let count = LATTICE.pow(dim as u32);
    let mut best: Option<([f64; 3], f64)> = None;
    for m in 0..count {
        let mut q = [0.0; 3];
        let mut r = m;
        for v in q.iter_mut().take(dim) {
            *v = (r % LATTICE) as f64 / (LATTICE - 1) as f64;
            r /= LATTICE;
        }
        if let Some(y) = drop_to_surface(patch, q) {
            let d = norm(&sub(y, u0)[..dim]);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((y, d));
            }
        }
    }
    let (y, _) = best?;
    let y = slide(patch, u0, y, tol).unwrap_or(y);
    kkt_newton(patch, u0, y, tol)
        .filter(|&u| is_local_min(patch, u0, u))
        .or_else(|| satisfied(patch, u0, y, tol).then_some(y))
}

/// Projected descent of the distance along the zero set. Slow but it only
/// walks downhill, so it escapes saddles that trap the KKT iteration near
/// focal points.
fn slide(patch: &CubicPatch, u0: [f64; 3], mut y: [f64; 3], tol: f64) -> Option<[f64; 3]> {
    let dim = patch.dim();
    let dist = |y: [f64; 3]| norm(&sub(y, u0)[..dim]);
    let mut step = 1.0;
    for _ in 0..500 {
        let j = patch.jet_local(y);
        let g2: f64 = j.grad[..dim].iter().map(|v| v * v).sum();
        if g2 == 0.0 {
            return None;
        }
        let d = sub(u0, y);
        let dg = (0..dim).map(|a| d[a] * j.grad[a]).sum::<f64>() / g2;
        let mut t = [0.0; 3];
        for a in 0..dim {
            t[a] = d[a] - dg * j.grad[a];
        }
        let tn = norm(&t[..dim]);
        if tn <= tol * dist(y).max(1.0) {
            return Some(y);
        }
        let here = dist(y);
        loop {
            let mut trial = y;
            for a in 0..dim {
                trial[a] += step * t[a];
            }
            match drop_to_surface(patch, trial) {
                Some(z) if dist(z) < here => {
                    y = z;
                    step = (step * 2.0).min(1.0);
                    break;
                }
                _ => {
                    step *= 0.5;
                    if step < 1e-12 {
                        return Some(y);
                    }
                }
            }
        }
    }
    Some(y)
}

/// Closest point to `x0` on `{P = 0}`. `tol` is relative to the cell size.
pub fn closest_point(patch: &CubicPatch, x0: [f64; 3], tol: f64) -> Result<Projection> {
    let dim = patch.dim();
    let u0 = patch.to_local(x0);
    let j0 = patch.jet_local(u0);
    let sign = if j0.value > 0.0 {
        1.0
    } else if j0.value < 0.0 {
        -1.0
    } else {
        0.0
    };
    let g2: f64 = j0.grad[..dim].iter().map(|v| v * v).sum();
    let primary = (g2 > 0.0)
        .then(|| {
            let mut start = u0;
            for a in 0..dim {
                start[a] -= j0.value * j0.grad[a] / g2;
            }
            kkt_newton(patch, u0, start, tol)
        })
        .flatten()
        .filter(|&u| is_local_min(patch, u0, u));
    let u = primary
        .or_else(|| lattice_search(patch, u0, tol))
        .ok_or(AfmmError::NoConvergence)?;
    let point = patch.to_physical(u);
    let distance = patch.h() * norm(&sub(u, u0)[..dim]);
    Ok(Projection {
        point,
        distance,
        sign,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::{fit_bicubic, CornerJet};

    fn affine2(c0: f64, cx: f64, cy: f64) -> CubicPatch {
        let mut c = vec![0.0; 16];
        c[0] = c0;
        c[1] = cx;
        c[4] = cy;
        CubicPatch::from_coeffs(2, [0.0; 3], 1.0, c)
    }

    #[test]
    fn projects_onto_line() {
        let p = affine2(-0.3, 1.0, 0.0);
        let r = closest_point(&p, [0.5, 0.5, 0.0], DEFAULT_TOL).unwrap();
        assert!((r.point[0] - 0.3).abs() < 1e-14 && (r.point[1] - 0.5).abs() < 1e-14);
        assert!((r.distance - 0.2).abs() < 1e-14);
        assert_eq!(r.sign, 1.0);

        let p = affine2(-1.0, 1.0, 1.0);
        let r = closest_point(&p, [0.0, 0.0, 0.0], DEFAULT_TOL).unwrap();
        assert!((r.point[0] - 0.5).abs() < 1e-14 && (r.point[1] - 0.5).abs() < 1e-14);
        assert!((r.distance - 0.5f64.sqrt()).abs() < 1e-14);
        assert_eq!(r.signed_distance(), -r.distance);
    }

    #[test]
    fn point_on_surface_has_zero_distance() {
        let p = affine2(-0.3, 1.0, 0.0);
        let r = closest_point(&p, [0.3, 0.1, 0.0], DEFAULT_TOL).unwrap();
        assert!(r.distance <= DEFAULT_TOL);
    }

    fn exp_circle_patch(cell_lo: [f64; 2], h: f64) -> CubicPatch {
        let e = std::f64::consts::E;
        let corners: Vec<CornerJet> = (0..4)
            .map(|c| {
                let (x, y) = (
                    cell_lo[0] + h * (c & 1) as f64,
                    cell_lo[1] + h * (c >> 1) as f64,
                );
                let ex = (x * x + y * y).exp();
                CornerJet {
                    phi: ex - e,
                    grad: [2.0 * x * ex, 2.0 * y * ex, 0.0],
                    cross: [4.0 * x * y * ex, 0.0, 0.0, 0.0],
                }
            })
            .collect();
        fit_bicubic(&corners, [cell_lo[0], cell_lo[1], 0.0], h)
    }

    #[test]
    fn matches_dense_sampling_oracle() {
        // cell [0.6, 0.7] x [0.7, 0.8] straddles the unit circle
        let h = 0.1;
        let patch = exp_circle_patch([0.6, 0.7], h);
        let x0 = [0.6, 0.7, 0.0];
        let r = closest_point(&patch, x0, DEFAULT_TOL).unwrap();
        // oracle: bisect the patch's zero along 10^6 rays of the cell
        // neighbourhood and keep the minimum distance
        let rays = 1_000_000;
        let mut best = f64::INFINITY;
        for k in 0..rays {
            let t = -0.5 + 2.0 * k as f64 / (rays - 1) as f64;
            // zero crossing along the vertical segment x = 0.6 + t h
            let x = 0.6 + t * h;
            let (mut lo, mut hi) = (0.5, 1.0);
            let f = |y: f64| patch.eval([x, y, 0.0]);
            if f(lo).signum() == f(hi).signum() {
                continue;
            }
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if f(mid).signum() == f(lo).signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let d = ((x - x0[0]).powi(2) + (0.5 * (lo + hi) - x0[1]).powi(2)).sqrt();
            best = best.min(d);
        }
        assert!(
            (r.distance - best).abs() < 1e-5,
            "{} vs {}",
            r.distance,
            best
        );
        assert!(r.distance <= best + 1e-9);
        assert_eq!(r.sign, -1.0);
        // close to the true circle distance as well
        assert!((r.distance - (1.0 - (0.85f64).sqrt())).abs() < 1e-4);
    }

    #[test]
    fn postconditions_hold() {
        let h = 0.05;
        let patch = exp_circle_patch([0.7, 0.7], h);
        for x0 in [
            [0.7, 0.7, 0.0],
            [0.75, 0.7, 0.0],
            [0.7, 0.75, 0.0],
            [0.75, 0.75, 0.0],
            [0.72, 0.73, 0.0],
        ] {
            let r = closest_point(&patch, x0, DEFAULT_TOL).unwrap();
            let j = patch.jet(r.point);
            let g = norm(&j.grad[..2]);
            assert!(j.value.abs() / g <= DEFAULT_TOL * h);
            let d = sub(x0, r.point);
            assert!(cross_norm(2, j.grad, d) <= DEFAULT_TOL * g * norm(&d[..2]) + 1e-15);
        }
    }

    #[test]
    fn fallback_handles_zero_gradient_start() {
        // P = (x-0.5)^2 + (y-0.5)^2 - 0.04 : start at the centre where grad P = 0
        let mut c = vec![0.0; 16];
        c[0] = 0.25 + 0.25 - 0.04;
        c[1] = -1.0;
        c[2] = 1.0;
        c[4] = -1.0;
        c[8] = 1.0;
        let p = CubicPatch::from_coeffs(2, [0.0; 3], 1.0, c);
        let r = closest_point(&p, [0.5, 0.5, 0.0], DEFAULT_TOL).unwrap();
        assert!((r.distance - 0.2).abs() < 1e-9);
        assert_eq!(r.sign, -1.0);
    }

    #[test]
    fn no_zero_set_reports_failure() {
        let p = affine2(1.0, 0.0, 0.0);
        assert_eq!(
            closest_point(&p, [0.5, 0.5, 0.0], DEFAULT_TOL),
            Err(AfmmError::NoConvergence)
        );
    }

    #[test]
    fn tricubic_sphere_projection() {
        // P = x^2+y^2+z^2 - 1 reproduced exactly by a tricubic
        let mut c = vec![0.0; 64];
        let (ox, oy, oz, h) = (0.5, 0.5, 0.5, 0.2);
        // expand (ox + h u)^2 etc.
        c[0] = ox * ox + oy * oy + oz * oz - 1.0;
        c[1] = 2.0 * ox * h;
        c[2] = h * h;
        c[4] = 2.0 * oy * h;
        c[8] = h * h;
        c[16] = 2.0 * oz * h;
        c[32] = h * h;
        let p = CubicPatch::from_coeffs(3, [ox, oy, oz], h, c);
        let x0 = [0.6, 0.55, 0.62];
        let r = closest_point(&p, x0, DEFAULT_TOL).unwrap();
        let rad = norm(&x0);
        assert!((r.distance - (rad - 1.0)).abs() < 1e-12);
        assert_eq!(r.sign, 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn not_beaten_by_sampled_zero_points(
                cx in 0.2f64..0.8, cy in 0.2f64..0.8, rad in 0.3f64..0.6,
                px in 0.0f64..1.0, py in 0.0f64..1.0,
            ) {
                // circle (x-cx)^2 + (y-cy)^2 - rad^2 in local coordinates
                let mut c = vec![0.0; 16];
                c[0] = cx * cx + cy * cy - rad * rad;
                c[1] = -2.0 * cx;
                c[2] = 1.0;
                c[4] = -2.0 * cy;
                c[8] = 1.0;
                let p = CubicPatch::from_coeffs(2, [0.0; 3], 1.0, c);
                prop_assume!(((px - cx).powi(2) + (py - cy).powi(2)).sqrt() > 0.05);
                let r = closest_point(&p, [px, py, 0.0], DEFAULT_TOL).unwrap();
                for k in 0..1000 {
                    let t = std::f64::consts::TAU * k as f64 / 1000.0;
                    let q = [cx + rad * t.cos(), cy + rad * t.sin()];
                    let d = ((q[0] - px).powi(2) + (q[1] - py).powi(2)).sqrt();
                    prop_assert!(r.distance <= d + 1e-6);
                }
            }
        }
    }
}
