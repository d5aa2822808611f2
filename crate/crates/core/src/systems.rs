//! Upwind-discretized nonlinear systems for the gradient `(phi, psi)` and the
//! Hessian `H` at a node, and the tiered node update built on them.
//!
//! Every system is assembled from the differentiated squared Eikonal
//! equation: for a quantity `Q` in `{phi, psi^a, H^ab}` the transport term is
//! `sum_c psi^c d_c Q`. When axis `c` has an upwind neighbor, `d_c Q` becomes
//! the one-sided difference `s (Q_nb - Q) / h`. When it does not, the
//! derivative is rewritten through symmetry of mixed partials so that it is
//! taken along an available axis:
//!
//! * `d_c phi = psi^c` (the unknown itself),
//! * `d_c psi^a = d_a psi^c` if `a` is available, otherwise the term drops,
//! * `d_c H^ab`: every available letter `d` of `{a, b, c}` gives
//!   `d_d H^pq` with `{p, q} = {a, b, c} - {d}`; these are averaged, and the
//!   term drops if none is available.
//!
//! With all axes available this reproduces the two-axis (2D) and three-axis
//! (3D) systems; with fewer it gives the reduced single- and two-axis forms.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{AfmmError, Result};
use crate::grid::{hess_len, hess_pair, hess_slot, Jet, JetField, NodeStates, UpdateCase, Upwind};

const MAX_UNKNOWNS: usize = 6;
pub const NEWTON_MAX_ITER: usize = 40;
const MAX_HALVINGS: usize = 8;

/// `c + a . u`
#[derive(Clone, Copy, Debug, PartialEq)]
struct Affine {
    c: f64,
    a: [f64; MAX_UNKNOWNS],
}

impl Affine {
    fn constant(c: f64) -> Self {
        Self {
            c,
            a: [0.0; MAX_UNKNOWNS],
        }
    }

    fn unknown(i: usize) -> Self {
        let mut a = [0.0; MAX_UNKNOWNS];
        a[i] = 1.0;
        Self { c: 0.0, a }
    }

    fn eval(&self, u: &[f64]) -> f64 {
        self.c + u.iter().zip(&self.a).map(|(x, w)| x * w).sum::<f64>()
    }

    fn scaled(mut self, s: f64) -> Self {
        self.c *= s;
        self.a.iter_mut().for_each(|v| *v *= s);
        self
    }

    fn plus(mut self, o: &Self) -> Self {
        self.c += o.c;
        self.a.iter_mut().zip(&o.a).for_each(|(v, w)| *v += w);
        self
    }
}

/// Product of two affine forms.
#[derive(Clone, Copy, Debug)]
struct Term(Affine, Affine);

#[derive(Clone, Debug)]
struct Equation {
    terms: Vec<Term>,
    target: f64,
}

/// A square polynomial system `sum_k l_k(u) r_k(u) = target` per equation.
#[derive(Clone, Debug)]
pub struct System {
    n: usize,
    eqs: Vec<Equation>,
}

impl System {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn residual(&self, u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.eqs.len(),
            self.eqs.iter().map(|e| {
                e.terms
                    .iter()
                    .map(|t| t.0.eval(u) * t.1.eval(u))
                    .sum::<f64>()
                    - e.target
            }),
        )
    }

    pub fn jacobian(&self, u: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.eqs.len(), self.n);
        for (row, e) in self.eqs.iter().enumerate() {
            for Term(l, r) in &e.terms {
                let (lv, rv) = (l.eval(u), r.eval(u));
                for col in 0..self.n {
                    j[(row, col)] += l.a[col] * rv + lv * r.a[col];
                }
            }
        }
        j
    }
}

/// Upwind neighbor data for one update, independent of any grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub dim: usize,
    pub h: f64,
    /// Per axis: direction of the neighbor and its jet.
    pub nb: [Option<(i8, Jet)>; 3],
}

impl Stencil {
    pub fn from_case(case: &UpdateCase, field: &JetField) -> Self {
        let mut nb = [None; 3];
        for (a, slot) in nb.iter_mut().enumerate().take(case.dim) {
            *slot = case.axes[a].map(|u| (u.sign, field.jet(u.node)));
        }
        Self {
            dim: case.dim,
            h: field.grid.h(),
            nb,
        }
    }

    pub fn available(&self, axis: usize) -> bool {
        self.nb[axis].is_some()
    }

    pub fn used(&self) -> impl Iterator<Item = &(i8, Jet)> {
        self.nb[..self.dim].iter().flatten()
    }

    pub fn restricted(&self, mask: u8) -> Self {
        let mut out = *self;
        for a in 0..self.dim {
            if mask & (1 << a) == 0 {
                out.nb[a] = None;
            }
        }
        out
    }

    /// `D_c Q = s (Q_nb - Q) / h` as an affine form in unknown `idx`.
    fn diff(&self, axis: usize, idx: usize, nb_value: impl Fn(&Jet) -> f64) -> Affine {
        let (s, jet) = self.nb[axis].as_ref().expect("axis available");
        let s = *s as f64;
        let mut f = Affine::constant(s * nb_value(jet) / self.h);
        f.a[idx] = -s / self.h;
        f
    }
}

/// Gradient system; unknowns `[phi, psi^x, psi^y(, psi^z)]`.
pub fn gradient_system(st: &Stencil) -> System {
    let d = st.dim;
    let psi = |a: usize| Affine::unknown(1 + a);
    let mut eqs = Vec::with_capacity(d + 1);
    for e in 0..=d {
        let mut terms = Vec::new();
        for c in 0..d {
            let deriv = if st.available(c) {
                if e == 0 {
                    Some(st.diff(c, 0, |j| j.phi))
                } else {
                    Some(st.diff(c, e, |j| j.psi[e - 1]))
                }
            } else if e == 0 {
                Some(psi(c))
            } else {
                let a = e - 1;
                st.available(a).then(|| st.diff(a, 1 + c, |j| j.psi[c]))
            };
            if let Some(r) = deriv {
                terms.push(Term(psi(c), r));
            }
        }
        eqs.push(Equation {
            terms,
            target: if e == 0 { 1.0 } else { 0.0 },
        });
    }
    System { n: d + 1, eqs }
}

/// Hessian system for a node whose gradient `psi` is already known;
/// unknowns are the packed Hessian slots.
pub fn hessian_system(st: &Stencil, psi: [f64; 3]) -> System {
    let d = st.dim;
    let n = hess_len(d);
    let mut eqs = Vec::with_capacity(n);
    for slot in 0..n {
        let (a, b) = hess_pair(d, slot);
        let mut terms = Vec::new();
        for c in 0..d {
            terms.push(Term(
                Affine::unknown(hess_slot(d, a, c)),
                Affine::unknown(hess_slot(d, c, b)),
            ));
        }
        for c in 0..d {
            let deriv = if st.available(c) {
                Some(st.diff(c, slot, |j| j.hess[slot]))
            } else {
                let letters = [a, b, c];
                let mut avail: Vec<usize> = letters
                    .iter()
                    .copied()
                    .filter(|&l| st.available(l))
                    .collect();
                avail.dedup();
                avail.sort_unstable();
                avail.dedup();
                if avail.is_empty() {
                    None
                } else {
                    let w = 1.0 / avail.len() as f64;
                    let mut sum = Affine::constant(0.0);
                    for &dl in &avail {
                        let mut rest: Vec<usize> = letters.to_vec();
                        let at = rest.iter().position(|&l| l == dl).expect("letter present");
                        rest.remove(at);
                        let s = hess_slot(d, rest[0], rest[1]);
                        sum = sum.plus(&st.diff(dl, s, |j| j.hess[s]).scaled(w));
                    }
                    Some(sum)
                }
            };
            if let Some(r) = deriv {
                terms.push(Term(Affine::constant(psi[c]), r));
            }
        }
        eqs.push(Equation { terms, target: 0.0 });
    }
    System { n, eqs }
}

/// Residual of the gradient equations at `u = [phi, psi...]`.
pub fn residual_grad(st: &Stencil, u: &[f64]) -> Vec<f64> {
    gradient_system(st).residual(u).as_slice().to_vec()
}

/// Residual of the Hessian equations at packed `hess`, given the node's `psi`.
pub fn residual_hess(st: &Stencil, psi: [f64; 3], hess: &[f64]) -> Vec<f64> {
    hessian_system(st, psi).residual(hess).as_slice().to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum NewtonError {
    #[error("Newton iteration reached the maximum number of iterations")]
    MaxIterations,
    #[error("singular Jacobian")]
    SingularJacobian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Damped Newton iteration: stops when the residual max-norm is at most
/// `tol`, halving the step up to eight times while the residual 2-norm does
/// not decrease.
pub fn newton_solve(
    f: impl Fn(&[f64]) -> DVector<f64>,
    jac: impl Fn(&[f64]) -> DMatrix<f64>,
    guess: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<NewtonOutcome, NewtonError> {
    let mut x = guess.to_vec();
    let mut r = f(&x);
    for it in 0..=max_iter {
        if r.amax() <= tol {
            // one polishing step, kept only if it helps
            if let Some(dx) = jac(&x).lu().solve(&(-&r)) {
                let xn: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, b)| a + b).collect();
                let rn = f(&xn);
                if rn.iter().all(|v| v.is_finite()) && rn.amax() < r.amax() {
                    return Ok(NewtonOutcome {
                        x: xn,
                        iterations: it + 1,
                        residual: rn.amax(),
                    });
                }
            }
            return Ok(NewtonOutcome {
                x,
                iterations: it,
                residual: r.amax(),
            });
        }
        if it == max_iter {
            break;
        }
        let dx = jac(&x)
            .lu()
            .solve(&(-&r))
            .ok_or(NewtonError::SingularJacobian)?;
        if !dx.iter().all(|v| v.is_finite()) {
            return Err(NewtonError::SingularJacobian);
        }
        let r_norm = r.norm();
        let mut t = 1.0;
        let mut xn = x.clone();
        let mut rn = r.clone();
        for k in 0..=MAX_HALVINGS {
            for (i, v) in xn.iter_mut().enumerate() {
                *v = x[i] + t * dx[i];
            }
            rn = f(&xn);
            if rn.norm() < r_norm || k == MAX_HALVINGS {
                break;
            }
            t *= 0.5;
        }
        if !rn.iter().all(|v| v.is_finite()) {
            return Err(NewtonError::SingularJacobian);
        }
        x = xn;
        r = rn;
    }
    Err(NewtonError::MaxIterations)
}

/// Diagnostics for one node solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub valid: bool,
    /// 0 = full case, 1 = reduced case, 2 = baseline quadratic fallback.
    pub tier: u8,
}

/// A solved `(phi, psi)` pair at a node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCandidate {
    pub phi: f64,
    pub psi: [f64; 3],
}

const ORDER_SLACK: f64 = 1e-12;

/// Accepts a candidate if it lies no closer to the interface than any used
/// neighbor (on the node's side `side = +-1`) and its gradient points the
/// same general way as each neighbor's.
pub fn validate_gradient(cand: &GradCandidate, st: &Stencil, side: f64) -> bool {
    if !cand.phi.is_finite() || !cand.psi.iter().all(|v| v.is_finite()) {
        return false;
    }
    st.used().all(|(_, nb)| {
        let ordered = side * cand.phi >= side * nb.phi - ORDER_SLACK * (1.0 + nb.phi.abs());
        let aligned = (0..st.dim).map(|a| cand.psi[a] * nb.psi[a]).sum::<f64>() >= 0.0;
        ordered && aligned
    })
}

fn gradient_guess(st: &Stencil) -> Vec<f64> {
    let d = st.dim;
    let mut g = vec![0.0; d + 1];
    let mut count = 0.0;
    for (axis, slot) in st.nb[..d].iter().enumerate() {
        if let Some((s, jet)) = slot {
            // first-order Taylor step from the neighbor back to the node
            g[0] += jet.phi - *s as f64 * st.h * jet.psi[axis];
            for a in 0..d {
                g[1 + a] += jet.psi[a];
            }
            count += 1.0;
        }
    }
    g.iter_mut().for_each(|v| *v /= count);
    g
}

/// Solves the gradient system of a stencil and checks validity.
pub fn solve_gradient(st: &Stencil, side: f64) -> (Option<GradCandidate>, SolveReport) {
    let sys = gradient_system(st);
    let guess = gradient_guess(st);
    let tol = 1e-10 * (guess[0].abs() / st.h).max(1.0);
    let mut report = SolveReport::default();
    match newton_solve(
        |u| sys.residual(u),
        |u| sys.jacobian(u),
        &guess,
        tol,
        NEWTON_MAX_ITER,
    ) {
        Ok(out) => {
            report.converged = true;
            report.iterations = out.iterations;
            report.residual = out.residual;
            let mut psi = [0.0; 3];
            psi[..st.dim].copy_from_slice(&out.x[1..]);
            let cand = GradCandidate { phi: out.x[0], psi };
            report.valid = validate_gradient(&cand, st, side);
            (report.valid.then_some(cand), report)
        }
        Err(_) => (None, report),
    }
}

/// Classical upwind Eikonal update `sum_a (phi - m_a)^2 = h^2` on magnitudes:
/// the smallest root exceeding every used neighbor, dropping the largest
/// neighbor value until such a root exists.
pub fn baseline_quadratic(mags: &[f64], h: f64) -> f64 {
    let mut m: Vec<f64> = mags.to_vec();
    m.sort_by(|a, b| a.total_cmp(b));
    while !m.is_empty() {
        let k = m.len() as f64;
        let s1: f64 = m.iter().sum();
        let s2: f64 = m.iter().map(|v| v * v).sum();
        // k phi^2 - 2 s1 phi + (s2 - h^2) = 0
        let disc = s1 * s1 - k * (s2 - h * h);
        if disc >= 0.0 {
            let root = (s1 + disc.sqrt()) / k;
            if root >= *m.last().expect("nonempty") {
                return root;
            }
        }
        m.pop();
    }
    unreachable!("single-neighbor update always has a root")
}

/// Tier-2 fallback: baseline quadratic for `|phi|` and a normalized
/// gradient from the upwind differences (neighbor-averaged on missing axes).
pub fn baseline_candidate(st: &Stencil, side: f64) -> GradCandidate {
    let mags: Vec<f64> = st.used().map(|(_, j)| j.phi.abs()).collect();
    let phi = side * baseline_quadratic(&mags, st.h);
    let count = mags.len() as f64;
    let mut psi = [0.0; 3];
    for (a, v) in psi.iter_mut().enumerate().take(st.dim) {
        *v = match st.nb[a] {
            Some((s, j)) => s as f64 * (j.phi - phi) / st.h,
            None => st.used().map(|(_, j)| j.psi[a]).sum::<f64>() / count,
        };
    }
    let norm = psi.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        psi.iter_mut().for_each(|v| *v /= norm);
    }
    GradCandidate { phi, psi }
}

/// Candidate produced by [`update_node`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeUpdate {
    pub cand: GradCandidate,
    pub case: UpdateCase,
    pub report: SolveReport,
}

/// Full upwind case from the accepted neighbors of `node`, choosing the
/// smaller `|phi|` when both neighbors on an axis are accepted.
pub fn select_case(node: usize, field: &JetField, states: &NodeStates) -> UpdateCase {
    let grid = &field.grid;
    let mut case = UpdateCase::empty(grid.dim());
    for nb in grid.neighbors(node) {
        if !states.is_accepted(nb.node) {
            continue;
        }
        let better = match case.axes[nb.axis] {
            None => true,
            Some(cur) => field.phi[nb.node].abs() < field.phi[cur.node].abs(),
        };
        if better {
            case.axes[nb.axis] = Some(Upwind {
                sign: nb.sign,
                node: nb.node,
            });
        }
    }
    case
}

/// Computes a trial `(phi, psi)` at `node` from its accepted neighbors.
///
/// Tries the full case, then every reduced case level by level (fewest axes
/// dropped first, smallest valid `|phi|` within a level), then the baseline
/// quadratic fallback.
pub fn update_node(
    node: usize,
    field: &JetField,
    states: &NodeStates,
    side: f64,
) -> Result<NodeUpdate> {
    let full = select_case(node, field, states);
    let k = full.axis_count();
    if k == 0 {
        return Err(AfmmError::UpdateFailure { node });
    }
    let st = Stencil::from_case(&full, field);
    let (cand, mut report) = solve_gradient(&st, side);
    if let Some(cand) = cand {
        return Ok(NodeUpdate {
            cand,
            case: full,
            report,
        });
    }
    let dim = full.dim;
    let present: u8 = (0..dim)
        .filter(|&a| full.available(a))
        .fold(0, |m, a| m | (1 << a));
    for level in (1..k).rev() {
        let mut best: Option<NodeUpdate> = None;
        for mask in 1u8..(1 << dim) {
            if mask & !present != 0 || mask.count_ones() as usize != level {
                continue;
            }
            let (c, mut r) = solve_gradient(&st.restricted(mask), side);
            if let Some(c) = c {
                r.tier = 1;
                if best.is_none_or(|b| c.phi.abs() < b.cand.phi.abs()) {
                    best = Some(NodeUpdate {
                        cand: c,
                        case: full.restricted(mask),
                        report: r,
                    });
                }
            }
        }
        if let Some(b) = best {
            return Ok(b);
        }
    }
    let cand = baseline_candidate(&st, side);
    if !(cand.phi.is_finite() && cand.psi.iter().all(|v| v.is_finite())) {
        return Err(AfmmError::UpdateFailure { node });
    }
    report.tier = 2;
    report.valid = false;
    Ok(NodeUpdate {
        cand,
        case: full,
        report,
    })
}

/// Diagnostics for one Hessian solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HessReport {
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    /// True if Newton failed and the neighbor-average guess was kept.
    pub fallback: bool,
}

/// Solves the Hessian system at a node with known gradient `psi`, starting
/// from the average of the used neighbors' Hessians.
pub fn solve_hessian(st: &Stencil, psi: [f64; 3]) -> ([f64; 6], HessReport) {
    let n = hess_len(st.dim);
    let sys = hessian_system(st, psi);
    let count = st.used().count() as f64;
    let mut guess = vec![0.0; n];
    let mut scale: f64 = 0.0;
    for (_, j) in st.used() {
        for s in 0..n {
            guess[s] += j.hess[s] / count;
            scale = scale.max(j.hess[s].abs());
        }
    }
    let tol = 1e-10 * (scale / st.h).max(1.0);
    let mut out = [0.0; 6];
    match newton_solve(
        |u| sys.residual(u),
        |u| sys.jacobian(u),
        &guess,
        tol,
        NEWTON_MAX_ITER,
    ) {
        Ok(sol) => {
            out[..n].copy_from_slice(&sol.x);
            (
                out,
                HessReport {
                    converged: true,
                    iterations: sol.iterations,
                    residual: sol.residual,
                    fallback: false,
                },
            )
        }
        Err(_) => {
            out[..n].copy_from_slice(&guess);
            let residual = sys.residual(&guess).amax();
            (
                out,
                HessReport {
                    converged: false,
                    iterations: NEWTON_MAX_ITER,
                    residual,
                    fallback: true,
                },
            )
        }
    }
}
