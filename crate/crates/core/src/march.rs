//! Marching engines: the classical first-order method, and the augmented
//! two-pass method (gradient march, then Hessian replay in acceptance order).

use serde::{Deserialize, Serialize};

use crate::error::{AfmmError, Result};
use crate::grid::{
    GridSpec, JetField, MarchOrder, MarchStep, NodeStates, NodeTag, TrialHeap, UpdateCase, Upwind,
};
use crate::seed::{seed_distances, seed_nodes, SeedOptions};
use crate::systems::{baseline_quadratic, solve_hessian, update_node, NodeUpdate, Stencil};

/// Counters and residual maxima collected during a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub seeds: usize,
    pub marched: usize,
    /// Accepted nodes by tier: full case, reduced case, baseline fallback.
    pub tier_counts: [usize; 3],
    /// Trial re-solves triggered by a newly accepted neighbor.
    pub reupdates: usize,
    /// Trial keys raised to the last popped key to keep pops ordered.
    pub key_clamps: usize,
    pub patch_retries: usize,
    pub max_gradient_residual: f64,
    pub hessian_fallbacks: usize,
    pub max_hessian_residual: f64,
}

/// Result of an augmented march.
#[derive(Clone, Debug)]
pub struct AfmmRun {
    pub field: JetField,
    pub order: MarchOrder,
    pub stats: RunStats,
}

fn side(phi0: f64) -> f64 {
    if phi0 < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn rank(u: &NodeUpdate) -> u8 {
    u8::from(u.report.tier >= 2)
}

fn check_inputs(phi0: &[f64], psi0: Option<&[[f64; 3]]>, grid: &GridSpec) -> Result<()> {
    if phi0.len() != grid.node_count() {
        return Err(AfmmError::InvalidInput(format!(
            "phi0 has {} values, grid has {} nodes",
            phi0.len(),
            grid.node_count()
        )));
    }
    if psi0.is_some_and(|p| p.len() != grid.node_count()) {
        return Err(AfmmError::InvalidInput(
            "psi0 length does not match the grid".into(),
        ));
    }
    Ok(())
}

/// Classical fast marching on `|phi|` with distance-only seeding.
pub fn run_standard_fmm(
    phi0: &[f64],
    psi0: Option<&[[f64; 3]]>,
    grid: &GridSpec,
    opts: SeedOptions,
) -> Result<(Vec<f64>, MarchOrder)> {
    check_inputs(phi0, psi0, grid)?;
    let seeding = seed_distances(phi0, psi0, grid, opts)?;
    let mut phi = seeding.field.phi;
    let mut states = NodeStates::new(grid.node_count());
    let mut heap = TrialHeap::new(grid.node_count());
    for &s in &seeding.seeds {
        states.advance(s, NodeTag::Accepted);
    }

    let update = |node: usize, phi: &[f64], states: &NodeStates| -> (f64, UpdateCase) {
        let mut case = UpdateCase::empty(grid.dim());
        for nb in grid.neighbors(node) {
            if states.is_accepted(nb.node)
                && case.axes[nb.axis]
                    .is_none_or(|cur: Upwind| phi[nb.node].abs() < phi[cur.node].abs())
            {
                case.axes[nb.axis] = Some(Upwind {
                    sign: nb.sign,
                    node: nb.node,
                });
            }
        }
        let mags: Vec<f64> = case.used_nodes().map(|n| phi[n].abs()).collect();
        (baseline_quadratic(&mags, grid.h()), case)
    };

    let mut cases: Vec<Option<UpdateCase>> = vec![None; grid.node_count()];
    let mut last = 0.0f64;
    let push_neighbors = |node: usize,
                          phi: &mut [f64],
                          states: &mut NodeStates,
                          heap: &mut TrialHeap,
                          cases: &mut [Option<UpdateCase>],
                          last: f64| {
        for nb in grid.neighbors(node) {
            let m = nb.node;
            if states.is_accepted(m) {
                continue;
            }
            let (v, case) = update(m, phi, states);
            if heap.key(m).is_none_or(|k| v < k) {
                phi[m] = side(phi0[m]) * v;
                cases[m] = Some(case);
                heap.push_or_update(m, v.max(last));
                states.advance(m, NodeTag::Trial);
            }
        }
    };
    for &s in &seeding.seeds {
        push_neighbors(s, &mut phi, &mut states, &mut heap, &mut cases, last);
    }
    let mut order = MarchOrder {
        seeds: seeding.seeds.clone(),
        steps: Vec::new(),
    };
    while let Some((node, key)) = heap.pop() {
        states.advance(node, NodeTag::Accepted);
        last = key;
        order.steps.push(MarchStep {
            node,
            case: cases[node].expect("trial has a case"),
            tier: 2,
            key,
        });
        push_neighbors(node, &mut phi, &mut states, &mut heap, &mut cases, last);
    }
    Ok((phi, order))
}

/// Gradient pass of the augmented method: seeds with full jets, then marches
/// `(phi, psi)` with the tiered node update. Hessians are filled only at seeds.
pub fn gradient_pass(
    phi0: &[f64],
    psi0: Option<&[[f64; 3]]>,
    grid: &GridSpec,
    opts: SeedOptions,
) -> Result<AfmmRun> {
    check_inputs(phi0, psi0, grid)?;
    let seeding = seed_nodes(phi0, psi0, grid, opts)?;
    let mut field = seeding.field;
    let mut stats = RunStats {
        seeds: seeding.seeds.len(),
        patch_retries: seeding.patch_retries,
        ..Default::default()
    };
    let n = grid.node_count();
    let mut states = NodeStates::new(n);
    let mut heap = TrialHeap::new(n);
    let mut trial: Vec<Option<NodeUpdate>> = vec![None; n];
    for &s in &seeding.seeds {
        states.advance(s, NodeTag::Accepted);
    }

    let mut last = 0.0f64;
    let relax = |node: usize,
                 field: &JetField,
                 states: &mut NodeStates,
                 heap: &mut TrialHeap,
                 trial: &mut [Option<NodeUpdate>],
                 stats: &mut RunStats,
                 last: f64|
     -> Result<()> {
        for nb in grid.neighbors(node) {
            let m = nb.node;
            if states.is_accepted(m) {
                continue;
            }
            let cand = update_node(m, field, states, side(phi0[m]))?;
            let replace = match &trial[m] {
                None => true,
                Some(old) => {
                    stats.reupdates += 1;
                    // The newest solve sees every accepted neighbour and wins,
                    // unless it had to fall back where the old one did not.
                    // Keeping the smaller |phi| instead lets one-axis solves,
                    // which copy the neighbour gradient, beat better ones.
                    rank(&cand) <= rank(old)
                }
            };
            if replace {
                let mut key = cand.cand.phi.abs();
                if key < last {
                    stats.key_clamps += 1;
                    key = last;
                }
                trial[m] = Some(cand);
                heap.push_or_update(m, key);
                states.advance(m, NodeTag::Trial);
            }
        }
        Ok(())
    };

    for &s in &seeding.seeds {
        relax(
            s,
            &field,
            &mut states,
            &mut heap,
            &mut trial,
            &mut stats,
            last,
        )?;
    }
    let mut order = MarchOrder {
        seeds: seeding.seeds,
        steps: Vec::new(),
    };
    while let Some((node, key)) = heap.pop() {
        let up = trial[node].take().expect("trial node has a candidate");
        field.phi[node] = up.cand.phi;
        field.psi[node] = up.cand.psi;
        states.advance(node, NodeTag::Accepted);
        stats.tier_counts[up.report.tier as usize] += 1;
        if up.report.tier < 2 {
            stats.max_gradient_residual = stats.max_gradient_residual.max(up.report.residual);
        }
        last = key;
        order.steps.push(MarchStep {
            node,
            case: up.case,
            tier: up.report.tier,
            key,
        });
        relax(
            node,
            &field,
            &mut states,
            &mut heap,
            &mut trial,
            &mut stats,
            last,
        )?;
    }
    stats.marched = order.steps.len();
    Ok(AfmmRun {
        field,
        order,
        stats,
    })
}

/// Hessian replay: solves the Hessian system at every marched node in
/// acceptance order with the recorded upwind case. Seed Hessians are kept.
/// Returns the number of fallbacks and the largest converged residual.
pub fn hessian_pass(field: &mut JetField, order: &MarchOrder) -> (usize, f64) {
    let mut fallbacks = 0;
    let mut max_res = 0.0f64;
    for step in &order.steps {
        let st = Stencil::from_case(&step.case, field);
        let (h, rep) = solve_hessian(&st, field.psi[step.node]);
        field.hess[step.node] = h;
        if rep.fallback {
            fallbacks += 1;
        } else {
            max_res = max_res.max(rep.residual);
        }
    }
    (fallbacks, max_res)
}

/// Full augmented reinitialization: gradient pass then Hessian replay.
pub fn run_afmm(
    phi0: &[f64],
    psi0: Option<&[[f64; 3]]>,
    grid: &GridSpec,
    opts: SeedOptions,
) -> Result<AfmmRun> {
    let mut run = gradient_pass(phi0, psi0, grid, opts)?;
    let (fallbacks, res) = hessian_pass(&mut run.field, &run.order);
    run.stats.hessian_fallbacks = fallbacks;
    run.stats.max_hessian_residual = res;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(n: usize) -> (GridSpec, Vec<f64>, Vec<[f64; 3]>) {
        let grid = GridSpec::cube(2, -2.0, 2.0, n).unwrap();
        let e = std::f64::consts::E;
        let phi0 = grid.sample(|p| (p[0] * p[0] + p[1] * p[1]).exp() - e);
        let psi0 = grid.sample(|p| {
            let ex = (p[0] * p[0] + p[1] * p[1]).exp();
            [2.0 * p[0] * ex, 2.0 * p[1] * ex, 0.0]
        });
        (grid, phi0, psi0)
    }

    #[test]
    fn fmm_plane_is_exact_along_normal_lines() {
        let grid = GridSpec::cube(2, -2.0, 2.0, 41).unwrap();
        let phi0 = grid.sample(|p| p[0] - 0.05);
        let (phi, order) = run_standard_fmm(&phi0, None, &grid, SeedOptions::default()).unwrap();
        assert!(order.is_causal() && order.is_permutation_of(grid.node_count()));
        for node in 0..grid.node_count() {
            let x = grid.position(node)[0];
            assert!(
                (phi[node] - (x - 0.05)).abs() < 1e-9,
                "{} vs {}",
                phi[node],
                x - 0.05
            );
        }
    }

    #[test]
    fn fmm_circle_first_order_accuracy() {
        let (grid, phi0, psi0) = circle(41);
        let (phi, order) =
            run_standard_fmm(&phi0, Some(&psi0), &grid, SeedOptions::default()).unwrap();
        assert!(order.is_causal());
        let mut err = 0.0f64;
        for node in 0..grid.node_count() {
            let p = grid.position(node);
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            err = err.max((phi[node] - (r - 1.0)).abs());
            assert_eq!(phi[node] < 0.0, phi0[node] < 0.0);
        }
        assert!(err < 0.1, "{err}");
    }

    #[test]
    fn afmm_plane_is_exact() {
        let grid = GridSpec::cube(2, -2.0, 2.0, 21).unwrap();
        let nrm = [0.6, -0.8];
        let phi0 = grid.sample(|p| 3.0 * (nrm[0] * p[0] + nrm[1] * p[1] - 0.13));
        let run = run_afmm(&phi0, None, &grid, SeedOptions::default()).unwrap();
        assert!(run.order.is_causal() && run.order.is_permutation_of(grid.node_count()));
        for node in 0..grid.node_count() {
            let p = grid.position(node);
            let d = nrm[0] * p[0] + nrm[1] * p[1] - 0.13;
            assert!((run.field.phi[node] - d).abs() < 1e-8);
            assert!((run.field.psi[node][0] - nrm[0]).abs() < 1e-8);
            assert!((run.field.psi[node][1] - nrm[1]).abs() < 1e-8);
            assert!(run.field.hess[node][..3].iter().all(|v| v.abs() < 1e-8));
        }
    }

    #[test]
    fn afmm_circle_properties() {
        let (grid, phi0, psi0) = circle(50);
        let run = run_afmm(&phi0, Some(&psi0), &grid, SeedOptions::default()).unwrap();
        assert!(run.order.is_causal());
        assert!(run.order.is_permutation_of(grid.node_count()));
        let h = grid.h();
        for node in 0..grid.node_count() {
            if phi0[node].abs() > h {
                assert_eq!(run.field.phi[node] < 0.0, phi0[node] < 0.0);
            }
        }
        // Hessian replay is idempotent
        let mut again = run.field.clone();
        hessian_pass(&mut again, &run.order);
        assert!(again
            .hess
            .iter()
            .zip(&run.field.hess)
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())));
        // seeds keep their seeded Hessian
        let seeded = seed_nodes(&phi0, Some(&psi0), &grid, SeedOptions::default()).unwrap();
        for &s in &seeded.seeds {
            assert_eq!(seeded.field.hess[s], run.field.hess[s]);
        }
        let tier2 = run.stats.tier_counts[2] as f64 / run.stats.marched as f64;
        assert!(tier2 < 0.01, "{:?}", run.stats);
    }
}
