//! Interface detection and high-order seeding of the accepted set.
//!
//! Each interface cell gets a cubic patch fitted from `phi0` and its
//! gradient. A seed node takes its jet from signed closest-point distances
//! on a small sub-grid of spacing `alpha * h` centred on the node, differenced
//! with second-order centred stencils.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{AfmmError, Result};
use crate::grid::{hess_slot, GridSpec, Jet, JetField};
use crate::interp::{cell_patch, gradient_from_phi, CubicPatch};
use crate::project::closest_point;

pub const DEFAULT_ALPHA: f64 = 0.1;

/// Offsets (in sub-grid units) of the seeding stencil around a node.
#[derive(Clone, Debug, PartialEq)]
pub struct SubGrid {
    pub center: usize,
    pub spacing: f64,
    pub offsets: Vec<[i8; 3]>,
}

impl SubGrid {
    /// 3x3 points in 2D; in 3D the 3x3x3 block without its 8 corners.
    pub fn new(grid: &GridSpec, center: usize, alpha: f64) -> Self {
        let dim = grid.dim();
        let r: &[i8] = &[-1, 0, 1];
        let zr: &[i8] = if dim == 3 { r } else { &[0] };
        let mut offsets = Vec::with_capacity(19);
        for &k in zr {
            for &j in r {
                for &i in r {
                    let nonzero = [i, j, k].iter().filter(|v| **v != 0).count();
                    if nonzero < 3 {
                        offsets.push([i, j, k]);
                    }
                }
            }
        }
        Self {
            center,
            spacing: alpha * grid.h(),
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn points(&self, grid: &GridSpec) -> Vec<[f64; 3]> {
        let c = grid.position(self.center);
        self.offsets
            .iter()
            .map(|o| [0, 1, 2].map(|a| c[a] + self.spacing * o[a] as f64))
            .collect()
    }

    fn index_of(&self, o: [i8; 3]) -> usize {
        self.offsets
            .iter()
            .position(|p| *p == o)
            .expect("offset in sub-grid")
    }

    /// Jet from signed distances sampled at [`SubGrid::points`].
    pub fn difference(&self, dim: usize, d: &[f64]) -> Jet {
        let s = self.spacing;
        let at = |o: [i8; 3]| d[self.index_of(o)];
        let unit = |a: usize, v: i8| {
            let mut o = [0i8; 3];
            o[a] = v;
            o
        };
        let c = at([0, 0, 0]);
        let mut jet = Jet {
            phi: c,
            ..Default::default()
        };
        for a in 0..dim {
            let (p, m) = (at(unit(a, 1)), at(unit(a, -1)));
            jet.psi[a] = (p - m) / (2.0 * s);
            jet.hess[a] = (p - 2.0 * c + m) / (s * s);
        }
        for a in 0..dim {
            for b in a + 1..dim {
                let corner = |u: i8, v: i8| {
                    let mut o = [0i8; 3];
                    o[a] = u;
                    o[b] = v;
                    at(o)
                };
                let mixed =
                    (corner(1, 1) - corner(1, -1) - corner(-1, 1) + corner(-1, -1)) / (4.0 * s * s);
                jet.hess[hess_slot(dim, a, b)] = mixed;
            }
        }
        jet
    }
}

/// Cells whose corner values are not all of one strict sign.
pub fn detect_interface_cells(phi0: &[f64], grid: &GridSpec) -> Result<Vec<usize>> {
    if phi0.len() != grid.node_count() {
        return Err(AfmmError::InvalidInput(format!(
            "phi0 has {} values, grid has {} nodes",
            phi0.len(),
            grid.node_count()
        )));
    }
    if phi0.iter().any(|v| !v.is_finite()) {
        return Err(AfmmError::InvalidInput("phi0 is not finite".into()));
    }
    let cells: Vec<usize> = (0..grid.cell_count())
        .filter(|&c| {
            let corners = grid.cell_corners(c);
            let all_pos = corners.iter().all(|&n| phi0[n] > 0.0);
            let all_neg = corners.iter().all(|&n| phi0[n] < 0.0);
            !(all_pos || all_neg)
        })
        .collect();
    if cells.is_empty() {
        return Err(AfmmError::EmptyInterface);
    }
    Ok(cells)
}

/// Seeding output: a field filled at the seed nodes only, and the seeds.
#[derive(Clone, Debug)]
pub struct Seeding {
    pub field: JetField,
    pub seeds: Vec<usize>,
    /// Seeds that needed a patch other than the nearest one.
    pub patch_retries: usize,
}

/// Options shared by full and distance-only seeding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedOptions {
    pub alpha: f64,
    pub tol: f64,
}

impl Default for SeedOptions {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            tol: crate::project::DEFAULT_TOL,
        }
    }
}

struct Interface {
    patches: HashMap<usize, CubicPatch>,
    seeds: Vec<usize>,
}

fn build_interface(phi0: &[f64], psi0: Option<&[[f64; 3]]>, grid: &GridSpec) -> Result<Interface> {
    let cells = detect_interface_cells(phi0, grid)?;
    let owned;
    let psi = match psi0 {
        Some(p) => {
            if p.len() != grid.node_count() {
                return Err(AfmmError::InvalidInput(
                    "psi0 length does not match the grid".into(),
                ));
            }
            p
        }
        None => {
            owned = gradient_from_phi(phi0, grid);
            &owned
        }
    };
    let patches: HashMap<usize, CubicPatch> = cells
        .par_iter()
        .map(|&c| (c, cell_patch(phi0, psi, grid, c)))
        .collect();
    let mut seeds: Vec<usize> = cells.iter().flat_map(|&c| grid.cell_corners(c)).collect();
    seeds.sort_unstable();
    seeds.dedup();
    Ok(Interface { patches, seeds })
}

/// Adjacent interface patches with their closest-point distance from the
/// node, nearest first.
fn ranked_patches<'a>(
    iface: &'a Interface,
    grid: &GridSpec,
    node: usize,
    tol: f64,
) -> Vec<(&'a CubicPatch, f64, f64)> {
    let x = grid.position(node);
    let mut out: Vec<_> = grid
        .node_cells(node)
        .into_iter()
        .filter_map(|c| iface.patches.get(&c))
        .filter_map(|p| {
            closest_point(p, x, tol)
                .ok()
                .map(|r| (p, r.distance, r.sign))
        })
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1));
    out
}

fn side_of(value: f64, fallback: f64) -> f64 {
    if value > 0.0 {
        1.0
    } else if value < 0.0 || fallback < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn seed_one(
    iface: &Interface,
    grid: &GridSpec,
    phi0: &[f64],
    node: usize,
    opts: SeedOptions,
) -> Result<(Jet, bool)> {
    let sub = SubGrid::new(grid, node, opts.alpha);
    let pts = sub.points(grid);
    let ranked = ranked_patches(iface, grid, node, opts.tol);
    for (attempt, (patch, _, _)) in ranked.iter().enumerate() {
        let dists: Option<Vec<f64>> = pts
            .iter()
            .map(|&p| {
                closest_point(patch, p, opts.tol)
                    .ok()
                    .map(|r| side_of(r.sign, phi0[node]) * r.distance)
            })
            .collect();
        if let Some(d) = dists {
            let mut jet = sub.difference(grid.dim(), &d);
            // the node itself sits on a patch corner, where the patch matches phi0
            jet.phi = side_of(phi0[node], phi0[node]) * jet.phi.abs();
            return Ok((jet, attempt > 0));
        }
    }
    Err(AfmmError::InitFailure { node })
}

/// Seeds every corner node of every interface cell with a full jet.
///
/// `psi0` may be omitted, in which case it is estimated from `phi0` by
/// centred differences.
pub fn seed_nodes(
    phi0: &[f64],
    psi0: Option<&[[f64; 3]]>,
    grid: &GridSpec,
    opts: SeedOptions,
) -> Result<Seeding> {
    let iface = build_interface(phi0, psi0, grid)?;
    let jets: Vec<(Jet, bool)> = iface
        .seeds
        .par_iter()
        .map(|&n| seed_one(&iface, grid, phi0, n, opts))
        .collect::<Result<_>>()?;
    let mut field = JetField::zeros(*grid);
    let mut retries = 0;
    for (&n, (jet, retried)) in iface.seeds.iter().zip(&jets) {
        field.phi[n] = jet.phi;
        field.psi[n] = jet.psi;
        field.hess[n] = jet.hess;
        retries += *retried as usize;
    }
    Ok(Seeding {
        field,
        seeds: iface.seeds,
        patch_retries: retries,
    })
}

/// Distance-only seeding for the classical method: each seed gets the
/// signed closest-point distance to the nearest adjacent patch.
pub fn seed_distances(
    phi0: &[f64],
    psi0: Option<&[[f64; 3]]>,
    grid: &GridSpec,
    opts: SeedOptions,
) -> Result<Seeding> {
    let iface = build_interface(phi0, psi0, grid)?;
    let phis: Vec<f64> = iface
        .seeds
        .par_iter()
        .map(|&n| {
            let ranked = ranked_patches(&iface, grid, n, opts.tol);
            ranked
                .first()
                .map(|&(_, d, _)| side_of(phi0[n], phi0[n]) * d)
                .ok_or(AfmmError::InitFailure { node: n })
        })
        .collect::<Result<_>>()?;
    let mut field = JetField::zeros(*grid);
    for (&n, &p) in iface.seeds.iter().zip(&phis) {
        field.phi[n] = p;
    }
    Ok(Seeding {
        field,
        seeds: iface.seeds,
        patch_retries: 0,
    })
}
