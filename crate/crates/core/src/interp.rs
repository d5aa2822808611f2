//! Bicubic and tricubic Hermite patches over a single grid cell.
//!
//! A patch is a polynomial `P(u) = sum c[i,j,k] u^i v^j w^k` in local
//! coordinates `u = (x - origin) / h`, so the cell is `[0,1]^d`. It is fitted
//! so that at each corner the value, first derivatives and the mixed
//! derivatives `xy` (2D) or `xy, xz, yz, xyz` (3D) match the supplied data.

use std::sync::LazyLock;

use nalgebra::{DMatrix, DVector};

use crate::grid::GridSpec;

/// Prescribed data at one cell corner, in physical units.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CornerJet {
    pub phi: f64,
    pub grad: [f64; 3],
    /// `[xy, xz, yz, xyz]`; 2D uses only `xy`.
    pub cross: [f64; 4],
}

impl CornerJet {
    /// The datum a Hermite constraint with per-axis derivative orders `ord` refers to.
    fn datum(&self, ord: [usize; 3]) -> f64 {
        match ord {
            [0, 0, 0] => self.phi,
            [1, 0, 0] => self.grad[0],
            [0, 1, 0] => self.grad[1],
            [0, 0, 1] => self.grad[2],
            [1, 1, 0] => self.cross[0],
            [1, 0, 1] => self.cross[1],
            [0, 1, 1] => self.cross[2],
            [1, 1, 1] => self.cross[3],
            _ => unreachable!(),
        }
    }
}

/// Cubic-per-axis polynomial over one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicPatch {
    dim: usize,
    origin: [f64; 3],
    h: f64,
    coeffs: Vec<f64>,
}

/// `d^k/du^k u^i` at `u`.
fn monomial_deriv(i: usize, k: usize, u: f64) -> f64 {
    if k > i {
        return 0.0;
    }
    let mut c = 1.0;
    for m in 0..k {
        c *= (i - m) as f64;
    }
    c * u.powi((i - k) as i32)
}

fn constraint_orders(dim: usize) -> Vec<[usize; 3]> {
    (0..1usize << dim)
        .map(|m| [m & 1, (m >> 1) & 1, (m >> 2) & 1])
        .collect()
}

fn monomials(dim: usize) -> Vec<[usize; 3]> {
    let count = 4usize.pow(dim as u32);
    (0..count).map(|m| [m % 4, (m / 4) % 4, m / 16]).collect()
}

/// Inverse of the Hermite constraint matrix. Rows of the forward matrix are
/// ordered (corner, derivative kind); columns are monomials `i + 4j + 16k`.
fn hermite_inverse(dim: usize) -> DMatrix<f64> {
    let mons = monomials(dim);
    let ords = constraint_orders(dim);
    let size = mons.len();
    let mut a = DMatrix::zeros(size, size);
    let mut row = 0;
    for corner in 0..1usize << dim {
        let at = [
            (corner & 1) as f64,
            ((corner >> 1) & 1) as f64,
            ((corner >> 2) & 1) as f64,
        ];
        for ord in &ords {
            for (col, m) in mons.iter().enumerate() {
                a[(row, col)] = (0..dim)
                    .map(|ax| monomial_deriv(m[ax], ord[ax], at[ax]))
                    .product();
            }
            row += 1;
        }
    }
    a.try_inverse()
        .expect("Hermite constraint matrix is invertible")
}

static BICUBIC_INV: LazyLock<DMatrix<f64>> = LazyLock::new(|| hermite_inverse(2));
static TRICUBIC_INV: LazyLock<DMatrix<f64>> = LazyLock::new(|| hermite_inverse(3));

fn fit(dim: usize, corners: &[CornerJet], origin: [f64; 3], h: f64) -> CubicPatch {
    assert_eq!(corners.len(), 1 << dim, "expected {} corners", 1 << dim);
    let ords = constraint_orders(dim);
    let mut rhs = DVector::zeros(4usize.pow(dim as u32));
    let mut row = 0;
    for c in corners {
        for ord in &ords {
            let scale = h.powi(ord.iter().sum::<usize>() as i32);
            rhs[row] = c.datum(*ord) * scale;
            row += 1;
        }
    }
    let inv = if dim == 2 {
        &*BICUBIC_INV
    } else {
        &*TRICUBIC_INV
    };
    let coeffs = (inv * rhs).as_slice().to_vec();
    CubicPatch {
        dim,
        origin,
        h,
        coeffs,
    }
}

/// Fits a bicubic patch to the four corners of a cell, given in
/// [`GridSpec::cell_corners`] order.
pub fn fit_bicubic(corners: &[CornerJet], origin: [f64; 3], h: f64) -> CubicPatch {
    fit(2, corners, origin, h)
}

/// Fits a tricubic patch to the eight corners of a cell.
pub fn fit_tricubic(corners: &[CornerJet], origin: [f64; 3], h: f64) -> CubicPatch {
    fit(3, corners, origin, h)
}

/// Value, gradient and Hessian at a point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PatchJet {
    pub value: f64,
    pub grad: [f64; 3],
    pub hess: [[f64; 3]; 3],
}

impl CubicPatch {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Builds a patch directly from monomial coefficients in local coordinates.
    pub fn from_coeffs(dim: usize, origin: [f64; 3], h: f64, coeffs: Vec<f64>) -> Self {
        assert_eq!(coeffs.len(), 4usize.pow(dim as u32));
        Self {
            dim,
            origin,
            h,
            coeffs,
        }
    }

    pub fn to_local(&self, x: [f64; 3]) -> [f64; 3] {
        let mut u = [0.0; 3];
        for a in 0..self.dim {
            u[a] = (x[a] - self.origin[a]) / self.h;
        }
        u
    }

    pub fn to_physical(&self, u: [f64; 3]) -> [f64; 3] {
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = self.origin[a] + u[a] * self.h;
        }
        x
    }

    /// Value, gradient and Hessian with respect to local coordinates.
    pub fn jet_local(&self, u: [f64; 3]) -> PatchJet {
        let mut p = [[0.0; 4]; 3];
        let mut dp = [[0.0; 4]; 3];
        let mut ddp = [[0.0; 4]; 3];
        for a in 0..3 {
            let t = u[a];
            p[a] = [1.0, t, t * t, t * t * t];
            dp[a] = [0.0, 1.0, 2.0 * t, 3.0 * t * t];
            ddp[a] = [0.0, 0.0, 2.0, 6.0 * t];
        }
        let mut out = PatchJet::default();
        let kmax = if self.dim == 2 { 1 } else { 4 };
        for k in 0..kmax {
            let (pk, dpk, ddpk) = if self.dim == 2 {
                (1.0, 0.0, 0.0)
            } else {
                (p[2][k], dp[2][k], ddp[2][k])
            };
            for j in 0..4 {
                for i in 0..4 {
                    let c = self.coeffs[i + 4 * j + 16 * k];
                    if c == 0.0 {
                        continue;
                    }
                    let (x0, x1, x2) = (p[0][i], dp[0][i], ddp[0][i]);
                    let (y0, y1, y2) = (p[1][j], dp[1][j], ddp[1][j]);
                    out.value += c * x0 * y0 * pk;
                    out.grad[0] += c * x1 * y0 * pk;
                    out.grad[1] += c * x0 * y1 * pk;
                    out.hess[0][0] += c * x2 * y0 * pk;
                    out.hess[1][1] += c * x0 * y2 * pk;
                    out.hess[0][1] += c * x1 * y1 * pk;
                    if self.dim == 3 {
                        out.grad[2] += c * x0 * y0 * dpk;
                        out.hess[2][2] += c * x0 * y0 * ddpk;
                        out.hess[0][2] += c * x1 * y0 * dpk;
                        out.hess[1][2] += c * x0 * y1 * dpk;
                    }
                }
            }
        }
        out.hess[1][0] = out.hess[0][1];
        out.hess[2][0] = out.hess[0][2];
        out.hess[2][1] = out.hess[1][2];
        out
    }

    /// Value, gradient and Hessian in physical units.
    pub fn jet(&self, x: [f64; 3]) -> PatchJet {
        let mut j = self.jet_local(self.to_local(x));
        let h = self.h;
        for a in 0..3 {
            j.grad[a] /= h;
            for b in 0..3 {
                j.hess[a][b] /= h * h;
            }
        }
        j
    }

    pub fn eval(&self, x: [f64; 3]) -> f64 {
        self.jet_local(self.to_local(x)).value
    }

    pub fn eval_grad(&self, x: [f64; 3]) -> [f64; 3] {
        self.jet(x).grad
    }
}

/// One-sided or centered first-derivative weights along an axis at index `i`
/// of `n`, as `(offset, weight)` pairs (not yet divided by `h`).
/// Second order everywhere.
pub fn diff_weights(i: usize, n: usize) -> Vec<(isize, f64)> {
    if i == 0 {
        vec![(0, -1.5), (1, 2.0), (2, -0.5)]
    } else if i + 1 == n {
        vec![(0, 1.5), (-1, -2.0), (-2, 0.5)]
    } else {
        vec![(-1, -0.5), (1, 0.5)]
    }
}

fn offset_node(grid: &GridSpec, node: usize, axis: usize, off: isize) -> usize {
    let stride = grid.n().pow(axis as u32) as isize;
    (node as isize + off * stride) as usize
}

/// Second-order difference approximation of `d f / d x_a` at a node.
pub fn first_diff(f: impl Fn(usize) -> f64, grid: &GridSpec, node: usize, a: usize) -> f64 {
    let ijk = grid.node_ijk(node);
    diff_weights(ijk[a], grid.n())
        .into_iter()
        .map(|(o, w)| w * f(offset_node(grid, node, a, o)))
        .sum::<f64>()
        / grid.h()
}

/// Second-order approximation of `d^2 f / dx_a dx_b` (`a != b`) as the
/// tensor product of the per-axis first-derivative stencils.
pub fn mixed_diff(
    f: impl Fn(usize) -> f64,
    grid: &GridSpec,
    node: usize,
    a: usize,
    b: usize,
) -> f64 {
    let ijk = grid.node_ijk(node);
    let wa = diff_weights(ijk[a], grid.n());
    let wb = diff_weights(ijk[b], grid.n());
    let mut s = 0.0;
    for &(oa, ca) in &wa {
        let na = offset_node(grid, node, a, oa);
        for &(ob, cb) in &wb {
            s += ca * cb * f(offset_node(grid, na, b, ob));
        }
    }
    s / (grid.h() * grid.h())
}

/// `phi_xy = (D_x psi^y + D_y psi^x) / 2`.
pub fn cross_derivs_2d(psi: &[[f64; 3]], grid: &GridSpec, node: usize) -> f64 {
    pair_cross(psi, grid, node, 0, 1)
}

fn pair_cross(psi: &[[f64; 3]], grid: &GridSpec, node: usize, a: usize, b: usize) -> f64 {
    0.5 * (first_diff(|n| psi[n][b], grid, node, a) + first_diff(|n| psi[n][a], grid, node, b))
}

/// `[phi_xy, phi_xz, phi_yz, phi_xyz]`, with the triple derivative averaged
/// over the three ways of differentiating the gradient:
/// `(D_yz psi^x + D_xz psi^y + D_xy psi^z) / 3`.
pub fn cross_derivs_3d(psi: &[[f64; 3]], grid: &GridSpec, node: usize) -> [f64; 4] {
    let xy = pair_cross(psi, grid, node, 0, 1);
    let xz = pair_cross(psi, grid, node, 0, 2);
    let yz = pair_cross(psi, grid, node, 1, 2);
    let xyz = (mixed_diff(|n| psi[n][0], grid, node, 1, 2)
        + mixed_diff(|n| psi[n][1], grid, node, 0, 2)
        + mixed_diff(|n| psi[n][2], grid, node, 0, 1))
        / 3.0;
    [xy, xz, yz, xyz]
}

/// Gradient of a sampled scalar field by second-order differences.
pub fn gradient_from_phi(phi: &[f64], grid: &GridSpec) -> Vec<[f64; 3]> {
    (0..grid.node_count())
        .map(|node| {
            let mut g = [0.0; 3];
            for (a, v) in g.iter_mut().enumerate().take(grid.dim()) {
                *v = first_diff(|n| phi[n], grid, node, a);
            }
            g
        })
        .collect()
}

/// Corner data of a cell taken from sampled `phi`/`psi` with cross
/// derivatives estimated from `psi`.
pub fn cell_patch(phi: &[f64], psi: &[[f64; 3]], grid: &GridSpec, cell: usize) -> CubicPatch {
    let corners: Vec<CornerJet> = grid
        .cell_corners(cell)
        .into_iter()
        .map(|node| {
            let cross = if grid.dim() == 2 {
                [cross_derivs_2d(psi, grid, node), 0.0, 0.0, 0.0]
            } else {
                cross_derivs_3d(psi, grid, node)
            };
            CornerJet {
                phi: phi[node],
                grad: psi[node],
                cross,
            }
        })
        .collect();
    fit(grid.dim(), &corners, grid.cell_origin(cell), grid.h())
}
