//! Uniform Cartesian grids, jet-field storage and the bookkeeping used by the
//! marching engines (node tags, the trial heap and the acceptance record).
//!
//! Nodes are addressed by a flat index with `x` varying fastest:
//! `flat = i + n * (j + n * k)`. Cells use the same layout over `n - 1`
//! cells per axis. The layout matches VTK structured points ordering.

use serde::{Deserialize, Serialize};

use crate::error::{AfmmError, Result};

/// Number of stored Hessian components for a given dimension.
pub const fn hess_len(dim: usize) -> usize {
    if dim == 2 {
        3
    } else {
        6
    }
}

/// Storage slot of `H[a][b]` in the packed Hessian.
///
/// 2D: `[xx, yy, xy]`; 3D: `[xx, yy, zz, xy, xz, yz]`.
pub fn hess_slot(dim: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    if a == b {
        return a;
    }
    match (dim, a, b) {
        (2, 0, 1) => 2,
        (3, 0, 1) => 3,
        (3, 0, 2) => 4,
        (3, 1, 2) => 5,
        _ => panic!("invalid Hessian index ({a},{b}) for dim {dim}"),
    }
}

/// The `(a, b)` pair stored in a packed Hessian slot.
pub fn hess_pair(dim: usize, slot: usize) -> (usize, usize) {
    match (dim, slot) {
        (_, s) if s < dim => (s, s),
        (2, 2) => (0, 1),
        (3, 3) => (0, 1),
        (3, 4) => (0, 2),
        (3, 5) => (1, 2),
        _ => panic!("invalid Hessian slot {slot} for dim {dim}"),
    }
}

/// A uniform grid with the same node count and spacing on every axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    dim: usize,
    lo: [f64; 3],
    n: usize,
    h: f64,
}

/// An axis-aligned neighbor of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbor {
    pub axis: usize,
    /// `+1` or `-1`: direction of the neighbor along `axis`.
    pub sign: i8,
    pub node: usize,
}

impl GridSpec {
    /// Grid over the cube `[lo, hi]^dim` with `n` nodes per axis.
    pub fn cube(dim: usize, lo: f64, hi: f64, n: usize) -> Result<Self> {
        let h = (hi - lo) / (n as f64 - 1.0);
        Self::new(dim, [lo; 3], n, h)
    }

    pub fn new(dim: usize, lo: [f64; 3], n: usize, h: f64) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(AfmmError::InvalidGrid(format!(
                "dimension must be 2 or 3, got {dim}"
            )));
        }
        if n < 4 {
            return Err(AfmmError::InvalidGrid(format!(
                "need at least 4 nodes per axis, got {n}"
            )));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(AfmmError::InvalidGrid(format!(
                "spacing must be positive, got {h}"
            )));
        }
        let mut lo = lo;
        if dim == 2 {
            lo[2] = 0.0;
        }
        Ok(Self { dim, lo, n, h })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Nodes per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn lo(&self) -> [f64; 3] {
        self.lo
    }

    pub fn node_count(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn cell_count(&self) -> usize {
        (self.n - 1).pow(self.dim as u32)
    }

    pub fn node_index(&self, ijk: [usize; 3]) -> usize {
        let n = self.n;
        if self.dim == 2 {
            ijk[0] + n * ijk[1]
        } else {
            ijk[0] + n * (ijk[1] + n * ijk[2])
        }
    }

    pub fn node_ijk(&self, node: usize) -> [usize; 3] {
        let n = self.n;
        if self.dim == 2 {
            [node % n, node / n, 0]
        } else {
            [node % n, (node / n) % n, node / (n * n)]
        }
    }

    pub fn cell_index(&self, ijk: [usize; 3]) -> usize {
        let m = self.n - 1;
        if self.dim == 2 {
            ijk[0] + m * ijk[1]
        } else {
            ijk[0] + m * (ijk[1] + m * ijk[2])
        }
    }

    pub fn cell_ijk(&self, cell: usize) -> [usize; 3] {
        let m = self.n - 1;
        if self.dim == 2 {
            [cell % m, cell / m, 0]
        } else {
            [cell % m, (cell / m) % m, cell / (m * m)]
        }
    }

    /// Physical coordinates of a node (unused axes are zero).
    pub fn position(&self, node: usize) -> [f64; 3] {
        let ijk = self.node_ijk(node);
        let mut p = [0.0; 3];
        for a in 0..self.dim {
            p[a] = self.lo[a] + ijk[a] as f64 * self.h;
        }
        p
    }

    /// Physical coordinates of a cell's lowest corner.
    pub fn cell_origin(&self, cell: usize) -> [f64; 3] {
        let ijk = self.cell_ijk(cell);
        let mut p = [0.0; 3];
        for a in 0..self.dim {
            p[a] = self.lo[a] + ijk[a] as f64 * self.h;
        }
        p
    }

    /// Axis-aligned neighbors that exist, ordered by axis then `-`, `+`.
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = Neighbor> + '_ {
        let ijk = self.node_ijk(node);
        let n = self.n;
        (0..self.dim).flat_map(move |axis| {
            let stride = n.pow(axis as u32);
            let lower = (ijk[axis] > 0).then(|| Neighbor {
                axis,
                sign: -1,
                node: node - stride,
            });
            let upper = (ijk[axis] + 1 < n).then(|| Neighbor {
                axis,
                sign: 1,
                node: node + stride,
            });
            lower.into_iter().chain(upper)
        })
    }

    /// Neighbor of `node` along `axis` in direction `sign`, if it exists.
    pub fn neighbor(&self, node: usize, axis: usize, sign: i8) -> Option<usize> {
        let ijk = self.node_ijk(node);
        let stride = self.n.pow(axis as u32);
        if sign < 0 {
            (ijk[axis] > 0).then(|| node - stride)
        } else {
            (ijk[axis] + 1 < self.n).then(|| node + stride)
        }
    }

    /// Corner nodes of a cell. Corner `c` sits at offset
    /// `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`, so in 2D the order is
    /// `(i,j), (i+1,j), (i,j+1), (i+1,j+1)`.
    pub fn cell_corners(&self, cell: usize) -> Vec<usize> {
        let ijk = self.cell_ijk(cell);
        (0..1usize << self.dim)
            .map(|c| {
                let mut corner = ijk;
                for (a, v) in corner.iter_mut().enumerate().take(self.dim) {
                    *v += (c >> a) & 1;
                }
                self.node_index(corner)
            })
            .collect()
    }

    /// Cells having `node` as a corner.
    pub fn node_cells(&self, node: usize) -> Vec<usize> {
        let ijk = self.node_ijk(node);
        let mut out = Vec::with_capacity(1 << self.dim);
        for c in 0..1usize << self.dim {
            let mut cell = [0usize; 3];
            let mut ok = true;
            for a in 0..self.dim {
                let shift = (c >> a) & 1;
                if shift == 1 {
                    if ijk[a] == 0 {
                        ok = false;
                        break;
                    }
                    cell[a] = ijk[a] - 1;
                } else {
                    if ijk[a] + 1 >= self.n {
                        ok = false;
                        break;
                    }
                    cell[a] = ijk[a];
                }
            }
            if ok {
                out.push(self.cell_index(cell));
            }
        }
        out
    }

    /// Samples a function at every node.
    pub fn sample<T>(&self, mut f: impl FnMut([f64; 3]) -> T) -> Vec<T> {
        (0..self.node_count())
            .map(|i| f(self.position(i)))
            .collect()
    }
}

/// Per-node value, gradient and Hessian.
///
/// Unused trailing components are zero: `psi[2]` in 2D and `hess[3..]` in 2D.
#[derive(Clone, Debug, PartialEq)]
pub struct JetField {
    pub grid: GridSpec,
    pub phi: Vec<f64>,
    pub psi: Vec<[f64; 3]>,
    pub hess: Vec<[f64; 6]>,
}

impl JetField {
    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.node_count();
        Self {
            grid,
            phi: vec![0.0; n],
            psi: vec![[0.0; 3]; n],
            hess: vec![[0.0; 6]; n],
        }
    }

    /// Full symmetric Hessian at a node.
    pub fn hessian_matrix(&self, node: usize) -> [[f64; 3]; 3] {
        let dim = self.grid.dim();
        let mut m = [[0.0; 3]; 3];
        for (a, row) in m.iter_mut().enumerate().take(dim) {
            for (b, v) in row.iter_mut().enumerate().take(dim) {
                *v = self.hess[node][hess_slot(dim, a, b)];
            }
        }
        m
    }

    pub fn jet(&self, node: usize) -> Jet {
        Jet {
            phi: self.phi[node],
            psi: self.psi[node],
            hess: self.hess[node],
        }
    }
}

/// Value, gradient and packed Hessian at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet {
    pub phi: f64,
    pub psi: [f64; 3],
    pub hess: [f64; 6],
}

/// Fast-marching set membership.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum NodeTag {
    Distant,
    Trial,
    Accepted,
}

/// Node tags with monotone transitions `Distant -> Trial -> Accepted`.
#[derive(Clone, Debug)]
pub struct NodeStates {
    tags: Vec<NodeTag>,
}

impl NodeStates {
    pub fn new(len: usize) -> Self {
        Self {
            tags: vec![NodeTag::Distant; len],
        }
    }

    pub fn tag(&self, node: usize) -> NodeTag {
        self.tags[node]
    }

    pub fn is_accepted(&self, node: usize) -> bool {
        self.tags[node] == NodeTag::Accepted
    }

    /// Moves a node forward. Panics on a backwards transition.
    pub fn advance(&mut self, node: usize, to: NodeTag) {
        let from = self.tags[node];
        assert!(
            from <= to,
            "illegal tag transition {from:?} -> {to:?} at node {node}"
        );
        self.tags[node] = to;
    }

    pub fn count(&self, tag: NodeTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }
}

/// Binary min-heap over nodes keyed by `|phi|`, with a per-node position
/// handle so a node's key can be changed in place.
///
/// Ties are broken by node index so the pop order is deterministic.
#[derive(Clone, Debug)]
pub struct TrialHeap {
    heap: Vec<usize>,
    keys: Vec<f64>,
    pos: Vec<usize>,
}

const ABSENT: usize = usize::MAX;

impl TrialHeap {
    pub fn new(len: usize) -> Self {
        Self {
            heap: Vec::new(),
            keys: vec![f64::INFINITY; len],
            pos: vec![ABSENT; len],
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn contains(&self, node: usize) -> bool {
        self.pos[node] != ABSENT
    }

    pub fn key(&self, node: usize) -> Option<f64> {
        self.contains(node).then(|| self.keys[node])
    }

    fn less(&self, a: usize, b: usize) -> bool {
        let (ka, kb) = (self.keys[a], self.keys[b]);
        ka < kb || (ka == kb && a < b)
    }

    /// Inserts a node or moves it to a new key (up or down).
    pub fn push_or_update(&mut self, node: usize, key: f64) {
        debug_assert!(!key.is_nan());
        if self.pos[node] == ABSENT {
            self.keys[node] = key;
            self.pos[node] = self.heap.len();
            self.heap.push(node);
            self.sift_up(self.heap.len() - 1);
        } else {
            let old = self.keys[node];
            self.keys[node] = key;
            let at = self.pos[node];
            if key < old {
                self.sift_up(at);
            } else {
                self.sift_down(at);
            }
        }
    }

    /// Removes and returns the node with the smallest key.
    pub fn pop(&mut self) -> Option<(usize, f64)> {
        let top = *self.heap.first()?;
        let last = self.heap.pop().expect("nonempty");
        if !self.heap.is_empty() {
            self.heap[0] = last;
            self.pos[last] = 0;
            self.sift_down(0);
        }
        self.pos[top] = ABSENT;
        Some((top, self.keys[top]))
    }

    fn swap(&mut self, i: usize, j: usize) {
        self.heap.swap(i, j);
        self.pos[self.heap[i]] = i;
        self.pos[self.heap[j]] = j;
    }

    fn sift_up(&mut self, mut i: usize) {
        while i > 0 {
            let parent = (i - 1) / 2;
            if self.less(self.heap[i], self.heap[parent]) {
                self.swap(i, parent);
                i = parent;
            } else {
                break;
            }
        }
    }

    fn sift_down(&mut self, mut i: usize) {
        let len = self.heap.len();
        loop {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            let mut best = i;
            if l < len && self.less(self.heap[l], self.heap[best]) {
                best = l;
            }
            if r < len && self.less(self.heap[r], self.heap[best]) {
                best = r;
            }
            if best == i {
                break;
            }
            self.swap(i, best);
            i = best;
        }
    }
}

/// Which neighbor supplies upwind data along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Upwind {
    pub sign: i8,
    pub node: usize,
}

/// Upwind topology of one node update: for each axis, the accepted neighbor
/// used (if any).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct UpdateCase {
    pub dim: usize,
    pub axes: [Option<Upwind>; 3],
}

impl UpdateCase {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            axes: [None; 3],
        }
    }

    pub fn available(&self, axis: usize) -> bool {
        self.axes[axis].is_some()
    }

    pub fn axis_count(&self) -> usize {
        self.axes[..self.dim].iter().filter(|a| a.is_some()).count()
    }

    pub fn used_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.axes[..self.dim].iter().flatten().map(|u| u.node)
    }

    /// The same case restricted to the axes in `mask` (bit `a` keeps axis `a`).
    pub fn restricted(&self, mask: u8) -> Self {
        let mut out = *self;
        for a in 0..self.dim {
            if mask & (1 << a) == 0 {
                out.axes[a] = None;
            }
        }
        out
    }

    /// Short label such as `"xy"` or `"z"`.
    pub fn label(&self) -> String {
        ["x", "y", "z"]
            .iter()
            .enumerate()
            .filter(|(a, _)| *a < self.dim && self.axes[*a].is_some())
            .map(|(_, s)| *s)
            .collect()
    }
}

/// One accepted (non-seed) node in marching order.
#[derive(Clone, Debug, PartialEq)]
pub struct MarchStep {
    pub node: usize,
    pub case: UpdateCase,
    /// 0 = full case, 1 = reduced case, 2 = baseline quadratic fallback.
    pub tier: u8,
    /// Heap key at the moment the node was popped.
    pub key: f64,
}

/// The acceptance sequence of a march: seeds first, then marched nodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MarchOrder {
    pub seeds: Vec<usize>,
    pub steps: Vec<MarchStep>,
}

impl MarchOrder {
    /// True if popped keys never decrease.
    pub fn is_causal(&self) -> bool {
        self.steps.windows(2).all(|w| w[0].key <= w[1].key)
    }

    /// True if seeds and marched nodes together cover every node exactly once.
    pub fn is_permutation_of(&self, node_count: usize) -> bool {
        let mut seen = vec![false; node_count];
        for &n in self.seeds.iter().chain(self.steps.iter().map(|s| &s.node)) {
            if n >= node_count || seen[n] {
                return false;
            }
            seen[n] = true;
        }
        seen.into_iter().all(|s| s)
    }
}
