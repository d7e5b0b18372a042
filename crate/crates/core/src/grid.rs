//! Uniform tensor grids, the finite-difference Laplacian with Neumann or
//! Dirichlet faces, trapezoidal inner products and the discrete Dirichlet
//! energy.
//!
//! Nodes are numbered with the first axis fastest: node `(i, j, k)` has
//! index `i + n*j + n*n*k`.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::GridError;
use crate::linalg::SparseOperator;

const PAR_NODES: usize = 8192;

pub type BoundaryFn = Arc<dyn Fn([f64; 3]) -> [f64; 3] + Send + Sync>;

/// Prescribed values on a Dirichlet face.
#[derive(Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BoundaryData {
    Constant { value: [f64; 3] },
    /// Unit vector pointing away from `center`.
    Radial { center: [f64; 3] },
    #[serde(skip)]
    Custom(BoundaryFn),
}

impl BoundaryData {
    pub fn eval(&self, x: [f64; 3]) -> [f64; 3] {
        match self {
            BoundaryData::Constant { value } => *value,
            BoundaryData::Radial { center } => {
                let d = [x[0] - center[0], x[1] - center[1], x[2] - center[2]];
                let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if len > 0.0 {
                    [d[0] / len, d[1] / len, d[2] / len]
                } else {
                    [0.0; 3]
                }
            }
            BoundaryData::Custom(f) => f(x),
        }
    }
}

impl fmt::Debug for BoundaryData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryData::Constant { value } => f.debug_struct("Constant").field("value", value).finish(),
            BoundaryData::Radial { center } => f.debug_struct("Radial").field("center", center).finish(),
            BoundaryData::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum FaceBc {
    Neumann,
    Dirichlet { data: BoundaryData },
}

impl FaceBc {
    pub fn is_dirichlet(&self) -> bool {
        matches!(self, FaceBc::Dirichlet { .. })
    }
}

/// Uniform grid on `lower + [0, (n-1) h]^dim`.
///
/// `faces` lists boundary conditions as `[axis0 low, axis0 high, axis1 low, ...]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    n: usize,
    h: f64,
    lower: [f64; 3],
    faces: Vec<FaceBc>,
}

impl Grid {
    pub fn new(dim: usize, n: usize, h: f64, lower: [f64; 3], faces: Vec<FaceBc>) -> Result<Self, GridError> {
        if !(1..=3).contains(&dim) {
            return Err(GridError::Dimension(dim));
        }
        if n < 3 {
            return Err(GridError::TooFewNodes(n));
        }
        if !(h > 0.0) || !h.is_finite() {
            return Err(GridError::Spacing(h));
        }
        if faces.len() != 2 * dim {
            return Err(GridError::Faces {
                expected: 2 * dim,
                found: faces.len(),
            });
        }
        Ok(Self { dim, n, h, lower, faces })
    }

    /// All-Neumann grid with `k` intervals per axis covering `[lower, lower + length]`.
    pub fn neumann(dim: usize, k: usize, lower: f64, length: f64) -> Result<Self, GridError> {
        let faces = vec![FaceBc::Neumann; 2 * dim.min(3)];
        Self::new(dim, k + 1, length / k as f64, [lower; 3], faces)
    }

    /// Same face condition on every face.
    pub fn uniform_bc(dim: usize, k: usize, lower: f64, length: f64, bc: FaceBc) -> Result<Self, GridError> {
        let faces = vec![bc; 2 * dim.min(3)];
        Self::new(dim, k + 1, length / k as f64, [lower; 3], faces)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn nodes_per_axis(&self) -> usize {
        self.n
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn lower(&self) -> [f64; 3] {
        self.lower
    }
    pub fn faces(&self) -> &[FaceBc] {
        &self.faces
    }
    pub fn n_nodes(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn has_dirichlet(&self) -> bool {
        self.faces.iter().any(FaceBc::is_dirichlet)
    }

    /// Per-axis indices of a node (unused axes are zero).
    pub fn multi_index(&self, node: usize) -> [usize; 3] {
        let mut idx = [0; 3];
        let mut rest = node;
        for slot in idx.iter_mut().take(self.dim) {
            *slot = rest % self.n;
            rest /= self.n;
        }
        idx
    }

    pub fn node_index(&self, idx: [usize; 3]) -> usize {
        (0..self.dim).rev().fold(0, |acc, a| acc * self.n + idx[a])
    }

    fn stride(&self, axis: usize) -> usize {
        self.n.pow(axis as u32)
    }

    pub fn coords(&self, node: usize) -> [f64; 3] {
        let idx = self.multi_index(node);
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = self.lower[a] + idx[a] as f64 * self.h;
        }
        x
    }

    /// The first Dirichlet face (in face order) containing the node.
    fn dirichlet_face(&self, node: usize) -> Option<&BoundaryData> {
        let idx = self.multi_index(node);
        for a in 0..self.dim {
            for (side, at) in [(0, 0), (1, self.n - 1)] {
                if idx[a] == at {
                    if let FaceBc::Dirichlet { data } = &self.faces[2 * a + side] {
                        return Some(data);
                    }
                }
            }
        }
        None
    }

    pub fn is_fixed(&self, node: usize) -> bool {
        self.dirichlet_face(node).is_some()
    }

    pub fn dirichlet_value(&self, node: usize) -> Option<[f64; 3]> {
        self.dirichlet_face(node).map(|d| d.eval(self.coords(node)))
    }

    /// Tensor-product trapezoidal weights (1 interior, 1/2 per boundary axis).
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        (0..self.n_nodes())
            .map(|node| {
                let idx = self.multi_index(node);
                (0..self.dim)
                    .map(|a| if idx[a] == 0 || idx[a] == self.n - 1 { 0.5 } else { 1.0 })
                    .product()
            })
            .collect()
    }

    fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }
}

/// `G_h / h^2`: the 1-D Neumann second-difference matrix with `(-2, 2)` end rows.
pub fn neumann_1d(n: usize, h: f64) -> Result<SparseOperator, GridError> {
    if n < 3 {
        return Err(GridError::TooFewNodes(n));
    }
    if !(h > 0.0) {
        return Err(GridError::Spacing(h));
    }
    let s = 1.0 / (h * h);
    let mut t = vec![(0, 0, -2.0 * s), (0, 1, 2.0 * s), (n - 1, n - 2, 2.0 * s), (n - 1, n - 1, -2.0 * s)];
    for i in 1..n - 1 {
        t.extend([(i, i - 1, s), (i, i, -2.0 * s), (i, i + 1, s)]);
    }
    Ok(SparseOperator::from_triplets(n, n, &t))
}

/// Discrete Laplacian over all grid nodes, stored as the integer stencil
/// `matrix` times the scalar `inv_h2`.
///
/// Rows of Dirichlet nodes hold a single explicit zero on the diagonal, and
/// Dirichlet columns are removed from the other rows; their contribution is
/// carried by `bc`, so the full stencil action is `inv_h2 * matrix * u + bc`.
#[derive(Debug, Clone)]
pub struct DiscreteLaplacian {
    /// Unscaled stencil with integer entries.
    pub matrix: SparseOperator,
    /// Boundary forcing, component-major (length `3N`); zero for Neumann grids.
    pub bc: Vec<f64>,
    pub fixed: Vec<bool>,
    pub inv_h2: f64,
}

impl DiscreteLaplacian {
    pub fn n_nodes(&self) -> usize {
        self.matrix.n_rows()
    }

    /// `L u` for one scalar component (no boundary forcing).
    ///
    /// Rows are evaluated as `Σ_j l_ij (u_j - u_i) + (Σ_j l_ij) u_i` so that
    /// constants are annihilated exactly, not just up to rounding.
    pub fn apply_scalar(&self, u: &[f64], out: &mut [f64]) {
        assert_eq!(u.len(), self.n_nodes());
        assert_eq!(out.len(), self.n_nodes());
        let row = |i: usize| {
            let (cols, vals) = self.matrix.row(i);
            let ui = u[i];
            let mut diff = 0.0;
            let mut sum = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                sum += v;
                if c != i {
                    diff += v * (u[c] - ui);
                }
            }
            self.inv_h2 * (diff + sum * ui)
        };
        if out.len() >= PAR_NODES {
            out.par_iter_mut().enumerate().for_each(|(i, o)| *o = row(i));
        } else {
            out.iter_mut().enumerate().for_each(|(i, o)| *o = row(i));
        }
    }

    /// `(i, i)` entry of the scaled operator.
    pub fn diagonal_entry(&self, i: usize) -> f64 {
        self.matrix.get(i, i) * self.inv_h2
    }

    /// The scaled operator as an explicit matrix.
    pub fn scaled_matrix(&self) -> SparseOperator {
        let mut m = self.matrix.clone();
        m.scale(self.inv_h2);
        m
    }

    /// `D_h^(3) u`, blockwise over the three components, without forcing.
    pub fn apply3_homogeneous(&self, u: &[f64], out: &mut [f64]) {
        let n = self.n_nodes();
        for c in 0..3 {
            self.apply_scalar(&u[c * n..(c + 1) * n], &mut out[c * n..(c + 1) * n]);
        }
    }

    /// Full stencil action `D_h^(3) u + bc`.
    pub fn apply3(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        self.apply3_homogeneous(u, &mut out);
        out.iter_mut().zip(&self.bc).for_each(|(o, b)| *o += b);
        out
    }
}

pub fn laplacian(grid: &Grid) -> DiscreteLaplacian {
    let n_nodes = grid.n_nodes();
    let n = grid.nodes_per_axis();
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    let fixed: Vec<bool> = (0..n_nodes).map(|i| grid.is_fixed(i)).collect();
    let values: Vec<Option<[f64; 3]>> = (0..n_nodes)
        .map(|i| if fixed[i] { grid.dirichlet_value(i) } else { None })
        .collect();
    let mut triplets = Vec::with_capacity(n_nodes * (2 * grid.dim() + 1));
    let mut bc = vec![0.0; 3 * n_nodes];
    for node in 0..n_nodes {
        if fixed[node] {
            triplets.push((node, node, 0.0));
            continue;
        }
        let idx = grid.multi_index(node);
        let mut diag = 0.0;
        let mut push = |nb: usize, w: f64, triplets: &mut Vec<(usize, usize, f64)>| {
            if let Some(g) = values[nb] {
                for c in 0..3 {
                    bc[c * n_nodes + node] += w * inv_h2 * g[c];
                }
            } else {
                triplets.push((node, nb, w));
            }
        };
        for a in 0..grid.dim() {
            let st = grid.stride(a);
            diag -= 2.0;
            if idx[a] == 0 {
                push(node + st, 2.0, &mut triplets);
            } else if idx[a] == n - 1 {
                push(node - st, 2.0, &mut triplets);
            } else {
                push(node - st, 1.0, &mut triplets);
                push(node + st, 1.0, &mut triplets);
            }
        }
        triplets.push((node, node, diag));
    }
    DiscreteLaplacian {
        matrix: SparseOperator::from_triplets(n_nodes, n_nodes, &triplets),
        bc,
        fixed,
        inv_h2,
    }
}

/// Trapezoidal inner product of two scalar node vectors, scaled by `h^dim`.
pub fn inner_product(u: &[f64], v: &[f64], grid: &Grid) -> Result<f64, GridError> {
    let n = grid.n_nodes();
    for len in [u.len(), v.len()] {
        if len != n {
            return Err(GridError::Length { expected: n, found: len });
        }
    }
    let w = grid.trapezoid_weights();
    Ok(grid.cell_volume() * w.iter().zip(u.iter().zip(v)).map(|(w, (a, b))| w * a * b).sum::<f64>())
}

/// Trapezoidal inner product of two component-major 3-vector fields.
pub fn inner_product3(u: &[f64], v: &[f64], grid: &Grid) -> Result<f64, GridError> {
    let n = grid.n_nodes();
    for len in [u.len(), v.len()] {
        if len != 3 * n {
            return Err(GridError::Length { expected: 3 * n, found: len });
        }
    }
    let w = grid.trapezoid_weights();
    let mut acc = 0.0;
    for c in 0..3 {
        let (uc, vc) = (&u[c * n..(c + 1) * n], &v[c * n..(c + 1) * n]);
        acc += w.iter().zip(uc.iter().zip(vc)).map(|(w, (a, b))| w * a * b).sum::<f64>();
    }
    Ok(grid.cell_volume() * acc)
}

/// Discrete L² norm of the difference of two component-major fields.
pub fn l2_distance(u: &[f64], v: &[f64], grid: &Grid) -> Result<f64, GridError> {
    let d: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
    Ok(inner_product3(&d, &d, grid)?.max(0.0).sqrt())
}

/// `E_h = h^(dim-2) * sum over grid edges and components of w_e (u_a - u_b)^2`,
/// where `w_e` is the product of the trapezoid weights of the edge's position
/// along the other axes (1/2 per boundary face the edge lies in).
///
/// On a Neumann grid this equals `(u, -D_h^(3) u)_h`.
pub fn discrete_energy(u: &[f64], grid: &Grid) -> Result<f64, GridError> {
    let n_nodes = grid.n_nodes();
    if u.len() != 3 * n_nodes {
        return Err(GridError::Length {
            expected: 3 * n_nodes,
            found: u.len(),
        });
    }
    let n = grid.nodes_per_axis();
    let end = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
    let mut acc = 0.0;
    for node in 0..n_nodes {
        let idx = grid.multi_index(node);
        for a in 0..grid.dim() {
            if idx[a] + 1 == n {
                continue;
            }
            let w: f64 = (0..grid.dim()).filter(|&b| b != a).map(|b| end(idx[b])).product();
            let st = grid.stride(a);
            for c in 0..3 {
                let d = u[c * n_nodes + node + st] - u[c * n_nodes + node];
                acc += w * d * d;
            }
        }
    }
    Ok(grid.h().powi(grid.dim() as i32 - 2) * acc)
}
