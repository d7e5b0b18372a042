//! Three-component vector fields over grid nodes and the pointwise
//! projector `P(m) v = α (v - (m̂·v) m̂) + β m̂ × v`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::FieldError;
use crate::grid::Grid;

/// Lengths below this are treated as zero.
pub const ZERO_LENGTH: f64 = 1e-300;

/// Component-major storage: `[m1 (N values), m2, m3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    data: Vec<f64>,
    n: usize,
    on_sphere: bool,
}

impl VectorField {
    pub fn zeros(n: usize) -> Self {
        Self {
            data: vec![0.0; 3 * n],
            n,
            on_sphere: false,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self, FieldError> {
        if data.len() % 3 != 0 {
            return Err(FieldError::Length {
                expected: 3 * (data.len() / 3 + 1),
                found: data.len(),
            });
        }
        let n = data.len() / 3;
        Ok(Self {
            data,
            n,
            on_sphere: false,
        })
    }

    pub fn constant(n: usize, v: [f64; 3]) -> Self {
        let mut f = Self::zeros(n);
        for i in 0..n {
            f.set_node(i, v);
        }
        f
    }

    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let n = grid.n_nodes();
        let mut out = Self::zeros(n);
        for i in 0..n {
            out.set_node(i, f(grid.coords(i)));
        }
        out
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }
    pub fn is_on_sphere(&self) -> bool {
        self.on_sphere
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    /// Mutable access drops the on-sphere flag.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.on_sphere = false;
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn component(&self, c: usize) -> &[f64] {
        &self.data[c * self.n..(c + 1) * self.n]
    }

    #[inline]
    pub fn node(&self, i: usize) -> [f64; 3] {
        [self.data[i], self.data[self.n + i], self.data[2 * self.n + i]]
    }

    #[inline]
    pub fn set_node(&mut self, i: usize, v: [f64; 3]) {
        self.on_sphere = false;
        self.data[i] = v[0];
        self.data[self.n + i] = v[1];
        self.data[2 * self.n + i] = v[2];
    }

    fn check_same(&self, other: &VectorField) -> Result<(), FieldError> {
        if self.n != other.n {
            return Err(FieldError::Length {
                expected: self.n,
                found: other.n,
            });
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[inline]
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Pointwise normalization onto the unit sphere.
pub fn normalize(m: &VectorField) -> Result<VectorField, FieldError> {
    if m.n == 0 {
        return Err(FieldError::Empty);
    }
    let mut out = VectorField::zeros(m.n);
    for i in 0..m.n {
        let v = m.node(i);
        let len = norm3(v);
        if !(len >= ZERO_LENGTH) {
            return Err(FieldError::ZeroLength { node: i });
        }
        out.set_node(i, [v[0] / len, v[1] / len, v[2] / len]);
    }
    out.on_sphere = true;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub alpha: f64,
    pub beta: f64,
}

impl ProjectionParams {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta }
    }
    pub fn is_valid(&self) -> bool {
        self.alpha > 0.0 && self.beta.is_finite() && self.alpha.is_finite()
    }
}

/// Per-node 3×3 blocks acting on component-major fields.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeBlocks {
    blocks: Vec<[[f64; 3]; 3]>,
}

impl NodeBlocks {
    pub fn zeros(n: usize) -> Self {
        Self {
            blocks: vec![[[0.0; 3]; 3]; n],
        }
    }
    pub fn n_nodes(&self) -> usize {
        self.blocks.len()
    }
    pub fn block(&self, i: usize) -> &[[f64; 3]; 3] {
        &self.blocks[i]
    }

    /// `self += w * other`.
    pub fn add_scaled(&mut self, w: f64, other: &NodeBlocks) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for l in 0..3 {
                for m in 0..3 {
                    a[l][m] += w * b[l][m];
                }
            }
        }
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.blocks.len();
        for (i, b) in self.blocks.iter().enumerate() {
            let x = [v[i], v[n + i], v[2 * n + i]];
            for l in 0..3 {
                out[l * n + i] = b[l][0] * x[0] + b[l][1] * x[1] + b[l][2] * x[2];
            }
        }
    }
}

/// `P(m)` frozen at a direction field, with the unit directions precomputed.
#[derive(Debug, Clone)]
pub struct Projector {
    dirs: Vec<[f64; 3]>,
    params: ProjectionParams,
}

impl Projector {
    pub fn new(mdir: &VectorField, params: ProjectionParams) -> Result<Self, FieldError> {
        if mdir.n == 0 {
            return Err(FieldError::Empty);
        }
        let dirs = (0..mdir.n)
            .map(|i| {
                let v = mdir.node(i);
                let len = norm3(v);
                if len >= ZERO_LENGTH {
                    Ok([v[0] / len, v[1] / len, v[2] / len])
                } else {
                    Err(FieldError::ZeroLength { node: i })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { dirs, params })
    }

    pub fn n_nodes(&self) -> usize {
        self.dirs.len()
    }
    pub fn direction(&self, i: usize) -> [f64; 3] {
        self.dirs[i]
    }
    pub fn params(&self) -> ProjectionParams {
        self.params
    }

    #[inline]
    pub fn apply_node(&self, i: usize, v: [f64; 3]) -> [f64; 3] {
        let m = self.dirs[i];
        let (a, b) = (self.params.alpha, self.params.beta);
        let mv = m[0] * v[0] + m[1] * v[1] + m[2] * v[2];
        let c = cross(m, v);
        [
            a * (v[0] - mv * m[0]) + b * c[0],
            a * (v[1] - mv * m[1]) + b * c[1],
            a * (v[2] - mv * m[2]) + b * c[2],
        ]
    }

    /// `out = P v` on component-major slices.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.dirs.len();
        assert_eq!(v.len(), 3 * n);
        assert_eq!(out.len(), 3 * n);
        let (o1, rest) = out.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        o1.par_iter_mut()
            .zip(o2.par_iter_mut())
            .zip(o3.par_iter_mut())
            .enumerate()
            .with_min_len(4096)
            .for_each(|(i, ((a, b), c))| {
                let r = self.apply_node(i, [v[i], v[n + i], v[2 * n + i]]);
                *a = r[0];
                *b = r[1];
                *c = r[2];
            });
    }

    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.apply(v, &mut out);
        out
    }

    /// `α (I - m̂ m̂ᵀ) + β [m̂]×` at a node.
    pub fn block(&self, i: usize) -> [[f64; 3]; 3] {
        let m = self.dirs[i];
        let (a, b) = (self.params.alpha, self.params.beta);
        let mut p = [[0.0; 3]; 3];
        for l in 0..3 {
            for k in 0..3 {
                p[l][k] = a * ((l == k) as u8 as f64 - m[l] * m[k]);
            }
        }
        p[0][1] -= b * m[2];
        p[0][2] += b * m[1];
        p[1][0] += b * m[2];
        p[1][2] -= b * m[0];
        p[2][0] -= b * m[1];
        p[2][1] += b * m[0];
        p
    }

    pub fn blocks(&self) -> NodeBlocks {
        NodeBlocks {
            blocks: (0..self.dirs.len()).map(|i| self.block(i)).collect(),
        }
    }
}

/// `P(Mdir) V` per node.
pub fn apply_p(mdir: &VectorField, v: &VectorField, params: ProjectionParams) -> Result<VectorField, FieldError> {
    mdir.check_same(v)?;
    let p = Projector::new(mdir, params)?;
    let mut out = VectorField::zeros(v.n);
    p.apply(&v.data, &mut out.data);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub min_length: f64,
    pub max_length: f64,
    pub max_unit_deviation: f64,
}

pub fn diagnostics(m: &VectorField) -> Result<Diagnostics, FieldError> {
    if m.n == 0 {
        return Err(FieldError::Empty);
    }
    let mut d = Diagnostics {
        min_length: f64::INFINITY,
        max_length: 0.0,
        max_unit_deviation: 0.0,
    };
    for i in 0..m.n {
        let len = norm3(m.node(i));
        d.min_length = d.min_length.min(len);
        d.max_length = d.max_length.max(len);
        d.max_unit_deviation = d.max_unit_deviation.max((len - 1.0).abs());
    }
    Ok(d)
}
