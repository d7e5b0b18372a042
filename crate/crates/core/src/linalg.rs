//! Compressed-row sparse matrices and the linear solvers used by the stage
//! systems `I - tau a_ii d_ii P(U) D_h`.
//!
//! Stage matrices are nonsymmetric (the tangential projector and the
//! precession term both break symmetry), so the Krylov methods offered are
//! BiCGStab and restarted GMRES. A banded LU with partial pivoting covers
//! small systems where a direct answer is wanted.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FieldError, SolverError};
use crate::field::{NodeBlocks, ProjectionParams, Projector, VectorField};
use crate::grid::DiscreteLaplacian;

/// Row count above which matvecs are split across threads.
const PAR_ROWS: usize = 8192;

/// Square or rectangular matrix in compressed-row form with sorted columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    n_rows: usize,
    n_cols: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Anything that can act on a vector; lets solvers run matrix-free.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    /// `y = A x`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
    fn diagonal(&self) -> Vec<f64>;
    /// Assembled form, if one exists without extra work.
    fn as_sparse(&self) -> Option<&SparseOperator> {
        None
    }
}

impl SparseOperator {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut offsets = vec![0usize; n_rows + 1];
        let mut cols = Vec::with_capacity(sorted.len());
        let mut vals: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < n_rows && c < n_cols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                offsets[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n_rows {
            offsets[i + 1] += offsets[i];
        }
        Self {
            n_rows,
            n_cols,
            offsets,
            cols,
            vals,
        }
    }

    /// Wraps raw CSR arrays after checking the storage invariants.
    pub fn from_csr(
        n_rows: usize,
        n_cols: usize,
        offsets: Vec<usize>,
        cols: Vec<usize>,
        vals: Vec<f64>,
    ) -> Result<Self, SolverError> {
        let bad = |msg: &str| Err(SolverError::Config(msg.to_string()));
        if offsets.len() != n_rows + 1 || offsets[0] != 0 || *offsets.last().unwrap() != cols.len() {
            return bad("row offsets do not match the column array");
        }
        if cols.len() != vals.len() {
            return bad("column and value arrays differ in length");
        }
        for i in 0..n_rows {
            if offsets[i] > offsets[i + 1] {
                return bad("row offsets are not monotone");
            }
            let row = &cols[offsets[i]..offsets[i + 1]];
            if row.windows(2).any(|w| w[0] >= w[1]) || row.iter().any(|&c| c >= n_cols) {
                return bad("column indices must be strictly increasing and in range");
            }
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return bad("values must be finite");
        }
        Ok(Self {
            n_rows,
            n_cols,
            offsets,
            cols,
            vals,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            offsets: (0..=n).collect(),
            cols: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
    pub fn col_indices(&self) -> &[usize] {
        &self.cols
    }
    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn scale(&mut self, factor: f64) {
        self.vals.iter_mut().for_each(|v| *v *= factor);
    }

    #[inline]
    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (cols, vals) = self.row(i);
        cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
    }

    /// `y = A x`; each row is accumulated left to right regardless of threading.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols);
        assert_eq!(y.len(), self.n_rows);
        if self.n_rows >= PAR_ROWS {
            y.par_iter_mut().enumerate().for_each(|(i, yi)| *yi = self.row_dot(i, x));
        } else {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = self.row_dot(i, x);
            }
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.matvec(x, &mut y);
        y
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                m[(i, c)] = v;
            }
        }
        m
    }

    /// `(lower, upper)` bandwidths.
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut lower = 0;
        let mut upper = 0;
        for i in 0..self.n_rows {
            let (cols, _) = self.row(i);
            if let (Some(&first), Some(&last)) = (cols.first(), cols.last()) {
                lower = lower.max(i.saturating_sub(first));
                upper = upper.max(last.saturating_sub(i));
            }
        }
        (lower, upper)
    }
}

impl LinearOperator for SparseOperator {
    fn dim(&self) -> usize {
        self.n_rows
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matvec(x, y)
    }
    fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.get(i, i)).collect()
    }
    fn as_sparse(&self) -> Option<&SparseOperator> {
        Some(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SolverMethod {
    BiCgStab,
    Gmres { restart: usize },
    BandedDirect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// `None` means `10 * sqrt(n)` for an `n`-unknown system.
    #[serde(default)]
    pub max_iters: Option<usize>,
    /// Jacobi (diagonal) right preconditioning for the Krylov methods.
    #[serde(default)]
    pub jacobi: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::BiCgStab,
            rel_tol: 1e-11,
            abs_tol: 1e-14,
            max_iters: None,
            jacobi: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.rel_tol > 0.0) || !(self.abs_tol > 0.0) {
            return Err(SolverError::Config("tolerances must be positive".into()));
        }
        if self.max_iters == Some(0) {
            return Err(SolverError::Config("max_iters must be at least 1".into()));
        }
        if let SolverMethod::Gmres { restart } = self.method {
            if restart == 0 {
                return Err(SolverError::Config("GMRES restart must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn iteration_limit(&self, n: usize) -> usize {
        self.max_iters
            .unwrap_or_else(|| ((10.0 * (n as f64).sqrt()).ceil() as usize).max(10))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Achieved `||A x - b||_2`.
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn residual_into(a: &dyn LinearOperator, x: &[f64], rhs: &[f64], r: &mut [f64]) -> f64 {
    a.apply(x, r);
    for (ri, bi) in r.iter_mut().zip(rhs) {
        *ri = bi - *ri;
    }
    norm(r)
}

/// Solves `A x = rhs` from a zero initial guess.
pub fn solve(a: &dyn LinearOperator, rhs: &[f64], cfg: &SolverConfig) -> Result<(Vec<f64>, SolveStats), SolverError> {
    solve_with_guess(a, rhs, None, cfg)
}

/// Solves `A x = rhs`; on success `||A x - rhs||_2 <= max(rel_tol ||rhs||_2, abs_tol)`.
pub fn solve_with_guess(
    a: &dyn LinearOperator,
    rhs: &[f64],
    guess: Option<&[f64]>,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats), SolverError> {
    cfg.validate()?;
    let n = a.dim();
    if rhs.len() != n {
        return Err(SolverError::Shape {
            rows: n,
            cols: n,
            expected: rhs.len(),
        });
    }
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFinite);
    }
    let target = (cfg.rel_tol * norm(rhs)).max(cfg.abs_tol);
    let x0 = match guess {
        Some(g) if g.len() == n && g.iter().all(|v| v.is_finite()) => g.to_vec(),
        _ => vec![0.0; n],
    };
    match cfg.method {
        SolverMethod::BiCgStab => bicgstab(a, rhs, x0, target, cfg),
        SolverMethod::Gmres { restart } => gmres(a, rhs, x0, target, restart, cfg),
        SolverMethod::BandedDirect => {
            let owned;
            let sparse = match a.as_sparse() {
                Some(s) => s,
                None => {
                    owned = materialize(a);
                    &owned
                }
            };
            let x = banded_lu_solve(sparse, rhs)?;
            let mut r = vec![0.0; n];
            let residual = residual_into(a, &x, rhs, &mut r);
            Ok((x, SolveStats { iterations: 1, residual }))
        }
    }
}

/// Assembles a matrix-free operator column by column. Only for small systems.
fn materialize(a: &dyn LinearOperator) -> SparseOperator {
    let n = a.dim();
    let mut triplets = Vec::new();
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        a.apply(&e, &mut col);
        e[j] = 0.0;
        triplets.extend(col.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, &v)| (i, j, v)));
    }
    SparseOperator::from_triplets(n, n, &triplets)
}

fn inverse_diagonal(a: &dyn LinearOperator, enabled: bool) -> Option<Vec<f64>> {
    enabled.then(|| {
        a.diagonal()
            .into_iter()
            .map(|d| if d != 0.0 { 1.0 / d } else { 1.0 })
            .collect()
    })
}

fn precondition(minv: &Option<Vec<f64>>, v: &[f64], out: &mut [f64]) {
    match minv {
        Some(m) => out.iter_mut().zip(v.iter().zip(m)).for_each(|(o, (x, d))| *o = x * d),
        None => out.copy_from_slice(v),
    }
}

/// Right-preconditioned BiCGStab. The recurrence is restarted from the true
/// residual when it stagnates or breaks down after making progress; a
/// breakdown straight after a restart is reported as such.
fn bicgstab(
    a: &dyn LinearOperator,
    rhs: &[f64],
    mut x: Vec<f64>,
    target: f64,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats), SolverError> {
    let n = a.dim();
    let max_iters = cfg.iteration_limit(n);
    let minv = inverse_diagonal(a, cfg.jacobi);
    let mut r = vec![0.0; n];
    let mut res = residual_into(a, &x, rhs, &mut r);
    if res <= target {
        return Ok((x, SolveStats { iterations: 0, residual: res }));
    }
    let mut best = (res, x.clone());
    let mut iterations = 0;
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut shat = vec![0.0; n];
    let tiny = f64::MIN_POSITIVE.sqrt();

    'restart: while iterations < max_iters {
        let r_hat = r.clone();
        let (mut rho, mut alpha, mut omega) = (1.0f64, 1.0f64, 1.0f64);
        p.iter_mut().for_each(|x| *x = 0.0);
        v.iter_mut().for_each(|x| *x = 0.0);
        let start = iterations;
        while iterations < max_iters {
            iterations += 1;
            let rho_new = dot(&r_hat, &r);
            if rho_new.abs() <= tiny * norm(&r_hat) * norm(&r) || !rho_new.is_finite() {
                if iterations - 1 > start {
                    res = residual_into(a, &x, rhs, &mut r);
                    continue 'restart;
                }
                return Err(SolverError::Breakdown { iteration: iterations });
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
            precondition(&minv, &p, &mut phat);
            a.apply(&phat, &mut v);
            let rv = dot(&r_hat, &v);
            if rv.abs() <= tiny || !rv.is_finite() {
                if iterations - 1 > start {
                    res = residual_into(a, &x, rhs, &mut r);
                    continue 'restart;
                }
                return Err(SolverError::Breakdown { iteration: iterations });
            }
            alpha = rho / rv;
            for i in 0..n {
                s[i] = r[i] - alpha * v[i];
            }
            if norm(&s) <= target {
                for i in 0..n {
                    x[i] += alpha * phat[i];
                }
                res = residual_into(a, &x, rhs, &mut r);
                if res <= target {
                    return Ok((x, SolveStats { iterations, residual: res }));
                }
                continue 'restart;
            }
            precondition(&minv, &s, &mut shat);
            a.apply(&shat, &mut t);
            let tt = dot(&t, &t);
            omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
            for i in 0..n {
                x[i] += alpha * phat[i] + omega * shat[i];
                r[i] = s[i] - omega * t[i];
            }
            let rec = norm(&r);
            if !rec.is_finite() {
                return Err(SolverError::Breakdown { iteration: iterations });
            }
            if rec <= target {
                // the recurrence residual drifts from the true one; confirm
                res = residual_into(a, &x, rhs, &mut r);
                if res < best.0 {
                    best = (res, x.clone());
                }
                if res <= target {
                    return Ok((x, SolveStats { iterations, residual: res }));
                }
                continue 'restart;
            }
            if rec < best.0 {
                best = (rec, x.clone());
            }
            if omega == 0.0 {
                res = residual_into(a, &x, rhs, &mut r);
                continue 'restart;
            }
        }
    }
    let mut r = vec![0.0; n];
    let true_best = residual_into(a, &best.1, rhs, &mut r);
    let final_res = residual_into(a, &x, rhs, &mut r).min(res);
    let (residual, best) = if true_best <= final_res { (true_best, best.1) } else { (final_res, x) };
    Err(SolverError::NotConverged {
        iterations,
        residual,
        best,
    })
}

/// Restarted GMRES(m) with modified Gram–Schmidt and Givens rotations.
fn gmres(
    a: &dyn LinearOperator,
    rhs: &[f64],
    mut x: Vec<f64>,
    target: f64,
    restart: usize,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats), SolverError> {
    let n = a.dim();
    let m = restart.min(n).max(1);
    let max_iters = cfg.iteration_limit(n);
    let minv = inverse_diagonal(a, cfg.jacobi);
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut iterations = 0;
    let mut res = residual_into(a, &x, rhs, &mut r);
    while res > target && iterations < max_iters {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        basis.push(r.iter().map(|v| v / res).collect());
        // Hessenberg columns, rotated in place
        let mut h = vec![vec![0.0; m + 1]; m];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = res;
        let mut k = 0;
        while k < m && iterations < max_iters {
            iterations += 1;
            precondition(&minv, &basis[k], &mut z);
            a.apply(&z, &mut w);
            for (i, q) in basis.iter().enumerate() {
                let hik = dot(&w, q);
                h[k][i] = hik;
                w.iter_mut().zip(q).for_each(|(wi, qi)| *wi -= hik * qi);
            }
            let hnext = norm(&w);
            h[k][k + 1] = hnext;
            for i in 0..k {
                let (a0, a1) = (h[k][i], h[k][i + 1]);
                h[k][i] = cs[i] * a0 + sn[i] * a1;
                h[k][i + 1] = -sn[i] * a0 + cs[i] * a1;
            }
            let denom = h[k][k].hypot(h[k][k + 1]);
            if denom == 0.0 || !denom.is_finite() {
                return Err(SolverError::Breakdown { iteration: iterations });
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k][k + 1] / denom;
            h[k][k] = denom;
            h[k][k + 1] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k += 1;
            if g[k].abs() <= target || hnext == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / hnext).collect());
        }
        // back substitution for the k x k triangular system
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let mut acc = g[i];
            for j in (i + 1)..k {
                acc -= h[j][i] * y[j];
            }
            y[i] = acc / h[i][i];
        }
        let mut update = vec![0.0; n];
        for (j, yj) in y.iter().enumerate() {
            update.iter_mut().zip(&basis[j]).for_each(|(u, q)| *u += yj * q);
        }
        precondition(&minv, &update, &mut z);
        x.iter_mut().zip(&z).for_each(|(xi, zi)| *xi += zi);
        res = residual_into(a, &x, rhs, &mut r);
    }
    if res <= target {
        Ok((x, SolveStats { iterations, residual: res }))
    } else {
        Err(SolverError::NotConverged {
            iterations,
            residual: res,
            best: x,
        })
    }
}

/// Band LU with partial pivoting. Row `i` stores columns
/// `i - kl ..= i + ku + kl`, leaving room for pivoting fill-in.
fn banded_lu_solve(a: &SparseOperator, rhs: &[f64]) -> Result<Vec<f64>, SolverError> {
    let n = a.n_rows();
    if a.n_cols() != n {
        return Err(SolverError::Shape {
            rows: n,
            cols: a.n_cols(),
            expected: n,
        });
    }
    let (kl, ku) = a.bandwidths();
    let width = 2 * kl + ku + 1;
    let mut band = vec![0.0; n * width];
    let idx = |row: usize, col: usize| row * width + (col + kl - row);
    for i in 0..n {
        let (cols, vals) = a.row(i);
        for (&c, &v) in cols.iter().zip(vals) {
            band[idx(i, c)] = v;
        }
    }
    let mut b = rhs.to_vec();
    let scale = band.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for k in 0..n {
        let last_row = (k + kl).min(n - 1);
        let last_col = (k + ku + kl).min(n - 1);
        let mut piv = k;
        let mut best = band[idx(k, k)].abs();
        for i in (k + 1)..=last_row {
            let v = band[idx(i, k)].abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best <= 1e-14 * scale {
            return Err(SolverError::SingularPivot { row: k });
        }
        if piv != k {
            for c in k..=last_col {
                band.swap(idx(k, c), idx(piv, c));
            }
            b.swap(k, piv);
        }
        let pivot = band[idx(k, k)];
        for i in (k + 1)..=last_row {
            let f = band[idx(i, k)] / pivot;
            if f == 0.0 {
                continue;
            }
            band[idx(i, k)] = 0.0;
            for c in (k + 1)..=last_col {
                band[idx(i, c)] -= f * band[idx(k, c)];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let last_col = (i + ku + kl).min(n - 1);
        let mut acc = b[i];
        for c in (i + 1)..=last_col {
            acc -= band[idx(i, c)] * x[c];
        }
        x[i] = acc / band[idx(i, i)];
    }
    Ok(x)
}

/// `I - coeff * B * D_h^(3)` applied without assembly, where `B` holds a
/// 3×3 block per node.
pub struct StageOperator<'a> {
    lap: &'a DiscreteLaplacian,
    blocks: &'a NodeBlocks,
    coeff: f64,
}

impl<'a> StageOperator<'a> {
    pub fn new(lap: &'a DiscreteLaplacian, blocks: &'a NodeBlocks, coeff: f64) -> Self {
        assert_eq!(lap.n_nodes(), blocks.n_nodes());
        Self { lap, blocks, coeff }
    }

    pub fn assemble(&self) -> SparseOperator {
        assemble_block_operator(self.lap, self.blocks, self.coeff)
    }
}

impl LinearOperator for StageOperator<'_> {
    fn dim(&self) -> usize {
        3 * self.lap.n_nodes()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.lap.n_nodes();
        let mut lx = vec![0.0; 3 * n];
        self.lap.apply3_homogeneous(x, &mut lx);
        self.blocks.apply(&lx, y);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi = xi - self.coeff * *yi;
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let n = self.lap.n_nodes();
        let mut d = vec![0.0; 3 * n];
        for i in 0..n {
            let lii = self.lap.diagonal_entry(i);
            let b = self.blocks.block(i);
            for l in 0..3 {
                d[l * n + i] = 1.0 - self.coeff * b[l][l] * lii;
            }
        }
        d
    }
}

/// Assembles `I - coeff * B * D_h^(3)` over all `3N` unknowns.
///
/// Row `(l, i)` couples to `(m, j)` for every component `m` and every
/// stencil neighbour `j` of node `i`; structural zeros are kept so the
/// pattern depends only on the grid.
pub fn assemble_block_operator(lap: &DiscreteLaplacian, blocks: &NodeBlocks, coeff: f64) -> SparseOperator {
    let n = lap.n_nodes();
    assert_eq!(blocks.n_nodes(), n);
    let l = &lap.matrix;
    let scale = coeff * lap.inv_h2;
    let nnz_row: Vec<usize> = (0..n).map(|i| 3 * l.row(i).0.len()).collect();
    let mut offsets = Vec::with_capacity(3 * n + 1);
    offsets.push(0);
    for _ in 0..3 {
        for &k in &nnz_row {
            offsets.push(offsets.last().unwrap() + k);
        }
    }
    let total = *offsets.last().unwrap();
    let mut cols = Vec::with_capacity(total);
    let mut vals = Vec::with_capacity(total);
    for comp in 0..3 {
        for i in 0..n {
            let (lc, lv) = l.row(i);
            let b = blocks.block(i);
            for m in 0..3 {
                for (&j, &v) in lc.iter().zip(lv) {
                    let delta = if comp == m && j == i { 1.0 } else { 0.0 };
                    cols.push(m * n + j);
                    vals.push(delta - scale * b[comp][m] * v);
                }
            }
        }
    }
    SparseOperator {
        n_rows: 3 * n,
        n_cols: 3 * n,
        offsets,
        cols,
        vals,
    }
}

/// Stage matrix `I - coeff * P(Mdir) * D_h^(3)`.
pub fn assemble_stage_operator(
    lap: &DiscreteLaplacian,
    mdir: &VectorField,
    coeff: f64,
    params: ProjectionParams,
) -> Result<SparseOperator, FieldError> {
    let blocks = Projector::new(mdir, params)?.blocks();
    Ok(assemble_block_operator(lap, &blocks, coeff))
}
