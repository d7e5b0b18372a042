//! Time steppers for `m_t = P(m) Δm` with `|m| = 1`.
//!
//! * `Prk`: the product-type IMEX-RK scheme. Every stage solves one linear
//!   system `(I - τ a_ii d_ii P(U^{i-1}) D_h) U^i = ...`, then the update is
//!   projected onto the sphere.
//! * `PrkAlt`: the variant where the averaged projector `Σ_k g_jk P(U^{k-1})`
//!   multiplies the un-averaged Laplacian, with `Â = A D`, `G = D⁻¹`.
//! * `Sip1`: first-order semi-implicit projection.
//! * `Lm2`: second-order Lagrange multiplier scheme (β = 0 only).
//! * `Bdf4Ref`: semi-implicit BDF4 used for reference solutions.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{RunError, SolverError, StepError};
use crate::field::{diagnostics, normalize, NodeBlocks, ProjectionParams, Projector, VectorField};
use crate::grid::{discrete_energy, inner_product3, laplacian, DiscreteLaplacian, Grid};
use crate::linalg::{solve_with_guess, LinearOperator, SolveStats, SolverConfig, SolverMethod, SparseOperator, StageOperator};
use crate::tableau::{prk2_tableau, validate, PrkTableau};

/// Default search interval for the LM2 multiplier magnitude.
pub const LM2_BRACKET: f64 = 10.0;
/// Absolute tolerance on the LM2 multiplier magnitude.
pub const LM2_ROOT_TOL: f64 = 1e-12;

fn default_direction() -> [f64; 3] {
    let c = 1.0 / 3f64.sqrt();
    [c, c, c]
}
fn default_bracket() -> f64 {
    LM2_BRACKET
}
fn default_substeps() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Scheme {
    Prk {
        tableau: PrkTableau,
    },
    PrkAlt {
        tableau: PrkTableau,
    },
    Sip1 {
        theta: f64,
    },
    Lm2 {
        /// Fixed direction `ê` of the space-independent multiplier `ξ = η ê`.
        #[serde(default = "default_direction")]
        direction: [f64; 3],
        #[serde(default = "default_bracket")]
        bracket: f64,
    },
    Bdf4Ref {
        /// PRK2 substeps per startup level.
        #[serde(default = "default_substeps")]
        startup_substeps: usize,
    },
}

impl Scheme {
    pub fn prk2() -> Self {
        Scheme::Prk { tableau: prk2_tableau() }
    }
    pub fn prk2_alt() -> Self {
        Scheme::PrkAlt { tableau: prk2_tableau() }
    }
    pub fn sip1(theta: f64) -> Self {
        Scheme::Sip1 { theta }
    }
    pub fn lm2() -> Self {
        Scheme::Lm2 {
            direction: default_direction(),
            bracket: LM2_BRACKET,
        }
    }
    pub fn bdf4() -> Self {
        Scheme::Bdf4Ref {
            startup_substeps: default_substeps(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Scheme::Prk { .. } => "prk",
            Scheme::PrkAlt { .. } => "prk_alt",
            Scheme::Sip1 { .. } => "sip1",
            Scheme::Lm2 { .. } => "lm2",
            Scheme::Bdf4Ref { .. } => "bdf4",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeParams {
    pub scheme: Scheme,
    pub tau: f64,
    pub projection: ProjectionParams,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl SchemeParams {
    pub fn new(scheme: Scheme, tau: f64, projection: ProjectionParams) -> Self {
        Self {
            scheme,
            tau,
            projection,
            solver: SolverConfig::default(),
        }
    }

    pub fn with_tau(&self, tau: f64) -> Self {
        Self { tau, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), StepError> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(StepError::Params(format!("time step must be positive, got {}", self.tau)));
        }
        if !self.projection.is_valid() {
            return Err(StepError::Params("alpha must be positive and finite".into()));
        }
        self.solver.validate().map_err(|e| StepError::Params(e.to_string()))?;
        match &self.scheme {
            Scheme::Prk { tableau } | Scheme::PrkAlt { tableau } => {
                let report = validate(tableau);
                if !report.is_valid() {
                    return Err(StepError::Tableau(crate::error::TableauError::Invalid(report.violations)));
                }
            }
            Scheme::Sip1 { theta } => {
                if !(0.5..=1.0).contains(theta) {
                    return Err(StepError::Params(format!("SIP1 theta must lie in [1/2, 1], got {theta}")));
                }
            }
            Scheme::Lm2 { direction, bracket } => {
                if self.projection.beta != 0.0 {
                    return Err(StepError::Params("LM2 is implemented for beta = 0 only".into()));
                }
                let len = crate::field::norm3(*direction);
                if !(len > 0.0) || !(*bracket > 0.0) {
                    return Err(StepError::Params("LM2 direction must be nonzero and bracket positive".into()));
                }
            }
            Scheme::Bdf4Ref { startup_substeps } => {
                if *startup_substeps == 0 {
                    return Err(StepError::Params("BDF4 startup needs at least one substep".into()));
                }
            }
        }
        Ok(())
    }
}

/// A grid together with its assembled Laplacian.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: Grid,
    pub lap: DiscreteLaplacian,
}

impl Problem {
    pub fn new(grid: Grid) -> Self {
        let lap = laplacian(&grid);
        Self { grid, lap }
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    /// `E_h` of a component-major field.
    pub fn energy(&self, u: &[f64]) -> f64 {
        discrete_energy(u, &self.grid).expect("field matches grid")
    }

    /// Overwrites Dirichlet nodes with their prescribed values.
    pub fn apply_boundary(&self, field: &mut VectorField) {
        for i in 0..self.n_nodes() {
            if let Some(v) = self.grid.dirichlet_value(i) {
                field.set_node(i, v);
            }
        }
    }

    fn check(&self, state: &VectorField) -> Result<(), StepError> {
        if state.n_nodes() != self.n_nodes() {
            return Err(StepError::Field(crate::error::FieldError::Length {
                expected: self.n_nodes(),
                found: state.n_nodes(),
            }));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lm2Info {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub eta: f64,
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    /// `E_h` after projection.
    pub energy: f64,
    /// `E_h` of the field before projection.
    pub energy_pre_projection: f64,
    /// Minimum node length before projection.
    pub min_len_pre: f64,
    /// `max_i ||m_i| - 1|` after projection.
    pub max_unit_dev: f64,
    pub solver_iterations: Vec<usize>,
    pub solver_residuals: Vec<f64>,
    pub wall_ms: f64,
    #[serde(default)]
    pub lm2: Option<Lm2Info>,
}

impl StepRecord {
    pub fn solver_iters_total(&self) -> usize {
        self.solver_iterations.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub scheme: String,
    pub tau: f64,
    pub initial_energy: f64,
    pub records: Vec<StepRecord>,
}

struct StageLog {
    iterations: Vec<usize>,
    residuals: Vec<f64>,
}

impl StageLog {
    fn new() -> Self {
        Self {
            iterations: Vec::new(),
            residuals: Vec::new(),
        }
    }
    fn push(&mut self, s: SolveStats) {
        self.iterations.push(s.iterations);
        self.residuals.push(s.residual);
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

/// Solves `(I - coeff B D_h) x = rhs`, matrix-free for Krylov methods.
fn solve_stage(
    lap: &DiscreteLaplacian,
    blocks: &NodeBlocks,
    coeff: f64,
    rhs: &[f64],
    guess: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats), SolverError> {
    if coeff == 0.0 {
        return Ok((rhs.to_vec(), SolveStats { iterations: 0, residual: 0.0 }));
    }
    let op = StageOperator::new(lap, blocks, coeff);
    match cfg.method {
        SolverMethod::BandedDirect => solve_increment(&op.assemble(), rhs, guess, cfg),
        _ => solve_increment(&op, rhs, guess, cfg),
    }
}

/// Solves `A x = rhs` for the correction `x - guess`, so the relative
/// tolerance bounds the error against the size of the update rather than
/// the size of the field. Otherwise the per-step solver error is
/// `O(rel_tol)` regardless of `τ` and accumulates over many steps.
fn solve_increment(
    a: &dyn LinearOperator,
    rhs: &[f64],
    guess: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats), SolverError> {
    let mut r = vec![0.0; rhs.len()];
    a.apply(guess, &mut r);
    r.iter_mut().zip(rhs).for_each(|(ri, bi)| *ri = bi - *ri);
    if r.iter().all(|&v| v == 0.0) {
        return Ok((guess.to_vec(), SolveStats { iterations: 0, residual: 0.0 }));
    }
    let (mut x, stats) = solve_with_guess(a, &r, None, cfg)?;
    x.iter_mut().zip(guess).for_each(|(xi, gi)| *xi += gi);
    Ok((x, stats))
}

fn finish_record(
    problem: &Problem,
    pre: &VectorField,
    log: StageLog,
    started: Instant,
) -> Result<(VectorField, StepRecord), StepError> {
    let d = diagnostics(pre)?;
    let next = normalize(pre)?;
    let post = diagnostics(&next)?;
    let record = StepRecord {
        step: 0,
        time: 0.0,
        energy: problem.energy(next.as_slice()),
        energy_pre_projection: problem.energy(pre.as_slice()),
        min_len_pre: d.min_length,
        max_unit_dev: post.max_unit_deviation,
        solver_iterations: log.iterations,
        solver_residuals: log.residuals,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        lm2: None,
    };
    Ok((next, record))
}

fn combine(weights: impl Iterator<Item = (f64, usize)>, fields: &[Vec<f64>], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (w, k) in weights {
        if w != 0.0 {
            axpy(&mut out, w, &fields[k]);
        }
    }
    out
}

/// One step of the PRK scheme for a general tableau.
pub fn prk_step(
    problem: &Problem,
    state: &VectorField,
    tableau: &PrkTableau,
    params: &SchemeParams,
) -> Result<(VectorField, StepRecord), StepError> {
    problem.check(state)?;
    let started = Instant::now();
    let s = tableau.stages();
    let (a, d1, d2, b) = (tableau.a(), tableau.d1(), tableau.d2(), tableau.b());
    let tau = params.tau;
    let len = 3 * problem.n_nodes();
    let lap = &problem.lap;
    let u0 = state.as_slice();

    // u[k] = U^k, laps[k] = D_h U^k + bc for k >= 1, fluxes[j] = F_{j+1}
    let mut u: Vec<Vec<f64>> = vec![u0.to_vec()];
    let mut laps: Vec<Vec<f64>> = vec![Vec::new()];
    let mut fluxes: Vec<Vec<f64>> = Vec::with_capacity(s);
    let mut log = StageLog::new();

    for i in 1..=s {
        let dir = combine((0..i).map(|k| (d1[(i - 1, k)], k)), &u, len);
        let proj = Projector::new(&VectorField::from_vec(dir)?, params.projection)?;
        let partial = combine((1..i).map(|k| (d2[(i - 1, k - 1)], k)), &laps, len);

        let mut rhs = u0.to_vec();
        for j in 1..i {
            axpy(&mut rhs, tau * a[(i - 1, j - 1)], &fluxes[j - 1]);
        }
        let diag = a[(i - 1, i - 1)] * d2[(i - 1, i - 1)];
        let mut forcing = partial.clone();
        axpy(&mut forcing, d2[(i - 1, i - 1)], &lap.bc);
        // a_ii P (Σ_{k<i} d_ik lap U^k + d_ii bc)
        let pf = proj.apply_vec(&forcing);
        axpy(&mut rhs, tau * a[(i - 1, i - 1)], &pf);

        let blocks = proj.blocks();
        let (ui, stats) = solve_stage(lap, &blocks, tau * diag, &rhs, &u[i - 1], &params.solver)
            .map_err(|source| StepError::Solver { stage: i, source })?;
        log.push(stats);
        let lap_i = lap.apply3(&ui);
        let mut inner = partial;
        axpy(&mut inner, d2[(i - 1, i - 1)], &lap_i);
        fluxes.push(proj.apply_vec(&inner));
        u.push(ui);
        laps.push(lap_i);
    }

    let mut mt = u0.to_vec();
    for j in 0..s {
        axpy(&mut mt, tau * b[j], &fluxes[j]);
    }
    finish_record(problem, &VectorField::from_vec(mt)?, log, started)
}

/// `(Â, b̂, G) = (A D2, D2ᵀ b, D2⁻¹)` of the alternative form.
pub fn alternative_coefficients(tableau: &PrkTableau) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>), StepError> {
    let d = tableau.d2();
    let g = d
        .clone()
        .try_inverse()
        .ok_or_else(|| StepError::Params("D2 is singular; the alternative form needs its inverse".into()))?;
    let a_hat = tableau.a() * d;
    let b_hat = (d.transpose() * tableau.b()).iter().copied().collect();
    Ok((a_hat, b_hat, g))
}

/// One step of the alternative PRK form; `D1` of the tableau is not used.
pub fn prk_alt_step(
    problem: &Problem,
    state: &VectorField,
    tableau: &PrkTableau,
    params: &SchemeParams,
) -> Result<(VectorField, StepRecord), StepError> {
    problem.check(state)?;
    let started = Instant::now();
    let (a_hat, b_hat, g) = alternative_coefficients(tableau)?;
    let s = tableau.stages();
    let tau = params.tau;
    let n = problem.n_nodes();
    let lap = &problem.lap;
    let u0 = state.as_slice();

    let mut u: Vec<Vec<f64>> = vec![u0.to_vec()];
    // projector blocks P(U^{k-1}) and averaged blocks P̄_j
    let mut base: Vec<NodeBlocks> = Vec::with_capacity(s);
    let mut avg: Vec<NodeBlocks> = Vec::with_capacity(s);
    // P̄_j (D_h U^j + bc)
    let mut terms: Vec<Vec<f64>> = Vec::with_capacity(s);
    let mut log = StageLog::new();

    for i in 1..=s {
        let proj = Projector::new(&VectorField::from_vec(u[i - 1].clone())?, params.projection)?;
        base.push(proj.blocks());
        let mut pbar = NodeBlocks::zeros(n);
        for k in 0..i {
            let w = g[(i - 1, k)];
            if w != 0.0 {
                pbar.add_scaled(w, &base[k]);
            }
        }
        let mut rhs = u0.to_vec();
        for j in 1..i {
            axpy(&mut rhs, tau * a_hat[(i - 1, j - 1)], &terms[j - 1]);
        }
        let aii = a_hat[(i - 1, i - 1)];
        let mut pbc = vec![0.0; 3 * n];
        pbar.apply(&lap.bc, &mut pbc);
        axpy(&mut rhs, tau * aii, &pbc);
        let (ui, stats) = solve_stage(lap, &pbar, tau * aii, &rhs, &u[i - 1], &params.solver)
            .map_err(|source| StepError::Solver { stage: i, source })?;
        log.push(stats);
        let lap_i = lap.apply3(&ui);
        let mut term = vec![0.0; 3 * n];
        pbar.apply(&lap_i, &mut term);
        terms.push(term);
        avg.push(pbar);
        u.push(ui);
    }

    let mut mt = u0.to_vec();
    for j in 0..s {
        axpy(&mut mt, tau * b_hat[j], &terms[j]);
    }
    finish_record(problem, &VectorField::from_vec(mt)?, log, started)
}

/// One SIP1 step: `(I - τθ P L) m̃ = m + τ P((1-θ) L m + bc)`, then projection.
pub fn sip1_step(
    problem: &Problem,
    state: &VectorField,
    theta: f64,
    params: &SchemeParams,
) -> Result<(VectorField, StepRecord), StepError> {
    problem.check(state)?;
    let started = Instant::now();
    let tau = params.tau;
    let n = problem.n_nodes();
    let lap = &problem.lap;
    let m = state.as_slice();
    let proj = Projector::new(state, params.projection)?;
    let mut lm = vec![0.0; 3 * n];
    lap.apply3_homogeneous(m, &mut lm);
    let mut forcing = lap.bc.clone();
    axpy(&mut forcing, 1.0 - theta, &lm);
    let mut rhs = m.to_vec();
    axpy(&mut rhs, tau, &proj.apply_vec(&forcing));
    let blocks = proj.blocks();
    let mut log = StageLog::new();
    let (mt, stats) = solve_stage(lap, &blocks, tau * theta, &rhs, m, &params.solver)
        .map_err(|source| StepError::Solver { stage: 1, source })?;
    log.push(stats);
    finish_record(problem, &VectorField::from_vec(mt)?, log, started)
}

/// Auxiliary LM2 state: pointwise multiplier `λ^n` and predictor `m̃^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lm2Aux {
    pub lambda: Vec<f64>,
    pub predictor: VectorField,
}

impl Lm2Aux {
    /// `λ⁰ = -m̂·D_h m⁰` and `m̃⁰ = m⁰`.
    pub fn initial(problem: &Problem, m0: &VectorField) -> Result<Self, StepError> {
        problem.check(m0)?;
        let n = problem.n_nodes();
        let dirs = normalize(m0)?;
        let lm = problem.lap.apply3(m0.as_slice());
        let lambda = (0..n)
            .map(|i| {
                let d = dirs.node(i);
                -(d[0] * lm[i] + d[1] * lm[n + i] + d[2] * lm[2 * n + i])
            })
            .collect();
        Ok(Self {
            lambda,
            predictor: m0.clone(),
        })
    }
}

/// Scalar matrix `I - (τα/2) D_h` of the LM2 predictor.
fn lm2_operator(problem: &Problem, tau: f64, alpha: f64) -> SparseOperator {
    let lap = &problem.lap;
    let n = problem.n_nodes();
    let c = 0.5 * tau * alpha * lap.inv_h2;
    let mut t = Vec::with_capacity(lap.matrix.nnz());
    for i in 0..n {
        let (cols, vals) = lap.matrix.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            t.push((i, j, if i == j { 1.0 } else { 0.0 } - c * v));
        }
        t.push((i, i, 0.0));
    }
    SparseOperator::from_triplets(n, n, &t)
}

struct Lm2Energy<'a> {
    problem: &'a Problem,
    base: &'a VectorField,
    direction: [f64; 3],
    free: Vec<usize>,
}

impl Lm2Energy<'_> {
    /// `m(η) = (m̂ + η ê) / |m̂ + η ê|` on free nodes.
    fn field(&self, eta: f64) -> Result<VectorField, StepError> {
        let mut out = self.base.clone();
        for &i in &self.free {
            let v = self.base.node(i);
            let w = [
                v[0] + eta * self.direction[0],
                v[1] + eta * self.direction[1],
                v[2] + eta * self.direction[2],
            ];
            let len = crate::field::norm3(w);
            if !(len >= crate::field::ZERO_LENGTH) {
                return Err(StepError::Field(crate::error::FieldError::ZeroLength { node: i }));
            }
            out.set_node(i, [w[0] / len, w[1] / len, w[2] / len]);
        }
        Ok(out)
    }

    /// Continuum-scaled energy `E_h / 2`.
    fn energy(&self, eta: f64) -> f64 {
        match self.field(eta) {
            Ok(f) => 0.5 * self.problem.energy(f.as_slice()),
            Err(_) => f64::NAN,
        }
    }
}

/// Root of `g` in `[-bracket, bracket]` closest to zero along a geometric
/// outward scan, refined by Newton steps kept inside the bracket with
/// bisection as fallback.
fn lm2_root(g: impl Fn(f64) -> f64, bracket: f64) -> Result<f64, StepError> {
    let g0 = g(0.0);
    if !g0.is_finite() {
        return Err(StepError::NoRealRoot { lo: -bracket, hi: bracket });
    }
    if g0 == 0.0 {
        return Ok(0.0);
    }
    let mut found = None;
    let mut prev = [(0.0, g0), (0.0, g0)];
    let mut step = 1e-10_f64.min(bracket);
    'scan: loop {
        for (side, sign) in [(0, 1.0), (1, -1.0)] {
            let x = sign * step;
            let gx = g(x);
            if gx.is_finite() && (gx == 0.0 || gx.signum() != prev[side].1.signum()) {
                found = Some((prev[side], (x, gx)));
                break 'scan;
            }
            if gx.is_finite() {
                prev[side] = (x, gx);
            }
        }
        if step >= bracket {
            break;
        }
        step = (step * 2.0).min(bracket);
    }
    let ((mut lo, mut glo), (mut hi, ghi)) = found.ok_or(StepError::NoRealRoot { lo: -bracket, hi: bracket })?;
    if ghi == 0.0 {
        return Ok(hi);
    }
    if lo > hi {
        std::mem::swap(&mut lo, &mut hi);
        glo = g(lo);
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let gx = g(x);
        if gx == 0.0 {
            return Ok(x);
        }
        if gx.signum() == glo.signum() {
            lo = x;
            glo = gx;
        } else {
            hi = x;
        }
        if hi - lo <= LM2_ROOT_TOL {
            return Ok(0.5 * (lo + hi));
        }
        let delta = 1e-7 * x.abs().max(1e-6);
        let slope = (g(x + delta) - g(x - delta)) / (2.0 * delta);
        let newton = x - gx / slope;
        if newton.is_finite() && newton > lo && newton < hi {
            if (newton - x).abs() <= LM2_ROOT_TOL {
                return Ok(newton);
            }
            x = newton;
        } else {
            x = 0.5 * (lo + hi);
        }
    }
    Ok(x)
}

/// One LM2 step (Steps 1–3) with an explicit predictor matrix.
fn lm2_step_with(
    problem: &Problem,
    state: &VectorField,
    aux: &Lm2Aux,
    params: &SchemeParams,
    predictor_op: &SparseOperator,
) -> Result<(VectorField, Lm2Aux, StepRecord), StepError> {
    problem.check(state)?;
    let started = Instant::now();
    let (direction, bracket) = match &params.scheme {
        Scheme::Lm2 { direction, bracket } => (*direction, *bracket),
        _ => (default_direction(), LM2_BRACKET),
    };
    let dlen = crate::field::norm3(direction);
    let direction = [direction[0] / dlen, direction[1] / dlen, direction[2] / dlen];
    let tau = params.tau;
    let alpha = params.projection.alpha;
    let n = problem.n_nodes();
    let lap = &problem.lap;
    let m = state.as_slice();
    let mut log = StageLog::new();

    // Step 1: (I - τα/2 D_h) m̃ = m + τα/2 D_h m̃^n + τα bc + τα λ m
    let mut lpred = vec![0.0; 3 * n];
    lap.apply3_homogeneous(aux.predictor.as_slice(), &mut lpred);
    let mut pred = vec![0.0; 3 * n];
    for c in 0..3 {
        let r = c * n..(c + 1) * n;
        let rhs: Vec<f64> = r
            .clone()
            .map(|k| m[k] + 0.5 * tau * alpha * lpred[k] + tau * alpha * (lap.bc[k] + aux.lambda[k - c * n] * m[k]))
            .collect();
        let (x, stats) = solve_increment(predictor_op, &rhs, &aux.predictor.as_slice()[r.clone()], &params.solver)
            .map_err(|source| StepError::Solver { stage: c + 1, source })?;
        log.push(stats);
        pred[r].copy_from_slice(&x);
    }
    let predictor = VectorField::from_vec(pred)?;

    // Step 2: w = m̃ - (τα/2) λ m, m̂ = w / |w|, λ' = 2 (1 - |w|) / (τα)
    let mut m_hat = VectorField::zeros(n);
    let mut lambda = vec![0.0; n];
    for i in 0..n {
        let p = predictor.node(i);
        let mi = state.node(i);
        let f = 0.5 * tau * alpha * aux.lambda[i];
        let w = [p[0] - f * mi[0], p[1] - f * mi[1], p[2] - f * mi[2]];
        let len = crate::field::norm3(w);
        if !(len >= crate::field::ZERO_LENGTH) {
            return Err(StepError::Field(crate::error::FieldError::ZeroLength { node: i }));
        }
        m_hat.set_node(i, [w[0] / len, w[1] / len, w[2] / len]);
        lambda[i] = 2.0 * (1.0 - len) / (tau * alpha);
    }

    // Step 3: (E(m(η)) - E^n)/τ + α ||v × Δv||² = 0, v = (m̂ + m)/2
    let v: Vec<f64> = m_hat.as_slice().iter().zip(m).map(|(a, b)| 0.5 * (a + b)).collect();
    let lv = lap.apply3(&v);
    let mut cross = vec![0.0; 3 * n];
    for i in 0..n {
        let a = [v[i], v[n + i], v[2 * n + i]];
        let b = [lv[i], lv[n + i], lv[2 * n + i]];
        cross[i] = a[1] * b[2] - a[2] * b[1];
        cross[n + i] = a[2] * b[0] - a[0] * b[2];
        cross[2 * n + i] = a[0] * b[1] - a[1] * b[0];
    }
    let dissipation = alpha * inner_product3(&cross, &cross, &problem.grid).expect("lengths match");
    let energy_n = 0.5 * problem.energy(m);
    let free: Vec<usize> = (0..n).filter(|&i| !lap.fixed[i]).collect();
    let eval = Lm2Energy {
        problem,
        base: &m_hat,
        direction,
        free,
    };
    let eta = lm2_root(|eta| (eval.energy(eta) - energy_n) / tau + dissipation, bracket)?;
    let next = eval.field(eta)?;

    let d = diagnostics(&predictor)?;
    let post = diagnostics(&next)?;
    let (lambda_min, lambda_max) = lambda
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &l| (lo.min(l), hi.max(l)));
    let next_field = normalize(&next)?;
    let record = StepRecord {
        step: 0,
        time: 0.0,
        energy: problem.energy(next_field.as_slice()),
        energy_pre_projection: problem.energy(predictor.as_slice()),
        min_len_pre: d.min_length,
        max_unit_dev: post.max_unit_deviation,
        solver_iterations: log.iterations,
        solver_residuals: log.residuals,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        lm2: Some(Lm2Info {
            lambda_min,
            lambda_max,
            eta,
        }),
    };
    Ok((next_field, Lm2Aux { lambda, predictor }, record))
}

/// One LM2 step.
pub fn lm2_step(
    problem: &Problem,
    state: &VectorField,
    aux: &Lm2Aux,
    params: &SchemeParams,
) -> Result<(VectorField, Lm2Aux, StepRecord), StepError> {
    let op = lm2_operator(problem, params.tau, params.projection.alpha);
    lm2_step_with(problem, state, aux, params, &op)
}

/// BDF4 step from history `[m^n, m^{n-1}, m^{n-2}, m^{n-3}]`.
fn bdf4_step(
    problem: &Problem,
    history: &VecDeque<VectorField>,
    params: &SchemeParams,
) -> Result<(VectorField, StepRecord), StepError> {
    let started = Instant::now();
    let tau = params.tau;
    let len = 3 * problem.n_nodes();
    let h: Vec<&[f64]> = history.iter().map(|f| f.as_slice()).collect();
    let mut extrap = vec![0.0; len];
    let mut hist = vec![0.0; len];
    for k in 0..len {
        extrap[k] = 4.0 * h[0][k] - 6.0 * h[1][k] + 4.0 * h[2][k] - h[3][k];
        hist[k] = 4.0 * h[0][k] - 3.0 * h[1][k] + (4.0 / 3.0) * h[2][k] - 0.25 * h[3][k];
    }
    let proj = Projector::new(&VectorField::from_vec(extrap)?, params.projection)?;
    let scale = 12.0 / 25.0;
    let pbc = proj.apply_vec(&problem.lap.bc);
    let rhs: Vec<f64> = hist.iter().zip(&pbc).map(|(a, b)| scale * (a + tau * b)).collect();
    let blocks = proj.blocks();
    let mut log = StageLog::new();
    let (x, stats) = solve_stage(&problem.lap, &blocks, scale * tau, &rhs, h[0], &params.solver)
        .map_err(|source| StepError::Solver { stage: 1, source })?;
    log.push(stats);
    finish_record(problem, &VectorField::from_vec(x)?, log, started)
}

/// Advances one step at a time, carrying any scheme-specific history.
pub trait Stepper {
    fn step(&mut self, state: &VectorField) -> Result<(VectorField, StepRecord), StepError>;
}

struct PrkStepper<'a> {
    problem: &'a Problem,
    params: SchemeParams,
    tableau: PrkTableau,
    alt: bool,
}

impl Stepper for PrkStepper<'_> {
    fn step(&mut self, state: &VectorField) -> Result<(VectorField, StepRecord), StepError> {
        if self.alt {
            prk_alt_step(self.problem, state, &self.tableau, &self.params)
        } else {
            prk_step(self.problem, state, &self.tableau, &self.params)
        }
    }
}

struct Sip1Stepper<'a> {
    problem: &'a Problem,
    params: SchemeParams,
    theta: f64,
}

impl Stepper for Sip1Stepper<'_> {
    fn step(&mut self, state: &VectorField) -> Result<(VectorField, StepRecord), StepError> {
        sip1_step(self.problem, state, self.theta, &self.params)
    }
}

struct Lm2Stepper<'a> {
    problem: &'a Problem,
    params: SchemeParams,
    aux: Lm2Aux,
    op: SparseOperator,
}

impl Stepper for Lm2Stepper<'_> {
    fn step(&mut self, state: &VectorField) -> Result<(VectorField, StepRecord), StepError> {
        let (next, aux, record) = lm2_step_with(self.problem, state, &self.aux, &self.params, &self.op)?;
        self.aux = aux;
        Ok((next, record))
    }
}

struct Bdf4Stepper<'a> {
    problem: &'a Problem,
    params: SchemeParams,
    substeps: usize,
    history: VecDeque<VectorField>,
}

impl Stepper for Bdf4Stepper<'_> {
    fn step(&mut self, state: &VectorField) -> Result<(VectorField, StepRecord), StepError> {
        if self.history.front().map(|f| f.as_slice() != state.as_slice()).unwrap_or(true) {
            self.history.clear();
            self.history.push_front(state.clone());
        }
        let (next, record) = if self.history.len() < 4 {
            let sub = SchemeParams {
                scheme: Scheme::prk2(),
                tau: self.params.tau / self.substeps as f64,
                ..self.params.clone()
            };
            let tableau = prk2_tableau();
            let started = Instant::now();
            let mut cur = state.clone();
            let mut last = None;
            let mut iterations = Vec::new();
            let mut residuals = Vec::new();
            for _ in 0..self.substeps {
                let (f, r) = prk_step(self.problem, &cur, &tableau, &sub)?;
                iterations.extend(&r.solver_iterations);
                residuals.extend(&r.solver_residuals);
                cur = f;
                last = Some(r);
            }
            let mut r = last.expect("at least one substep");
            r.solver_iterations = iterations;
            r.solver_residuals = residuals;
            r.wall_ms = started.elapsed().as_secs_f64() * 1e3;
            (cur, r)
        } else {
            bdf4_step(self.problem, &self.history, &self.params)?
        };
        self.history.push_front(next.clone());
        self.history.truncate(4);
        Ok((next, record))
    }
}

pub fn make_stepper<'a>(
    problem: &'a Problem,
    params: &SchemeParams,
    initial: &VectorField,
) -> Result<Box<dyn Stepper + 'a>, StepError> {
    params.validate()?;
    problem.check(initial)?;
    let params_owned = params.clone();
    Ok(match &params.scheme {
        Scheme::Prk { tableau } => Box::new(PrkStepper {
            problem,
            tableau: tableau.clone(),
            params: params_owned,
            alt: false,
        }),
        Scheme::PrkAlt { tableau } => {
            alternative_coefficients(tableau)?;
            Box::new(PrkStepper {
                problem,
                tableau: tableau.clone(),
                params: params_owned,
                alt: true,
            })
        }
        Scheme::Sip1 { theta } => Box::new(Sip1Stepper {
            problem,
            theta: *theta,
            params: params_owned,
        }),
        Scheme::Lm2 { .. } => Box::new(Lm2Stepper {
            problem,
            aux: Lm2Aux::initial(problem, initial)?,
            op: lm2_operator(problem, params.tau, params.projection.alpha),
            params: params_owned,
        }),
        Scheme::Bdf4Ref { startup_substeps } => Box::new(Bdf4Stepper {
            problem,
            substeps: *startup_substeps,
            history: VecDeque::new(),
            params: params_owned,
        }),
    })
}

/// Sees the initial field and every accepted step.
pub trait Observer {
    fn observe(&mut self, step: usize, time: f64, field: &VectorField);
}

/// Keeps copies of the field at the requested step indices.
#[derive(Debug, Clone, Default)]
pub struct SnapshotObserver {
    pub steps: Vec<usize>,
    pub snapshots: Vec<(usize, f64, VectorField)>,
}

impl SnapshotObserver {
    pub fn at_steps(steps: Vec<usize>) -> Self {
        Self {
            steps,
            snapshots: Vec::new(),
        }
    }
}

impl Observer for SnapshotObserver {
    fn observe(&mut self, step: usize, time: f64, field: &VectorField) {
        if self.steps.contains(&step) {
            self.snapshots.push((step, time, field.clone()));
        }
    }
}

/// Number of steps of size `tau` in `t_end`, if it is a whole number.
pub fn step_count(t_end: f64, tau: f64) -> Option<usize> {
    if !(t_end >= 0.0) || !(tau > 0.0) {
        return None;
    }
    let n = (t_end / tau).round();
    ((n * tau - t_end).abs() <= 1e-9 * t_end.max(tau)).then_some(n as usize)
}

/// Result of a run: the last accepted field, its trace, and the error that
/// stopped it early, if any.
#[derive(Debug)]
pub struct RunOutput {
    pub field: VectorField,
    pub trace: RunTrace,
    pub failure: Option<RunError>,
}

impl RunOutput {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

pub fn run(
    problem: &Problem,
    initial: &VectorField,
    params: &SchemeParams,
    t_end: f64,
    observers: &mut [&mut dyn Observer],
) -> Result<RunOutput, RunError> {
    let steps = step_count(t_end, params.tau).ok_or(RunError::StepCount { t_end, tau: params.tau })?;
    let mut stepper = make_stepper(problem, params, initial)?;
    let mut trace = RunTrace {
        scheme: params.scheme.label().to_string(),
        tau: params.tau,
        initial_energy: problem.energy(initial.as_slice()),
        records: Vec::with_capacity(steps),
    };
    for o in observers.iter_mut() {
        o.observe(0, 0.0, initial);
    }
    let mut state = initial.clone();
    for k in 1..=steps {
        let time = k as f64 * params.tau;
        match stepper.step(&state) {
            Ok((next, mut record)) => {
                record.step = k;
                record.time = time;
                trace.records.push(record);
                state = next;
                for o in observers.iter_mut() {
                    o.observe(k, time, &state);
                }
            }
            Err(source) => {
                log::warn!("{} stopped at step {k} (t = {time}): {source}", trace.scheme);
                return Ok(RunOutput {
                    field: state,
                    trace,
                    failure: Some(RunError::Step { step: k, time, source }),
                });
            }
        }
    }
    Ok(RunOutput {
        field: state,
        trace,
        failure: None,
    })
}

/// Semi-implicit BDF4 solution at `t_end`.
pub fn bdf4_reference(
    problem: &Problem,
    initial: &VectorField,
    params: &SchemeParams,
    t_end: f64,
) -> Result<VectorField, RunError> {
    let p = SchemeParams {
        scheme: match params.scheme {
            Scheme::Bdf4Ref { .. } => params.scheme.clone(),
            _ => Scheme::bdf4(),
        },
        ..params.clone()
    };
    let out = run(problem, initial, &p, t_end, &mut [])?;
    match out.failure {
        Some(e) => Err(e),
        None => Ok(out.field),
    }
}
