//! Product-type IMEX Runge–Kutta coefficient tableaux.
//!
//! A tableau bundles the outside weights `A`, `b` with two inside averaging
//! matrices: `D1` combines lagged stages fed to the explicit factor and `D2`
//! combines current stages fed to the implicit factor. All matrices are lower
//! triangular; the averaging matrices have unit row sums.
//!
//! Besides structural validation this module evaluates the order conditions
//! up to order three and the two symmetric certificates `Q` and `R` whose
//! positive semi-definiteness (together with `b >= 0`) guarantees energy
//! decrease and length increase before projection.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::TableauError;

/// Absolute tolerance under which an order-condition residual counts as zero.
pub const ORDER_TOL: f64 = 1e-13;

/// Default relative tolerance of the PSD test on `Q` and `R`.
pub const PSD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableauDoc", into = "TableauDoc")]
pub struct PrkTableau {
    a: DMatrix<f64>,
    d1: DMatrix<f64>,
    d2: DMatrix<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    implicit: bool,
}

/// On-disk JSON layout: row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableauDoc {
    s: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "D1")]
    d1: Vec<Vec<f64>>,
    #[serde(rename = "D2")]
    d2: Vec<Vec<f64>>,
    b: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<Vec<f64>>,
    #[serde(default = "default_true")]
    implicit: bool,
}

fn default_true() -> bool {
    true
}

fn matrix_from_rows(name: &'static str, s: usize, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, TableauError> {
    if rows.len() != s || rows.iter().any(|r| r.len() != s) {
        return Err(TableauError::Dimension {
            what: name,
            expected: s,
            found: rows.len(),
        });
    }
    Ok(DMatrix::from_fn(s, s, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Sub-diagonal shift: `(J x)_i = x_{i-1}`, `(J x)_1 = 0`.
pub fn shift_matrix(s: usize) -> DMatrix<f64> {
    DMatrix::from_fn(s, s, |i, j| if i == j + 1 { 1.0 } else { 0.0 })
}

impl PrkTableau {
    /// Builds a tableau from row-major arrays; `c` is derived from `A`.
    pub fn from_rows(
        a: &[Vec<f64>],
        d1: &[Vec<f64>],
        d2: &[Vec<f64>],
        b: &[f64],
    ) -> Result<Self, TableauError> {
        let s = a.len();
        if s == 0 {
            return Err(TableauError::Empty);
        }
        let a = matrix_from_rows("A", s, a)?;
        let d1 = matrix_from_rows("D1", s, d1)?;
        let d2 = matrix_from_rows("D2", s, d2)?;
        if b.len() != s {
            return Err(TableauError::Dimension {
                what: "b",
                expected: s,
                found: b.len(),
            });
        }
        let b = DVector::from_column_slice(b);
        let c = &a * DVector::from_element(s, 1.0);
        Ok(Self {
            a,
            d1,
            d2,
            b,
            c,
            implicit: true,
        })
    }

    /// Single-D form: the explicit factor sees exactly the previous stage.
    pub fn with_identity_d1(a: &[Vec<f64>], d: &[Vec<f64>], b: &[f64]) -> Result<Self, TableauError> {
        let s = a.len();
        let eye: Vec<Vec<f64>> = (0..s)
            .map(|i| (0..s).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::from_rows(a, &eye, d, b)
    }

    /// Marks whether the diagonal of `A` and `D2` must be strictly positive.
    pub fn set_implicit(&mut self, implicit: bool) {
        self.implicit = implicit;
    }

    pub fn from_json(text: &str) -> Result<Self, TableauError> {
        let doc: TableauDoc = serde_json::from_str(text)?;
        Self::try_from(doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TableauDoc::from(self.clone())).expect("tableau serializes")
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn d1(&self) -> &DMatrix<f64> {
        &self.d1
    }
    pub fn d2(&self) -> &DMatrix<f64> {
        &self.d2
    }
    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }
    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }
    pub fn is_implicit(&self) -> bool {
        self.implicit
    }
}

impl TryFrom<TableauDoc> for PrkTableau {
    type Error = TableauError;

    fn try_from(doc: TableauDoc) -> Result<Self, TableauError> {
        let mut t = Self::from_rows(&doc.a, &doc.d1, &doc.d2, &doc.b)?;
        if t.stages() != doc.s {
            return Err(TableauError::Dimension {
                what: "s",
                expected: t.stages(),
                found: doc.s,
            });
        }
        if let Some(c) = doc.c {
            if c.len() != doc.s {
                return Err(TableauError::Dimension {
                    what: "c",
                    expected: doc.s,
                    found: c.len(),
                });
            }
            t.c = DVector::from_vec(c);
        }
        t.implicit = doc.implicit;
        Ok(t)
    }
}

impl From<PrkTableau> for TableauDoc {
    fn from(t: PrkTableau) -> Self {
        TableauDoc {
            s: t.stages(),
            a: matrix_to_rows(&t.a),
            d1: matrix_to_rows(&t.d1),
            d2: matrix_to_rows(&t.d2),
            b: t.b.iter().copied().collect(),
            c: None,
            implicit: t.implicit,
        }
    }
}

/// The second-order structure-preserving tableau with `D1 = I`.
pub fn prk2_tableau() -> PrkTableau {
    PrkTableau::with_identity_d1(
        &[vec![1.0, 0.0], vec![0.0, 0.5]],
        &[vec![1.0, 0.0], vec![-1.0, 2.0]],
        &[0.5, 0.5],
    )
    .expect("static tableau is well formed")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableauMatrix {
    A,
    D1,
    D2,
}

impl std::fmt::Display for TableauMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TableauMatrix::A => f.write_str("A"),
            TableauMatrix::D1 => f.write_str("D1"),
            TableauMatrix::D2 => f.write_str("D2"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// `c_i - sum_j a_ij`.
    Abscissa { row: usize, residual: f64 },
    /// `sum_j d_ij - 1` for an averaging matrix.
    RowSum { matrix: TableauMatrix, row: usize, residual: f64 },
    /// Nonzero entry above the diagonal.
    UpperEntry { matrix: TableauMatrix, row: usize, col: usize, value: f64 },
    /// Non-positive diagonal entry on a tableau flagged implicit.
    Diagonal { matrix: TableauMatrix, row: usize, value: f64 },
}

impl std::fmt::Display for Violation {
    // rows and columns are printed 1-based, as in the usual Butcher notation
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Abscissa { row, residual } => {
                write!(f, "c_{} differs from the row sum of A by {residual:e}", row + 1)
            }
            Violation::RowSum { matrix, row, residual } => {
                write!(f, "row {} of {matrix} sums to 1 {residual:+e}", row + 1)
            }
            Violation::UpperEntry { matrix, row, col, value } => {
                write!(f, "{matrix}[{},{}] = {value:e} above the diagonal", row + 1, col + 1)
            }
            Violation::Diagonal { matrix, row, value } => {
                write!(f, "{matrix}[{0},{0}] = {value:e} is not positive", row + 1)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Residuals at or below this magnitude are treated as exact.
const STRUCTURE_TOL: f64 = 1e-14;

/// Checks the structural invariants of a tableau.
pub fn validate(t: &PrkTableau) -> ValidationReport {
    let s = t.stages();
    let mut violations = Vec::new();
    for i in 0..s {
        let row_sum: f64 = (0..=i).map(|j| t.a[(i, j)]).sum();
        let residual = t.c[i] - row_sum;
        if residual.abs() > STRUCTURE_TOL {
            violations.push(Violation::Abscissa { row: i, residual });
        }
    }
    for (matrix, m) in [(TableauMatrix::A, &t.a), (TableauMatrix::D1, &t.d1), (TableauMatrix::D2, &t.d2)] {
        for i in 0..s {
            for j in (i + 1)..s {
                if m[(i, j)] != 0.0 {
                    violations.push(Violation::UpperEntry {
                        matrix,
                        row: i,
                        col: j,
                        value: m[(i, j)],
                    });
                }
            }
        }
        if matrix != TableauMatrix::A {
            for i in 0..s {
                let residual = (0..=i).map(|j| m[(i, j)]).sum::<f64>() - 1.0;
                if residual.abs() > STRUCTURE_TOL {
                    violations.push(Violation::RowSum { matrix, row: i, residual });
                }
            }
        }
    }
    if t.implicit {
        for (matrix, m) in [(TableauMatrix::A, &t.a), (TableauMatrix::D2, &t.d2)] {
            for i in 0..s {
                if !(m[(i, i)] > 0.0) {
                    violations.push(Violation::Diagonal {
                        matrix,
                        row: i,
                        value: m[(i, i)],
                    });
                }
            }
        }
    }
    ValidationReport { violations }
}

fn require_valid(t: &PrkTableau) -> Result<(), TableauError> {
    let report = validate(t);
    if report.is_valid() {
        Ok(())
    } else {
        Err(TableauError::Invalid(report.violations))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderResidual {
    pub order: u8,
    pub name: &'static str,
    /// Left side minus right side.
    pub residual: f64,
}

/// Signed residuals of every order condition up to `up_to_order` (1, 2 or 3).
///
/// Order three has seven conditions: four products that must equal 1/6 and
/// three quadratic moments that must equal 1/3.
pub fn order_condition_residuals(t: &PrkTableau, up_to_order: u8) -> Result<Vec<OrderResidual>, TableauError> {
    if !(1..=3).contains(&up_to_order) {
        return Err(TableauError::UnsupportedOrder(up_to_order));
    }
    require_valid(t)?;
    let s = t.stages();
    let one = DVector::from_element(s, 1.0);
    let j = shift_matrix(s);
    let b = &t.b;

    let mut out = vec![OrderResidual {
        order: 1,
        name: "b'1 = 1",
        residual: b.dot(&one) - 1.0,
    }];
    if up_to_order == 1 {
        return Ok(out);
    }

    let lag = &t.d1 * (&j * &t.c); // D1 J c
    let cur = &t.d2 * &t.c; // D2 c
    out.push(OrderResidual {
        order: 2,
        name: "b'D1Jc = 1/2",
        residual: b.dot(&lag) - 0.5,
    });
    out.push(OrderResidual {
        order: 2,
        name: "b'D2c = 1/2",
        residual: b.dot(&cur) - 0.5,
    });
    if up_to_order == 2 {
        return Ok(out);
    }

    let d1j = &t.d1 * &j;
    let third = [
        ("b'D1JAD1Jc = 1/6", b.dot(&(&d1j * (&t.a * &lag))) - 1.0 / 6.0),
        ("b'D1JAD2c = 1/6", b.dot(&(&d1j * (&t.a * &cur))) - 1.0 / 6.0),
        ("b'D2AD1Jc = 1/6", b.dot(&(&t.d2 * (&t.a * &lag))) - 1.0 / 6.0),
        ("b'D2AD2c = 1/6", b.dot(&(&t.d2 * (&t.a * &cur))) - 1.0 / 6.0),
        ("b'(D1Jc)^2 = 1/3", b.dot(&lag.component_mul(&lag)) - 1.0 / 3.0),
        ("b'(D1Jc.D2c) = 1/3", b.dot(&lag.component_mul(&cur)) - 1.0 / 3.0),
        ("b'(D2c)^2 = 1/3", b.dot(&cur.component_mul(&cur)) - 1.0 / 3.0),
    ];
    out.extend(third.into_iter().map(|(name, residual)| OrderResidual {
        order: 3,
        name,
        residual,
    }));
    Ok(out)
}

/// Highest order `p <= 3` whose conditions all vanish within [`ORDER_TOL`].
pub fn satisfied_order(t: &PrkTableau) -> Result<u8, TableauError> {
    let residuals = order_condition_residuals(t, 3)?;
    let mut order = 0;
    for p in 1..=3u8 {
        if residuals
            .iter()
            .filter(|r| r.order == p)
            .all(|r| r.residual.abs() <= ORDER_TOL)
        {
            order = p;
        } else {
            break;
        }
    }
    Ok(order)
}

/// `Q = B D2 A + (B D2 A)^T - b b^T` with `B = diag(b)`.
pub fn q_matrix(t: &PrkTableau) -> DMatrix<f64> {
    let bda = DMatrix::from_diagonal(&t.b) * &t.d2 * &t.a;
    symmetric_sum(&bda) - &t.b * t.b.transpose()
}

/// `R = b b^T - B J A - (B J A)^T`; row one of `J A` is zero.
pub fn r_matrix(t: &PrkTableau) -> DMatrix<f64> {
    let s = t.stages();
    let bja = DMatrix::from_diagonal(&t.b) * shift_matrix(s) * &t.a;
    &t.b * t.b.transpose() - symmetric_sum(&bja)
}

// M + M^T, written entry by entry so the result is exactly symmetric.
fn symmetric_sum(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] + m[(j, i)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertificateStatus {
    Satisfied,
    Violated,
    /// The symmetric eigensolver did not converge.
    Indeterminate,
}

#[derive(Debug, Clone)]
pub struct CertificateReport {
    pub q_matrix: DMatrix<f64>,
    pub r_matrix: DMatrix<f64>,
    /// Ascending; empty when indeterminate.
    pub q_eigenvalues: Vec<f64>,
    pub r_eigenvalues: Vec<f64>,
    pub b_nonnegative: bool,
    pub satisfies_theorem: bool,
    pub status: CertificateStatus,
}

fn sorted_eigenvalues(m: &DMatrix<f64>) -> Option<Vec<f64>> {
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 1000)?;
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Some(ev)
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Evaluates the structure-preservation certificate.
///
/// A matrix passes the PSD test when its smallest eigenvalue is at least
/// `-psd_tol * max(1, ||M||_inf)`.
pub fn certify(t: &PrkTableau, psd_tol: f64) -> Result<CertificateReport, TableauError> {
    require_valid(t)?;
    let q = q_matrix(t);
    let r = r_matrix(t);
    let b_nonnegative = t.b.iter().all(|&x| x >= 0.0);
    let (qe, re) = match (sorted_eigenvalues(&q), sorted_eigenvalues(&r)) {
        (Some(qe), Some(re)) => (qe, re),
        _ => {
            return Ok(CertificateReport {
                q_matrix: q,
                r_matrix: r,
                q_eigenvalues: Vec::new(),
                r_eigenvalues: Vec::new(),
                b_nonnegative,
                satisfies_theorem: false,
                status: CertificateStatus::Indeterminate,
            })
        }
    };
    let psd = |ev: &[f64], m: &DMatrix<f64>| ev[0] >= -psd_tol * inf_norm(m).max(1.0);
    let satisfies_theorem = b_nonnegative && psd(&qe, &q) && psd(&re, &r);
    Ok(CertificateReport {
        q_matrix: q,
        r_matrix: r,
        q_eigenvalues: qe,
        r_eigenvalues: re,
        b_nonnegative,
        satisfies_theorem,
        status: if satisfies_theorem {
            CertificateStatus::Satisfied
        } else {
            CertificateStatus::Violated
        },
    })
}

/// Quadratic `12 b3^2 - 6 b3 + 1 = 0` that a three-stage third-order
/// structure-preserving tableau would need to satisfy, with its discriminant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonexistenceCertificate {
    pub coefficients: [f64; 3],
    pub discriminant: f64,
}

impl NonexistenceCertificate {
    /// Complex-conjugate roots as `(re, im)` pairs, or `None` if real.
    pub fn complex_roots(&self) -> Option<[(f64, f64); 2]> {
        let [a, b, _] = self.coefficients;
        if self.discriminant >= 0.0 {
            return None;
        }
        let re = -b / (2.0 * a);
        let im = (-self.discriminant).sqrt() / (2.0 * a);
        Some([(re, im), (re, -im)])
    }
}

pub fn third_order_nonexistence_certificate() -> NonexistenceCertificate {
    let coefficients = [12.0, -6.0, 1.0];
    let [a, b, c] = coefficients;
    NonexistenceCertificate {
        coefficients,
        discriminant: b * b - 4.0 * a * c,
    }
}

/// Damped Newton settings for the scalar stage equations.
const NEWTON_TOL: f64 = 1e-13;
const NEWTON_MAX_ITERS: usize = 50;

/// Result of an empirical order measurement.
#[derive(Debug, Clone)]
pub struct OrderEstimate {
    pub taus: Vec<f64>,
    pub errors: Vec<f64>,
    /// Least-squares slope of `log(error)` against `log(tau)`.
    pub slope: f64,
    pub reference: f64,
}

/// Runs the generic scalar PRK iteration for `u' = f1(u) f2(u)` and returns
/// the value at `t_end`. Every `tau` must divide `t_end` into whole steps.
pub fn integrate_scalar<F1, F2>(t: &PrkTableau, f1: F1, f2: F2, u0: f64, t_end: f64, tau: f64) -> Result<f64, TableauError>
where
    F1: Fn(f64) -> f64,
    F2: Fn(f64) -> f64,
{
    require_valid(t)?;
    let steps = whole_steps(t_end, tau)?;
    let mut u = u0;
    for step in 0..steps {
        u = scalar_step(t, &f1, &f2, u, tau).map_err(|stage| TableauError::NewtonFailure { step, stage })?;
    }
    Ok(u)
}

fn whole_steps(t_end: f64, tau: f64) -> Result<usize, TableauError> {
    if !(tau > 0.0) || !(t_end >= 0.0) {
        return Err(TableauError::StepCount { t_end, tau });
    }
    let n = (t_end / tau).round();
    if ((n * tau) - t_end).abs() > 1e-9 * t_end.max(tau) {
        return Err(TableauError::StepCount { t_end, tau });
    }
    Ok(n as usize)
}

/// One PRK step; on failure returns the 1-based stage index.
fn scalar_step<F1, F2>(t: &PrkTableau, f1: &F1, f2: &F2, u0: f64, tau: f64) -> Result<f64, usize>
where
    F1: Fn(f64) -> f64,
    F2: Fn(f64) -> f64,
{
    let s = t.stages();
    // u[0] = u0, u[i] = stage i
    let mut u = vec![u0; s + 1];
    // flux[j] = f1(D1-average of lagged stages) * f2(D2-average of stages), j = 1..=s
    let mut flux = vec![0.0; s + 1];
    for i in 1..=s {
        let explicit_arg: f64 = (1..=i).map(|k| t.d1[(i - 1, k - 1)] * u[k - 1]).sum();
        let f1_val = f1(explicit_arg);
        let known: f64 = (1..i).map(|j| t.a[(i - 1, j - 1)] * flux[j]).sum();
        let lagged_impl: f64 = (1..i).map(|k| t.d2[(i - 1, k - 1)] * u[k]).sum();
        let aii = t.a[(i - 1, i - 1)];
        let dii = t.d2[(i - 1, i - 1)];
        let g = |x: f64| x - u0 - tau * known - tau * aii * f1_val * f2(lagged_impl + dii * x);
        let x = damped_newton(g, u[i - 1]).ok_or(i)?;
        u[i] = x;
        flux[i] = f1_val * f2(lagged_impl + dii * x);
    }
    Ok(u0 + tau * (1..=s).map(|j| t.b[j - 1] * flux[j]).sum::<f64>())
}

fn damped_newton<G: Fn(f64) -> f64>(g: G, guess: f64) -> Option<f64> {
    let mut x = guess;
    let mut gx = g(x);
    for _ in 0..NEWTON_MAX_ITERS {
        if !gx.is_finite() {
            return None;
        }
        if gx.abs() <= NEWTON_TOL * x.abs().max(1.0) {
            return Some(x);
        }
        let h = 1e-7 * x.abs().max(1.0);
        let slope = (g(x + h) - g(x - h)) / (2.0 * h);
        if slope == 0.0 || !slope.is_finite() {
            return None;
        }
        let step = gx / slope;
        let mut lambda = 1.0;
        loop {
            let trial = x - lambda * step;
            let gt = g(trial);
            if gt.abs() < gx.abs() || lambda < 1e-6 {
                x = trial;
                gx = gt;
                break;
            }
            lambda *= 0.5;
        }
    }
    (gx.abs() <= NEWTON_TOL * x.abs().max(1.0)).then_some(x)
}

/// Classical fourth-order Runge–Kutta used as the reference integrator.
fn rk4<F: Fn(f64) -> f64>(f: F, u0: f64, t_end: f64, steps: usize) -> f64 {
    let h = t_end / steps as f64;
    let mut u = u0;
    for _ in 0..steps {
        let k1 = f(u);
        let k2 = f(u + 0.5 * h * k1);
        let k3 = f(u + 0.5 * h * k2);
        let k4 = f(u + h * k3);
        u += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    u
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Empirical temporal order of a tableau on the scalar product ODE
/// `u' = f1(u) f2(u)`. The reference is classical RK4 with step
/// `min(tau) / 100`.
pub fn measure_scalar_order<F1, F2>(
    t: &PrkTableau,
    f1: F1,
    f2: F2,
    u0: f64,
    t_end: f64,
    taus: &[f64],
) -> Result<OrderEstimate, TableauError>
where
    F1: Fn(f64) -> f64,
    F2: Fn(f64) -> f64,
{
    if taus.len() < 2 {
        return Err(TableauError::TooFewPoints(taus.len()));
    }
    let tau_min = taus.iter().copied().fold(f64::INFINITY, f64::min);
    let ref_steps = (t_end / (tau_min / 100.0)).round().max(1.0) as usize;
    let reference = rk4(|u| f1(u) * f2(u), u0, t_end, ref_steps);
    let mut errors = Vec::with_capacity(taus.len());
    for &tau in taus {
        let u = integrate_scalar(t, &f1, &f2, u0, t_end, tau)?;
        errors.push((u - reference).abs());
    }
    let lx: Vec<f64> = taus.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|x| x.ln()).collect();
    Ok(OrderEstimate {
        taus: taus.to_vec(),
        errors,
        slope: fit_slope(&lx, &ly),
        reference,
    })
}
