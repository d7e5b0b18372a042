//! Absolute stability of PRK tableaux through their additive IMEX embedding.
//!
//! On the linear test equation `u' = (λ0 + λ1 + λ2) u`, with `λ0` taken
//! implicitly and `λ1`, `λ2` explicitly through `D1` and `D2`, one step of a
//! PRK scheme equals one step of an `(s+1)`-stage additive IMEX-RK method.
//! Its amplification factor is
//! `R = 1 + (z0 b̂ + z1 b1 + z2 b2)ᵀ (I - z0 Â - z1 A1 - z2 A2)⁻¹ 1`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::StabilityError;
use crate::tableau::PrkTableau;

/// Slack on `|R| <= 1` when classifying points.
pub const INSIDE_TOL: f64 = 1e-12;

/// Relative pivot size under which the stage matrix is declared singular.
pub const SINGULAR_PIVOT: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveEmbedding {
    pub a_hat: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub b_hat: DVector<f64>,
    pub b1: DVector<f64>,
    pub b2: DVector<f64>,
}

impl AdditiveEmbedding {
    pub fn stages(&self) -> usize {
        self.b_hat.len()
    }
}

/// Builds the `(s+1)`-stage embedding.
///
/// The implicit tableau has a zero first row and column with `A·D2` below
/// right; the explicit ones have a zero first row and last column with
/// `A·D^(l)` below left.
pub fn embed(t: &PrkTableau) -> AdditiveEmbedding {
    let s = t.stages();
    let a = t.a();
    let ad = a * t.d2();
    let ad1 = a * t.d1();
    let bd = t.d2().transpose() * t.b();
    let bd1 = t.d1().transpose() * t.b();

    let mut a_hat = DMatrix::zeros(s + 1, s + 1);
    a_hat.view_mut((1, 1), (s, s)).copy_from(&ad);
    let mut a1 = DMatrix::zeros(s + 1, s + 1);
    a1.view_mut((1, 0), (s, s)).copy_from(&ad1);
    let mut a2 = DMatrix::zeros(s + 1, s + 1);
    a2.view_mut((1, 0), (s, s)).copy_from(&ad);

    let mut b_hat = DVector::zeros(s + 1);
    b_hat.rows_mut(1, s).copy_from(&bd);
    let mut b1 = DVector::zeros(s + 1);
    b1.rows_mut(0, s).copy_from(&bd1);
    let mut b2 = DVector::zeros(s + 1);
    b2.rows_mut(0, s).copy_from(&bd);

    AdditiveEmbedding {
        a_hat,
        a1,
        a2,
        b_hat,
        b1,
        b2,
    }
}

/// Solves `m x = rhs` in place by partial-pivot LU; `None` if a pivot is
/// negligible relative to the largest entry.
fn complex_solve(m: &mut [Complex64], n: usize, rhs: &mut [Complex64]) -> Option<()> {
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.norm()));
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    for k in 0..n {
        let mut piv = k;
        let mut best = m[k * n + k].norm();
        for i in (k + 1)..n {
            let v = m[i * n + k].norm();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best <= SINGULAR_PIVOT * scale {
            return None;
        }
        if piv != k {
            for j in 0..n {
                m.swap(k * n + j, piv * n + j);
            }
            rhs.swap(k, piv);
        }
        let p = m[k * n + k];
        for i in (k + 1)..n {
            let f = m[i * n + k] / p;
            if f == Complex64::new(0.0, 0.0) {
                continue;
            }
            for j in k..n {
                let u = m[k * n + j];
                m[i * n + j] -= f * u;
            }
            let r = rhs[k];
            rhs[i] -= f * r;
        }
    }
    for i in (0..n).rev() {
        let mut acc = rhs[i];
        for j in (i + 1)..n {
            acc -= m[i * n + j] * rhs[j];
        }
        rhs[i] = acc / m[i * n + i];
    }
    Some(())
}

/// `R(z0, z1, z2)` for a prepared embedding.
pub fn stability_function_embedded(
    e: &AdditiveEmbedding,
    z0: Complex64,
    z1: Complex64,
    z2: Complex64,
) -> Result<Complex64, StabilityError> {
    let n = e.stages();
    let mut m = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            m[i * n + j] = Complex64::new(delta, 0.0) - z0 * e.a_hat[(i, j)] - z1 * e.a1[(i, j)] - z2 * e.a2[(i, j)];
        }
    }
    let mut x = vec![Complex64::new(1.0, 0.0); n];
    complex_solve(&mut m, n, &mut x).ok_or(StabilityError::Singular { z0, z1, z2 })?;
    let mut r = Complex64::new(1.0, 0.0);
    for i in 0..n {
        r += (z0 * e.b_hat[i] + z1 * e.b1[i] + z2 * e.b2[i]) * x[i];
    }
    Ok(r)
}

pub fn stability_function(
    t: &PrkTableau,
    z0: Complex64,
    z1: Complex64,
    z2: Complex64,
) -> Result<Complex64, StabilityError> {
    stability_function_embedded(&embed(t), z0, z1, z2)
}

/// How a point `z` of the plotting plane maps to `(z1, z2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneSlice {
    /// `z1 = z`, `z2 = 0`.
    #[default]
    Z1,
    /// `z1 = 0`, `z2 = z`.
    Z2,
    /// `z1 = z2 = z`.
    Both,
}

impl PlaneSlice {
    pub fn map(self, z: Complex64) -> (Complex64, Complex64) {
        let zero = Complex64::new(0.0, 0.0);
        match self {
            PlaneSlice::Z1 => (z, zero),
            PlaneSlice::Z2 => (zero, z),
            PlaneSlice::Both => (z, z),
        }
    }
}

/// Sampling window and stiff-ray description for a region plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
    pub nx: usize,
    pub ny: usize,
    /// Wedge half-angle of the implicit part, in radians.
    pub alpha: f64,
    /// Ordinates `y` of the boundary points `z0 = -|y|/tan(α) + iy`.
    pub y_samples: Vec<f64>,
    /// Extra far-field stiff sample `z0 = -far_field`, if any.
    #[serde(default)]
    pub far_field: Option<f64>,
    #[serde(default)]
    pub slice: PlaneSlice,
}

/// 129 log-spaced magnitudes in `[1e-3, 1e3]`, both signs, and zero.
pub fn default_y_samples() -> Vec<f64> {
    let count = 129;
    let mut ys = vec![0.0];
    for k in 0..count {
        let y = 10f64.powf(-3.0 + 6.0 * k as f64 / (count - 1) as f64);
        ys.push(y);
        ys.push(-y);
    }
    ys
}

impl RegionSpec {
    /// Window `[-6, 2] x [-4, 4]` at 400 x 400, `α = π/2`, slice `z1 = z`.
    pub fn figure_preset() -> Self {
        Self {
            re_min: -6.0,
            re_max: 2.0,
            im_min: -4.0,
            im_max: 4.0,
            nx: 400,
            ny: 400,
            alpha: FRAC_PI_2,
            y_samples: default_y_samples(),
            far_field: Some(1e6),
            slice: PlaneSlice::Z1,
        }
    }

    fn axis(lo: f64, hi: f64, n: usize, k: usize) -> f64 {
        if n == 1 {
            return 0.5 * (lo + hi);
        }
        // symmetric about the window centre so conjugate points coincide exactly
        let center = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        center + half * (2.0 * k as f64 - (n - 1) as f64) / (n - 1) as f64
    }

    pub fn re(&self, i: usize) -> f64 {
        Self::axis(self.re_min, self.re_max, self.nx, i)
    }

    pub fn im(&self, j: usize) -> f64 {
        Self::axis(self.im_min, self.im_max, self.ny, j)
    }

    /// Stiff samples on the boundary of the wedge `A_α`.
    pub fn z0_samples(&self) -> Vec<Complex64> {
        let mut out: Vec<Complex64> = self
            .y_samples
            .iter()
            .map(|&y| {
                if (self.alpha - FRAC_PI_2).abs() < 1e-15 {
                    Complex64::new(0.0, y)
                } else {
                    Complex64::new(-y.abs() / self.alpha.tan(), y)
                }
            })
            .collect();
        if let Some(rho) = self.far_field {
            out.push(Complex64::new(-rho, 0.0));
        }
        out
    }

    fn validate(&self) -> Result<(), StabilityError> {
        if self.y_samples.is_empty() {
            return Err(StabilityError::NoSamples);
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(StabilityError::Grid("resolution must be positive".into()));
        }
        if !(self.re_min < self.re_max) || !(self.im_min < self.im_max) {
            return Err(StabilityError::Grid("window bounds must be increasing".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= FRAC_PI_2) {
            return Err(StabilityError::Grid("alpha must lie in (0, pi/2]".into()));
        }
        Ok(())
    }
}

/// Sampled region; point `(i, j)` (real index `i`) is stored at `j * nx + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSample {
    pub spec: RegionSpec,
    pub mask: Vec<bool>,
    pub max_abs_r: Vec<f64>,
    /// Points where some stiff sample hit a singular stage matrix.
    pub singular: Vec<bool>,
}

impl RegionSample {
    pub fn inside(&self, i: usize, j: usize) -> bool {
        self.mask[j * self.spec.nx + i]
    }

    pub fn inside_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn sample_region(t: &PrkTableau, spec: &RegionSpec) -> Result<RegionSample, StabilityError> {
    spec.validate()?;
    let e = embed(t);
    let z0s = spec.z0_samples();
    let points: Vec<(f64, bool, bool)> = (0..spec.nx * spec.ny)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k % spec.nx, k / spec.nx);
            let (z1, z2) = spec.slice.map(Complex64::new(spec.re(i), spec.im(j)));
            let mut max_abs = 0.0f64;
            let mut singular = false;
            for &z0 in &z0s {
                match stability_function_embedded(&e, z0, z1, z2) {
                    Ok(r) => {
                        let a = r.norm();
                        max_abs = if a.is_nan() { f64::INFINITY } else { max_abs.max(a) };
                    }
                    Err(_) => singular = true,
                }
            }
            let inside = !singular && max_abs <= 1.0 + INSIDE_TOL;
            (max_abs, inside, singular)
        })
        .collect();
    Ok(RegionSample {
        spec: spec.clone(),
        mask: points.iter().map(|p| p.1).collect(),
        max_abs_r: points.iter().map(|p| p.0).collect(),
        singular: points.iter().map(|p| p.2).collect(),
    })
}
