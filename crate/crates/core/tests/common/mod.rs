#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unitflow::tableau::{certify, order_condition_residuals, satisfied_order};
use unitflow::{Grid, PrkTableau};

pub fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `h^(d-2) Σ_edges w_e (u_a - u_b)(v_a - v_b)`, with `w_e` halved once for
/// every boundary face the edge lies in.
pub fn edge_form(u: &[f64], v: &[f64], grid: &Grid) -> f64 {
    let n = grid.nodes_per_axis();
    let d = grid.dim();
    let mut acc = 0.0;
    for node in 0..grid.n_nodes() {
        let idx = grid.multi_index(node);
        for a in 0..d {
            if idx[a] + 1 == n {
                continue;
            }
            let mut nb = idx;
            nb[a] += 1;
            let other = grid.node_index(nb);
            let w: f64 = (0..d)
                .filter(|&b| b != a && (idx[b] == 0 || idx[b] == n - 1))
                .map(|_| 0.5)
                .product();
            acc += w * (u[node] - u[other]) * (v[node] - v[other]);
        }
    }
    grid.h().powi(d as i32 - 2) * acc
}

/// Three-stage, `D1 = I` tableau from its 11 free coefficients:
/// `A` (lower triangle), the strictly lower part of `D2` and `(b2, b3)`.
pub fn three_stage(x: &[f64]) -> Option<PrkTableau> {
    let a = vec![vec![x[0], 0.0, 0.0], vec![x[1], x[2], 0.0], vec![x[3], x[4], x[5]]];
    let d = vec![
        vec![1.0, 0.0, 0.0],
        vec![x[6], 1.0 - x[6], 0.0],
        vec![x[7], x[8], 1.0 - x[7] - x[8]],
    ];
    let b = [1.0 - x[9] - x[10], x[9], x[10]];
    let mut t = PrkTableau::with_identity_d1(&a, &d, &b).ok()?;
    t.set_implicit(false);
    Some(t)
}

/// `None` once the coefficients are so large that unit row sums are lost.
pub fn order_residuals(x: &[f64]) -> Option<DVector<f64>> {
    let r = order_condition_residuals(&three_stage(x)?, 3).ok()?;
    Some(DVector::from_iterator(r.len() - 1, r.iter().skip(1).map(|r| r.residual)))
}

/// Levenberg–Marquardt on the order-2/3 equations in all 11 coefficients.
pub fn solve_order_conditions(mut x: Vec<f64>) -> Option<Vec<f64>> {
    let free = 11;
    let mut mu = 1e-3;
    let mut r = order_residuals(&x)?;
    for _ in 0..300 {
        let norm = r.norm();
        if norm < 1e-13 {
            return Some(x);
        }
        let mut jac = DMatrix::zeros(r.len(), free);
        for k in 0..free {
            let h = 1e-7 * x[k].abs().max(1.0);
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let col = (order_residuals(&xp)? - order_residuals(&xm)?) / (2.0 * h);
            jac.set_column(k, &col);
        }
        let jt = jac.transpose();
        let mut improved = false;
        for _ in 0..20 {
            let lhs = &jt * &jac + DMatrix::identity(free, free) * mu;
            let step = lhs.lu().solve(&(-(&jt * &r)))?;
            let mut trial = x.clone();
            for k in 0..free {
                trial[k] += step[k];
            }
            let Some(rt) = order_residuals(&trial) else {
                mu *= 10.0;
                continue;
            };
            if rt.norm() < norm {
                x = trial;
                r = rt;
                mu = (mu * 0.3).max(1e-12);
                improved = true;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            return None;
        }
    }
    (r.norm() < 1e-13).then_some(x)
}

pub struct ScanResult {
    pub seeds: usize,
    pub converged: usize,
    pub certified: usize,
    pub first_certified: Option<Vec<f64>>,
}

/// Solves the third-order conditions from a grid of `(b2, b3)` starting
/// points and counts how many solutions pass the dissipation certificate.
pub fn scan_three_stage() -> ScanResult {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut out = ScanResult {
        seeds: 0,
        converged: 0,
        certified: 0,
        first_certified: None,
    };
    for i in 0..=20 {
        for j in 0..=(20 - i) {
            out.seeds += 1;
            let (b2, b3) = (0.05 * i as f64, 0.05 * j as f64);
            let mut x: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            x.extend([b2, b3]);
            if let Some(sol) = solve_order_conditions(x) {
                let t = three_stage(&sol).unwrap();
                if satisfied_order(&t).unwrap() < 3 {
                    continue;
                }
                out.converged += 1;
                if certify(&t, 1e-8).unwrap().satisfies_theorem {
                    out.certified += 1;
                    out.first_certified.get_or_insert(sol);
                }
            }
        }
    }
    out
}

/// One PRK step on `u' = (λ0 + λ1 + λ2) u` from `u^n = 1`, solving the `s`
/// stage equations directly:
/// `u = 1 + A (z0 D2 u + z1 D1 û + z2 D2 û)` with `û = (1, u_1, ..., u_{s-1})`.
pub fn direct_step(t: &PrkTableau, z0: Complex64, z1: Complex64, z2: Complex64) -> Complex64 {
    let s = t.stages();
    let c = |x: f64| Complex64::new(x, 0.0);
    let a = t.a().map(c);
    let d1 = t.d1().map(c);
    let d2 = t.d2().map(c);
    // û = e0 + J u
    let mut j = DMatrix::<Complex64>::zeros(s, s);
    for i in 1..s {
        j[(i, i - 1)] = c(1.0);
    }
    let mut e0 = DVector::<Complex64>::zeros(s);
    e0[0] = c(1.0);
    let ones = DVector::from_element(s, c(1.0));
    // F(u) = G u + g
    let g_mat = &d2 * z0 + (&d1 * z1 + &d2 * z2) * &j;
    let g_vec = (&d1 * z1 + &d2 * z2) * &e0;
    let lhs = DMatrix::identity(s, s) - &a * &g_mat;
    let rhs = &ones + &a * &g_vec;
    let u = lhs.lu().solve(&rhs).expect("nonsingular stage system");
    let f = g_mat * &u + g_vec;
    let b = t.b().map(c);
    c(1.0) + b.dot(&f)
}

