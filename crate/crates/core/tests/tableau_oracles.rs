mod common;

use num_rational::Ratio;
use proptest::prelude::*;

use unitflow::tableau::{
    certify, measure_scalar_order, order_condition_residuals, q_matrix, r_matrix, satisfied_order,
    third_order_nonexistence_certificate, PSD_TOL,
};
use unitflow::{prk2_tableau, PrkTableau};

type Q = Ratio<i64>;

fn q(n: i64, d: i64) -> Q {
    Q::new(n, d)
}

fn to_f64(x: Q) -> f64 {
    *x.numer() as f64 / *x.denom() as f64
}

/// Exact PRK2 data: A, D2, b (D1 = I).
fn prk2_exact() -> ([[Q; 2]; 2], [[Q; 2]; 2], [Q; 2]) {
    let a = [[q(1, 1), q(0, 1)], [q(0, 1), q(1, 2)]];
    let d = [[q(1, 1), q(0, 1)], [q(-1, 1), q(2, 1)]];
    let b = [q(1, 2), q(1, 2)];
    (a, d, b)
}

fn mul2(x: &[[Q; 2]; 2], y: &[[Q; 2]; 2]) -> [[Q; 2]; 2] {
    let mut out = [[q(0, 1); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                out[i][j] += x[i][k] * y[k][j];
            }
        }
    }
    out
}

fn exact_q_r() -> ([[Q; 2]; 2], [[Q; 2]; 2]) {
    let (a, d, b) = prk2_exact();
    let bmat = [[b[0], q(0, 1)], [q(0, 1), b[1]]];
    let bda = mul2(&mul2(&bmat, &d), &a);
    let j = [[q(0, 1), q(0, 1)], [q(1, 1), q(0, 1)]];
    let bja = mul2(&mul2(&bmat, &j), &a);
    let mut qm = [[q(0, 1); 2]; 2];
    let mut rm = [[q(0, 1); 2]; 2];
    for i in 0..2 {
        for k in 0..2 {
            qm[i][k] = bda[i][k] + bda[k][i] - b[i] * b[k];
            rm[i][k] = b[i] * b[k] - bja[i][k] - bja[k][i];
        }
    }
    (qm, rm)
}

/// Eigenvalues of a symmetric 2x2 rational matrix with zero determinant.
fn singular_eigs(m: &[[Q; 2]; 2]) -> (Q, Q) {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    assert_eq!(det, q(0, 1));
    (q(0, 1), m[0][0] + m[1][1])
}

#[test]
fn prk2_certificates_match_rational_oracle() {
    let (qe, re) = exact_q_r();
    assert_eq!(qe, [[q(3, 4), q(-3, 4)], [q(-3, 4), q(3, 4)]]);
    assert_eq!(re, [[q(1, 4), q(-1, 4)], [q(-1, 4), q(1, 4)]]);
    assert_eq!(singular_eigs(&qe), (q(0, 1), q(3, 2)));
    assert_eq!(singular_eigs(&re), (q(0, 1), q(1, 2)));

    let t = prk2_tableau();
    let (qf, rf) = (q_matrix(&t), r_matrix(&t));
    for i in 0..2 {
        for k in 0..2 {
            assert!((qf[(i, k)] - to_f64(qe[i][k])).abs() <= 1e-14);
            assert!((rf[(i, k)] - to_f64(re[i][k])).abs() <= 1e-14);
        }
    }
    let report = certify(&t, PSD_TOL).unwrap();
    assert!(report.satisfies_theorem);
    assert!((report.q_eigenvalues[0]).abs() <= 1e-14 && (report.q_eigenvalues[1] - 1.5).abs() <= 1e-14);
    assert!((report.r_eigenvalues[0]).abs() <= 1e-14 && (report.r_eigenvalues[1] - 0.5).abs() <= 1e-14);
}

#[test]
fn prk2_order_conditions_match_rational_oracle() {
    let (a, d, b) = prk2_exact();
    let c = [a[0][0] + a[0][1], a[1][0] + a[1][1]];
    let lag = [q(0, 1), c[0]]; // J c with D1 = I
    let cur = [d[0][0] * c[0] + d[0][1] * c[1], d[1][0] * c[0] + d[1][1] * c[1]];
    let dot = |x: [Q; 2], y: [Q; 2]| x[0] * y[0] + x[1] * y[1];
    let av = |v: [Q; 2]| [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]];
    let dv = |v: [Q; 2]| [d[0][0] * v[0] + d[0][1] * v[1], d[1][0] * v[0] + d[1][1] * v[1]];
    let jv = |v: [Q; 2]| [q(0, 1), v[0]];

    assert_eq!(b[0] + b[1], q(1, 1));
    assert_eq!(dot(b, lag), q(1, 2));
    assert_eq!(dot(b, cur), q(1, 2));
    let third = [
        dot(b, jv(av(lag))) - q(1, 6),
        dot(b, jv(av(cur))) - q(1, 6),
        dot(b, dv(av(lag))) - q(1, 6),
        dot(b, dv(av(cur))) - q(1, 6),
        dot(b, [lag[0] * lag[0], lag[1] * lag[1]]) - q(1, 3),
        dot(b, [lag[0] * cur[0], lag[1] * cur[1]]) - q(1, 3),
        dot(b, [cur[0] * cur[0], cur[1] * cur[1]]) - q(1, 3),
    ];

    let res = order_condition_residuals(&prk2_tableau(), 3).unwrap();
    assert_eq!(res.len(), 10);
    for r in res.iter().filter(|r| r.order < 3) {
        assert!(r.residual.abs() <= 1e-13, "{}: {}", r.name, r.residual);
    }
    let third_f: Vec<f64> = res.iter().filter(|r| r.order == 3).map(|r| r.residual).collect();
    for (x, e) in third_f.iter().zip(third) {
        assert!((x - to_f64(e)).abs() <= 1e-15, "{x} vs {e}");
    }
    assert!(third_f.iter().any(|r| r.abs() >= 0.1));
    assert_eq!(satisfied_order(&prk2_tableau()).unwrap(), 2);
}

#[test]
fn nonexistence_quadratic_has_negative_discriminant() {
    let cert = third_order_nonexistence_certificate();
    assert_eq!(cert.coefficients, [12.0, -6.0, 1.0]);
    assert_eq!(cert.discriminant, -12.0);
    let [(re, im), (re2, im2)] = cert.complex_roots().unwrap();
    assert_eq!(re, 0.25);
    assert_eq!(re2, 0.25);
    assert!((im - 12f64.sqrt() / 24.0).abs() < 1e-15);
    assert_eq!(im2, -im);
}

#[test]
fn no_three_stage_third_order_tableau_passes_certificate() {
    let scan = common::scan_three_stage();
    eprintln!("{} of {} seeds reached a third-order tableau; {} certified", scan.converged, scan.seeds, scan.certified);
    assert_eq!(scan.certified, 0, "feasible third-order tableau: {:?}", scan.first_certified);
    assert!(scan.converged >= 10, "only {} seeds reached a third-order tableau", scan.converged);
}

#[test]
fn prk2_scalar_order_is_two() {
    let est = measure_scalar_order(
        &prk2_tableau(),
        |u: f64| u.cos(),
        |u: f64| u,
        1.0,
        1.0,
        &[0.1, 0.05, 0.025, 0.0125, 0.00625],
    )
    .unwrap();
    assert!((est.slope - 2.0).abs() <= 0.15, "slope {}", est.slope);
}

fn lower(s: usize, vals: &[f64]) -> Vec<Vec<f64>> {
    let mut k = 0;
    (0..s)
        .map(|i| {
            (0..s)
                .map(|j| {
                    if j <= i {
                        k += 1;
                        vals[k - 1]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

fn averaging(s: usize, vals: &[f64]) -> Vec<Vec<f64>> {
    let mut m = lower(s, vals);
    for row in m.iter_mut() {
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    m
}

proptest! {
    #[test]
    fn json_round_trip_is_exact(
        s in 1usize..4,
        a in prop::collection::vec(0.1f64..2.0, 6),
        d in prop::collection::vec(0.1f64..2.0, 6),
        b in prop::collection::vec(0.0f64..1.0, 3),
    ) {
        let t = PrkTableau::from_rows(&lower(s, &a), &averaging(s, &d), &averaging(s, &d), &b[..s]).unwrap();
        let back = PrkTableau::from_json(&t.to_json()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn certificates_are_symmetric(
        a in prop::collection::vec(0.1f64..2.0, 3),
        d in prop::collection::vec(0.1f64..2.0, 3),
        b in prop::collection::vec(0.0f64..1.0, 2),
    ) {
        let t = PrkTableau::with_identity_d1(&lower(2, &a), &averaging(2, &d), &b).unwrap();
        let (qm, rm) = (q_matrix(&t), r_matrix(&t));
        prop_assert_eq!(qm.transpose(), qm);
        prop_assert_eq!(rm.transpose(), rm);
    }
}
