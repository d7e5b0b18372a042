mod common;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::direct_step;
use unitflow::integrators::alternative_coefficients;
use unitflow::stability::{sample_region, stability_function, PlaneSlice, RegionSpec};
use unitflow::{prk2_tableau, PrkTableau};

fn random_triple(rng: &mut ChaCha8Rng) -> [Complex64; 3] {
    let mut z = || Complex64::new(rng.random_range(-5.0..1.0), rng.random_range(-3.0..3.0));
    [z(), z(), z()]
}

#[test]
fn stability_function_matches_direct_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t = prk2_tableau();
    for _ in 0..100 {
        let [z0, z1, z2] = random_triple(&mut rng);
        let r = stability_function(&t, z0, z1, z2).unwrap();
        let oracle = direct_step(&t, z0, z1, z2);
        assert!(
            (r - oracle).norm() <= 1e-13 * oracle.norm().max(1.0),
            "z = ({z0}, {z1}, {z2}): {r} vs {oracle}"
        );
    }
}

#[test]
fn stability_function_matches_direct_step_for_general_tableau() {
    let t = PrkTableau::from_rows(
        &[vec![0.4, 0.0, 0.0], vec![0.3, 0.5, 0.0], vec![-0.2, 0.6, 0.7]],
        &[vec![1.0, 0.0, 0.0], vec![0.25, 0.75, 0.0], vec![0.1, 0.2, 0.7]],
        &[vec![1.0, 0.0, 0.0], vec![-0.5, 1.5, 0.0], vec![0.3, -0.3, 1.0]],
        &[0.2, 0.3, 0.5],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let [z0, z1, z2] = random_triple(&mut rng);
        let r = stability_function(&t, z0, z1, z2).unwrap();
        let oracle = direct_step(&t, z0, z1, z2);
        assert!((r - oracle).norm() <= 1e-13 * oracle.norm().max(1.0));
    }
}

#[test]
fn origin_is_exactly_one() {
    let zero = Complex64::new(0.0, 0.0);
    assert_eq!(stability_function(&prk2_tableau(), zero, zero, zero).unwrap(), Complex64::new(1.0, 0.0));
}

#[test]
fn conjugate_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let t = prk2_tableau();
    for _ in 0..50 {
        let [z0, z1, z2] = random_triple(&mut rng);
        let r = stability_function(&t, z0, z1, z2).unwrap();
        let rc = stability_function(&t, z0.conj(), z1.conj(), z2.conj()).unwrap();
        assert!((r.conj() - rc).norm() <= 1e-14 * r.norm().max(1.0));
    }

    let mut spec = RegionSpec::figure_preset();
    spec.nx = 41;
    spec.ny = 40;
    let region = sample_region(&t, &spec).unwrap();
    for j in 0..spec.ny {
        assert_eq!(spec.im(j), -spec.im(spec.ny - 1 - j));
        for i in 0..spec.nx {
            assert_eq!(region.inside(i, j), region.inside(i, spec.ny - 1 - j), "({i}, {j})");
        }
    }
}

#[test]
fn more_stiff_samples_never_grow_the_region() {
    let t = prk2_tableau();
    let mut coarse = RegionSpec::figure_preset();
    coarse.nx = 60;
    coarse.ny = 60;
    coarse.far_field = None;
    coarse.y_samples = vec![0.0, 1.0, -1.0, 10.0, -10.0];
    let mut fine = coarse.clone();
    fine.y_samples.extend([0.1, -0.1, 3.0, -3.0, 100.0, -100.0]);
    fine.far_field = Some(1e6);
    let a = sample_region(&t, &coarse).unwrap();
    let b = sample_region(&t, &fine).unwrap();
    for k in 0..a.mask.len() {
        assert!(!b.mask[k] || a.mask[k], "point {k} entered the region");
        assert!(b.max_abs_r[k] >= a.max_abs_r[k]);
    }
    assert!(b.inside_count() <= a.inside_count());
}

#[test]
fn slices_agree_where_they_coincide() {
    let t = prk2_tableau();
    let z0 = Complex64::new(-2.0, 1.0);
    let z = Complex64::new(-0.5, 0.25);
    let (z1, z2) = PlaneSlice::Both.map(z);
    assert_eq!(z1, z2);
    let r = stability_function(&t, z0, z1, z2).unwrap();
    assert!((r - direct_step(&t, z0, z, z)).norm() <= 1e-14);
}

#[test]
fn alternative_coefficients_of_prk2() {
    let (a_hat, b_hat, g) = alternative_coefficients(&prk2_tableau()).unwrap();
    assert_eq!(a_hat, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -0.5, 1.0]));
    assert_eq!(b_hat, vec![0.0, 1.0]);
    assert!((g - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.5])).norm() < 1e-15);
}
