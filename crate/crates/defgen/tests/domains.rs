use approx::assert_abs_diff_eq;
use defgen::domains::{
    grid_feasibility_residual, hankel, meancov_pack, uniform_moments, ConvexDomain, Separation,
};
use defgen::linalg::{dot, min_eigenvalue};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn all_domains() -> Vec<ConvexDomain> {
    let shape = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    vec![
        ConvexDomain::simplex(3),
        ConvexDomain::simplex(5),
        ConvexDomain::unit_ball(2),
        ConvexDomain::Ball {
            center: vec![0.5, -1.0, 2.0],
            radius: 1.5,
        },
        ConvexDomain::cube(3),
        ConvexDomain::boxed(vec![0.0, -2.0], vec![1.0, 3.0]).unwrap(),
        ConvexDomain::ellipsoid(vec![1.0, -1.0], shape).unwrap(),
        ConvexDomain::mean_cov(1),
        ConvexDomain::mean_cov(2),
        ConvexDomain::mean_cov(3),
        ConvexDomain::moments(2).unwrap(),
        ConvexDomain::moments(4).unwrap(),
        ConvexDomain::moments(6).unwrap(),
    ]
}

fn outside_point(dom: &ConvexDomain, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base = dom.sample(rng);
    let scale = rng.random_range(0.5..3.0);
    base.iter().map(|x| x + scale * rng.random_range(-1.0..1.0)).collect()
}

/// Projection optimality: `(w - z*)·(z - z*) <= 0` over all of `Z`, checked with one linear maximization.
fn projection_gap(dom: &ConvexDomain, w: &[f64], z: &[f64]) -> f64 {
    let c: Vec<f64> = w.iter().zip(z).map(|(a, b)| a - b).collect();
    let (_, v) = dom.linear_max(&c).unwrap();
    v - dot(&c, z)
}

#[test]
fn project_examples() {
    let s = ConvexDomain::simplex(3);
    let third = 1.0 / 3.0;
    assert_eq!(s.project(&[third, third, third]).unwrap(), vec![third, third, third]);
    assert_eq!(s.project(&[2.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
    let b = ConvexDomain::unit_ball(2);
    let p = b.project(&[3.0, 4.0]).unwrap();
    assert_abs_diff_eq!(p[0], 0.6, epsilon = 1e-15);
    assert_abs_diff_eq!(p[1], 0.8, epsilon = 1e-15);
}

#[test]
fn meancov_projection_of_scaled_identity_matches_search() {
    let dom = ConvexDomain::mean_cov(2);
    let w = meancov_pack(&[0.0, 0.0], &(DMatrix::identity(2, 2) * 2.0));
    let z = dom.project(&w).unwrap();
    let expect = meancov_pack(&[0.0, 0.0], &(DMatrix::identity(2, 2) * 0.5));
    for (a, b) in z.iter().zip(&expect) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-7);
    }
    // Dense random search over members never beats the projection.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let best = defgen::linalg::dist(&z, &w);
    for _ in 0..20_000 {
        let y = dom.sample(&mut rng);
        assert!(defgen::linalg::dist(&y, &w) >= best - 1e-7);
    }
}

#[test]
fn separate_examples() {
    let s = ConvexDomain::simplex(3);
    assert_eq!(s.separate(&[0.5, 0.5, 0.0]).unwrap(), Separation::Member);

    let mc = ConvexDomain::mean_cov(2);
    let w = meancov_pack(&[1.0, 0.0], &DMatrix::zeros(2, 2));
    let block = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(min_eigenvalue(&block) < 0.0);
    match mc.separate(&w).unwrap() {
        Separation::Hyperplane(h) => {
            assert!(h.violation(&w) > 0.0);
            assert_abs_diff_eq!(defgen::linalg::norm(&h.normal), 1.0, epsilon = 1e-12);
        }
        Separation::Member => panic!("expected a hyperplane"),
    }

    let m = ConvexDomain::moments(2).unwrap();
    let w = [1.0, 0.5, 0.2];
    let h = hankel(&w, 2);
    assert_abs_diff_eq!(h.determinant(), -0.05, epsilon = 1e-15);
    match m.separate(&w).unwrap() {
        Separation::Hyperplane(hp) => assert!(hp.violation(&w) > 0.0),
        Separation::Member => panic!("expected a hyperplane"),
    }
    assert_eq!(m.separate(&[1.0, 0.0, 1.0]).unwrap(), Separation::Member);
}

#[test]
fn linear_max_examples() {
    let (z, v) = ConvexDomain::simplex(3).linear_max(&[1.0, 2.0, 3.0]).unwrap();
    assert_eq!((z, v), (vec![0.0, 0.0, 1.0], 3.0));
    let (z, v) = ConvexDomain::unit_ball(2).linear_max(&[3.0, 4.0]).unwrap();
    assert_abs_diff_eq!(z[0], 0.6, epsilon = 1e-15);
    assert_abs_diff_eq!(z[1], 0.8, epsilon = 1e-15);
    assert_abs_diff_eq!(v, 5.0, epsilon = 1e-14);
    let (z, v) = ConvexDomain::cube(2).linear_max(&[-1.0, 2.0]).unwrap();
    assert_eq!((z, v), (vec![-1.0, 1.0], 3.0));
}

#[test]
fn zero_objective_returns_member_with_value_zero() {
    for dom in all_domains() {
        let (z, v) = dom.linear_max(&vec![0.0; dom.dim()]).unwrap();
        assert!(dom.contains(&z), "{dom:?}");
        assert_eq!(v, 0.0);
    }
}

#[test]
fn diameters() {
    for d in 2..7 {
        assert_abs_diff_eq!(ConvexDomain::simplex(d).diameter(), 2f64.sqrt());
        assert_abs_diff_eq!(ConvexDomain::mean_cov(d).diameter(), 8f64.sqrt());
        assert_abs_diff_eq!(ConvexDomain::cube(d).diameter(), 2.0 * (d as f64).sqrt(), epsilon = 1e-14);
    }
    assert_eq!(ConvexDomain::unit_ball(4).diameter(), 2.0);
    for half in 1..4 {
        let m = ConvexDomain::moments(2 * half).unwrap();
        assert_abs_diff_eq!(m.diameter(), 2.0 * (half as f64).sqrt(), epsilon = 1e-12);
    }
}

#[test]
fn diameter_dominates_sampled_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for dom in all_domains() {
        let d = dom.diameter();
        for _ in 0..2000 {
            let a = dom.sample(&mut rng);
            let b = dom.sample(&mut rng);
            assert!(defgen::linalg::dist(&a, &b) <= d + 1e-12, "{dom:?}");
        }
    }
}

#[test]
fn samples_are_members() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for dom in all_domains() {
        for _ in 0..2000 {
            let z = dom.sample(&mut rng);
            assert!(dom.contains(&z), "{dom:?} {z:?}");
        }
    }
}

#[test]
fn dimension_mismatch_is_an_error() {
    let dom = ConvexDomain::simplex(3);
    assert!(dom.project(&[1.0, 0.0]).is_err());
    assert!(dom.separate(&[1.0, 0.0]).is_err());
    assert!(dom.linear_max(&[1.0]).is_err());
}

#[test]
fn moment_membership_agrees_with_grid_feasibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for degree in [2usize, 4] {
        let dom = ConvexDomain::moments(degree).unwrap();
        for _ in 0..200 {
            let mut m = if rng.random_bool(0.5) {
                dom.sample(&mut rng)
            } else {
                uniform_moments(degree)
            };
            for v in m.iter_mut().skip(1) {
                *v += rng.random_range(-0.15..0.15);
            }
            let hankel_member = dom.contains(&m);
            let residual = grid_feasibility_residual(&m, degree, 2001);
            let grid_member = residual <= 1e-7;
            if hankel_member != grid_member {
                assert!(dom.margin(&m).abs() <= 1e-7 || residual <= 1e-5, "{m:?} residual {residual}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_feasible_optimal_and_idempotent(seed in any::<u64>(), which in 0usize..13) {
        let dom = &all_domains()[which];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = outside_point(dom, &mut rng);
        let z = dom.project(&w).unwrap();
        prop_assert!(dom.contains(&z));
        prop_assert!(projection_gap(dom, &w, &z) <= 1e-7, "gap {}", projection_gap(dom, &w, &z));
        let again = dom.project(&z).unwrap();
        prop_assert!(defgen::linalg::dist(&again, &z) <= 1e-9);
    }

    #[test]
    fn separation_is_strict_and_sound(seed in any::<u64>(), which in 0usize..13) {
        let dom = &all_domains()[which];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = outside_point(dom, &mut rng);
        match dom.separate(&w).unwrap() {
            Separation::Member => prop_assert!(dom.margin(&w) >= -1e-9),
            Separation::Hyperplane(h) => {
                prop_assert!(h.violation(&w) > 0.0);
                prop_assert!((defgen::linalg::norm(&h.normal) - 1.0).abs() < 1e-12);
                let (_, top) = dom.linear_max(&h.normal).unwrap();
                prop_assert!(top <= h.offset + 1e-9, "top {} offset {}", top, h.offset);
                let z = dom.project(&w).unwrap();
                prop_assert!(h.violation(&z) <= 1e-9);
                for _ in 0..200 {
                    prop_assert!(h.violation(&dom.sample(&mut rng)) <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn linear_max_dominates_samples(seed in any::<u64>(), which in 0usize..13) {
        let dom = &all_domains()[which];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = (0..dom.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (z, v) = dom.linear_max(&c).unwrap();
        prop_assert!(dom.contains(&z));
        prop_assert!((dot(&c, &z) - v).abs() < 1e-12);
        for _ in 0..500 {
            prop_assert!(v >= dot(&c, &dom.sample(&mut rng)) - 1e-6);
        }
    }
}
