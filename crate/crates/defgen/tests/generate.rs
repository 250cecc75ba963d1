use approx::assert_abs_diff_eq;
use defgen::calibrate::EngineConfig;
use defgen::domains::{meancov_pack, ConvexDomain};
use defgen::generate::{
    backfit_meancov, backfit_univariate, oigap, oigap_bound, oigap_bound_linear_multiclass,
    oigap_bound_meancov, oigap_multicalibration, AtomicMeasure, Distinguisher, Generator, Outcome,
    StatisticMap,
};
use defgen::kernels::{MatrixKernel, RkhsFunction, ScalarKernel};
use defgen::transcript::Record;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_moment_error(mu: &AtomicMeasure, map: &StatisticMap, target: &[f64]) -> f64 {
    mu.expected_statistic(map)
        .unwrap()
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn vec_of(y: &Outcome) -> Vec<f64> {
    match y {
        Outcome::Vector(v) => v.clone(),
        Outcome::Label(_) => panic!("expected a vector outcome"),
    }
}

#[test]
fn meancov_examples() {
    let e1 = [1.0, 0.0];
    let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let mu = backfit_meancov(&e1, &q).unwrap();
    assert_eq!(mu.atoms, vec![Outcome::Vector(e1.to_vec())]);

    for d in 1..5 {
        let q = DMatrix::identity(d, d) / d as f64;
        let mu = backfit_meancov(&vec![0.0; d], &q).unwrap();
        assert_eq!(mu.len(), 2 * d);
        for (y, w) in mu.atoms.iter().zip(&mu.weights) {
            assert_abs_diff_eq!(*w, 1.0 / (2 * d) as f64, epsilon = 1e-14);
            let v = vec_of(y);
            assert_abs_diff_eq!(defgen::linalg::norm(&v), 1.0, epsilon = 1e-14);
            assert_eq!(v.iter().filter(|x| x.abs() > 1e-12).count(), 1);
        }
    }

    let mu = backfit_meancov(&[0.0, 0.0], &DMatrix::zeros(2, 2)).unwrap();
    assert_eq!(mu.atoms, vec![Outcome::Vector(vec![0.0, 0.0])]);
    assert_eq!(mu.weights, vec![1.0]);
}

#[test]
fn meancov_generation_example_quarter_masses() {
    let map = StatisticMap::MeanOuter { d: 2 };
    let p = meancov_pack(&[0.0, 0.0], &(DMatrix::identity(2, 2) * 0.5));
    let mu = map.backfit(&p).unwrap();
    let mut mean = DVector::zeros(2);
    let mut second = DMatrix::zeros(2, 2);
    for (y, w) in mu.atoms.iter().zip(&mu.weights) {
        assert_abs_diff_eq!(*w, 0.25, epsilon = 1e-14);
        let v = DVector::from_vec(vec_of(y));
        mean += &v * *w;
        second += &v * v.transpose() * *w;
    }
    assert!(mean.norm() < 1e-14);
    assert!((second - DMatrix::identity(2, 2) * 0.5).amax() < 1e-14);
}

#[test]
fn meancov_rejects_nonmembers() {
    assert!(backfit_meancov(&[1.0, 0.0], &DMatrix::zeros(2, 2)).is_err());
    assert!(backfit_meancov(&[0.0, 0.0], &(DMatrix::identity(2, 2))).is_err());
}

#[test]
fn univariate_examples() {
    let mu = backfit_univariate(&[1.0; 5]).unwrap();
    let ones: f64 = mu
        .atoms
        .iter()
        .zip(&mu.weights)
        .filter(|(y, _)| (vec_of(y)[0] - 1.0).abs() < 1e-6)
        .map(|(_, w)| w)
        .sum();
    assert_abs_diff_eq!(ones, 1.0, epsilon = 1e-8);

    let mu = backfit_univariate(&[1.0, 0.0, 1.0]).unwrap();
    let mut pts: Vec<(f64, f64)> = mu.atoms.iter().map(|y| vec_of(y)[0]).zip(mu.weights.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert_eq!(pts.len(), 2);
    assert_abs_diff_eq!(pts[0].0, -1.0, epsilon = 1e-9);
    assert_abs_diff_eq!(pts[1].0, 1.0, epsilon = 1e-9);
    assert_abs_diff_eq!(pts[0].1, 0.5, epsilon = 1e-9);

    // Uniform-measure moments: the three-point Gauss–Legendre rule, computed independently.
    let m = [1.0, 0.0, 1.0 / 3.0, 0.0, 1.0 / 5.0];
    let r = (3.0f64 / 5.0).sqrt();
    let gauss = [(-r, 5.0 / 18.0), (0.0, 4.0 / 9.0), (r, 5.0 / 18.0)];
    for (k, mk) in m.iter().enumerate() {
        let s: f64 = gauss.iter().map(|(y, w)| w * y.powi(k as i32)).sum();
        assert_abs_diff_eq!(s, *mk, epsilon = 1e-15);
    }
    let mu = backfit_univariate(&m).unwrap();
    let mut pts: Vec<(f64, f64)> = mu.atoms.iter().map(|y| vec_of(y)[0]).zip(mu.weights.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert_eq!(pts.len(), 3);
    for ((y, w), (gy, gw)) in pts.iter().zip(&gauss) {
        assert_abs_diff_eq!(y, gy, epsilon = 1e-8);
        assert_abs_diff_eq!(w, gw, epsilon = 1e-8);
    }
}

#[test]
fn univariate_rejects_nonmembers() {
    assert!(backfit_univariate(&[1.0, 0.5, 0.2]).is_err());
    assert!(backfit_univariate(&[1.0, 0.0, 1.5]).is_err());
}

#[test]
fn random_members_backfit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for d in 1..=4 {
        let map = StatisticMap::MeanOuter { d };
        let dom = map.domain();
        for _ in 0..500 {
            let p = dom.sample(&mut rng);
            let mu = map.backfit(&p).unwrap();
            assert!(mu.len() <= 2 * d + 1);
            assert!(mu.weights.iter().all(|w| *w >= 0.0));
            assert!(mu.atoms.iter().all(|y| map.contains(y)));
            assert!(max_moment_error(&mu, &map, &p) <= 1e-8);
        }
    }
    for half in 1..=4 {
        let map = StatisticMap::PowerMoments { degree: 2 * half };
        let dom = map.domain();
        for _ in 0..500 {
            let p = dom.sample(&mut rng);
            let mu = map.backfit(&p).unwrap_or_else(|e| panic!("{p:?}: {e}"));
            assert!(mu.len() <= 2 * half + 1);
            assert!(mu.weights.iter().all(|w| *w >= 0.0));
            assert!(mu.atoms.iter().all(|y| map.contains(y)));
            assert!(max_moment_error(&mu, &map, &p) <= 1e-8);
        }
    }
}

#[test]
fn one_hot_and_identity_backfits() {
    let map = StatisticMap::OneHot { d: 3 };
    let mu = map.backfit(&[0.2, 0.0, 0.8]).unwrap();
    assert_eq!(mu.atoms, vec![Outcome::Label(0), Outcome::Label(2)]);
    assert_eq!(mu.weights, vec![0.2, 0.8]);
    let map = StatisticMap::Identity {
        domain: ConvexDomain::cube(2),
    };
    let mu = map.backfit(&[0.3, -0.4]).unwrap();
    assert_eq!(mu, AtomicMeasure::point_mass(Outcome::Vector(vec![0.3, -0.4])));
}

fn record(x: Vec<f64>, atoms: Vec<Vec<f64>>, weights: Vec<f64>, z: Vec<f64>, y: Outcome, measures: Vec<AtomicMeasure>) -> Record {
    Record {
        t: 1,
        x,
        p_sampled: atoms[0].clone(),
        atoms,
        weights,
        z,
        epsilon: 1.0,
        residual: 0.0,
        iterations: 1,
        y: Some(y),
        measures: Some(measures),
    }
}

#[test]
fn oigap_single_round_example() {
    let kernel = MatrixKernel::identity_scaled(ScalarKernel::Constant, 2);
    let map = StatisticMap::OneHot { d: 2 };
    let mu = AtomicMeasure {
        atoms: vec![Outcome::Label(0), Outcome::Label(1)],
        weights: vec![0.5, 0.5],
    };
    let rec = record(vec![0.0], vec![vec![0.5, 0.5]], vec![1.0], vec![1.0, 0.0], Outcome::Label(0), vec![mu]);
    let h = RkhsFunction::from_coordinates(&[vec![1.0], vec![0.0]]);
    let f = Distinguisher::new("first", h.clone(), &kernel).unwrap();
    assert_abs_diff_eq!(oigap(&kernel, &map, std::slice::from_ref(&rec), &f).unwrap(), 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(oigap_multicalibration(&kernel, &map, &[rec], &h).unwrap(), 0.5, epsilon = 1e-15);
}

#[test]
fn oigap_vanishes_for_matching_point_masses_and_zero_h() {
    let kernel = MatrixKernel::identity_scaled(ScalarKernel::Constant, 2);
    let map = StatisticMap::Identity {
        domain: ConvexDomain::cube(2),
    };
    let recs: Vec<Record> = (0..5)
        .map(|i| {
            let y = vec![0.1 * i as f64, -0.2];
            record(vec![0.0], vec![y.clone()], vec![1.0], y.clone(), Outcome::Vector(y.clone()), vec![AtomicMeasure::point_mass(Outcome::Vector(y))])
        })
        .collect();
    let f = Distinguisher::new("h", RkhsFunction::from_coordinates(&[vec![1.0], vec![2.0]]), &kernel).unwrap();
    assert_eq!(oigap(&kernel, &map, &recs, &f).unwrap(), 0.0);
    let zero = Distinguisher::new("zero", RkhsFunction::from_coordinates(&[vec![0.0], vec![0.0]]), &kernel).unwrap();
    assert_eq!(oigap(&kernel, &map, &recs, &zero).unwrap(), 0.0);
}

#[test]
fn bound_arithmetic() {
    assert_eq!(oigap_bound(1.0, 0, 2.0, 1.0), 0.0);
    assert_abs_diff_eq!(oigap_bound_linear_multiclass(3, 1.0, 400), 240.0);
    assert_abs_diff_eq!(oigap_bound_meancov(1.0, 100, 1.0), 40.0);
}

#[test]
fn generation_reduction_identity_holds_on_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cases = vec![
        (StatisticMap::OneHot { d: 3 }, 2usize),
        (StatisticMap::MeanOuter { d: 2 }, 2),
        (StatisticMap::PowerMoments { degree: 4 }, 2),
    ];
    for (map, n) in cases {
        let kernel = MatrixKernel::identity_scaled(ScalarKernel::AffinePair, map.dim());
        let g = 1.0 + map.domain().max_norm().powi(2);
        let mut gen = Generator::new(kernel.clone(), map.clone(), g, EngineConfig::default()).unwrap();
        for _ in 0..60 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-0.7..0.7)).collect();
            let out = gen.round(&x).unwrap();
            assert!(max_moment_error(&out.mu, &map, &out.p) <= 1e-8);
            let y = match &map {
                StatisticMap::OneHot { d } => Outcome::Label(rng.random_range(0..*d)),
                StatisticMap::MeanOuter { d } => {
                    let v: Vec<f64> = (0..*d).map(|_| rng.random_range(-0.7..0.7)).collect();
                    Outcome::Vector(v)
                }
                _ => Outcome::scalar(rng.random_range(-1.0..1.0)),
            };
            gen.reveal(y).unwrap();
        }
        for _ in 0..10 {
            let theta: Vec<f64> = (0..kernel.feature_dim(n)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = RkhsFunction::Features { theta };
            let f = Distinguisher::new("r", h.clone(), &kernel).unwrap();
            let a = oigap(&kernel, &map, gen.records(), &f).unwrap();
            let b = oigap_multicalibration(&kernel, &map, gen.records(), &h).unwrap();
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
            let bound = oigap_bound(f.norm, gen.records().len(), gen.engine().diameter(), g);
            assert!(a <= bound);
        }
    }
}
