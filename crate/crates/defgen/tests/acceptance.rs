//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL` line;
//! run with `cargo test --test acceptance -- --nocapture` to see them.

use defgen::calibrate::calibration_error;
use defgen::domains::{grid_feasibility_residual, uniform_moments, ConvexDomain};
use defgen::generate::{
    oigap, oigap_bound_linear_multiclass, oigap_bound_meancov, oigap_bound_scalar_moments, oigap_multicalibration,
    AtomicMeasure, Outcome, StatisticMap,
};
use defgen::harness::{
    oi_vector, run_experiment, sweep, write_report, Experiment, ExperimentConfig, FamilyName, KernelChoice, Scenario,
};
use defgen::kernels::RkhsFunction;
use defgen::linalg::norm;
use defgen::transcript::Record;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::OnceLock;

const T: usize = 1000;

fn report(n: usize, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

/// The five calibration scenarios, all with statistic dimension at most 5.
fn calibration_configs() -> Vec<ExperimentConfig> {
    let scenarios = [
        (Scenario::Iid { d: 3, n: 2, probs: None }, None),
        (Scenario::AdversarialFlip { d: 2, n: 2, h: None }, Some(KernelChoice::AffinePair)),
        (Scenario::TokenMarkov { d: 4, embed: 3 }, None),
        (Scenario::Lds { d: 2, lag: 2, rho: 0.9, noise: 0.1 }, None),
        (Scenario::Rain { d: 2, n: 2, factors: 2 }, None),
    ];
    let mut out = Vec::new();
    for (s, k) in scenarios {
        for seed in 0..5 {
            let mut cfg = ExperimentConfig::new(s.clone(), T, seed);
            cfg.kernel = k.clone();
            cfg.timing = false;
            cfg.families = Some(vec![FamilyName::RandomUnit]);
            out.push(cfg);
        }
    }
    out
}

/// Runs used for the OI bounds, each with `ε_t = D²G`.
fn oi_configs() -> Vec<ExperimentConfig> {
    let mk = |s: Scenario, k: Option<KernelChoice>, fams: Vec<FamilyName>| {
        let mut cfg = ExperimentConfig::new(s, T, 1);
        cfg.kernel = k;
        cfg.timing = false;
        cfg.families = Some(fams);
        cfg.engine.epsilon_factor = Some(1.0);
        cfg
    };
    vec![
        mk(
            Scenario::Iid { d: 3, n: 2, probs: None },
            Some(KernelChoice::Linear),
            vec![FamilyName::CoordinateLinear, FamilyName::RandomUnit],
        ),
        mk(
            Scenario::TokenMarkov { d: 4, embed: 3 },
            None,
            vec![FamilyName::CoordinateLinear, FamilyName::RandomUnit],
        ),
        mk(
            Scenario::BooleanScores { n: 5, depth: 2, degree: 4 },
            None,
            vec![FamilyName::TreePower, FamilyName::RandomUnit],
        ),
        mk(
            Scenario::Rain { d: 3, n: 2, factors: 2 },
            None,
            vec![FamilyName::Rain, FamilyName::RandomUnit, FamilyName::Sup],
        ),
        mk(
            Scenario::Lds { d: 2, lag: 3, rho: 0.9, noise: 0.1 },
            None,
            vec![FamilyName::Lds, FamilyName::RandomUnit, FamilyName::Sup],
        ),
    ]
}

fn run_all(cfgs: Vec<ExperimentConfig>) -> Vec<Experiment> {
    cfgs.par_iter()
        .map(|c| run_experiment(c).unwrap_or_else(|e| panic!("{} seed {}: {e}", c.scenario.name(), c.seed)))
        .collect()
}

fn calibration_suite() -> &'static [Experiment] {
    static S: OnceLock<Vec<Experiment>> = OnceLock::new();
    S.get_or_init(|| run_all(calibration_configs()))
}

fn oi_suite() -> &'static [Experiment] {
    static S: OnceLock<Vec<Experiment>> = OnceLock::new();
    S.get_or_init(|| run_all(oi_configs()))
}

fn history(e: &Experiment) -> Vec<defgen::calibrate::RoundRecord> {
    e.records().iter().map(Record::to_round).collect()
}

#[test]
fn criterion_1_multicalibration_bound() {
    let mut checked = 0;
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for e in calibration_suite() {
        let hist = history(e);
        let bound = e.families[0].bound;
        for m in &e.families[0].members {
            let err = calibration_error(&e.setup.kernel, &hist, &m.f.h).unwrap();
            let h_norm = m.f.h.norm(&e.setup.kernel).unwrap();
            checked += 1;
            worst = worst.max(err / (h_norm * bound));
            if err > h_norm * bound {
                violations += 1;
            }
        }
    }
    let pass = violations == 0 && checked == 25 * 50;
    report(1, pass, format!("{checked} functions over 25 runs, {violations} violations, worst error/bound {worst:.4}"));
    assert!(pass);
}

#[test]
fn criterion_2_certified_residuals() {
    let mut rounds = 0;
    let mut over = 0;
    let mut failed = Vec::new();
    let runs = calibration_suite().iter().chain(oi_suite());
    let mut transcripts = 0;
    for e in runs {
        transcripts += 1;
        for r in e.records() {
            rounds += 1;
            if r.residual > r.epsilon {
                over += 1;
            }
        }
        let v = e.transcript.verify().unwrap();
        if let Some(viol) = v.violation {
            failed.push(format!("{} seed {}: {viol}", e.config.scenario.name(), e.config.seed));
        }
        // Round trip through the on-disk form.
        let back = defgen::transcript::Transcript::read_from(e.transcript.to_string().unwrap().as_bytes()).unwrap();
        if back != e.transcript {
            failed.push(format!("{} seed {}: serialization changed the transcript", e.config.scenario.name(), e.config.seed));
        }
    }
    let pass = over == 0 && failed.is_empty();
    report(
        2,
        pass,
        format!("{rounds} rounds, {over} residuals above epsilon, {}/{transcripts} transcripts verified {:?}", transcripts - failed.len(), failed),
    );
    assert!(pass);
}

#[test]
fn criterion_3_oigap_bounds() {
    let mut lines = Vec::new();
    let mut violations = 0;
    let mut checked = 0;
    for e in oi_suite() {
        let kernel = &e.setup.kernel;
        let map = &e.setup.map;
        let records = e.records();
        let dom = map.domain();
        let (specific, bound): (String, f64) = match map {
            StatisticMap::OneHot { d } => {
                // Exact sup over {h_j(x) = w_jᵀx : ‖w_j‖ <= 1} is Σ_j ‖v_j‖.
                let v = oi_vector(kernel, map, records).unwrap();
                let sup: f64 = (0..*d)
                    .map(|j| norm(&v.iter().skip(j).step_by(*d).copied().collect::<Vec<_>>()))
                    .sum();
                let b = oigap_bound_linear_multiclass(*d, 1.0, T);
                checked += 1;
                if sup > b {
                    violations += 1;
                }
                (format!("sup over linear class {sup:.3}"), b)
            }
            StatisticMap::PowerMoments { .. } => {
                let b = oigap_bound_scalar_moments(kernel, map, records, 1.0, dom.diameter(), e.setup.g).unwrap();
                ("tree-power family".into(), b)
            }
            StatisticMap::MeanOuter { .. } => ("mean-cov families".into(), oigap_bound_meancov(1.0, T, e.setup.g)),
            StatisticMap::Identity { .. } => unreachable!(),
        };
        let mut sup: f64 = 0.0;
        for f in &e.families {
            for g in &f.gaps {
                checked += 1;
                sup = sup.max(*g);
                if *g > bound {
                    violations += 1;
                }
                let general = defgen::generate::oigap_bound(1.0, T, dom.diameter(), e.setup.g);
                if *g > general {
                    violations += 1;
                }
            }
        }
        lines.push(format!("{}: {specific}, family sup {sup:.3} <= {bound:.3}", e.config.scenario.name()));
    }
    let pass = violations == 0;
    report(3, pass, format!("{checked} checks, {violations} violations; {}", lines.join("; ")));
    assert!(pass);
}

fn random_measure_point(map: &StatisticMap, rng: &mut ChaCha8Rng, atoms: usize) -> Vec<f64> {
    let ys: Vec<Outcome> = (0..atoms)
        .map(|_| match map {
            StatisticMap::MeanOuter { d } => {
                let v = ConvexDomain::unit_ball(*d).sample(rng);
                // Half of the atoms on the sphere, where the set is tight.
                if rng.random_bool(0.5) {
                    let s = norm(&v).max(1e-12);
                    Outcome::Vector(v.iter().map(|x| x / s).collect())
                } else {
                    Outcome::Vector(v)
                }
            }
            _ => Outcome::scalar(if rng.random_bool(0.3) { rng.random_range(0..2) as f64 * 2.0 - 1.0 } else { rng.random_range(-1.0..1.0) }),
        })
        .collect();
    let mut w: Vec<f64> = (0..atoms).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    AtomicMeasure { atoms: ys, weights: w }.expected_statistic(map).unwrap()
}

#[test]
fn criterion_4_backfitting_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    let mut count = 0;
    let mut worst: f64 = 0.0;
    let maps: Vec<(StatisticMap, usize)> = (1..=4)
        .map(|d| (StatisticMap::MeanOuter { d }, 2 * d + 1))
        .chain((1..=4).map(|h| (StatisticMap::PowerMoments { degree: 2 * h }, 2 * h + 1)))
        .collect();
    for (map, max_atoms) in &maps {
        let dom = map.domain();
        for i in 0..2500 {
            let p = if i % 2 == 0 {
                dom.sample(&mut rng)
            } else {
                let k = rng.random_range(1..=*max_atoms);
                random_measure_point(map, &mut rng, k)
            };
            count += 1;
            match map.backfit(&p) {
                Ok(mu) => {
                    let s = mu.expected_statistic(map).unwrap();
                    let err = s.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    worst = worst.max(err);
                    let ok = err <= 1e-8
                        && mu.len() <= *max_atoms
                        && mu.weights.iter().all(|w| *w >= 0.0)
                        && mu.atoms.iter().all(|y| map.contains(y));
                    if !ok && failures.len() < 5 {
                        failures.push(format!("{} {p:?}: err {err:e}, {} atoms", map.name(), mu.len()));
                    }
                }
                Err(e) => {
                    if failures.len() < 5 {
                        failures.push(format!("{} {p:?}: {e}", map.name()));
                    }
                }
            }
        }
    }
    let pass = failures.is_empty() && count == 20_000;
    report(4, pass, format!("{count} members, worst moment error {worst:.2e} {failures:?}"));
    assert!(pass);
}

#[test]
fn criterion_5_moment_membership_oracles_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut disagreements = 0;
    let mut outside_band = Vec::new();
    for degree in [2usize, 4] {
        let dom = ConvexDomain::moments(degree).unwrap();
        for _ in 0..200 {
            let mut m = if rng.random_bool(0.5) { dom.sample(&mut rng) } else { uniform_moments(degree) };
            for v in m.iter_mut().skip(1) {
                *v += rng.random_range(-0.15..0.15);
            }
            let hankel = dom.contains(&m);
            let residual = grid_feasibility_residual(&m, degree, 2001);
            let grid = residual <= 1e-7;
            if hankel != grid {
                disagreements += 1;
                // Inside the band: the Hankel margin or the grid residual sits at the tolerance scale.
                if dom.margin(&m).abs() > 1e-7 && residual > 1e-5 {
                    outside_band.push(format!("{m:?}"));
                }
            }
        }
    }
    let pass = outside_band.is_empty();
    report(5, pass, format!("400 vectors, {disagreements} disagreements, {} outside the tolerance band", outside_band.len()));
    assert!(pass);
}

const FLIP_SWEEP: &str = r#"
version = 1
rounds = 1
seed = 3
timing = false
families = ["adversary", "sup"]
sweep = [250, 500, 1000, 2000, 4000]

[scenario]
kind = "adversarial_flip"
d = 1
n = 2

[kernel]
kind = "affine_pair"
"#;

#[test]
fn criterion_6_sqrt_t_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("flip.toml");
    std::fs::write(&cfg, FLIP_SWEEP).unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_defgen"))
        .args(["sweep", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rd = csv::Reader::from_path(dir.path().join("rate.csv")).unwrap();
    let rows: Vec<(usize, f64, f64)> = rd.deserialize().map(|r| r.unwrap()).collect();
    let slope = rows[0].2;
    let points: Vec<(usize, f64)> = rows.iter().map(|r| (r.0, r.1)).collect();
    let pass = rows.len() == 5 && (0.25..=0.65).contains(&slope);
    report(6, pass, format!("slope {slope:.4} over {points:?}"));
    assert!(pass);
}

#[test]
fn criterion_7_reduction_identity() {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for e in calibration_suite().iter().chain(oi_suite()) {
        let kernel = &e.setup.kernel;
        let map = &e.setup.map;
        let records = e.records();
        for f in &e.families {
            for m in f.members.iter().take(60) {
                let a = oigap(kernel, map, records, &m.f).unwrap();
                let b = oigap_multicalibration(kernel, map, records, &m.f.h).unwrap();
                worst = worst.max((a - b).abs() / (1.0 + a.abs()));
                checked += 1;
            }
        }
        let v = oi_vector(kernel, map, records).unwrap();
        let h = RkhsFunction::Features { theta: v.clone() };
        let a = oigap_multicalibration(kernel, map, records, &h).unwrap();
        let sq: f64 = v.iter().map(|x| x * x).sum();
        worst = worst.max((a - sq).abs() / (1.0 + sq));
        checked += 1;
    }
    let pass = worst <= 1e-8;
    report(7, pass, format!("{checked} distinguisher-transcript pairs, worst relative difference {worst:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_8_determinism() {
    let mut cfgs: Vec<ExperimentConfig> = calibration_configs().into_iter().step_by(5).collect();
    let mut b = ExperimentConfig::new(Scenario::BooleanScores { n: 4, depth: 2, degree: 2 }, 200, 9);
    b.timing = false;
    cfgs.push(b);
    let mut same = 0;
    for c in &cfgs {
        let render = || {
            let e = run_experiment(c).unwrap();
            let mut csv = Vec::new();
            write_report(&e.report(), &mut csv).unwrap();
            (e.transcript.to_string().unwrap(), csv)
        };
        if render() == render() {
            same += 1;
        }
    }
    let mut sw = ExperimentConfig::new(Scenario::AdversarialFlip { d: 1, n: 2, h: None }, 0, 1);
    sw.kernel = Some(KernelChoice::AffinePair);
    sw.timing = false;
    let a = sweep(&sw, &[50, 100, 200]).unwrap();
    let b = sweep(&sw, &[50, 100, 200]).unwrap();
    let pass = same == cfgs.len() && a == b;
    report(8, pass, format!("{same}/{} configs byte-identical, sweep repeatable: {}", cfgs.len(), a == b));
    assert!(pass);
}
