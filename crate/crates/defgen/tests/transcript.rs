use defgen::generate::Outcome;
use defgen::harness::{run_experiment, ExperimentConfig, KernelChoice, Scenario};
use defgen::transcript::Transcript;
use defgen::Error;

fn sample(kernel: Option<KernelChoice>, scenario: Scenario) -> Transcript {
    let mut cfg = ExperimentConfig::new(scenario, 40, 3);
    cfg.kernel = kernel;
    cfg.timing = false;
    run_experiment(&cfg).unwrap().transcript
}

fn first_failure(t: &Transcript) -> Option<usize> {
    t.verify().unwrap().violation.map(|v| v.round)
}

#[test]
fn round_trip_is_bit_exact() {
    let t = sample(None, Scenario::Rain { d: 2, n: 2, factors: 2 });
    let text = t.to_string().unwrap();
    let back = Transcript::read_from(text.as_bytes()).unwrap();
    assert_eq!(back, t);
    assert_eq!(back.to_string().unwrap(), text);
    assert_eq!(text.lines().count(), 41);
}

#[test]
fn untouched_transcripts_verify() {
    for (k, s) in [
        (None, Scenario::Iid { d: 3, n: 2, probs: None }),
        (Some(KernelChoice::AffinePair), Scenario::AdversarialFlip { d: 2, n: 2, h: None }),
        (None, Scenario::Lds { d: 2, lag: 2, rho: 0.5, noise: 0.2 }),
        (None, Scenario::BooleanScores { n: 3, depth: 2, degree: 4 }),
    ] {
        let v = sample(k, s).verify().unwrap();
        assert!(v.passed(), "{:?}", v.violation);
        assert_eq!(v.rounds, 40);
    }
}

#[test]
fn tampering_is_located() {
    let base = sample(Some(KernelChoice::AffinePair), Scenario::Iid { d: 3, n: 2, probs: None });

    let mut t = base.clone();
    t.records[9].t = 12;
    assert_eq!(first_failure(&t), Some(10));

    let mut t = base.clone();
    t.records[5].atoms[0] = vec![0.9, 0.9, 0.9];
    assert_eq!(first_failure(&t), Some(6));

    let rejected: Vec<Option<usize>> = (0..3)
        .map(|i| {
            let mut t = base.clone();
            let mut e = vec![0.0; 3];
            e[i] = 1.0;
            t.records[20].epsilon = 0.0;
            t.records[20].atoms = vec![e];
            t.records[20].weights = vec![1.0];
            t.records[20].measures = None;
            first_failure(&t)
        })
        .collect();
    assert!(rejected.contains(&Some(21)), "{rejected:?}");

    let mut t = base.clone();
    t.records[7].y = Some(Outcome::Label(0));
    t.records[7].z = vec![0.0, 1.0, 0.0];
    assert_eq!(first_failure(&t), Some(8));

    let mut t = base.clone();
    if let Some(ms) = t.records[3].measures.as_mut() {
        ms[0].weights = vec![1.0];
        ms[0].atoms = vec![Outcome::Label(2)];
    }
    assert_eq!(first_failure(&t), Some(4));
}

#[test]
fn residual_above_tolerance_fails() {
    let mut t = sample(Some(KernelChoice::AffinePair), Scenario::AdversarialFlip { d: 1, n: 2, h: None });
    for r in t.records.iter_mut() {
        r.epsilon = 1e-12;
    }
    let v = t.verify().unwrap();
    let viol = v.violation.expect("a residual should exceed 1e-12");
    assert!(viol.message.contains("residual"), "{viol}");
}

#[test]
fn empty_and_malformed_inputs() {
    let t = Transcript::read_from(&b""[..]).unwrap();
    assert!(t.verify().unwrap().passed());
    assert!(matches!(Transcript::read_from(&b"{}\n"[..]), Err(Error::Corrupt(_))));
    let base = sample(None, Scenario::TokenMarkov { d: 3, embed: 2 });
    let text = base.to_string().unwrap().replace("\"version\":1", "\"version\":7");
    assert!(matches!(Transcript::read_from(text.as_bytes()), Err(Error::Corrupt(_))));
    let headless = Transcript { header: None, records: base.records.clone() };
    assert!(matches!(headless.verify(), Err(Error::Corrupt(_))));
}
