//! Growth of the largest gap with the horizon.
use defgen::harness::{sweep, ExperimentConfig, FamilyName, KernelChoice, Scenario};

fn main() -> defgen::Result<()> {
    let mut cfg = ExperimentConfig::new(Scenario::AdversarialFlip { d: 1, n: 2, h: None }, 0, 3);
    cfg.kernel = Some(KernelChoice::AffinePair);
    cfg.families = Some(vec![FamilyName::Sup]);
    let s = sweep(&cfg, &[250, 500, 1000, 2000])?;
    for (t, err) in &s.points {
        println!("T = {t:5}  error {err:.3}  error/sqrt(T) {:.3}", err / (*t as f64).sqrt());
    }
    println!("slope {:.3}", s.slope);
    Ok(())
}
