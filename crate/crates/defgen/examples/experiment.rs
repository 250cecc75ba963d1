//! One harness run: simulated Nature, distinguisher families and a CSV report.
use defgen::harness::{run_experiment, write_report, ExperimentConfig, Scenario};

fn main() -> defgen::Result<()> {
    let mut cfg = ExperimentConfig::new(Scenario::BooleanScores { n: 4, depth: 2, degree: 2 }, 300, 7);
    cfg.engine.epsilon_factor = Some(1.0);
    let e = run_experiment(&cfg)?;
    write_report(&e.report(), std::io::stdout())?;
    if let Some(tree) = e.nature.tree() {
        println!("hidden tree: {tree:?}");
    }
    Ok(())
}
