//! Write a transcript, read it back and verify every round.
use defgen::harness::{run_experiment, ExperimentConfig, Scenario};
use defgen::transcript::Transcript;

fn main() -> defgen::Result<()> {
    let cfg = ExperimentConfig::new(Scenario::Rain { d: 2, n: 2, factors: 2 }, 100, 1);
    let e = run_experiment(&cfg)?;
    let path = std::env::temp_dir().join("defgen-example.ndjson");
    e.transcript.save(&path)?;

    let mut t = Transcript::load(&path)?;
    let v = t.verify()?;
    println!("{} rounds, max residual {:.2e}, passed {}", v.rounds, v.max_residual, v.passed());

    t.records[40].weights[0] += 0.5;
    match t.verify()?.violation {
        Some(v) => println!("tampered: {v}"),
        None => println!("tampering went unnoticed"),
    }
    Ok(())
}
