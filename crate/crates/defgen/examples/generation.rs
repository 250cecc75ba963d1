//! Defensive generation: sample outcomes whose statistics are calibrated,
//! then measure outcome indistinguishability against a few distinguishers.
use defgen::calibrate::EngineConfig;
use defgen::generate::{oigap, Distinguisher, Generator, Outcome, StatisticMap};
use defgen::kernels::{MatrixKernel, RkhsFunction, ScalarKernel, XBound};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> defgen::Result<()> {
    let map = StatisticMap::MeanOuter { d: 2 };
    let kernel = MatrixKernel::identity_scaled(ScalarKernel::AffinePair, map.dim());
    let g = kernel.operator_norm_bound(XBound::Norm { radius: 1.0 }, &map.domain())?.g;
    let cfg = EngineConfig { epsilon: Some(2.0), ..EngineConfig::default() };
    let mut gen = Generator::new(kernel.clone(), map.clone(), g, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    for _ in 0..400 {
        let x = vec![rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)];
        let out = gen.round(&x)?;
        if rng.random_ratio(1, 100) {
            println!("forecast {:?} as {} outcomes", out.p, out.mu.len());
        }
        let y = vec![0.5 * x[0], (0.5 * x[1] + rng.random_range(-0.2..0.2)).clamp(-0.8, 0.8)];
        gen.reveal(Outcome::Vector(y))?;
    }

    let r = kernel.feature_dim(2);
    for (name, i) in [("x0 * y0", 0), ("x1 * y1", map.dim() + 1)] {
        let mut theta = vec![0.0; r];
        theta[i] = 1.0;
        let f = Distinguisher::new(name, RkhsFunction::Features { theta }, &kernel)?;
        let gap = oigap(&kernel, &map, gen.records(), &f)?;
        println!("{name}: gap {gap:.3}, bound {:.3}", gen.engine().theoretical_bound(f.norm));
    }
    Ok(())
}
