//! Atomic outcome distributions with prescribed statistics.
use defgen::domains::meancov_pack;
use defgen::generate::{backfit_univariate, StatisticMap};
use nalgebra::DMatrix;

fn main() -> defgen::Result<()> {
    // Mean 0 and second moment I/3 inside the unit ball of R^3.
    let map = StatisticMap::MeanOuter { d: 3 };
    let target = meancov_pack(&[0.0; 3], &(DMatrix::identity(3, 3) / 3.0));
    let mu = map.backfit(&target)?;
    for (y, w) in mu.atoms.iter().zip(&mu.weights) {
        println!("{w:.4} at {y:?}");
    }

    // Uniform moments on [-1, 1] up to degree 4 give 3-point Gauss-Legendre.
    let mu = backfit_univariate(&[1.0, 0.0, 1.0 / 3.0, 0.0, 1.0 / 5.0])?;
    for (y, w) in mu.atoms.iter().zip(&mu.weights) {
        println!("{w:.6} at {y:?}");
    }
    Ok(())
}
