//! Online multicalibration on the simplex against label noise.
use defgen::calibrate::{Engine, EngineConfig};
use defgen::domains::ConvexDomain;
use defgen::kernels::{MatrixKernel, RkhsFunction, ScalarKernel, XBound};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> defgen::Result<()> {
    let dom = ConvexDomain::simplex(3);
    let kernel = MatrixKernel::identity_scaled(ScalarKernel::AffinePair, 3);
    let g = kernel.operator_norm_bound(XBound::Norm { radius: 1.0 }, &dom)?.g;
    let mut engine = Engine::new(kernel, dom, g, EngineConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    for _ in 0..300 {
        let x = vec![rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)];
        engine.round(&x)?;
        let label = if x[0] > 0.0 { 0 } else if rng.random_bool(0.5) { 1 } else { 2 };
        let mut z = vec![0.0; 3];
        z[label] = 1.0;
        engine.reveal(&z)?;
    }

    let h = RkhsFunction::from_coordinates(&[
        vec![1.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0, 1.0],
    ]);
    let norm = h.norm(engine.kernel())?;
    println!("error {:.3}", engine.calibration_error(&h)?);
    println!("bound {:.3}", engine.theoretical_bound(norm));
    Ok(())
}
