//! A custom matrix kernel from an explicit feature map.
use defgen::calibrate::{Engine, EngineConfig};
use defgen::domains::ConvexDomain;
use defgen::kernels::{FeatureMap, MatrixKernel, XBound};
use nalgebra::DMatrix;

fn main() -> defgen::Result<()> {
    // Φ(x, p) = [x0 I; p0 I] for p in [0, 1]^2.
    let fm = FeatureMap::new("scaled", 1, 2, 4, |x, p| {
        let mut m = DMatrix::zeros(4, 2);
        for j in 0..2 {
            m[(j, j)] = x[0];
            m[(2 + j, j)] = p[0];
        }
        m
    });
    let kernel = MatrixKernel::feature_map(fm);
    let dom = ConvexDomain::boxed(vec![0.0; 2], vec![1.0; 2])?;
    let bound = kernel.operator_norm_bound(XBound::Norm { radius: 1.0 }, &dom)?;
    println!("G = {:.4} (margin {:?})", bound.g, bound.margin);

    let mut engine = Engine::new(kernel, dom, bound.g, EngineConfig { epsilon: Some(0.05), ..EngineConfig::default() })?;
    for t in 0..60 {
        let x = [if t % 2 == 0 { 1.0 } else { -1.0 }];
        let d = engine.round(&x)?;
        let z = if x[0] > 0.0 { [1.0, 0.0] } else { [0.0, 1.0] };
        engine.reveal(&z)?;
        if t >= 50 {
            println!("x = {:+}: mean forecast {:.3?}", x[0], d.mean());
        }
    }
    Ok(())
}
