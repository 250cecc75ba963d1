//! Matrix-valued kernels, their feature maps and the operator-norm bound `G`.
use defgen::domains::ConvexDomain;
use defgen::kernels::{MatrixKernel, RkhsFunction, ScalarKernel, XBound};

fn main() -> defgen::Result<()> {
    let dom = ConvexDomain::simplex(3);
    let k = MatrixKernel::identity_scaled(ScalarKernel::AffinePair, 3);
    let a = (&[0.6, 0.0][..], &[0.2, 0.3, 0.5][..]);
    let b = (&[0.0, 1.0][..], &[1.0, 0.0, 0.0][..]);
    println!("gamma(a, b) =\n{}", k.gamma(a, b)?);

    let g = k.operator_norm_bound(XBound::Norm { radius: 1.0 }, &dom)?;
    println!("G = {}", g.g);

    // h_j(x, p) = w_j·(x, p), one weight vector per output coordinate.
    let h = RkhsFunction::from_coordinates(&[
        vec![1.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 1.0, 1.0],
    ]);
    println!("h(a) = {:?}, |h| = {:.4}", h.eval(&k, a.0, a.1)?, h.norm(&k)?);

    let poly = MatrixKernel::identity_scaled(ScalarKernel::Polynomial { degree: 3 }, 1);
    let g = poly.operator_norm_bound(XBound::Hypercube { n: 4 }, &ConvexDomain::interval(0.0, 1.0)?)?;
    println!("cubic kernel on {{-1,1}}^4: G = {}", g.g);
    Ok(())
}
