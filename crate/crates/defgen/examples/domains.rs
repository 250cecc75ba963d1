//! Projection, separation and linear maximization on the built-in domains.
use defgen::domains::{meancov_pack, ConvexDomain, Separation};
use nalgebra::DMatrix;

fn main() -> defgen::Result<()> {
    let simplex = ConvexDomain::simplex(3);
    println!("project onto simplex: {:?}", simplex.project(&[0.9, 0.6, -0.2])?);

    let ball = ConvexDomain::unit_ball(2);
    match ball.separate(&[1.0, 1.0])? {
        Separation::Member => println!("inside"),
        Separation::Hyperplane(h) => println!("cut {:?} at {:.4}", h.normal, h.offset),
    }

    let mc = ConvexDomain::mean_cov(2);
    let z = meancov_pack(&[0.5, 0.0], &DMatrix::identity(2, 2));
    let p = mc.project(&z)?;
    println!("mean-cov projection {p:?}, member: {}", mc.contains(&p));
    println!("diameter {:.4}", mc.diameter());

    let moments = ConvexDomain::moments(4)?;
    let (arg, val) = moments.linear_max(&[0.0, 0.0, -1.0, 0.0, 1.0])?;
    println!("max of m4 - m2 over moment vectors: {val:.4} at {arg:?}");
    Ok(())
}
