//! Solve an expected variational inequality and certify its residual.
use defgen::domains::ConvexDomain;
use defgen::evi::{certify_residual, compress, schedule_for, solve_evi};

fn main() -> defgen::Result<()> {
    let dom = ConvexDomain::unit_ball(2);
    // A rotation field has no pure equilibrium worth finding by hand.
    let s = |p: &[f64]| vec![-p[1] + 0.3, p[0] - 0.1];
    let eps = 1e-2;
    let sched = schedule_for(eps, 1.5, dom.diameter(), 200_000);
    let sol = solve_evi(&s, &dom, eps, sched.k, sched.eta)?;
    println!("{} iterations, residual {:.2e}", sol.iterations, sol.certified_residual);
    // An affine field only sees the first two moments of the distribution.
    let small = compress(sol.distribution, &|p: &[f64]| vec![p[0], p[1], p[0] * p[0], p[0] * p[1], p[1] * p[1]]);
    println!("{} atoms, residual {:.2e}", small.len(), certify_residual(&small, &s, &dom)?);
    for (p, w) in small.iter() {
        println!("  {w:.4} at {p:?}");
    }
    Ok(())
}
