//! Convex prediction sets and their oracles.
//!
//! Every set answers membership, separation, Euclidean projection, linear
//! maximization and diameter queries. The two moment sets live in flattened
//! coordinates:
//!
//! * mean–covariance points are `(v, svec(Q))`, where `svec` lists the upper
//!   triangle of `Q` row by row with off-diagonal entries scaled by `√2`, so the
//!   Euclidean norm of the flattened point equals `sqrt(|v|² + |Q|_F²)`;
//! * univariate moment points are `(m₀, m₁, …, m_n)` with `n` even.

use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg::{dist, dot, norm, nnls, psd_part, sym_eigen};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::SQRT_2;

pub type Point = Vec<f64>;

/// Absolute tolerance of every membership test.
pub const MEMBERSHIP_TOL: f64 = 1e-9;
/// Dykstra stops once successive iterates move less than this.
pub const DYKSTRA_STEP_TOL: f64 = 1e-9;
pub const DYKSTRA_MAX_SWEEPS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparatingHyperplane {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl SeparatingHyperplane {
    fn normalized(normal: Vec<f64>, offset: f64) -> Self {
        let n = norm(&normal);
        if n == 0.0 {
            return Self { normal, offset };
        }
        Self {
            normal: normal.iter().map(|x| x / n).collect(),
            offset: offset / n,
        }
    }

    /// `normal·z - offset`; positive means `z` lies on the far side.
    pub fn violation(&self, z: &[f64]) -> f64 {
        dot(&self.normal, z) - self.offset
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Separation {
    Member,
    Hyperplane(SeparatingHyperplane),
}

impl Separation {
    pub fn is_member(&self) -> bool {
        matches!(self, Separation::Member)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConvexDomain {
    Simplex { dim: usize },
    Ball { center: Vec<f64>, radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// `{center + L u : |u| <= 1}` for a symmetric positive definite `L`.
    Ellipsoid { center: Vec<f64>, shape: Vec<Vec<f64>> },
    MeanCov { d: usize },
    Moments { degree: usize },
}

impl ConvexDomain {
    pub fn simplex(dim: usize) -> Self {
        assert!(dim >= 1, "simplex needs at least one vertex");
        ConvexDomain::Simplex { dim }
    }

    pub fn ball(dim: usize, radius: f64) -> Self {
        assert!(dim >= 1 && radius >= 0.0);
        ConvexDomain::Ball {
            center: vec![0.0; dim],
            radius,
        }
    }

    pub fn unit_ball(dim: usize) -> Self {
        Self::ball(dim, 1.0)
    }

    pub fn cube(dim: usize) -> Self {
        Self::boxed(vec![-1.0; dim], vec![1.0; dim]).expect("valid cube")
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::boxed(vec![lo], vec![hi])
    }

    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim(lo.len(), hi.len())?;
        if lo.is_empty() || lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return Err(Error::Input("box needs lo <= hi in every coordinate".into()));
        }
        Ok(ConvexDomain::Box { lo, hi })
    }

    pub fn ellipsoid(center: Vec<f64>, shape: DMatrix<f64>) -> Result<Self> {
        let d = center.len();
        if shape.shape() != (d, d) {
            return Err(Error::Dimension {
                expected: d,
                got: shape.nrows(),
            });
        }
        if (&shape - shape.transpose()).amax() > 1e-12 {
            return Err(Error::Input("ellipsoid shape must be symmetric".into()));
        }
        if sym_eigen(&shape).0[0] <= 0.0 {
            return Err(Error::Input("ellipsoid shape must be positive definite".into()));
        }
        let rows = (0..d).map(|i| shape.row(i).iter().copied().collect()).collect();
        Ok(ConvexDomain::Ellipsoid {
            center,
            shape: rows,
        })
    }

    pub fn mean_cov(d: usize) -> Self {
        assert!(d >= 1);
        ConvexDomain::MeanCov { d }
    }

    /// Moments `m₀ … m_degree` of probability measures on `[-1, 1]`.
    pub fn moments(degree: usize) -> Result<Self> {
        if degree < 2 || !degree.is_multiple_of(2) {
            return Err(Error::Input(format!(
                "moment degree must be even and at least 2, got {degree}"
            )));
        }
        Ok(ConvexDomain::Moments { degree })
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexDomain::Simplex { dim } => *dim,
            ConvexDomain::Ball { center, .. } => center.len(),
            ConvexDomain::Box { lo, .. } => lo.len(),
            ConvexDomain::Ellipsoid { center, .. } => center.len(),
            ConvexDomain::MeanCov { d } => meancov_dim(*d),
            ConvexDomain::Moments { degree } => degree + 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConvexDomain::Simplex { .. } => "simplex",
            ConvexDomain::Ball { .. } => "ball",
            ConvexDomain::Box { .. } => "box",
            ConvexDomain::Ellipsoid { .. } => "ellipsoid",
            ConvexDomain::MeanCov { .. } => "mean_cov",
            ConvexDomain::Moments { .. } => "moments",
        }
    }

    pub fn diameter(&self) -> f64 {
        match self {
            ConvexDomain::Simplex { dim } => {
                if *dim == 1 {
                    0.0
                } else {
                    SQRT_2
                }
            }
            ConvexDomain::Ball { radius, .. } => 2.0 * radius,
            ConvexDomain::Box { lo, hi } => dist(lo, hi),
            ConvexDomain::Ellipsoid { shape, .. } => {
                let l = rows_to_matrix(shape);
                2.0 * sym_eigen(&l).0.max()
            }
            ConvexDomain::MeanCov { .. } => 8f64.sqrt(),
            ConvexDomain::Moments { degree } => moment_diameter(*degree),
        }
    }

    /// `sup |z|` over the set.
    pub fn max_norm(&self) -> f64 {
        match self {
            ConvexDomain::Simplex { .. } => 1.0,
            ConvexDomain::Ball { center, radius } => norm(center) + radius,
            ConvexDomain::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(a, b)| a.abs().max(b.abs()).powi(2))
                .sum::<f64>()
                .sqrt(),
            ConvexDomain::Ellipsoid { center, shape } => {
                let l = rows_to_matrix(shape);
                norm(center) + sym_eigen(&l).0.max()
            }
            ConvexDomain::MeanCov { .. } => SQRT_2,
            ConvexDomain::Moments { degree } => ((degree + 1) as f64).sqrt(),
        }
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        check_dim(self.dim(), z.len())?;
        check_finite(z, "point")
    }

    /// Tolerant membership test; wrong dimension or non-finite input is never a member.
    pub fn contains(&self, z: &[f64]) -> bool {
        if self.check(z).is_err() {
            return false;
        }
        self.margin(z) >= -MEMBERSHIP_TOL
    }

    /// Signed slack of the tightest defining constraint (negative outside).
    pub fn margin(&self, z: &[f64]) -> f64 {
        match self {
            ConvexDomain::Simplex { .. } => {
                let s: f64 = z.iter().sum();
                let neg = z.iter().fold(f64::INFINITY, |a, &b| a.min(b));
                neg.min(-(s - 1.0).abs())
            }
            ConvexDomain::Ball { center, radius } => radius - dist(z, center),
            ConvexDomain::Box { lo, hi } => z
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(x, (a, b))| (x - a).min(b - x))
                .fold(f64::INFINITY, f64::min),
            ConvexDomain::Ellipsoid { center, shape } => {
                let l = rows_to_matrix(shape);
                let diff = DVector::from_iterator(z.len(), z.iter().zip(center).map(|(a, b)| a - b));
                let u = l.lu().solve(&diff).unwrap_or_else(|| DVector::from_element(z.len(), f64::INFINITY));
                1.0 - u.norm()
            }
            ConvexDomain::MeanCov { d } => {
                let (v, q) = meancov_unpack(*d, z);
                let schur = &q - &v * v.transpose();
                sym_eigen(&schur).0[0]
                    .min(sym_eigen(&q).0[0])
                    .min(1.0 - q.trace())
            }
            ConvexDomain::Moments { degree } => {
                let h = hankel(z, *degree);
                let mut m = sym_eigen(&h).0[0].min(-(z[0] - 1.0).abs());
                if *degree >= 2 {
                    m = m.min(sym_eigen(&localizing_hankel(z, *degree)).0[0]);
                }
                m
            }
        }
    }

    pub fn separate(&self, w: &[f64]) -> Result<Separation> {
        self.check(w)?;
        if self.margin(w) >= -MEMBERSHIP_TOL {
            return Ok(Separation::Member);
        }
        let hp = match self {
            ConvexDomain::Simplex { dim } => {
                let d = *dim;
                let s: f64 = w.iter().sum();
                let rd = (d as f64).sqrt();
                let mut best = (f64::NEG_INFINITY, vec![], 0.0);
                for i in 0..d {
                    if -w[i] > best.0 {
                        let mut n = vec![0.0; d];
                        n[i] = -1.0;
                        best = (-w[i], n, 0.0);
                    }
                }
                if (s - 1.0) / rd > best.0 {
                    best = ((s - 1.0) / rd, vec![1.0; d], 1.0);
                }
                if (1.0 - s) / rd > best.0 {
                    best = ((1.0 - s) / rd, vec![-1.0; d], -1.0);
                }
                SeparatingHyperplane::normalized(best.1, best.2)
            }
            ConvexDomain::Ball { center, radius } => {
                let n: Vec<f64> = w.iter().zip(center).map(|(a, b)| a - b).collect();
                let nn = norm(&n);
                let unit: Vec<f64> = n.iter().map(|x| x / nn).collect();
                let off = dot(&unit, center) + radius;
                SeparatingHyperplane {
                    normal: unit,
                    offset: off,
                }
            }
            ConvexDomain::Box { lo, hi } => {
                let d = lo.len();
                let mut best = (f64::NEG_INFINITY, 0usize, 1.0, 0.0);
                for i in 0..d {
                    if w[i] - hi[i] > best.0 {
                        best = (w[i] - hi[i], i, 1.0, hi[i]);
                    }
                    if lo[i] - w[i] > best.0 {
                        best = (lo[i] - w[i], i, -1.0, -lo[i]);
                    }
                }
                let mut n = vec![0.0; d];
                n[best.1] = best.2;
                SeparatingHyperplane {
                    normal: n,
                    offset: best.3,
                }
            }
            ConvexDomain::Ellipsoid { center, shape } => {
                let l = rows_to_matrix(shape);
                let lu = l.clone().lu();
                let diff = DVector::from_iterator(w.len(), w.iter().zip(center).map(|(a, b)| a - b));
                let u = lu.solve(&diff).expect("positive definite shape");
                let n = lu.solve(&u).expect("positive definite shape");
                let ln = &l * &n;
                let off = dot(n.as_slice(), center) + ln.norm();
                SeparatingHyperplane::normalized(n.as_slice().to_vec(), off)
            }
            ConvexDomain::MeanCov { d } => {
                let (v, q) = meancov_unpack(*d, w);
                if q.trace() - 1.0 > MEMBERSHIP_TOL {
                    let eye = DMatrix::<f64>::identity(*d, *d);
                    let mut n = vec![0.0; *d];
                    n.extend(svec(&eye));
                    SeparatingHyperplane::normalized(n, 1.0)
                } else {
                    let block = schur_block(&v, &q);
                    let (_, vecs) = sym_eigen(&block);
                    let a = vecs[(0, 0)];
                    let b = DVector::from_iterator(*d, (0..*d).map(|i| vecs[(i + 1, 0)]));
                    let mut n: Vec<f64> = b.iter().map(|bi| -2.0 * a * bi).collect();
                    n.extend(svec(&(&b * b.transpose())).into_iter().map(|x| -x));
                    SeparatingHyperplane::normalized(n, a * a)
                }
            }
            ConvexDomain::Moments { degree } => {
                let n = *degree;
                if (w[0] - 1.0).abs() > MEMBERSHIP_TOL {
                    let mut e0 = vec![0.0; n + 1];
                    let sign = (w[0] - 1.0).signum();
                    e0[0] = sign;
                    SeparatingHyperplane {
                        normal: e0,
                        offset: sign,
                    }
                } else {
                    let h = hankel(w, n);
                    let (hv, hvec) = sym_eigen(&h);
                    let l = localizing_hankel(w, n);
                    let (lv, lvec) = sym_eigen(&l);
                    let mut c = vec![0.0; n + 1];
                    if hv[0] <= lv[0] {
                        let u = hvec.column(0);
                        for i in 0..u.len() {
                            for j in 0..u.len() {
                                c[i + j] += u[i] * u[j];
                            }
                        }
                    } else {
                        let u = lvec.column(0);
                        for i in 0..u.len() {
                            for j in 0..u.len() {
                                c[i + j] += u[i] * u[j];
                                c[i + j + 2] -= u[i] * u[j];
                            }
                        }
                    }
                    SeparatingHyperplane::normalized(c.iter().map(|x| -x).collect(), 0.0)
                }
            }
        };
        Ok(Separation::Hyperplane(hp))
    }

    /// A maximizer of `c·z` over the set and the maximal value.
    pub fn linear_max(&self, c: &[f64]) -> Result<(Point, f64)> {
        self.check(c)?;
        let z = match self {
            ConvexDomain::Simplex { dim } => {
                let mut best = 0;
                for i in 1..*dim {
                    if c[i] > c[best] {
                        best = i;
                    }
                }
                let mut z = vec![0.0; *dim];
                z[best] = 1.0;
                z
            }
            ConvexDomain::Ball { center, radius } => {
                let nc = norm(c);
                if nc == 0.0 {
                    center.clone()
                } else {
                    center.iter().zip(c).map(|(a, b)| a + radius * b / nc).collect()
                }
            }
            ConvexDomain::Box { lo, hi } => c
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(ci, (a, b))| {
                    if *ci > 0.0 {
                        *b
                    } else if *ci < 0.0 {
                        *a
                    } else {
                        0.5 * (a + b)
                    }
                })
                .collect(),
            ConvexDomain::Ellipsoid { center, shape } => {
                let l = rows_to_matrix(shape);
                let lc = &l * DVector::from_column_slice(c);
                let n = lc.norm();
                if n == 0.0 {
                    center.clone()
                } else {
                    let step = &l * (lc / n);
                    center.iter().zip(step.iter()).map(|(a, b)| a + b).collect()
                }
            }
            ConvexDomain::MeanCov { d } => {
                let b = DVector::from_column_slice(&c[..*d]);
                let cm = svec_adjoint(*d, &c[*d..]);
                let y = trust_region_max(&cm, &b);
                meancov_pack(y.as_slice(), &(&y * y.transpose()))
            }
            ConvexDomain::Moments { degree } => {
                let (y, _) = poly_max(c);
                moment_curve(*degree, y)
            }
        };
        let value = dot(c, &z);
        Ok((z, value))
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, w: &[f64]) -> Result<Point> {
        self.check(w)?;
        let z = match self {
            ConvexDomain::Simplex { .. } => project_simplex(w),
            ConvexDomain::Ball { center, radius } => {
                let r = dist(w, center);
                if r <= *radius {
                    w.to_vec()
                } else {
                    center
                        .iter()
                        .zip(w)
                        .map(|(c, x)| c + (x - c) * radius / r)
                        .collect()
                }
            }
            ConvexDomain::Box { lo, hi } => w
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(x, (a, b))| x.clamp(*a, *b))
                .collect(),
            ConvexDomain::Ellipsoid { center, shape } => project_ellipsoid(center, shape, w),
            ConvexDomain::MeanCov { d } => {
                if self.margin(w) >= -MEMBERSHIP_TOL {
                    w.to_vec()
                } else {
                    let z = project_meancov_dykstra(*d, w);
                    self.repair(z)
                }
            }
            ConvexDomain::Moments { degree } => {
                if self.margin(w) >= -MEMBERSHIP_TOL {
                    w.to_vec()
                } else {
                    project_moments(*degree, w)
                }
            }
        };
        Ok(z)
    }

    /// Pull a point that sits marginally outside back along the segment to a
    /// strictly interior anchor.
    fn repair(&self, z: Point) -> Point {
        if self.margin(&z) >= 0.0 {
            return z;
        }
        let anchor = self.anchor();
        let mix = |a: f64| -> Point { z.iter().zip(&anchor).map(|(x, c)| (1.0 - a) * x + a * c).collect() };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.margin(&mix(mid)) >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        mix(hi)
    }

    fn anchor(&self) -> Point {
        match self {
            ConvexDomain::Simplex { dim } => vec![1.0 / *dim as f64; *dim],
            ConvexDomain::Ball { center, .. } | ConvexDomain::Ellipsoid { center, .. } => center.clone(),
            ConvexDomain::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect(),
            ConvexDomain::MeanCov { d } => {
                let q = DMatrix::<f64>::identity(*d, *d) / (2.0 * *d as f64);
                meancov_pack(&vec![0.0; *d], &q)
            }
            ConvexDomain::Moments { degree } => uniform_moments(*degree),
        }
    }

    /// A random member, drawn so that boundary points are common.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        match self {
            ConvexDomain::Simplex { dim } => {
                let e: Vec<f64> = (0..*dim).map(|_| Exp1.sample(rng)).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|x| x / s).collect()
            }
            ConvexDomain::Ball { center, radius } => {
                let u = random_in_ball(rng, center.len(), 0.3);
                center.iter().zip(&u).map(|(c, x)| c + radius * x).collect()
            }
            ConvexDomain::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(a, b)| if rng.random_bool(0.1) { *b } else { rng.random_range(*a..=*b) })
                .collect(),
            ConvexDomain::Ellipsoid { center, shape } => {
                let l = rows_to_matrix(shape);
                let u = DVector::from_vec(random_in_ball(rng, center.len(), 0.3));
                let s = l * u;
                center.iter().zip(s.iter()).map(|(c, x)| c + x).collect()
            }
            ConvexDomain::MeanCov { d } => {
                let k = rng.random_range(1..=2 * d + 1);
                let w = dirichlet(rng, k);
                let mut v = DVector::zeros(*d);
                let mut q = DMatrix::zeros(*d, *d);
                for wi in w {
                    let y = DVector::from_vec(random_in_ball(rng, *d, 0.5));
                    v += &y * wi;
                    q += &y * y.transpose() * wi;
                }
                meancov_pack(v.as_slice(), &q)
            }
            ConvexDomain::Moments { degree } => {
                let k = rng.random_range(1..=degree / 2 + 2);
                let w = dirichlet(rng, k);
                let mut m = vec![0.0; degree + 1];
                for wi in w {
                    let y = match rng.random_range(0..10) {
                        0 => 1.0,
                        1 => -1.0,
                        _ => rng.random_range(-1.0..1.0),
                    };
                    for (k, mk) in moment_curve(*degree, y).iter().enumerate() {
                        m[k] += wi * mk;
                    }
                }
                m[0] = 1.0;
                m
            }
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

fn dirichlet<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Uniform direction; on the sphere with probability `p_sphere`, otherwise uniform in the ball.
pub(crate) fn random_in_ball<R: Rng + ?Sized>(rng: &mut R, d: usize, p_sphere: f64) -> Vec<f64> {
    let mut g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm(&g).max(1e-300);
    let r = if rng.random_bool(p_sphere) {
        1.0
    } else {
        rng.random::<f64>().powf(1.0 / d as f64)
    };
    for x in g.iter_mut() {
        *x *= r / n;
    }
    g
}

pub fn project_simplex(w: &[f64]) -> Point {
    let mut u = w.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        }
    }
    w.iter().map(|x| (x - tau).max(0.0)).collect()
}

fn project_ellipsoid(center: &[f64], shape: &[Vec<f64>], w: &[f64]) -> Point {
    let l = rows_to_matrix(shape);
    let (s, v) = sym_eigen(&l);
    let diff = DVector::from_iterator(w.len(), w.iter().zip(center).map(|(a, b)| a - b));
    let y = v.transpose() * diff;
    let a: Vec<f64> = s.iter().map(|x| x * x).collect();
    let inside: f64 = y.iter().zip(&a).map(|(yi, ai)| yi * yi / ai).sum();
    if inside <= 1.0 {
        return w.to_vec();
    }
    let f = |mu: f64| -> f64 {
        y.iter()
            .zip(&a)
            .map(|(yi, ai)| ai * yi * yi / ((ai + mu) * (ai + mu)))
            .sum::<f64>()
            - 1.0
    };
    let mut lo = 0.0;
    let mut hi = y.iter().zip(&a).map(|(yi, ai)| ai * yi * yi).sum::<f64>().sqrt() + 1e-12;
    while f(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = hi;
    let z = DVector::from_iterator(y.len(), y.iter().zip(&a).map(|(yi, ai)| ai * yi / (ai + mu)));
    let back = v * z;
    center.iter().zip(back.iter()).map(|(c, x)| c + x).collect()
}

// ---------------------------------------------------------------- mean–cov

pub fn meancov_dim(d: usize) -> usize {
    d + d * (d + 1) / 2
}

/// Upper triangle of a symmetric matrix, off-diagonals scaled by `√2`.
pub fn svec(q: &DMatrix<f64>) -> Vec<f64> {
    let d = q.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            if i == j {
                out.push(q[(i, i)]);
            } else {
                out.push(SQRT_2 * 0.5 * (q[(i, j)] + q[(j, i)]));
            }
        }
    }
    out
}

/// Inverse of [`svec`].
pub fn smat(d: usize, s: &[f64]) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            if i == j {
                q[(i, i)] = s[k];
            } else {
                q[(i, j)] = s[k] / SQRT_2;
                q[(j, i)] = s[k] / SQRT_2;
            }
            k += 1;
        }
    }
    q
}

/// Symmetric matrix `C` with `<C, Q>_F = c·svec(Q)`.
fn svec_adjoint(d: usize, c: &[f64]) -> DMatrix<f64> {
    smat(d, c)
}

pub fn meancov_pack(v: &[f64], q: &DMatrix<f64>) -> Point {
    let mut out = v.to_vec();
    out.extend(svec(q));
    out
}

pub fn meancov_unpack(d: usize, z: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    (DVector::from_column_slice(&z[..d]), smat(d, &z[d..]))
}

fn schur_block(v: &DVector<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let d = v.len();
    let mut m = DMatrix::zeros(d + 1, d + 1);
    m[(0, 0)] = 1.0;
    for i in 0..d {
        m[(0, i + 1)] = v[i];
        m[(i + 1, 0)] = v[i];
        for j in 0..d {
            m[(i + 1, j + 1)] = q[(i, j)];
        }
    }
    m
}

/// Dykstra on the lifted matrix `N = [[1/2, (v/√2)ᵀ], [v/√2, Q]]`, whose Frobenius
/// geometry matches the flattened coordinates. The two sets are the PSD cone
/// and `{N₀₀ = 1/2, Tr Q <= 1}`; both projections are exact.
fn project_meancov_dykstra(d: usize, w: &[f64]) -> Point {
    let (v, q) = meancov_unpack(d, w);
    let n = d + 1;
    let mut x = DMatrix::zeros(n, n);
    x[(0, 0)] = 0.5;
    for i in 0..d {
        x[(0, i + 1)] = v[i] / SQRT_2;
        x[(i + 1, 0)] = v[i] / SQRT_2;
        for j in 0..d {
            x[(i + 1, j + 1)] = q[(i, j)];
        }
    }
    let mut p = DMatrix::zeros(n, n);
    let mut r = DMatrix::zeros(n, n);
    for _ in 0..DYKSTRA_MAX_SWEEPS {
        let y = psd_part(&(&x + &p));
        p = &x + &p - &y;
        let target = &y + &r;
        let x_new = affine_trace_part(&target);
        r = target - &x_new;
        let moved = (&x_new - &x).norm();
        x = x_new;
        if moved < DYKSTRA_STEP_TOL {
            break;
        }
    }
    let vout: Vec<f64> = (0..d).map(|i| SQRT_2 * 0.5 * (x[(0, i + 1)] + x[(i + 1, 0)])).collect();
    let qout = x.view((1, 1), (d, d)).into_owned();
    meancov_pack(&vout, &((&qout + qout.transpose()) * 0.5))
}

fn affine_trace_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = m.clone();
    out[(0, 0)] = 0.5;
    let tr: f64 = (1..n).map(|i| out[(i, i)]).sum();
    if tr > 1.0 {
        let shift = (tr - 1.0) / (n - 1) as f64;
        for i in 1..n {
            out[(i, i)] -= shift;
        }
    }
    out
}

/// `argmax_{|y|<=1} yᵀCy + bᵀy`.
pub(crate) fn trust_region_max(c: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let d = b.len();
    let (lam, u) = sym_eigen(c);
    let beta = u.transpose() * b;
    let lmax = lam[d - 1];
    let y_of = |mu: f64, skip_top: bool| -> DVector<f64> {
        let mut coords = DVector::zeros(d);
        for i in 0..d {
            let gap = mu - lam[i];
            if skip_top && (lmax - lam[i]) <= 1e-12 * (1.0 + lmax.abs()) {
                continue;
            }
            if gap > 0.0 {
                coords[i] = beta[i] / (2.0 * gap);
            }
        }
        &u * coords
    };
    let norm_at = |mu: f64| -> f64 {
        (0..d)
            .map(|i| {
                let g = mu - lam[i];
                (beta[i] / (2.0 * g)).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    };
    if b.norm() == 0.0 && lmax <= 0.0 {
        return DVector::zeros(d);
    }
    if lmax < 0.0 && norm_at(0.0) <= 1.0 {
        return y_of(0.0, false);
    }
    let lo = lmax.max(0.0);
    // Hard case: the linear term has no weight on the top eigenspace.
    if lmax >= 0.0 {
        let top_weight: f64 = (0..d)
            .filter(|&i| (lmax - lam[i]) <= 1e-12 * (1.0 + lmax.abs()))
            .map(|i| beta[i] * beta[i])
            .sum::<f64>()
            .sqrt();
        if top_weight <= 1e-14 * (1.0 + b.norm()) {
            let rest = y_of(lmax, true);
            let rn = rest.norm();
            if rn <= 1.0 {
                let top = u.column(d - 1).into_owned();
                return rest + top * (1.0 - rn * rn).max(0.0).sqrt();
            }
        }
    }
    let mut a = lo;
    let mut z = lo + 0.5 * b.norm() + 1e-12;
    while norm_at(z) > 1.0 {
        z = lo + 2.0 * (z - lo);
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + z);
        if mid <= lmax || norm_at(mid) > 1.0 {
            a = mid;
        } else {
            z = mid;
        }
    }
    let y = y_of(z, false);
    let n = y.norm();
    if n > 1.0 {
        y / n
    } else {
        y
    }
}

// ---------------------------------------------------------------- moments

/// `(1, y, y², …, y^degree)`.
pub fn moment_curve(degree: usize, y: f64) -> Point {
    let mut out = Vec::with_capacity(degree + 1);
    let mut acc = 1.0;
    for _ in 0..=degree {
        out.push(acc);
        acc *= y;
    }
    out
}

/// Moments of the uniform probability measure on `[-1, 1]`.
pub fn uniform_moments(degree: usize) -> Point {
    (0..=degree)
        .map(|k| if k % 2 == 0 { 1.0 / (k + 1) as f64 } else { 0.0 })
        .collect()
}

/// `H[i][j] = m[i+j]`, `0 <= i, j <= degree/2`.
pub fn hankel(m: &[f64], degree: usize) -> DMatrix<f64> {
    let h = degree / 2;
    DMatrix::from_fn(h + 1, h + 1, |i, j| m[i + j])
}

/// Localizing matrix of `1 - y²`: `L[i][j] = m[i+j] - m[i+j+2]`, `0 <= i, j < degree/2`.
pub fn localizing_hankel(m: &[f64], degree: usize) -> DMatrix<f64> {
    let h = degree / 2;
    DMatrix::from_fn(h, h, |i, j| m[i + j] - m[i + j + 2])
}

pub(crate) fn horner(c: &[f64], y: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, ck| acc * y + ck)
}

/// Global maximizer of `Σ c_k y^k` over `[-1, 1]`.
pub(crate) fn poly_max(c: &[f64]) -> (f64, f64) {
    let dc: Vec<f64> = c.iter().enumerate().skip(1).map(|(k, ck)| k as f64 * ck).collect();
    let mut best = (-1.0, horner(c, -1.0));
    let consider = |y: f64, best: &mut (f64, f64)| {
        let v = horner(c, y);
        if v > best.1 {
            *best = (y, v);
        }
    };
    consider(1.0, &mut best);
    const GRID: usize = 512;
    let mut prev_y = -1.0;
    let mut prev_d = horner(&dc, prev_y);
    for k in 1..=GRID {
        let y = -1.0 + 2.0 * k as f64 / GRID as f64;
        let dv = horner(&dc, y);
        consider(y, &mut best);
        if prev_d > 0.0 && dv <= 0.0 {
            let (mut a, mut b) = (prev_y, y);
            for _ in 0..60 {
                let mid = 0.5 * (a + b);
                if horner(&dc, mid) > 0.0 {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            consider(0.5 * (a + b), &mut best);
        }
        prev_y = y;
        prev_d = dv;
    }
    best
}

/// Exact diameter of the moment curve's convex hull (attained on the curve).
pub fn moment_diameter(degree: usize) -> f64 {
    let f = |a: f64, b: f64| -> f64 {
        let (ca, cb) = (moment_curve(degree, a), moment_curve(degree, b));
        dist(&ca, &cb)
    };
    const N: usize = 200;
    let grid: Vec<f64> = (0..=N).map(|k| -1.0 + 2.0 * k as f64 / N as f64).collect();
    let mut best = (0.0, -1.0, 1.0);
    for &a in &grid {
        for &b in &grid {
            let v = f(a, b);
            if v > best.0 {
                best = (v, a, b);
            }
        }
    }
    let (mut a, mut b) = (best.1, best.2);
    let mut step = 2.0 / N as f64;
    while step > 1e-13 {
        let mut improved = false;
        for (da, db) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let (na, nb) = ((a + da).clamp(-1.0, 1.0), (b + db).clamp(-1.0, 1.0));
            let v = f(na, nb);
            if v > best.0 {
                best.0 = v;
                a = na;
                b = nb;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    best.0
}

/// Projection onto the moment set by a fully corrective conditional-gradient
/// method (Wolfe's minimum-norm-point iteration over points of the moment curve).
fn project_moments(degree: usize, w: &[f64]) -> Point {
    let mut ys = vec![poly_max(w).0];
    let mut lam = vec![1.0];
    let combine = |ys: &[f64], lam: &[f64]| -> Point {
        let mut x = vec![0.0; degree + 1];
        for (y, l) in ys.iter().zip(lam) {
            for (k, c) in moment_curve(degree, *y).iter().enumerate() {
                x[k] += l * c;
            }
        }
        x[0] = 1.0;
        x
    };
    let scale = 1.0 + norm(w);
    for _ in 0..300 {
        let x = combine(&ys, &lam);
        let g: Vec<f64> = w.iter().zip(&x).map(|(a, b)| a - b).collect();
        let (ystar, val) = poly_max(&g);
        let gap = val - dot(&g, &x);
        if gap <= 1e-15 * scale * scale {
            break;
        }
        if ys.iter().any(|y| (y - ystar).abs() <= 1e-15) {
            break;
        }
        ys.push(ystar);
        lam.push(0.0);
        for _ in 0..ys.len() + 5 {
            let alpha = affine_min_norm(degree, &ys, w);
            if alpha.iter().all(|a| *a > 1e-15) {
                lam = alpha;
                break;
            }
            let mut theta = 1.0f64;
            for (l, a) in lam.iter().zip(&alpha) {
                if *a <= 1e-15 {
                    let denom = l - a;
                    if denom > 0.0 {
                        theta = theta.min(l / denom);
                    } else {
                        theta = 0.0;
                    }
                }
            }
            let mut next: Vec<f64> = lam.iter().zip(&alpha).map(|(l, a)| l + theta * (a - l)).collect();
            let mut drop = next
                .iter()
                .enumerate()
                .filter(|(_, l)| **l <= 1e-15)
                .map(|(i, _)| i)
                .collect::<Vec<_>>();
            if drop.is_empty() {
                let imin = (0..next.len()).min_by(|&a, &b| next[a].total_cmp(&next[b])).unwrap();
                drop.push(imin);
            }
            for &i in drop.iter().rev() {
                if ys.len() > 1 {
                    ys.remove(i);
                    next.remove(i);
                }
            }
            let s: f64 = next.iter().map(|x| x.max(0.0)).sum();
            lam = next.iter().map(|x| x.max(0.0) / s).collect();
            if ys.len() == 1 {
                lam = vec![1.0];
                break;
            }
        }
    }
    combine(&ys, &lam)
}

/// Affine weights minimizing `|Σ α_i s(y_i) - w|` with `Σ α_i = 1`.
fn affine_min_norm(degree: usize, ys: &[f64], w: &[f64]) -> Vec<f64> {
    let k = ys.len();
    if k == 1 {
        return vec![1.0];
    }
    // Eliminate the last weight: minimize |s_k - w + Σ α_i (s_i - s_k)| over the others.
    let last = moment_curve(degree, ys[k - 1]);
    let mut a = DMatrix::zeros(degree, k - 1);
    for (j, y) in ys[..k - 1].iter().enumerate() {
        for (i, c) in moment_curve(degree, *y).iter().enumerate().skip(1) {
            a[(i - 1, j)] = c - last[i];
        }
    }
    let b = DVector::from_fn(degree, |i, _| w[i + 1] - last[i + 1]);
    let sol = crate::linalg::lstsq(&a, &b);
    let mut out: Vec<f64> = sol.iter().copied().collect();
    out.push(1.0 - out.iter().sum::<f64>());
    out
}

/// Discrete feasibility check on a grid: nonnegative weights on the moment
/// curve at `nodes` points reproducing `m`, returning the residual norm.
pub fn grid_feasibility_residual(m: &[f64], degree: usize, nodes: usize) -> f64 {
    let grid: Vec<f64> = (0..nodes)
        .map(|k| -1.0 + 2.0 * k as f64 / (nodes - 1) as f64)
        .collect();
    let a = DMatrix::from_fn(degree + 1, nodes, |i, j| grid[j].powi(i as i32));
    let b = DVector::from_column_slice(m);
    let x = nnls(&a, &b);
    (a * x - b).norm()
}
