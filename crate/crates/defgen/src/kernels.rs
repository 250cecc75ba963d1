//! Scalar and matrix-valued kernels, their explicit feature maps, and RKHS functions.
//!
//! Every matrix kernel here has a finite feature map `Φ(x, p) ∈ R^{r×d}` with
//! `Γ(a, b) = Φ(a)ᵀ Φ(b)`. Identity-scaled kernels use `Φ = ψ ⊗ I_d`, laid out so
//! that row `i·d + j` of `Φ` is `ψ_i e_jᵀ`.

use crate::domains::ConvexDomain;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, norm, sym_eigen};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarKernel {
    /// `x·x′`
    Linear,
    /// `x·x′ + p·p′`
    AffinePair,
    /// `(1 + x·x′)^degree`
    Polynomial { degree: u32 },
    Constant,
}

impl ScalarKernel {
    pub fn eval(&self, x: &[f64], p: &[f64], x2: &[f64], p2: &[f64]) -> f64 {
        match self {
            ScalarKernel::Linear => dot(x, x2),
            ScalarKernel::AffinePair => dot(x, x2) + dot(p, p2),
            ScalarKernel::Polynomial { degree } => (1.0 + dot(x, x2)).powi(*degree as i32),
            ScalarKernel::Constant => 1.0,
        }
    }

    pub fn depends_on_p(&self) -> bool {
        matches!(self, ScalarKernel::AffinePair)
    }

    /// Length of the explicit feature vector for `x ∈ R^n`, `p ∈ R^{pdim}`.
    pub fn feature_dim(&self, n: usize, pdim: usize) -> usize {
        match self {
            ScalarKernel::Linear => n,
            ScalarKernel::AffinePair => n + pdim,
            ScalarKernel::Polynomial { degree } => binomial(n + *degree as usize, *degree as usize),
            ScalarKernel::Constant => 1,
        }
    }

    /// `ψ(x, p)` with `k(a, b) = ψ(a)·ψ(b)`.
    pub fn features(&self, x: &[f64], p: &[f64]) -> Vec<f64> {
        match self {
            ScalarKernel::Linear => x.to_vec(),
            ScalarKernel::AffinePair => x.iter().chain(p).copied().collect(),
            ScalarKernel::Polynomial { degree } => poly_features(x, *degree as usize),
            ScalarKernel::Constant => vec![1.0],
        }
    }
}

/// Exponents over `x ∈ R^n` and feature scale of each polynomial feature, in
/// feature order: feature `i` equals `scale_i · x^{exps_i}`.
pub fn polynomial_monomials(n: usize, degree: u32) -> Vec<(Vec<usize>, f64)> {
    let r = degree as usize;
    let mut out = Vec::new();
    let mut exps = vec![0usize; n + 1];
    fn rec(i: usize, left: usize, exps: &mut Vec<usize>, r: usize, out: &mut Vec<(Vec<usize>, f64)>) {
        if i == exps.len() - 1 {
            exps[i] = left;
            let coef = exps.iter().fold(factorial(r), |c, &e| c / factorial(e));
            out.push((exps[1..].to_vec(), coef.sqrt()));
            return;
        }
        for e in (0..=left).rev() {
            exps[i] = e;
            rec(i + 1, left - e, exps, r, out);
        }
    }
    rec(0, r, &mut exps, r, &mut out);
    out
}

fn binomial(n: usize, k: usize) -> usize {
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// Monomials of `(1, x)` of total degree `r`, weighted by the square root of
/// their multinomial coefficient.
fn poly_features(x: &[f64], r: usize) -> Vec<f64> {
    let mut z = Vec::with_capacity(x.len() + 1);
    z.push(1.0);
    z.extend_from_slice(x);
    let mut out = Vec::new();
    let mut exps = vec![0usize; z.len()];
    fn rec(z: &[f64], i: usize, left: usize, exps: &mut Vec<usize>, r: usize, out: &mut Vec<f64>) {
        if i == z.len() - 1 {
            exps[i] = left;
            let mut coef = factorial(r);
            let mut mono = 1.0;
            for (zk, &e) in z.iter().zip(exps.iter()) {
                coef /= factorial(e);
                mono *= zk.powi(e as i32);
            }
            out.push(coef.sqrt() * mono);
            return;
        }
        for e in (0..=left).rev() {
            exps[i] = e;
            rec(z, i + 1, left - e, exps, r, out);
        }
    }
    rec(&z, 0, r, &mut exps, r, &mut out);
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Feature function `(x, p) ↦ Φ(x, p)` with shape `r × d`.
pub type FeatureFn = dyn Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync;

#[derive(Clone)]
pub struct FeatureMap {
    pub name: String,
    pub x_dim: usize,
    pub d: usize,
    pub r: usize,
    /// Analytic bound on `‖Φ‖²_op` given `‖x‖ <= B` and `‖p‖ <= P`, if known.
    pub bound: Option<fn(f64, f64) -> f64>,
    f: Arc<FeatureFn>,
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap")
            .field("name", &self.name)
            .field("x_dim", &self.x_dim)
            .field("d", &self.d)
            .field("r", &self.r)
            .finish()
    }
}

impl FeatureMap {
    pub fn new(
        name: impl Into<String>,
        x_dim: usize,
        d: usize,
        r: usize,
        f: impl Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            x_dim,
            d,
            r,
            bound: None,
            f: Arc::new(f),
        }
    }

    pub fn eval(&self, x: &[f64], p: &[f64]) -> DMatrix<f64> {
        (self.f)(x, p)
    }

    /// Built-in maps:
    ///
    /// * `x`: `Φᵀ = [x]`, one feature, needs `x_dim = d`;
    /// * `stack`: `Φᵀ = [x | p]`, needs `x_dim = d`;
    /// * `raw`: `(1, x, p) ⊗ I_d`;
    /// * `pairwise`: `(1, x, upper(xxᵀ)) ⊗ I_d`;
    /// * `history`: `(1, x) ⊗ I_d`.
    pub fn builtin(name: &str, x_dim: usize, d: usize) -> Result<Self> {
        let need_square = |n: &str| -> Result<()> {
            if x_dim != d {
                Err(Error::Config(format!(
                    "feature map `{n}` needs x dimension {d}, got {x_dim}"
                )))
            } else {
                Ok(())
            }
        };
        let fm = match name {
            "x" => {
                need_square(name)?;
                let mut fm = Self::new(name, x_dim, d, 1, move |x, _| DMatrix::from_row_slice(1, x.len(), x));
                fm.bound = Some(|b, _| b * b);
                fm
            }
            "stack" => {
                need_square(name)?;
                let mut fm = Self::new(name, x_dim, d, 2, move |x, p| {
                    let mut m = DMatrix::zeros(2, x.len());
                    for j in 0..x.len() {
                        m[(0, j)] = x[j];
                        m[(1, j)] = p[j];
                    }
                    m
                });
                fm.bound = Some(|b, p| b * b + p * p);
                fm
            }
            "raw" => {
                let mut fm = Self::new(name, x_dim, d, (1 + x_dim + d) * d, move |x, p| {
                    let psi: Vec<f64> = std::iter::once(1.0).chain(x.iter().copied()).chain(p.iter().copied()).collect();
                    kron_identity(&psi, d)
                });
                fm.bound = Some(|b, p| 1.0 + b * b + p * p);
                fm
            }
            "pairwise" => {
                let r = 1 + x_dim + x_dim * (x_dim + 1) / 2;
                let mut fm = Self::new(name, x_dim, d, r * d, move |x, _| {
                    let mut psi = vec![1.0];
                    psi.extend_from_slice(x);
                    for i in 0..x.len() {
                        for j in i..x.len() {
                            psi.push(x[i] * x[j]);
                        }
                    }
                    kron_identity(&psi, d)
                });
                fm.bound = Some(|b, _| 1.0 + b * b + b.powi(4));
                fm
            }
            "history" => {
                let mut fm = Self::new(name, x_dim, d, (1 + x_dim) * d, move |x, _| {
                    let psi: Vec<f64> = std::iter::once(1.0).chain(x.iter().copied()).collect();
                    kron_identity(&psi, d)
                });
                fm.bound = Some(|b, _| 1.0 + b * b);
                fm
            }
            other => return Err(Error::Config(format!("unknown feature map `{other}`"))),
        };
        Ok(fm)
    }
}

/// `ψ ⊗ I_d` as an `(len ψ · d) × d` matrix.
fn kron_identity(psi: &[f64], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(psi.len() * d, d);
    for (i, v) in psi.iter().enumerate() {
        for j in 0..d {
            m[(i * d + j, j)] = *v;
        }
    }
    m
}

/// Serializable description of a matrix kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    IdentityScaled { scalar: ScalarKernel, d: usize },
    FeatureMap { name: String, x_dim: usize, d: usize },
}

impl KernelSpec {
    pub fn build(&self) -> Result<MatrixKernel> {
        match self {
            KernelSpec::IdentityScaled { scalar, d } => Ok(MatrixKernel::identity_scaled(*scalar, *d)),
            KernelSpec::FeatureMap { name, x_dim, d } => Ok(MatrixKernel::feature_map(FeatureMap::builtin(name, *x_dim, *d)?)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            KernelSpec::IdentityScaled { scalar, .. } => match scalar {
                ScalarKernel::Linear => "linear".into(),
                ScalarKernel::AffinePair => "affine_pair".into(),
                ScalarKernel::Polynomial { degree } => format!("poly{degree}"),
                ScalarKernel::Constant => "constant".into(),
            },
            KernelSpec::FeatureMap { name, .. } => format!("map:{name}"),
        }
    }
}

#[derive(Clone, Debug)]
pub enum MatrixKernel {
    IdentityScaled { scalar: ScalarKernel, d: usize },
    FeatureMap(FeatureMap),
}

/// Bounds on the inputs used to compute `G`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum XBound {
    /// `‖x‖₂ <= radius`
    Norm { radius: f64 },
    /// `x ∈ {±1}^n` (or `[-1, 1]^n`)
    Hypercube { n: usize },
    Unbounded,
}

impl XBound {
    fn radius(&self) -> Result<f64> {
        match self {
            XBound::Norm { radius } => Ok(*radius),
            XBound::Hypercube { n } => Ok((*n as f64).sqrt()),
            XBound::Unbounded => Err(Error::Input("operator norm bound needs bounded features".into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorBound {
    pub g: f64,
    /// Safety margin applied when `g` comes from random search rather than a formula.
    pub margin: Option<f64>,
}

impl MatrixKernel {
    pub fn identity_scaled(scalar: ScalarKernel, d: usize) -> Self {
        MatrixKernel::IdentityScaled { scalar, d }
    }

    pub fn feature_map(fm: FeatureMap) -> Self {
        MatrixKernel::FeatureMap(fm)
    }

    /// Output dimension `d`.
    pub fn d(&self) -> usize {
        match self {
            MatrixKernel::IdentityScaled { d, .. } => *d,
            MatrixKernel::FeatureMap(fm) => fm.d,
        }
    }

    pub fn spec(&self) -> KernelSpec {
        match self {
            MatrixKernel::IdentityScaled { scalar, d } => KernelSpec::IdentityScaled { scalar: *scalar, d: *d },
            MatrixKernel::FeatureMap(fm) => KernelSpec::FeatureMap {
                name: fm.name.clone(),
                x_dim: fm.x_dim,
                d: fm.d,
            },
        }
    }

    pub fn depends_on_p(&self) -> bool {
        match self {
            MatrixKernel::IdentityScaled { scalar, .. } => scalar.depends_on_p(),
            MatrixKernel::FeatureMap(_) => true,
        }
    }

    /// Number of feature rows `r` for features `x ∈ R^n`.
    pub fn feature_dim(&self, n: usize) -> usize {
        match self {
            MatrixKernel::IdentityScaled { scalar, d } => scalar.feature_dim(n, *d) * d,
            MatrixKernel::FeatureMap(fm) => fm.r,
        }
    }

    fn check(&self, x: &[f64], p: &[f64]) -> Result<()> {
        check_dim(self.d(), p.len())?;
        if let MatrixKernel::FeatureMap(fm) = self {
            check_dim(fm.x_dim, x.len())?;
        }
        Ok(())
    }

    pub fn gamma(&self, a: (&[f64], &[f64]), b: (&[f64], &[f64])) -> Result<DMatrix<f64>> {
        self.check(a.0, a.1)?;
        self.check(b.0, b.1)?;
        if a.0.len() != b.0.len() {
            return Err(Error::Dimension {
                expected: a.0.len(),
                got: b.0.len(),
            });
        }
        Ok(match self {
            MatrixKernel::IdentityScaled { scalar, d } => {
                DMatrix::identity(*d, *d) * scalar.eval(a.0, a.1, b.0, b.1)
            }
            MatrixKernel::FeatureMap(fm) => fm.eval(a.0, a.1).transpose() * fm.eval(b.0, b.1),
        })
    }

    /// Explicit `Φ(x, p)`, shape `r × d`.
    pub fn phi(&self, x: &[f64], p: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x, p)?;
        Ok(match self {
            MatrixKernel::IdentityScaled { scalar, d } => kron_identity(&scalar.features(x, p), *d),
            MatrixKernel::FeatureMap(fm) => fm.eval(x, p),
        })
    }

    /// `Φ(x, p)ᵀ m`.
    pub fn phi_t_apply(&self, x: &[f64], p: &[f64], m: &[f64]) -> Result<Vec<f64>> {
        match self {
            MatrixKernel::IdentityScaled { scalar, d } => {
                self.check(x, p)?;
                let psi = scalar.features(x, p);
                check_dim(psi.len() * d, m.len())?;
                let mut out = vec![0.0; *d];
                for (i, s) in psi.iter().enumerate() {
                    if *s == 0.0 {
                        continue;
                    }
                    for j in 0..*d {
                        out[j] += s * m[i * d + j];
                    }
                }
                Ok(out)
            }
            MatrixKernel::FeatureMap(fm) => {
                let phi = self.phi(x, p)?;
                check_dim(fm.r, m.len())?;
                Ok((phi.transpose() * nalgebra::DVector::from_column_slice(m)).as_slice().to_vec())
            }
        }
    }

    /// `Φ(x, p) u`.
    pub fn phi_apply(&self, x: &[f64], p: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.d(), u.len())?;
        match self {
            MatrixKernel::IdentityScaled { scalar, d } => {
                self.check(x, p)?;
                let psi = scalar.features(x, p);
                let mut out = Vec::with_capacity(psi.len() * d);
                for s in &psi {
                    for uj in u {
                        out.push(s * uj);
                    }
                }
                Ok(out)
            }
            MatrixKernel::FeatureMap(_) => {
                let phi = self.phi(x, p)?;
                Ok((phi * nalgebra::DVector::from_column_slice(u)).as_slice().to_vec())
            }
        }
    }

    /// An upper bound `G` on `‖Γ(a, a)‖_op` over `x` within `xb` and `p ∈ domain`.
    pub fn operator_norm_bound(&self, xb: XBound, domain: &ConvexDomain) -> Result<OperatorBound> {
        let pmax = domain.max_norm();
        let exact = |g: f64| Ok(OperatorBound { g, margin: None });
        match self {
            MatrixKernel::IdentityScaled { scalar, .. } => match scalar {
                ScalarKernel::Constant => exact(1.0),
                ScalarKernel::Linear => exact(xb.radius()?.powi(2)),
                ScalarKernel::AffinePair => exact(xb.radius()?.powi(2) + pmax * pmax),
                ScalarKernel::Polynomial { degree } => match xb {
                    XBound::Hypercube { n } => exact((1.0 + n as f64).powi(*degree as i32)),
                    _ => exact((1.0 + xb.radius()?.powi(2)).powi(*degree as i32)),
                },
            },
            MatrixKernel::FeatureMap(fm) => {
                let b = xb.radius()?;
                if let Some(f) = fm.bound {
                    return exact(f(b, pmax));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                let mut best = 0.0f64;
                for _ in 0..100_000 {
                    let x: Vec<f64> = match xb {
                        XBound::Hypercube { n } => (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect(),
                        _ => crate::domains::random_in_ball(&mut rng, fm.x_dim, 0.5)
                            .into_iter()
                            .map(|v| v * b)
                            .collect(),
                    };
                    let p = domain.sample(&mut rng);
                    let phi = fm.eval(&x, &p);
                    let g = phi.transpose() * phi;
                    best = best.max(sym_eigen(&g).0.max());
                }
                Ok(OperatorBound {
                    g: 1.1 * best,
                    margin: Some(0.1),
                })
            }
        }
    }
}

/// A vector-valued function in the RKHS of a matrix kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RkhsFunction {
    /// `h(a) = Φ(a)ᵀ θ`.
    Features { theta: Vec<f64> },
    /// `h(a) = Σ_i Γ(a_i, a) θ_i`, anchors given as `(x_i, p_i)`.
    Expansion {
        anchors: Vec<(Vec<f64>, Vec<f64>)>,
        coeffs: Vec<Vec<f64>>,
    },
}

impl RkhsFunction {
    pub fn zero(kernel: &MatrixKernel, x_dim: usize) -> Self {
        RkhsFunction::Features {
            theta: vec![0.0; kernel.feature_dim(x_dim)],
        }
    }

    /// Identity-scaled form from per-coordinate scalar feature weights `w_j`,
    /// `h_j(a) = ψ(a)·w_j`.
    pub fn from_coordinates(coords: &[Vec<f64>]) -> Self {
        let d = coords.len();
        let m = coords.first().map_or(0, |c| c.len());
        let mut theta = vec![0.0; m * d];
        for (j, w) in coords.iter().enumerate() {
            for (i, v) in w.iter().enumerate() {
                theta[i * d + j] = *v;
            }
        }
        RkhsFunction::Features { theta }
    }

    pub fn eval(&self, kernel: &MatrixKernel, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        match self {
            RkhsFunction::Features { theta } => kernel.phi_t_apply(x, p, theta),
            RkhsFunction::Expansion { anchors, coeffs } => {
                if anchors.len() != coeffs.len() {
                    return Err(Error::Input("expansion needs one coefficient per anchor".into()));
                }
                let mut out = vec![0.0; kernel.d()];
                for ((ax, ap), c) in anchors.iter().zip(coeffs) {
                    let g = kernel.gamma((ax, ap), (x, p))?;
                    check_dim(kernel.d(), c.len())?;
                    // Γ(a_i, a)ᵀ θ_i = Γ(a, a_i) θ_i; the kernels here are symmetric in that sense.
                    let v = g.transpose() * nalgebra::DVector::from_column_slice(c);
                    for (o, vi) in out.iter_mut().zip(v.iter()) {
                        *o += vi;
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn norm(&self, kernel: &MatrixKernel) -> Result<f64> {
        match self {
            RkhsFunction::Features { theta } => Ok(norm(theta)),
            RkhsFunction::Expansion { anchors, coeffs } => {
                let mut s = 0.0;
                for (i, (ai, ci)) in anchors.iter().zip(coeffs).enumerate() {
                    for (aj, cj) in anchors.iter().zip(coeffs).skip(i) {
                        let g = kernel.gamma((&ai.0, &ai.1), (&aj.0, &aj.1))?;
                        let v = g * nalgebra::DVector::from_column_slice(cj);
                        let term = dot(ci, v.as_slice());
                        s += if std::ptr::eq(ai, aj) { term } else { 2.0 * term };
                    }
                }
                Ok(s.max(0.0).sqrt())
            }
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        match self {
            RkhsFunction::Features { theta } => RkhsFunction::Features {
                theta: theta.iter().map(|v| v * c).collect(),
            },
            RkhsFunction::Expansion { anchors, coeffs } => RkhsFunction::Expansion {
                anchors: anchors.clone(),
                coeffs: coeffs.iter().map(|v| v.iter().map(|x| x * c).collect()).collect(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_features_reproduce_kernel() {
        let k = ScalarKernel::Polynomial { degree: 3 };
        let (x, y) = ([0.3, -0.7, 0.2], [0.5, 0.1, -0.9]);
        let f = dot(&k.features(&x, &[]), &k.features(&y, &[]));
        assert!((f - k.eval(&x, &[], &y, &[])).abs() < 1e-12);
        assert_eq!(k.features(&x, &[]).len(), k.feature_dim(3, 0));
    }
}
