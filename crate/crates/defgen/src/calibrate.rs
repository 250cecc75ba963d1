//! Online multicalibration by defensive forecasting.
//!
//! Each round the engine builds `S_t(p) = Φ(x_t, p)ᵀ m_t`, where
//! `m_t = Σ_{τ<t} E_{p∼D_τ}[Φ(x_τ, p)(z_τ − p)]`, solves the round's EVI and
//! samples a forecast from the solution.

use crate::domains::{ConvexDomain, Point};
use crate::error::{check_finite, Error, Result};
use crate::evi::{certify_residual, compress, schedule_for, solve_evi_with, AtomicDistribution, SolveOptions};
use crate::kernels::{MatrixKernel, RkhsFunction};
use crate::linalg::{dot, norm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Feature mode whenever the kernel exposes an explicit feature map (all built-ins do).
    #[default]
    Auto,
    /// Evaluate `S_t` as a kernel sum over every stored atom.
    Expansion,
    /// Keep only the accumulated feature vector `m_t`.
    Features,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Constant per-round EVI tolerance; `2D²G` when absent.
    pub epsilon: Option<f64>,
    pub k_cap: usize,
    pub mode: Mode,
    /// Bound the operator norm by `√G‖m_t‖` instead of `tGD` when `m_t` is available.
    pub tight_gradient: bool,
    /// Carathéodory-reduce each solution onto the statistics the kernel can see.
    pub compress: bool,
    /// Stop OGD once the running average already certifies at `ε/2`.
    pub early_stop: bool,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            k_cap: 10_000,
            mode: Mode::Auto,
            tight_gradient: true,
            compress: true,
            early_stop: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub dist: AtomicDistribution,
    pub p_sampled: Point,
    pub z: Point,
    pub epsilon: f64,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
struct Pending {
    x: Vec<f64>,
    dist: AtomicDistribution,
    p_sampled: Point,
    epsilon: f64,
    residual: f64,
    iterations: usize,
}

#[derive(Clone, Debug)]
pub struct Engine {
    kernel: MatrixKernel,
    domain: ConvexDomain,
    diameter: f64,
    g: f64,
    config: EngineConfig,
    history: Vec<RoundRecord>,
    pending: Option<Pending>,
    m: Option<Vec<f64>>,
    x_dim: Option<usize>,
    rng: ChaCha8Rng,
}

/// The round operator `p ↦ S_t(p)`.
pub type Operator<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>;

impl Engine {
    pub fn new(kernel: MatrixKernel, domain: ConvexDomain, g: f64, config: EngineConfig) -> Result<Self> {
        if kernel.d() != domain.dim() {
            return Err(Error::Config(format!(
                "kernel output dimension {} does not match the domain dimension {}",
                kernel.d(),
                domain.dim()
            )));
        }
        if !(g.is_finite() && g >= 0.0) {
            return Err(Error::Config(format!("operator norm bound must be finite, got {g}")));
        }
        if let Some(e) = config.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Config(format!("epsilon must be positive, got {e}")));
            }
        }
        if config.k_cap == 0 {
            return Err(Error::Config("k_cap must be at least 1".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            diameter: domain.diameter(),
            kernel,
            domain,
            g,
            config,
            history: Vec::new(),
            pending: None,
            m: None,
            x_dim: None,
            rng,
        })
    }

    pub fn kernel(&self) -> &MatrixKernel {
        &self.kernel
    }

    pub fn domain(&self) -> &ConvexDomain {
        &self.domain
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    /// Accumulated feature vector `m_t` (feature mode only, after the first round).
    pub fn amortized_m(&self) -> Option<&[f64]> {
        self.m.as_deref()
    }

    pub fn feature_mode(&self) -> bool {
        match self.config.mode {
            Mode::Auto | Mode::Features => true,
            Mode::Expansion => false,
        }
    }

    /// The per-round tolerance `ε_t`.
    pub fn epsilon(&self) -> f64 {
        self.config
            .epsilon
            .unwrap_or(2.0 * self.diameter * self.diameter * self.g)
    }

    fn check_x(&mut self, x: &[f64]) -> Result<()> {
        check_finite(x, "features")?;
        match self.x_dim {
            Some(n) if n != x.len() => Err(Error::Dimension {
                expected: n,
                got: x.len(),
            }),
            _ => {
                self.x_dim = Some(x.len());
                Ok(())
            }
        }
    }

    /// `m_t` rebuilt from the stored history.
    pub fn recompute_m(&self) -> Result<Vec<f64>> {
        let n = self.x_dim.unwrap_or(0);
        let mut m = vec![0.0; self.kernel.feature_dim(n)];
        for r in &self.history {
            accumulate(&self.kernel, &mut m, &r.x, &r.dist, &r.z)?;
        }
        Ok(m)
    }

    /// `S_t` for features `x`, in the engine's mode.
    pub fn make_operator<'a>(&'a self, x: &'a [f64]) -> Operator<'a> {
        if self.feature_mode() {
            match &self.m {
                Some(m) => {
                    let m = m.clone();
                    Box::new(move |p: &[f64]| self.kernel.phi_t_apply(x, p, &m).unwrap_or_else(|_| vec![f64::NAN; p.len()]))
                }
                None => Box::new(|p: &[f64]| vec![0.0; p.len()]),
            }
        } else {
            Box::new(move |p: &[f64]| self.expansion_operator(x, p))
        }
    }

    fn expansion_operator(&self, x: &[f64], p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; p.len()];
        for r in &self.history {
            for (a, w) in r.dist.iter() {
                let Ok(g) = self.kernel.gamma((x, p), (&r.x, a)) else {
                    return vec![f64::NAN; p.len()];
                };
                let diff: Vec<f64> = r.z.iter().zip(a).map(|(z, q)| z - q).collect();
                let v = g * nalgebra::DVector::from_column_slice(&diff);
                for (o, vi) in out.iter_mut().zip(v.iter()) {
                    *o += w * vi;
                }
            }
        }
        out
    }

    /// Statistic whose expectation determines every linear functional of `D_t`
    /// that the kernel can observe.
    fn p_statistic(&self, x: &[f64], p: &[f64]) -> Vec<f64> {
        match &self.kernel {
            MatrixKernel::IdentityScaled { scalar, .. } => {
                if scalar.depends_on_p() {
                    let mut s = p.to_vec();
                    for i in 0..p.len() {
                        for j in i..p.len() {
                            s.push(p[i] * p[j]);
                        }
                    }
                    s
                } else {
                    p.to_vec()
                }
            }
            MatrixKernel::FeatureMap(fm) => {
                let phi = fm.eval(x, p);
                let mut s: Vec<f64> = phi.iter().copied().collect();
                let php = &phi * nalgebra::DVector::from_column_slice(p);
                s.extend(php.iter().copied());
                s
            }
        }
    }

    /// Solve round `t`'s EVI and sample `p_t`. Fails if a round is already pending.
    pub fn round(&mut self, x: &[f64]) -> Result<AtomicDistribution> {
        if self.pending.is_some() {
            return Err(Error::Protocol("round called while a target is pending".into()));
        }
        self.check_x(x)?;
        let t = self.history.len() + 1;
        let epsilon = self.epsilon();
        let start = self.domain.project(&vec![0.0; self.domain.dim()])?;
        let (dist, residual, iterations) = {
            let s = self.make_operator(x);
            let m_zero = self.feature_mode() && self.m.as_ref().is_none_or(|m| m.iter().all(|v| *v == 0.0));
            if t == 1 || m_zero {
                let d = AtomicDistribution::point_mass(start);
                let r = certify_residual(&d, &*s, &self.domain)?;
                (d, r, 1)
            } else if !self.kernel.depends_on_p() {
                // S_t is constant in p, so the linear maximizer solves the EVI exactly.
                let c = s(&self.domain.project(&vec![0.0; self.domain.dim()])?);
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Operator { iterate: 0 });
                }
                let (z, _) = self.domain.linear_max(&c)?;
                let d = AtomicDistribution::point_mass(z);
                let r = certify_residual(&d, &*s, &self.domain)?;
                (d, r, 1)
            } else {
                let loose = t as f64 * self.g * self.diameter;
                let gprime = match (&self.m, self.config.tight_gradient && self.feature_mode()) {
                    (Some(m), true) => loose.min(self.g.sqrt() * norm(m)),
                    _ => loose,
                };
                let sched = schedule_for(epsilon, gprime, self.diameter, self.config.k_cap);
                let opts = SolveOptions {
                    early_stop: self.config.early_stop,
                };
                let sol = match solve_evi_with(&*s, &self.domain, epsilon, sched.k, sched.eta, opts) {
                    Ok(sol) => sol,
                    Err(Error::Certification { residual, epsilon, .. }) => {
                        return Err(Error::Certification { round: t, residual, epsilon })
                    }
                    Err(e) => return Err(e),
                };
                let mut d = sol.distribution;
                if self.config.compress && d.len() > 1 {
                    d = compress(d, &|p: &[f64]| self.p_statistic(x, p));
                }
                let r = certify_residual(&d, &*s, &self.domain)?;
                (d, r, sol.iterations)
            }
        };
        if residual > epsilon {
            return Err(Error::Certification {
                round: t,
                residual,
                epsilon,
            });
        }
        let p_sampled = sample_atom(&mut self.rng, &dist).clone();
        self.pending = Some(Pending {
            x: x.to_vec(),
            dist: dist.clone(),
            p_sampled,
            epsilon,
            residual,
            iterations,
        });
        Ok(dist)
    }

    /// The forecast sampled in the pending round.
    pub fn pending_sample(&self) -> Option<&Point> {
        self.pending.as_ref().map(|p| &p.p_sampled)
    }

    pub fn pending_distribution(&self) -> Option<&AtomicDistribution> {
        self.pending.as_ref().map(|p| &p.dist)
    }

    /// Record the target for the pending round.
    pub fn reveal(&mut self, z: &[f64]) -> Result<&RoundRecord> {
        if self.pending.is_none() {
            return Err(Error::Protocol("reveal called without a pending round".into()));
        }
        if !self.domain.contains(z) {
            return Err(Error::Input("revealed target lies outside the domain".into()));
        }
        let p = self.pending.take().expect("checked above");
        if self.feature_mode() {
            let r = self.kernel.feature_dim(p.x.len());
            let m = self.m.get_or_insert_with(|| vec![0.0; r]);
            accumulate(&self.kernel, m, &p.x, &p.dist, z)?;
        }
        self.history.push(RoundRecord {
            t: self.history.len() + 1,
            x: p.x,
            dist: p.dist,
            p_sampled: p.p_sampled,
            z: z.to_vec(),
            epsilon: p.epsilon,
            residual: p.residual,
            iterations: p.iterations,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    /// `|Σ_t E_{p∼D_t}[h(x_t, p)·(z_t − p)]|` over the completed history.
    pub fn calibration_error(&self, h: &RkhsFunction) -> Result<f64> {
        calibration_error(&self.kernel, &self.history, h)
    }

    /// Diagnostic variant using the sampled forecasts `p_t` instead of `D_t`.
    pub fn sampled_calibration_error(&self, h: &RkhsFunction) -> Result<f64> {
        let mut s = 0.0;
        for r in &self.history {
            let hv = h.eval(&self.kernel, &r.x, &r.p_sampled)?;
            let diff: Vec<f64> = r.z.iter().zip(&r.p_sampled).map(|(z, p)| z - p).collect();
            s += dot(&hv, &diff);
        }
        Ok(s.abs())
    }

    /// `‖h‖ √(T D² G + Σ_t ε_t)`.
    pub fn theoretical_bound(&self, h_norm: f64) -> f64 {
        let eps: Vec<f64> = self.history.iter().map(|r| r.epsilon).collect();
        theoretical_bound(h_norm, self.diameter, self.g, &eps)
    }
}

/// `m += E_{p∼D}[Φ(x, p)(z − p)]`.
pub fn accumulate(kernel: &MatrixKernel, m: &mut [f64], x: &[f64], dist: &AtomicDistribution, z: &[f64]) -> Result<()> {
    for (p, w) in dist.iter() {
        let diff: Vec<f64> = z.iter().zip(p).map(|(a, b)| a - b).collect();
        let inc = kernel.phi_apply(x, p, &diff)?;
        for (mi, v) in m.iter_mut().zip(&inc) {
            *mi += w * v;
        }
    }
    Ok(())
}

pub fn calibration_error(kernel: &MatrixKernel, history: &[RoundRecord], h: &RkhsFunction) -> Result<f64> {
    let mut s = 0.0;
    for r in history {
        for (p, w) in r.dist.iter() {
            let hv = h.eval(kernel, &r.x, p)?;
            let diff: Vec<f64> = r.z.iter().zip(p).map(|(z, q)| z - q).collect();
            s += w * dot(&hv, &diff);
        }
    }
    Ok(s.abs())
}

pub fn theoretical_bound(h_norm: f64, diameter: f64, g: f64, epsilons: &[f64]) -> f64 {
    let t = epsilons.len() as f64;
    let sum: f64 = epsilons.iter().sum();
    h_norm * (t * diameter * diameter * g + sum).sqrt()
}

fn sample_atom<'a, R: Rng>(rng: &mut R, dist: &'a AtomicDistribution) -> &'a Point {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, w) in dist.iter() {
        acc += w;
        if u < acc {
            return a;
        }
    }
    dist.atoms.last().expect("nonempty distribution")
}
