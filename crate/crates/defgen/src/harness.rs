//! Simulated Nature, distinguisher families, experiment runs, reports and rate fits.

use crate::calibrate::{EngineConfig, Mode};
use crate::domains::ConvexDomain;
use crate::error::{Error, Result};
use crate::evi::AtomicDistribution;
use crate::generate::{Distinguisher, Generator, Outcome, StatisticMap};
use crate::kernels::{polynomial_monomials, FeatureMap, MatrixKernel, RkhsFunction, ScalarKernel, XBound};
use crate::linalg::{dot, norm};
use crate::transcript::{Header, Record, Transcript};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::time::Instant;

pub const CONFIG_VERSION: u32 = 1;

/// How Nature generates features and outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scenario {
    /// Labels drawn from a fixed distribution over `d` classes, features uniform in the unit ball.
    Iid {
        d: usize,
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default)]
        probs: Option<Vec<f64>>,
    },
    /// Targets in `[0, 1]^d` picked after seeing `D_t` to maximize one fixed
    /// function's round term; ties are settled by a fair coin.
    AdversarialFlip {
        #[serde(default = "one")]
        d: usize,
        #[serde(default)]
        n: usize,
        #[serde(default)]
        h: Option<Vec<f64>>,
    },
    /// A Markov chain over `d` tokens; features embed the previous token.
    TokenMarkov {
        d: usize,
        #[serde(default = "default_embed")]
        embed: usize,
    },
    /// A stable linear system observed with bounded noise; features are the last `lag` observations.
    Lds {
        d: usize,
        lag: usize,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// Nonnegative factor-model vectors in the unit ball.
    Rain {
        d: usize,
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_factors")]
        factors: usize,
    },
    /// Scores in `[0, 1]` from a hidden decision tree over `x ∈ {±1}^n`.
    BooleanScores {
        n: usize,
        #[serde(default = "default_depth")]
        depth: usize,
        #[serde(default = "default_degree")]
        degree: usize,
    },
}

fn one() -> usize {
    1
}
fn default_n() -> usize {
    2
}
fn default_embed() -> usize {
    4
}
fn default_rho() -> f64 {
    0.9
}
fn default_noise() -> f64 {
    0.1
}
fn default_factors() -> usize {
    2
}
fn default_depth() -> usize {
    2
}
fn default_degree() -> usize {
    2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapName {
    OneHot,
    PowerMoments,
    Identity,
    MeanOuter,
}

/// Kernel choice; the output dimension comes from the statistic map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelChoice {
    Constant,
    Linear,
    AffinePair,
    Polynomial { degree: u32 },
    FeatureMap { name: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    /// Random unit-norm functions in feature coordinates.
    RandomUnit,
    /// `h(x, p) = x_i e_j` for every feature coordinate `i` and statistic coordinate `j`.
    CoordinateLinear,
    /// Conjunction indicators times powers of `y`.
    TreePower,
    /// Per-state means, pairwise products and self-consistency tests.
    Rain,
    /// Lagged linear tests of means and products.
    Lds,
    /// The adversary's fixed function.
    Adversary,
    /// The unit-norm function with the largest gap on the run.
    Sup,
}

impl FamilyName {
    pub fn as_str(&self) -> &'static str {
        match self {
            FamilyName::RandomUnit => "random_unit",
            FamilyName::CoordinateLinear => "coordinate_linear",
            FamilyName::TreePower => "tree_power",
            FamilyName::Rain => "rain",
            FamilyName::Lds => "lds",
            FamilyName::Adversary => "adversary",
            FamilyName::Sup => "sup",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineOptions {
    /// Absolute per-round tolerance.
    pub epsilon: Option<f64>,
    /// Tolerance as a multiple of `D²G`; the engine default is 2.
    pub epsilon_factor: Option<f64>,
    pub k_cap: usize,
    pub mode: Mode,
    pub tight_gradient: bool,
    pub compress: bool,
    pub early_stop: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        let e = EngineConfig::default();
        Self {
            epsilon: None,
            epsilon_factor: None,
            k_cap: e.k_cap,
            mode: e.mode,
            tight_gradient: e.tight_gradient,
            compress: e.compress,
            early_stop: e.early_stop,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub rounds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub map: Option<MapName>,
    #[serde(default)]
    pub families: Option<Vec<FamilyName>>,
    /// Number of functions in the `random_unit` family.
    #[serde(default = "default_random_functions")]
    pub random_functions: usize,
    /// Record wall-clock time per round; turn off for byte-identical reports.
    #[serde(default = "yes")]
    pub timing: bool,
    /// Horizons for `sweep`.
    #[serde(default)]
    pub sweep: Option<Vec<usize>>,
    pub scenario: Scenario,
    #[serde(default)]
    pub kernel: Option<KernelChoice>,
    #[serde(default)]
    pub engine: EngineOptions,
}

fn default_random_functions() -> usize {
    50
}
fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario, rounds: usize, seed: u64) -> Self {
        Self {
            version: CONFIG_VERSION,
            rounds,
            seed,
            map: None,
            families: None,
            random_functions: default_random_functions(),
            timing: true,
            sweep: None,
            scenario,
            kernel: None,
            engine: EngineOptions::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.engine.epsilon.is_some() && self.engine.epsilon_factor.is_some() {
            return Err(Error::Config("set at most one of engine.epsilon and engine.epsilon_factor".into()));
        }
        if let Some(f) = self.engine.epsilon_factor {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::Config(format!("engine.epsilon_factor must be positive, got {f}")));
            }
        }
        self.scenario.validate()?;
        let setup = Setup::new(self)?;
        for fam in self.family_list() {
            setup.check_family(fam, &self.scenario)?;
        }
        Ok(())
    }

    pub fn family_list(&self) -> Vec<FamilyName> {
        self.families.clone().unwrap_or_else(|| self.scenario.default_families())
    }
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Iid { .. } => "iid",
            Scenario::AdversarialFlip { .. } => "adversarial_flip",
            Scenario::TokenMarkov { .. } => "token_markov",
            Scenario::Lds { .. } => "lds",
            Scenario::Rain { .. } => "rain",
            Scenario::BooleanScores { .. } => "boolean_scores",
        }
    }

    pub fn x_dim(&self) -> usize {
        match self {
            Scenario::Iid { n, .. } | Scenario::AdversarialFlip { n, .. } | Scenario::Rain { n, .. } => *n,
            Scenario::TokenMarkov { embed, .. } => *embed,
            Scenario::Lds { d, lag, .. } => d * lag,
            Scenario::BooleanScores { n, .. } => *n,
        }
    }

    pub fn x_bound(&self) -> XBound {
        match self {
            Scenario::Lds { lag, .. } => XBound::Norm {
                radius: (*lag as f64).sqrt(),
            },
            Scenario::BooleanScores { n, .. } => XBound::Hypercube { n: *n },
            _ => XBound::Norm { radius: 1.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scenario {}: {m}", self.name())));
        match self {
            Scenario::Iid { d, probs, .. } => {
                if *d < 2 {
                    return bad("needs d >= 2".into());
                }
                if let Some(p) = probs {
                    let s: f64 = p.iter().sum();
                    if p.len() != *d || p.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                        return bad("probs must be a probability vector of length d".into());
                    }
                }
            }
            Scenario::AdversarialFlip { d, .. } => {
                if *d == 0 {
                    return bad("needs d >= 1".into());
                }
            }
            Scenario::TokenMarkov { d, embed } => {
                if *d < 2 || *embed == 0 {
                    return bad("needs d >= 2 and embed >= 1".into());
                }
            }
            Scenario::Lds { d, lag, rho, noise } => {
                if *d == 0 || *lag == 0 {
                    return bad("needs d >= 1 and lag >= 1".into());
                }
                if !(*rho >= 0.0 && *rho < 1.0) {
                    return bad(format!("spectral radius must lie in [0, 1), got {rho}"));
                }
                if !(*noise > 0.0 && noise.is_finite()) {
                    return bad(format!("noise bound must be positive, got {noise}"));
                }
            }
            Scenario::Rain { d, factors, .. } => {
                if *d == 0 || *factors == 0 {
                    return bad("needs d >= 1 and factors >= 1".into());
                }
            }
            Scenario::BooleanScores { n, depth, degree } => {
                if *n == 0 || *n > 8 || *depth == 0 || *depth > 3 || *depth > *n {
                    return bad("needs 1 <= n <= 8 and 1 <= depth <= min(3, n)".into());
                }
                if *degree < 2 || !degree.is_multiple_of(2) {
                    return bad(format!("moment degree must be even and >= 2, got {degree}"));
                }
            }
        }
        Ok(())
    }

    /// The statistic map, rejecting maps that do not fit the outcome space.
    pub fn map(&self, requested: Option<MapName>) -> Result<StatisticMap> {
        let (default, allowed): (MapName, &[MapName]) = match self {
            Scenario::Iid { .. } | Scenario::TokenMarkov { .. } => (MapName::OneHot, &[MapName::OneHot]),
            Scenario::AdversarialFlip { .. } => (MapName::Identity, &[MapName::Identity]),
            Scenario::Lds { .. } => (MapName::MeanOuter, &[MapName::MeanOuter, MapName::Identity]),
            Scenario::Rain { .. } => (MapName::MeanOuter, &[MapName::MeanOuter]),
            Scenario::BooleanScores { .. } => (MapName::PowerMoments, &[MapName::PowerMoments]),
        };
        let name = requested.unwrap_or(default);
        if !allowed.contains(&name) {
            return Err(Error::Config(format!(
                "scenario {} cannot use statistic map {:?}",
                self.name(),
                name
            )));
        }
        Ok(match (self, name) {
            (Scenario::Iid { d, .. } | Scenario::TokenMarkov { d, .. }, _) => StatisticMap::OneHot { d: *d },
            (Scenario::AdversarialFlip { d, .. }, _) => StatisticMap::Identity {
                domain: ConvexDomain::boxed(vec![0.0; *d], vec![1.0; *d])?,
            },
            (Scenario::Lds { d, .. }, MapName::Identity) => StatisticMap::Identity {
                domain: ConvexDomain::unit_ball(*d),
            },
            (Scenario::Lds { d, .. } | Scenario::Rain { d, .. }, _) => StatisticMap::MeanOuter { d: *d },
            (Scenario::BooleanScores { degree, .. }, _) => StatisticMap::PowerMoments { degree: *degree },
        })
    }

    pub fn default_kernel(&self) -> KernelChoice {
        match self {
            Scenario::Iid { .. } | Scenario::Rain { .. } => KernelChoice::AffinePair,
            Scenario::AdversarialFlip { .. } => KernelChoice::Constant,
            Scenario::TokenMarkov { .. } | Scenario::Lds { .. } => KernelChoice::Linear,
            Scenario::BooleanScores { depth, .. } => KernelChoice::Polynomial { degree: *depth as u32 },
        }
    }

    pub fn default_families(&self) -> Vec<FamilyName> {
        let specific = match self {
            Scenario::Iid { .. } | Scenario::TokenMarkov { .. } => FamilyName::CoordinateLinear,
            Scenario::AdversarialFlip { .. } => FamilyName::Adversary,
            Scenario::Lds { .. } => FamilyName::Lds,
            Scenario::Rain { .. } => FamilyName::Rain,
            Scenario::BooleanScores { .. } => FamilyName::TreePower,
        };
        vec![FamilyName::RandomUnit, specific, FamilyName::Sup]
    }
}

impl KernelChoice {
    pub fn build(&self, x_dim: usize, d: usize) -> Result<MatrixKernel> {
        let scalar = match self {
            KernelChoice::Constant => ScalarKernel::Constant,
            KernelChoice::Linear => ScalarKernel::Linear,
            KernelChoice::AffinePair => ScalarKernel::AffinePair,
            KernelChoice::Polynomial { degree } => {
                if *degree == 0 {
                    return Err(Error::Config("polynomial kernel degree must be at least 1".into()));
                }
                ScalarKernel::Polynomial { degree: *degree }
            }
            KernelChoice::FeatureMap { name } => return Ok(MatrixKernel::feature_map(FeatureMap::builtin(name, x_dim, d)?)),
        };
        Ok(MatrixKernel::identity_scaled(scalar, d))
    }
}

/// Everything derived from a config before the first round.
#[derive(Clone, Debug)]
pub struct Setup {
    pub map: StatisticMap,
    pub kernel: MatrixKernel,
    pub g: f64,
    pub g_margin: Option<f64>,
    pub engine: EngineConfig,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let map = cfg.scenario.map(cfg.map)?;
        map.validate()?;
        let choice = cfg.kernel.clone().unwrap_or_else(|| cfg.scenario.default_kernel());
        let kernel = choice.build(cfg.scenario.x_dim(), map.dim())?;
        let domain = map.domain();
        let bound = kernel
            .operator_norm_bound(cfg.scenario.x_bound(), &domain)
            .map_err(|e| Error::Config(e.to_string()))?;
        let d2g = domain.diameter().powi(2) * bound.g;
        let epsilon = match (cfg.engine.epsilon, cfg.engine.epsilon_factor) {
            (Some(e), _) => Some(e),
            (None, Some(f)) => Some(f * d2g),
            (None, None) => None,
        };
        let engine = EngineConfig {
            epsilon,
            k_cap: cfg.engine.k_cap,
            mode: cfg.engine.mode,
            tight_gradient: cfg.engine.tight_gradient,
            compress: cfg.engine.compress,
            early_stop: cfg.engine.early_stop,
            seed: cfg.seed,
        };
        Ok(Self {
            map,
            kernel,
            g: bound.g,
            g_margin: bound.margin,
            engine,
        })
    }

    fn check_family(&self, fam: FamilyName, scenario: &Scenario) -> Result<()> {
        let n = scenario.x_dim();
        let ok = match fam {
            FamilyName::RandomUnit | FamilyName::Sup => true,
            FamilyName::CoordinateLinear => n > 0 && (0..self.map.dim()).all(|j| x_coordinate(&self.kernel, n, 0, j).is_some()),
            FamilyName::TreePower => match (scenario, &self.kernel) {
                (
                    Scenario::BooleanScores { depth, .. },
                    MatrixKernel::IdentityScaled {
                        scalar: ScalarKernel::Polynomial { degree },
                        ..
                    },
                ) => *degree as usize >= *depth,
                _ => false,
            },
            FamilyName::Rain => {
                matches!(scenario, Scenario::Rain { .. })
                    && matches!(self.kernel, MatrixKernel::IdentityScaled { scalar: ScalarKernel::AffinePair, .. })
            }
            FamilyName::Lds => {
                matches!(scenario, Scenario::Lds { .. })
                    && matches!(self.map, StatisticMap::MeanOuter { .. })
                    && matches!(self.kernel, MatrixKernel::IdentityScaled { scalar: ScalarKernel::Linear, .. })
            }
            FamilyName::Adversary => matches!(scenario, Scenario::AdversarialFlip { .. }),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "family {} does not apply to scenario {} with kernel {}",
                fam.as_str(),
                scenario.name(),
                self.kernel.spec().label()
            )))
        }
    }
}

/// Feature weights `θ` with `h(x, p) = x_i e_j`, if the kernel can express it.
pub fn x_coordinate(kernel: &MatrixKernel, n: usize, i: usize, j: usize) -> Option<Vec<f64>> {
    let d = kernel.d();
    let mut theta = vec![0.0; kernel.feature_dim(n)];
    match kernel {
        MatrixKernel::IdentityScaled { scalar, .. } => {
            let (idx, scale) = match scalar {
                ScalarKernel::Linear | ScalarKernel::AffinePair => (i, 1.0),
                ScalarKernel::Polynomial { degree } => {
                    let mut e = vec![0usize; n];
                    e[i] = 1;
                    polynomial_monomials(n, *degree)
                        .iter()
                        .position(|(ex, _)| *ex == e)
                        .map(|k| (k, polynomial_monomials(n, *degree)[k].1))?
                }
                ScalarKernel::Constant => return None,
            };
            theta[idx * d + j] = 1.0 / scale;
        }
        MatrixKernel::FeatureMap(fm) => match fm.name.as_str() {
            "raw" | "history" | "pairwise" => theta[(1 + i) * d + j] = 1.0,
            _ => return None,
        },
    }
    Some(theta)
}

/// Per-scenario state of Nature.
#[derive(Clone, Debug)]
pub struct Nature {
    scenario: Scenario,
    rng: ChaCha8Rng,
    state: State,
}

#[derive(Clone, Debug)]
enum State {
    Iid {
        probs: Vec<f64>,
    },
    Flip {
        h: RkhsFunction,
    },
    Markov {
        trans: Vec<Vec<f64>>,
        embed: Vec<Vec<f64>>,
        last: usize,
    },
    Lds {
        a: DMatrix<f64>,
        z: DVector<f64>,
        scale: f64,
        window: VecDeque<Vec<f64>>,
    },
    Rain {
        w: DMatrix<f64>,
        l: DMatrix<f64>,
    },
    Boolean {
        tree: Tree,
    },
}

/// A decision tree over `x ∈ {±1}^n` with a score in `[0, 1]` at each leaf.
#[derive(Clone, Debug, PartialEq)]
pub enum Tree {
    Leaf(f64),
    Split { var: usize, neg: Box<Tree>, pos: Box<Tree> },
}

impl Tree {
    pub fn random<R: Rng>(rng: &mut R, n: usize, depth: usize) -> Self {
        fn grow<R: Rng>(rng: &mut R, free: &mut Vec<usize>, depth: usize) -> Tree {
            if depth == 0 || free.is_empty() {
                return Tree::Leaf(rng.random());
            }
            let k = rng.random_range(0..free.len());
            let var = free.swap_remove(k);
            let neg = grow(rng, &mut free.clone(), depth - 1);
            let pos = grow(rng, &mut free.clone(), depth - 1);
            Tree::Split {
                var,
                neg: Box::new(neg),
                pos: Box::new(pos),
            }
        }
        grow(rng, &mut (0..n).collect(), depth)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Tree::Leaf(v) => *v,
            Tree::Split { var, neg, pos } => {
                if x[*var] > 0.0 {
                    pos.eval(x)
                } else {
                    neg.eval(x)
                }
            }
        }
    }
}

fn unit_ball_point<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let r = rng.random::<f64>().powf(1.0 / n as f64) / norm(&g).max(1e-300);
    g.iter().map(|v| v * r).collect()
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn dirichlet<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..d).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

impl Nature {
    pub fn new(scenario: &Scenario, kernel: &MatrixKernel, seed: u64) -> Result<Self> {
        scenario.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let state = match scenario {
            Scenario::Iid { d, probs, .. } => State::Iid {
                probs: probs.clone().unwrap_or_else(|| dirichlet(&mut rng, *d)),
            },
            Scenario::AdversarialFlip { n, h, .. } => {
                let r = kernel.feature_dim(*n);
                let theta = match h {
                    Some(t) if t.len() == r => t.clone(),
                    Some(t) => {
                        return Err(Error::Config(format!(
                            "adversary h has {} weights, the kernel has {r} features",
                            t.len()
                        )))
                    }
                    None => vec![1.0; r],
                };
                let s = norm(&theta);
                if s == 0.0 {
                    return Err(Error::Config("adversary h must be nonzero".into()));
                }
                State::Flip {
                    h: RkhsFunction::Features {
                        theta: theta.iter().map(|v| v / s).collect(),
                    },
                }
            }
            Scenario::TokenMarkov { d, embed } => {
                let trans = (0..*d).map(|_| dirichlet(&mut rng, *d)).collect();
                let embed = (0..*d)
                    .map(|_| {
                        let g: Vec<f64> = (0..*embed).map(|_| StandardNormal.sample(&mut rng)).collect();
                        let s = norm(&g).max(1e-300);
                        g.iter().map(|v| v / s).collect()
                    })
                    .collect();
                State::Markov { trans, embed, last: 0 }
            }
            Scenario::Lds { d, rho, noise, .. } => {
                let q = gaussian_matrix(&mut rng, *d, *d).qr().q();
                State::Lds {
                    a: q * *rho,
                    z: DVector::zeros(*d),
                    scale: 1.0 / (noise / (1.0 - rho) + noise),
                    window: VecDeque::new(),
                }
            }
            Scenario::Rain { d, n, factors } => {
                let w = gaussian_matrix(&mut rng, *factors, *n) / (*n.max(&1) as f64).sqrt();
                let l = DMatrix::from_fn(*d, *factors, |_, _| rng.random::<f64>()) / (*factors as f64).sqrt();
                State::Rain { w, l }
            }
            Scenario::BooleanScores { n, depth, .. } => State::Boolean {
                tree: Tree::random(&mut rng, *n, *depth),
            },
        };
        Ok(Self {
            scenario: scenario.clone(),
            rng,
            state,
        })
    }

    /// The adversary's fixed function, for `adversarial_flip`.
    pub fn adversary(&self) -> Option<&RkhsFunction> {
        match &self.state {
            State::Flip { h } => Some(h),
            _ => None,
        }
    }

    pub fn tree(&self) -> Option<&Tree> {
        match &self.state {
            State::Boolean { tree } => Some(tree),
            _ => None,
        }
    }

    /// Features `x_t`, from the history only.
    pub fn features(&mut self) -> Vec<f64> {
        let n = self.scenario.x_dim();
        match &mut self.state {
            State::Iid { .. } | State::Flip { .. } | State::Rain { .. } => unit_ball_point(&mut self.rng, n),
            State::Markov { embed, last, .. } => embed[*last].clone(),
            State::Lds { window, .. } => {
                let Scenario::Lds { d, lag, .. } = self.scenario else { unreachable!() };
                let mut x = Vec::with_capacity(d * lag);
                for k in 0..lag {
                    match window.get(k) {
                        Some(y) => x.extend_from_slice(y),
                        None => x.extend(std::iter::repeat_n(0.0, d)),
                    }
                }
                x
            }
            State::Boolean { .. } => (0..n).map(|_| if self.rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect(),
        }
    }

    /// Outcome `y_t`, which may depend on `x_t` and on the forecast distribution `D_t`.
    pub fn outcome(&mut self, x: &[f64], dist: &AtomicDistribution, kernel: &MatrixKernel) -> Result<Outcome> {
        Ok(match &mut self.state {
            State::Iid { probs } => Outcome::Label(categorical(&mut self.rng, probs)),
            State::Flip { h } => {
                let mut c = vec![0.0; kernel.d()];
                for (p, w) in dist.iter() {
                    for (ci, v) in c.iter_mut().zip(h.eval(kernel, x, p)?) {
                        *ci += w * v;
                    }
                }
                let z = c
                    .iter()
                    .map(|v| {
                        if *v > 1e-12 {
                            1.0
                        } else if *v < -1e-12 {
                            0.0
                        } else if self.rng.random_bool(0.5) {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Outcome::Vector(z)
            }
            State::Markov { trans, last, .. } => {
                let next = categorical(&mut self.rng, &trans[*last]);
                *last = next;
                Outcome::Label(next)
            }
            State::Lds { a, z, scale, window } => {
                let Scenario::Lds { d, lag, noise, .. } = self.scenario else { unreachable!() };
                let nu = DVector::from_vec(unit_ball_point(&mut self.rng, d)) * noise;
                let y: Vec<f64> = ((&*z + nu) * *scale).iter().copied().collect();
                let zeta = DVector::from_vec(unit_ball_point(&mut self.rng, d)) * noise;
                *z = &*a * &*z + zeta;
                window.push_front(y.clone());
                window.truncate(lag);
                Outcome::Vector(y)
            }
            State::Rain { w, l } => {
                let f = &*w * DVector::from_column_slice(x) + DVector::from_fn(w.nrows(), |_, _| 0.5 * normal(&mut self.rng));
                let raw = &*l * f;
                let mut y: Vec<f64> = raw
                    .iter()
                    .map(|v| (v + 0.3 * normal(&mut self.rng)).max(0.0))
                    .collect();
                let s = norm(&y);
                if s > 1.0 {
                    y.iter_mut().for_each(|v| *v /= s);
                }
                Outcome::Vector(y)
            }
            State::Boolean { tree } => {
                let base = tree.eval(x);
                let y = (base + self.rng.random_range(-0.2..0.2)).clamp(0.0, 1.0);
                Outcome::scalar(y)
            }
        })
    }
}

/// One member of a distinguisher family, normalized to `‖h‖ = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub f: Distinguisher,
    /// For the `lds` family: `Σ‖α_i‖ + Σ‖β_ij‖` of the normalized coefficients.
    pub coefficient_sum: Option<f64>,
}

fn member(name: String, theta: Vec<f64>, coefficient_sum: Option<f64>) -> Option<Member> {
    let s = norm(&theta);
    if s == 0.0 {
        return None;
    }
    Some(Member {
        f: Distinguisher {
            name,
            h: RkhsFunction::Features {
                theta: theta.iter().map(|v| v / s).collect(),
            },
            norm: 1.0,
        },
        coefficient_sum: coefficient_sum.map(|c| c / s),
    })
}

/// Identity-scaled layout: coordinate `j` of `h` uses feature weights `w`.
fn place(theta: &mut [f64], d: usize, j: usize, w: &[f64], offset: usize) {
    for (i, v) in w.iter().enumerate() {
        theta[(offset + i) * d + j] += v;
    }
}

/// Index of the statistic coordinate holding `y_i y_j` (`i <= j`) in the mean–outer layout.
fn outer_index(d: usize, i: usize, j: usize) -> usize {
    d + i * d - i * i.saturating_sub(1) / 2 + (j - i)
}

/// Members of a family for a finished run.
pub fn family_members(
    fam: FamilyName,
    cfg: &ExperimentConfig,
    setup: &Setup,
    nature: &Nature,
    oi: &[f64],
) -> Result<Vec<Member>> {
    let kernel = &setup.kernel;
    let n = cfg.scenario.x_dim();
    let d = kernel.d();
    let r = kernel.feature_dim(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let gauss = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(rng)).collect() };
    let mut out = Vec::new();
    match fam {
        FamilyName::RandomUnit => {
            for k in 0..cfg.random_functions {
                out.extend(member(format!("random_{k}"), gauss(&mut rng, r), None));
            }
        }
        FamilyName::Sup => out.extend(member("sup".into(), oi.to_vec(), None)),
        FamilyName::Adversary => {
            let h = nature.adversary().ok_or_else(|| Error::Config("adversary family needs adversarial_flip".into()))?;
            if let RkhsFunction::Features { theta } = h {
                out.extend(member("adversary".into(), theta.clone(), None));
            }
        }
        FamilyName::CoordinateLinear => {
            for j in 0..d {
                for i in 0..n {
                    let theta = x_coordinate(kernel, n, i, j)
                        .ok_or_else(|| Error::Config("kernel cannot express coordinate tests".into()))?;
                    out.extend(member(format!("x{i}_s{j}"), theta, None));
                }
            }
        }
        FamilyName::TreePower => {
            let Scenario::BooleanScores { n, depth, degree } = cfg.scenario else {
                return Err(Error::Config("tree_power needs boolean_scores".into()));
            };
            let MatrixKernel::IdentityScaled {
                scalar: ScalarKernel::Polynomial { degree: kdeg },
                ..
            } = kernel
            else {
                return Err(Error::Config("tree_power needs a polynomial kernel".into()));
            };
            let monos = polynomial_monomials(n, *kdeg);
            let index: HashMap<Vec<usize>, (usize, f64)> =
                monos.iter().enumerate().map(|(k, (e, s))| (e.clone(), (k, *s))).collect();
            for conj in conjunctions(n, depth) {
                // 1{all literals hold} = 2^{-k} Σ_{S ⊆ literals} Π_{l∈S} s_l x_{v_l}.
                let k = conj.len();
                let mut psi_w = vec![0.0; monos.len()];
                for mask in 0..(1usize << k) {
                    let mut e = vec![0usize; n];
                    let mut sign = 1.0;
                    for (b, (v, s)) in conj.iter().enumerate() {
                        if mask >> b & 1 == 1 {
                            e[*v] = 1;
                            sign *= s;
                        }
                    }
                    let (idx, scale) = index[&e];
                    psi_w[idx] += sign / (1u64 << k) as f64 / scale;
                }
                let label: Vec<String> = conj.iter().map(|(v, s)| format!("{}x{v}", if *s > 0.0 { "+" } else { "-" })).collect();
                for j in 1..=degree {
                    let mut theta = vec![0.0; r];
                    place(&mut theta, d, j, &psi_w, 0);
                    out.extend(member(format!("[{}]*y^{j}", label.join("&")), theta, None));
                }
            }
        }
        FamilyName::Rain => {
            let Scenario::Rain { d: dy, n, .. } = cfg.scenario else {
                return Err(Error::Config("rain family needs the rain scenario".into()));
            };
            let frac = std::f64::consts::FRAC_1_SQRT_2;
            for i in 0..dy {
                let mut theta = vec![0.0; r];
                place(&mut theta, d, i, &gauss(&mut rng, n), 0);
                out.extend(member(format!("theta_{i}"), theta, None));
                let mut theta = vec![0.0; r];
                place(&mut theta, d, i, &gauss(&mut rng, dy), n);
                out.extend(member(format!("w_{i}"), theta, None));
                for j in i..dy {
                    let beta: Vec<f64> = gauss(&mut rng, n);
                    let c = if i == j { 1.0 } else { frac };
                    let mut theta = vec![0.0; r];
                    place(&mut theta, d, outer_index(dy, i, j), &beta.iter().map(|b| c * b).collect::<Vec<_>>(), 0);
                    out.extend(member(format!("beta_{i}_{j}"), theta, None));
                }
            }
        }
        FamilyName::Lds => {
            let Scenario::Lds { d: dy, .. } = cfg.scenario else {
                return Err(Error::Config("lds family needs the lds scenario".into()));
            };
            let frac = std::f64::consts::FRAC_1_SQRT_2;
            for k in 0..20 {
                let mut theta = vec![0.0; r];
                let mut coef = 0.0;
                for i in 0..dy {
                    let alpha = gauss(&mut rng, n);
                    coef += norm(&alpha);
                    place(&mut theta, d, i, &alpha, 0);
                    for j in i..dy {
                        let beta = gauss(&mut rng, n);
                        coef += norm(&beta);
                        let c = if i == j { 1.0 } else { frac };
                        place(&mut theta, d, outer_index(dy, i, j), &beta.iter().map(|b| c * b).collect::<Vec<_>>(), 0);
                    }
                }
                out.extend(member(format!("lds_{k}"), theta, Some(coef)));
            }
        }
    }
    Ok(out)
}

/// Conjunctions of at most `depth` literals over `n` variables, as `(variable, sign)` lists.
pub fn conjunctions(n: usize, depth: usize) -> Vec<Vec<(usize, f64)>> {
    let mut out = vec![Vec::new()];
    let mut frontier: Vec<Vec<(usize, f64)>> = vec![Vec::new()];
    for _ in 0..depth {
        let mut next = Vec::new();
        for c in &frontier {
            let start = c.last().map_or(0, |(v, _)| v + 1);
            for v in start..n {
                for s in [-1.0, 1.0] {
                    let mut e = c.clone();
                    e.push((v, s));
                    next.push(e);
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// `Σ_t E_{p∼D_t}[Φ(x_t, p)(s(y_t) − E_{μ_p}[s(ỹ)])]`: each distinguisher's gap is
/// `|θ·v|`, the f-difference summed in feature space.
pub fn oi_vector(kernel: &MatrixKernel, map: &StatisticMap, records: &[Record]) -> Result<Vec<f64>> {
    let n = records.first().map_or(0, |r| r.x.len());
    let mut v = vec![0.0; kernel.feature_dim(n)];
    for r in records {
        let y = r.y.as_ref().ok_or_else(|| Error::Input(format!("round {} has no outcome", r.t)))?;
        let s = map.stat(y)?;
        let measures = r
            .measures
            .as_ref()
            .ok_or_else(|| Error::Input(format!("round {} has no per-atom measures", r.t)))?;
        for ((p, w), mu) in r.atoms.iter().zip(&r.weights).zip(measures) {
            let sim = mu.expected_statistic(map)?;
            let diff: Vec<f64> = s.iter().zip(&sim).map(|(a, b)| a - b).collect();
            for (vi, inc) in v.iter_mut().zip(kernel.phi_apply(&r.x, p, &diff)?) {
                *vi += w * inc;
            }
        }
    }
    Ok(v)
}

/// One report line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
    pub kernel: String,
    pub family: String,
    pub max_oigap: f64,
    pub bound: f64,
    pub ratio: f64,
    pub max_residual: f64,
    pub seconds_per_round: f64,
}

/// Per-member results of one family.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyResult {
    pub family: FamilyName,
    pub members: Vec<Member>,
    pub gaps: Vec<f64>,
    /// `‖h‖ √(T D² G + Σ_t ε_t)` for a unit-norm `h`.
    pub bound: f64,
}

impl FamilyResult {
    pub fn max_gap(&self) -> f64 {
        self.gaps.iter().copied().fold(0.0, f64::max)
    }
}

/// A finished run.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub setup: Setup,
    pub transcript: Transcript,
    pub families: Vec<FamilyResult>,
    pub seconds_per_round: f64,
    pub nature: Nature,
}

impl Experiment {
    pub fn records(&self) -> &[Record] {
        &self.transcript.records
    }

    pub fn max_residual(&self) -> f64 {
        self.records().iter().map(|r| r.residual).fold(0.0, f64::max)
    }

    pub fn report(&self) -> Vec<ReportRow> {
        let t = self.records().len();
        self.families
            .iter()
            .map(|f| {
                let max = f.max_gap();
                ReportRow {
                    scenario: self.config.scenario.name().into(),
                    t,
                    d: self.setup.map.dim(),
                    kernel: self.setup.kernel.spec().label(),
                    family: f.family.as_str().into(),
                    max_oigap: max,
                    bound: f.bound,
                    ratio: if f.bound > 0.0 { max / f.bound } else { 0.0 },
                    max_residual: self.max_residual(),
                    seconds_per_round: self.seconds_per_round,
                }
            })
            .collect()
    }

    /// The largest gap over every evaluated family.
    pub fn max_error(&self) -> f64 {
        self.families.iter().map(FamilyResult::max_gap).fold(0.0, f64::max)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let setup = Setup::new(cfg)?;
    let mut gen = Generator::new(setup.kernel.clone(), setup.map.clone(), setup.g, setup.engine.clone())?;
    let mut nature = Nature::new(&cfg.scenario, &setup.kernel, cfg.seed)?;
    let start = Instant::now();
    for t in 1..=cfg.rounds {
        let x = nature.features();
        let out = gen.round(&x)?;
        let y = nature.outcome(&x, &out.dist, &setup.kernel)?;
        gen.reveal(y)?;
        if t % 1000 == 0 {
            log::debug!("{}: round {t}", cfg.scenario.name());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let seconds_per_round = if cfg.timing { elapsed / cfg.rounds as f64 } else { 0.0 };
    let records = gen.into_records();
    let mut header = Header::new(setup.map.domain(), setup.kernel.spec(), Some(setup.map.clone()), setup.g);
    header.g_margin = setup.g_margin;
    header.config = serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let families = evaluate_families(cfg, &setup, &nature, &records)?;
    log::info!(
        "{} T={} max gap {:.4} bound {:.4}",
        cfg.scenario.name(),
        cfg.rounds,
        families.iter().map(FamilyResult::max_gap).fold(0.0, f64::max),
        families.first().map_or(0.0, |f| f.bound)
    );
    Ok(Experiment {
        config: cfg.clone(),
        setup,
        transcript: Transcript::new(header, records),
        families,
        seconds_per_round,
        nature,
    })
}

/// Gaps of every configured family on a finished run.
pub fn evaluate_families(cfg: &ExperimentConfig, setup: &Setup, nature: &Nature, records: &[Record]) -> Result<Vec<FamilyResult>> {
    let eps: Vec<f64> = records.iter().map(|r| r.epsilon).collect();
    let bound = crate::calibrate::theoretical_bound(1.0, setup.map.domain().diameter(), setup.g, &eps);
    let oi = oi_vector(&setup.kernel, &setup.map, records)?;
    let mut families = Vec::new();
    for fam in cfg.family_list() {
        let members = family_members(fam, cfg, setup, nature, &oi)?;
        let gaps = members
            .iter()
            .map(|m| match &m.f.h {
                RkhsFunction::Features { theta } => dot(theta, &oi).abs(),
                RkhsFunction::Expansion { .. } => unreachable!("families use feature weights"),
            })
            .collect();
        families.push(FamilyResult {
            family: fam,
            members,
            gaps,
            bound,
        });
    }
    Ok(families)
}

impl Experiment {
    /// Rebuilds a run from a transcript written by [`run_experiment`]; timing is not recorded there.
    pub fn from_transcript(transcript: Transcript) -> Result<Self> {
        let header = transcript
            .header
            .as_ref()
            .ok_or_else(|| Error::Corrupt("transcript has no header".into()))?;
        let config: ExperimentConfig = serde_json::from_value(header.config.clone())
            .map_err(|e| Error::Corrupt(format!("header config: {e}")))?;
        config.validate()?;
        let setup = Setup::new(&config)?;
        let nature = Nature::new(&config.scenario, &setup.kernel, config.seed)?;
        let families = evaluate_families(&config, &setup, &nature, &transcript.records)?;
        Ok(Self {
            config,
            setup,
            transcript,
            families,
            seconds_per_round: 0.0,
            nature,
        })
    }
}

pub fn write_report<W: Write>(rows: &[ReportRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_report<R: std::io::Read>(r: R) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|row| row.map_err(|e| Error::Corrupt(e.to_string()))).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Least-squares slope of `log error` against `log T`. Points with a
/// nonpositive error are skipped; fewer than three usable points is an error.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(t, e)| *e > 0.0 && *t > 0.0 && e.is_finite())
        .map(|(t, e)| (t.ln(), e.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Input(format!("rate fit needs at least 3 positive points, got {}", pts.len())));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Input("rate fit needs at least two distinct horizons".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

/// Result of running one config over several horizons.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub points: Vec<(usize, f64)>,
    pub slope: f64,
    pub reports: Vec<ReportRow>,
}

/// Runs `cfg` at each horizon (in parallel) and fits the growth rate of the largest gap.
pub fn sweep(cfg: &ExperimentConfig, horizons: &[usize]) -> Result<Sweep> {
    use rayon::prelude::*;
    if horizons.len() < 3 {
        return Err(Error::Config(format!("sweep needs at least 3 horizons, got {}", horizons.len())));
    }
    let runs: Vec<Experiment> = horizons
        .par_iter()
        .map(|&t| {
            let mut c = cfg.clone();
            c.rounds = t;
            run_experiment(&c)
        })
        .collect::<Result<_>>()?;
    let points: Vec<(usize, f64)> = runs.iter().map(|e| (e.config.rounds, e.max_error())).collect();
    let slope = fit_rate(&points.iter().map(|(t, e)| (*t as f64, *e)).collect::<Vec<_>>())?;
    let reports = runs.iter().flat_map(Experiment::report).collect();
    Ok(Sweep { points, slope, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outer_index_matches_svec_layout() {
        let d = 4;
        let mut k = d;
        for i in 0..d {
            for j in i..d {
                assert_eq!(outer_index(d, i, j), k);
                k += 1;
            }
        }
    }
}
