//! Defensive generation: statistic maps, backfitting a measure from predicted
//! statistics, and outcome-indistinguishability gaps.

use crate::calibrate::{Engine, EngineConfig};
use crate::domains::{meancov_pack, meancov_unpack, moment_curve, uniform_moments, ConvexDomain, Point, MEMBERSHIP_TOL};
use crate::error::{Error, Result};
use crate::evi::AtomicDistribution;
use crate::kernels::{MatrixKernel, RkhsFunction};
use crate::linalg::{dot, lstsq, nnls, norm, sym_eigen};
use crate::transcript::Record;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Moment error accepted from a backfit.
pub const BACKFIT_TOL: f64 = 1e-8;

/// An outcome `y ∈ Y`: a 0-based class label or a real vector (scalars are length 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Outcome {
    Label(usize),
    Vector(Vec<f64>),
}

impl Outcome {
    pub fn scalar(y: f64) -> Self {
        Outcome::Vector(vec![y])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StatisticMap {
    /// `s(y) = e_y`, `Y = {0, …, d−1}`.
    OneHot { d: usize },
    /// `s(y) = (1, y, …, y^degree)`, `Y = [−1, 1]`.
    PowerMoments { degree: usize },
    /// `s(y) = y`, `Y = Z = domain`.
    Identity { domain: ConvexDomain },
    /// `s(y) = (y, svec(yyᵀ))`, `Y` the unit ball of `R^d`.
    MeanOuter { d: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomicMeasure {
    pub atoms: Vec<Outcome>,
    pub weights: Vec<f64>,
}

impl AtomicMeasure {
    pub fn point_mass(y: Outcome) -> Self {
        Self {
            atoms: vec![y],
            weights: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// `E_μ[s(ỹ)]`.
    pub fn expected_statistic(&self, map: &StatisticMap) -> Result<Point> {
        let mut out = vec![0.0; map.dim()];
        for (y, w) in self.atoms.iter().zip(&self.weights) {
            for (o, v) in out.iter_mut().zip(map.stat(y)?) {
                *o += w * v;
            }
        }
        Ok(out)
    }
}

impl StatisticMap {
    pub fn domain(&self) -> ConvexDomain {
        match self {
            StatisticMap::OneHot { d } => ConvexDomain::simplex(*d),
            StatisticMap::PowerMoments { degree } => ConvexDomain::Moments { degree: *degree },
            StatisticMap::Identity { domain } => domain.clone(),
            StatisticMap::MeanOuter { d } => ConvexDomain::mean_cov(*d),
        }
    }

    pub fn dim(&self) -> usize {
        self.domain().dim()
    }

    pub fn name(&self) -> &'static str {
        match self {
            StatisticMap::OneHot { .. } => "one_hot",
            StatisticMap::PowerMoments { .. } => "power_moments",
            StatisticMap::Identity { .. } => "identity",
            StatisticMap::MeanOuter { .. } => "mean_outer",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StatisticMap::OneHot { d } | StatisticMap::MeanOuter { d } if *d == 0 => {
                Err(Error::Config("statistic map dimension must be positive".into()))
            }
            StatisticMap::PowerMoments { degree } => ConvexDomain::moments(*degree).map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Whether `y ∈ Y` (tolerance `1e-9`).
    pub fn contains(&self, y: &Outcome) -> bool {
        match (self, y) {
            (StatisticMap::OneHot { d }, Outcome::Label(k)) => k < d,
            (StatisticMap::PowerMoments { .. }, Outcome::Vector(v)) => {
                v.len() == 1 && v[0].is_finite() && v[0].abs() <= 1.0 + MEMBERSHIP_TOL
            }
            (StatisticMap::Identity { domain }, Outcome::Vector(v)) => domain.contains(v),
            (StatisticMap::MeanOuter { d }, Outcome::Vector(v)) => {
                v.len() == *d && v.iter().all(|x| x.is_finite()) && norm(v) <= 1.0 + MEMBERSHIP_TOL
            }
            _ => false,
        }
    }

    pub fn stat(&self, y: &Outcome) -> Result<Point> {
        if !self.contains(y) {
            return Err(Error::Input(format!("outcome {y:?} is outside Y for {}", self.name())));
        }
        Ok(match (self, y) {
            (StatisticMap::OneHot { d }, Outcome::Label(k)) => {
                let mut e = vec![0.0; *d];
                e[*k] = 1.0;
                e
            }
            (StatisticMap::PowerMoments { degree }, Outcome::Vector(v)) => moment_curve(*degree, v[0]),
            (StatisticMap::Identity { .. }, Outcome::Vector(v)) => v.clone(),
            (StatisticMap::MeanOuter { .. }, Outcome::Vector(v)) => {
                let y = DVector::from_column_slice(v);
                meancov_pack(v, &(&y * y.transpose()))
            }
            _ => unreachable!("checked by contains"),
        })
    }

    /// An atomic measure on `Y` with `E_μ[s(ỹ)] = p`.
    pub fn backfit(&self, p: &[f64]) -> Result<AtomicMeasure> {
        let dom = self.domain();
        if !dom.contains(p) {
            return Err(Error::Input("backfit target lies outside the moment set".into()));
        }
        match self {
            StatisticMap::OneHot { d } => {
                let (atoms, weights): (Vec<Outcome>, Vec<f64>) = (0..*d)
                    .filter(|&k| p[k] > 0.0)
                    .map(|k| (Outcome::Label(k), p[k]))
                    .unzip();
                let s: f64 = weights.iter().sum();
                Ok(AtomicMeasure {
                    atoms,
                    weights: weights.iter().map(|w| w / s).collect(),
                })
            }
            StatisticMap::Identity { .. } => Ok(AtomicMeasure::point_mass(Outcome::Vector(p.to_vec()))),
            StatisticMap::MeanOuter { d } => {
                let (v, q) = meancov_unpack(*d, p);
                backfit_meancov(v.as_slice(), &q)
            }
            StatisticMap::PowerMoments { .. } => backfit_univariate(p),
        }
    }
}

fn clip_weights(weights: &mut [f64]) -> Result<()> {
    for w in weights.iter_mut() {
        if *w < -1e-12 {
            return Err(Error::Input(format!("backfit produced weight {w}")));
        }
        if *w < 1e-12 {
            *w = 0.0;
        }
    }
    let s: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= s;
    }
    Ok(())
}

/// Measure on at most `2d + 1` points of the unit ball with mean `v` and second moment `Q`.
pub fn backfit_meancov(v: &[f64], q: &DMatrix<f64>) -> Result<AtomicMeasure> {
    let d = v.len();
    let dom = ConvexDomain::mean_cov(d);
    if !dom.contains(&meancov_pack(v, q)) {
        return Err(Error::Input("(v, Q) violates Q ⪰ vvᵀ, Q ⪰ 0, Tr Q <= 1".into()));
    }
    let vv = DVector::from_column_slice(v);
    let nv2 = vv.norm_squared();
    let mut atoms = vec![Outcome::Vector(v.to_vec())];
    let mut weights = vec![0.0];
    if nv2 >= 1.0 - 1e-10 {
        weights[0] = 1.0;
        return Ok(AtomicMeasure { atoms, weights });
    }
    let sigma = q - &vv * vv.transpose();
    let (vals, vecs) = sym_eigen(&sigma);
    let vals: Vec<f64> = vals.iter().map(|s| s.max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    // Tolerance-level excess trace is scaled away so the weights stay a probability vector.
    let scale = if total > 1.0 - nv2 { (1.0 - nv2) / total } else { 1.0 };
    let mut used = 0.0;
    for (i, v) in vals.iter().enumerate() {
        let s = v * scale;
        if s <= 1e-12 {
            continue;
        }
        let u = vecs.column(i).into_owned();
        let b = vv.dot(&u);
        let disc = (b * b + 1.0 - nv2).sqrt();
        let (tp, tm) = (-b + disc, -b - disc);
        let lp = s / (tp * (tp - tm));
        let lm = s / (tm * (tm - tp));
        for (t, l) in [(tp, lp), (tm, lm)] {
            let y: Vec<f64> = (&vv + &u * t).iter().copied().collect();
            atoms.push(Outcome::Vector(y));
            weights.push(l);
            used += l;
        }
    }
    weights[0] = 1.0 - used;
    clip_weights(&mut weights)?;
    let mu = AtomicMeasure { atoms, weights };
    check_backfit(&mu, &StatisticMap::MeanOuter { d }, &meancov_pack(v, q))?;
    Ok(prune(mu))
}

fn prune(mu: AtomicMeasure) -> AtomicMeasure {
    let (atoms, weights) = mu
        .atoms
        .into_iter()
        .zip(mu.weights)
        .filter(|(_, w)| *w > 0.0)
        .unzip();
    AtomicMeasure { atoms, weights }
}

fn check_backfit(mu: &AtomicMeasure, map: &StatisticMap, target: &[f64]) -> Result<()> {
    let got = mu.expected_statistic(map)?;
    let err = got.iter().zip(target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if err > BACKFIT_TOL {
        return Err(Error::Input(format!("backfit moment error {err:e}")));
    }
    Ok(())
}

/// Nodes and weights of the `k`-point Gauss rule for a moment sequence
/// `mom[0..2k]`, via the Jacobi matrix read off a partial Cholesky factor of
/// its Hankel matrix.
fn gauss_rule(mom: &[f64], k: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    if k == 0 {
        return Some((vec![], vec![]));
    }
    // Upper factor rows 0..k of H[i][j] = mom[i+j], columns 0..=k.
    let mut r = DMatrix::<f64>::zeros(k, k + 1);
    for i in 0..k {
        let mut diag = mom[2 * i];
        for l in 0..i {
            diag -= r[(l, i)] * r[(l, i)];
        }
        if !(diag > 0.0) {
            return None;
        }
        r[(i, i)] = diag.sqrt();
        for j in i + 1..=k {
            let mut s = mom[i + j];
            for l in 0..i {
                s -= r[(l, i)] * r[(l, j)];
            }
            r[(i, j)] = s / r[(i, i)];
        }
    }
    let mut jac = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        let prev = if i == 0 { 0.0 } else { r[(i - 1, i)] / r[(i - 1, i - 1)] };
        jac[(i, i)] = r[(i, i + 1)] / r[(i, i)] - prev;
        if i + 1 < k {
            let b = r[(i + 1, i + 1)] / r[(i, i)];
            jac[(i, i + 1)] = b;
            jac[(i + 1, i)] = b;
        }
    }
    let (nodes, vecs) = sym_eigen(&jac);
    let weights = (0..k).map(|i| mom[0] * vecs[(0, i)] * vecs[(0, i)]).collect();
    Some((nodes.iter().copied().collect(), weights))
}

/// Weights on fixed `nodes` best reproducing the moments `m`.
fn fit_weights(nodes: &[f64], m: &[f64]) -> Vec<f64> {
    let n = m.len() - 1;
    let a = DMatrix::from_fn(n + 1, nodes.len(), |i, j| nodes[j].powi(i as i32));
    lstsq(&a, &DVector::from_column_slice(m)).iter().copied().collect()
}

fn moment_error(nodes: &[f64], weights: &[f64], m: &[f64]) -> f64 {
    let n = m.len() - 1;
    (0..=n)
        .map(|k| {
            let s: f64 = nodes.iter().zip(weights).map(|(y, w)| w * y.powi(k as i32)).sum();
            (s - m[k]).abs()
        })
        .fold(0.0, f64::max)
}

/// Radau-type rule with a fixed node at `end = ±1`, exact through degree `2d`.
fn radau_rule(m: &[f64], end: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = m.len() - 1;
    let d = n / 2;
    // Moments of (1 ∓ y)·μ, a measure whose d-point Gauss rule plus the endpoint represents μ.
    let nu: Vec<f64> = (0..n).map(|k| m[k] - end * m[k + 1]).collect();
    let (mut nodes, _) = gauss_rule(&nu, d)?;
    nodes.push(end);
    let w = fit_weights(&nodes, m);
    Some((nodes, w))
}

fn usable(nodes: &[f64], weights: &[f64], m: &[f64]) -> bool {
    nodes.iter().all(|y| y.is_finite() && y.abs() <= 1.0 + 1e-12)
        && weights.iter().all(|w| w.is_finite() && *w >= -1e-12)
        && moment_error(nodes, weights, m) <= BACKFIT_TOL
}

/// Measure on at most `2d + 1` points of `[−1, 1]` with power moments `m₀ … m_{2d}`.
pub fn backfit_univariate(m: &[f64]) -> Result<AtomicMeasure> {
    let n = m.len().saturating_sub(1);
    let dom = ConvexDomain::moments(n)?;
    if !dom.contains(m) {
        return Err(Error::Input("moment vector is not realizable on [-1, 1]".into()));
    }
    let d = n / 2;
    let mix = 1e-10;
    let u = uniform_moments(n);
    let mut mm: Vec<f64> = m.iter().zip(&u).map(|(a, b)| (1.0 - mix) * a + mix * b).collect();
    mm[0] = 1.0;

    let mut candidates: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let lower = radau_rule(&mm, -1.0);
    let upper = radau_rule(&mm, 1.0);
    // The free moment m_{2d+1} ranges between the two Radau rules; its midpoint
    // yields an interior (d+1)-point Gauss rule.
    if let (Some((ln, lw)), Some((un, uw))) = (&lower, &upper) {
        let top = |nodes: &[f64], w: &[f64]| -> f64 { nodes.iter().zip(w).map(|(y, w)| w * y.powi(n as i32 + 1)).sum() };
        let mid = 0.5 * (top(ln, lw) + top(un, uw));
        let mut ext = mm.clone();
        ext.push(mid);
        if let Some((nodes, _)) = gauss_rule(&ext, d + 1) {
            let nodes: Vec<f64> = nodes.iter().map(|y| y.clamp(-1.0, 1.0)).collect();
            let w = fit_weights(&nodes, m);
            candidates.push((nodes, w));
        }
    }
    candidates.extend(lower);
    candidates.extend(upper);
    for (mut nodes, mut w) in candidates {
        polish(&mut nodes, &mut w, m);
        if usable(&nodes, &w, m) {
            return finish_univariate(nodes, w, m);
        }
    }
    let (nodes, w) = grid_backfit(m);
    if usable(&nodes, &w, m) {
        return finish_univariate(nodes, w, m);
    }
    Err(Error::Input(format!(
        "univariate backfit failed to reach moment error {BACKFIT_TOL:e} (got {:e})",
        moment_error(&nodes, &w, m)
    )))
}

fn finish_univariate(nodes: Vec<f64>, mut w: Vec<f64>, m: &[f64]) -> Result<AtomicMeasure> {
    clip_weights(&mut w)?;
    let mut atoms = Vec::new();
    let mut weights = Vec::new();
    for (y, wi) in nodes.into_iter().zip(w) {
        if wi > 0.0 {
            atoms.push(Outcome::scalar(y.clamp(-1.0, 1.0)));
            weights.push(wi);
        }
    }
    let mu = AtomicMeasure { atoms, weights };
    check_backfit(&mu, &StatisticMap::PowerMoments { degree: m.len() - 1 }, m)?;
    Ok(mu)
}

/// Nonnegative least squares on a fine grid, then Gauss–Newton on nodes and weights.
fn grid_backfit(m: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = m.len() - 1;
    const NODES: usize = 2001;
    let grid: Vec<f64> = (0..NODES).map(|k| -1.0 + 2.0 * k as f64 / (NODES - 1) as f64).collect();
    let a = DMatrix::from_fn(n + 1, NODES, |i, j| grid[j].powi(i as i32));
    let x = nnls(&a, &DVector::from_column_slice(m));
    let mut nodes: Vec<f64> = Vec::new();
    let mut w: Vec<f64> = Vec::new();
    for (j, xi) in x.iter().enumerate() {
        if *xi > 0.0 {
            nodes.push(grid[j]);
            w.push(*xi);
        }
    }
    polish(&mut nodes, &mut w, m);
    (nodes, w)
}

/// Gauss–Newton on nodes and weights toward moments `m`; keeps the start if no step helps.
fn polish(nodes: &mut [f64], w: &mut [f64], m: &[f64]) {
    let n = m.len() - 1;
    let start = (nodes.to_vec(), w.to_vec(), moment_error(nodes, w, m));
    for _ in 0..100 {
        if moment_error(nodes, w, m) <= 1e-13 {
            break;
        }
        let k = nodes.len();
        let mut jac = DMatrix::zeros(n + 1, 2 * k);
        let mut res = DVector::zeros(n + 1);
        for i in 0..=n {
            let mut s = 0.0;
            for j in 0..k {
                let yi = nodes[j].powi(i as i32);
                s += w[j] * yi;
                jac[(i, j)] = yi;
                jac[(i, k + j)] = if i == 0 { 0.0 } else { w[j] * i as f64 * nodes[j].powi(i as i32 - 1) };
            }
            res[i] = m[i] - s;
        }
        let step = lstsq(&jac, &res);
        for j in 0..k {
            w[j] = (w[j] + step[j]).max(0.0);
            nodes[j] = (nodes[j] + step[k + j]).clamp(-1.0, 1.0);
        }
    }
    if moment_error(nodes, w, m) > start.2 {
        nodes.copy_from_slice(&start.0);
        w.copy_from_slice(&start.1);
    }
}

/// A distinguisher `f(x, p, y) = h(x, p)·s(y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distinguisher {
    pub name: String,
    pub h: RkhsFunction,
    pub norm: f64,
}

impl Distinguisher {
    pub fn new(name: impl Into<String>, h: RkhsFunction, kernel: &MatrixKernel) -> Result<Self> {
        let norm = h.norm(kernel)?;
        Ok(Self {
            name: name.into(),
            h,
            norm,
        })
    }

    pub fn eval(&self, kernel: &MatrixKernel, map: &StatisticMap, x: &[f64], p: &[f64], y: &Outcome) -> Result<f64> {
        Ok(dot(&self.h.eval(kernel, x, p)?, &map.stat(y)?))
    }
}

/// `|Σ_t E_{p∼D_t}[f(x_t, p, y_t)] − Σ_t E_{p∼D_t} E_{ỹ∼μ(p)}[f(x_t, p, ỹ)]|`.
pub fn oigap(kernel: &MatrixKernel, map: &StatisticMap, records: &[Record], f: &Distinguisher) -> Result<f64> {
    let mut total = 0.0;
    for r in records {
        let y = r.y.as_ref().ok_or_else(|| Error::Input(format!("round {} has no outcome", r.t)))?;
        let measures = r
            .measures
            .as_ref()
            .ok_or_else(|| Error::Input(format!("round {} has no per-atom measures", r.t)))?;
        if measures.len() != r.atoms.len() {
            return Err(Error::Input(format!("round {} needs one measure per atom", r.t)));
        }
        for ((p, w), mu) in r.atoms.iter().zip(&r.weights).zip(measures) {
            let real = f.eval(kernel, map, &r.x, p, y)?;
            let mut sim = 0.0;
            for (yt, wt) in mu.atoms.iter().zip(&mu.weights) {
                sim += wt * f.eval(kernel, map, &r.x, p, yt)?;
            }
            total += w * (real - sim);
        }
    }
    Ok(total.abs())
}

/// `|Σ_t E_{p∼D_t}[h(x_t, p)·(s(y_t) − p)]|`.
pub fn oigap_multicalibration(kernel: &MatrixKernel, map: &StatisticMap, records: &[Record], h: &RkhsFunction) -> Result<f64> {
    let mut total = 0.0;
    for r in records {
        let y = r.y.as_ref().ok_or_else(|| Error::Input(format!("round {} has no outcome", r.t)))?;
        let s = map.stat(y)?;
        for (p, w) in r.atoms.iter().zip(&r.weights) {
            let hv = h.eval(kernel, &r.x, p)?;
            let diff: Vec<f64> = s.iter().zip(p).map(|(a, b)| a - b).collect();
            total += w * dot(&hv, &diff);
        }
    }
    Ok(total.abs())
}

/// General bound `‖h‖ √(2 D² G T)`.
pub fn oigap_bound(h_norm: f64, t: usize, diameter: f64, g: f64) -> f64 {
    h_norm * (2.0 * diameter * diameter * g * t as f64).sqrt()
}

/// Multiclass bound `4 (Σ_j ‖h_j‖) √(TG)`.
pub fn oigap_bound_multiclass(coordinate_norms: &[f64], t: usize, g: f64) -> f64 {
    4.0 * coordinate_norms.iter().sum::<f64>() * (t as f64 * g).sqrt()
}

/// Linear multiclass bound `4 d B √T`.
pub fn oigap_bound_linear_multiclass(d: usize, b: f64, t: usize) -> f64 {
    4.0 * d as f64 * b * (t as f64).sqrt()
}

/// Mean–covariance bound `4 ‖h‖ √(TG)`.
pub fn oigap_bound_meancov(h_norm: f64, t: usize, g: f64) -> f64 {
    4.0 * h_norm * (t as f64 * g).sqrt()
}

/// Scalar-moment bound `‖h‖ √(Σ_t E[(p − s(y))ᵀ Γ (p − s(y))] + G D² T)`; the
/// quadratic sum is computed from the records.
pub fn oigap_bound_scalar_moments(kernel: &MatrixKernel, map: &StatisticMap, records: &[Record], h_norm: f64, diameter: f64, g: f64) -> Result<f64> {
    let mut quad = 0.0;
    for r in records {
        let y = r.y.as_ref().ok_or_else(|| Error::Input(format!("round {} has no outcome", r.t)))?;
        let s = map.stat(y)?;
        for (p, w) in r.atoms.iter().zip(&r.weights) {
            let diff: Vec<f64> = p.iter().zip(&s).map(|(a, b)| a - b).collect();
            let gm = kernel.gamma((&r.x, p), (&r.x, p))?;
            let v = gm * DVector::from_column_slice(&diff);
            quad += w * dot(&diff, v.as_slice());
        }
    }
    Ok(h_norm * (quad + g * diameter * diameter * records.len() as f64).sqrt())
}

/// Linear-dynamical-system bound `(Σ‖α_i‖ + Σ‖β_ij‖) √(4 T ℓ)`.
pub fn oigap_bound_lds(coefficient_norm_sum: f64, t: usize, lag: usize) -> f64 {
    coefficient_norm_sum * (4.0 * t as f64 * lag as f64).sqrt()
}

/// Defensive generation around a calibration engine.
#[derive(Clone, Debug)]
pub struct Generator {
    engine: Engine,
    map: StatisticMap,
    records: Vec<Record>,
    pending: Option<Vec<AtomicMeasure>>,
}

/// What one generation round hands to the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub mu: AtomicMeasure,
    pub p: Point,
    pub dist: AtomicDistribution,
}

impl Generator {
    pub fn new(kernel: MatrixKernel, map: StatisticMap, g: f64, config: EngineConfig) -> Result<Self> {
        map.validate()?;
        let engine = Engine::new(kernel, map.domain(), g, config)?;
        Ok(Self {
            engine,
            map,
            records: Vec::new(),
            pending: None,
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn map(&self) -> &StatisticMap {
        &self.map
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn into_records(self) -> Vec<Record> {
        self.records
    }

    /// Forecast statistics, then backfit a measure for every atom of `D_t`.
    pub fn round(&mut self, x: &[f64]) -> Result<Generated> {
        let dist = self.engine.round(x)?;
        let measures = dist
            .atoms
            .iter()
            .map(|p| self.map.backfit(p))
            .collect::<Result<Vec<_>>>()?;
        let p = self.engine.pending_sample().expect("round just ran").clone();
        let idx = dist.atoms.iter().position(|a| *a == p).expect("sample is an atom");
        let mu = measures[idx].clone();
        self.pending = Some(measures);
        Ok(Generated { mu, p, dist })
    }

    pub fn reveal(&mut self, y: Outcome) -> Result<&Record> {
        if self.pending.is_none() {
            return Err(Error::Protocol("reveal called without a pending round".into()));
        }
        let z = self.map.stat(&y)?;
        let rec = self.engine.reveal(&z)?.clone();
        let measures = self.pending.take();
        let mut r = Record::from_round(&rec);
        r.y = Some(y);
        r.measures = measures;
        self.records.push(r);
        Ok(self.records.last().expect("just pushed"))
    }
}
