//! Expected variational inequalities: find a finitely supported `D` over `Z` with
//! `E_{p∼D}[S(p)·(z − p)] <= ε` for every `z ∈ Z`, by online gradient ascent
//! on the linear rewards `p ↦ S(p_k)·p`.

use crate::domains::{ConvexDomain, Point};
use crate::error::{Error, Result};
use crate::linalg::{dot, null_vector};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Weights below this are dropped after solving.
pub const WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomicDistribution {
    pub atoms: Vec<Point>,
    pub weights: Vec<f64>,
}

impl AtomicDistribution {
    pub fn point_mass(p: Point) -> Self {
        Self {
            atoms: vec![p],
            weights: vec![1.0],
        }
    }

    pub fn uniform(atoms: Vec<Point>) -> Self {
        let w = 1.0 / atoms.len() as f64;
        let weights = vec![w; atoms.len()];
        Self { atoms, weights }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Point, f64)> {
        self.atoms.iter().zip(self.weights.iter().copied())
    }

    pub fn mean(&self) -> Point {
        let mut out = vec![0.0; self.atoms.first().map_or(0, |a| a.len())];
        for (a, w) in self.iter() {
            for (o, v) in out.iter_mut().zip(a) {
                *o += w * v;
            }
        }
        out
    }

    /// `E[f(p)]` for a vector-valued `f`.
    pub fn expect<F: FnMut(&[f64]) -> Vec<f64>>(&self, mut f: F) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for (a, w) in self.iter() {
            let v = f(a);
            if out.is_empty() {
                out = vec![0.0; v.len()];
            }
            for (o, x) in out.iter_mut().zip(&v) {
                *o += w * x;
            }
        }
        out
    }

    /// Checks weights are nonnegative and sum to one, and atoms lie in `domain`.
    pub fn validate(&self, domain: &ConvexDomain) -> Result<()> {
        if self.atoms.is_empty() || self.atoms.len() != self.weights.len() {
            return Err(Error::Input("distribution needs one weight per atom".into()));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Input("distribution weights must be finite and nonnegative".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 * self.weights.len().max(1) as f64 {
            return Err(Error::Input(format!("distribution weights sum to {s}")));
        }
        for (i, a) in self.atoms.iter().enumerate() {
            if !domain.contains(a) {
                return Err(Error::Input(format!("atom {i} lies outside the domain")));
            }
        }
        Ok(())
    }

    /// Merge bitwise-identical atoms, drop weights below [`WEIGHT_FLOOR`], renormalize.
    pub fn tidy(self) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut atoms: Vec<Point> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (a, w) in self.atoms.into_iter().zip(self.weights) {
            let key: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            match index.get(&key) {
                Some(&i) => weights[i] += w,
                None => {
                    index.insert(key, atoms.len());
                    atoms.push(a);
                    weights.push(w);
                }
            }
        }
        let keep: Vec<usize> = (0..atoms.len()).filter(|&i| weights[i] >= WEIGHT_FLOOR).collect();
        let keep = if keep.is_empty() {
            let best = (0..atoms.len()).max_by(|&a, &b| weights[a].total_cmp(&weights[b])).unwrap();
            vec![best]
        } else {
            keep
        };
        let s: f64 = keep.iter().map(|&i| weights[i]).sum();
        Self {
            atoms: keep.iter().map(|&i| atoms[i].clone()).collect(),
            weights: keep.iter().map(|&i| weights[i] / s).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EviSolution {
    pub distribution: AtomicDistribution,
    pub certified_residual: f64,
    /// OGD iterations performed.
    pub iterations: usize,
}

/// Iteration count, step size and target error for one round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub k: usize,
    pub eta: f64,
    pub epsilon: f64,
}

/// `K = t²`, `η = D/(G′√K)` with `G′ = tGD`, `ε = 2D²G`.
pub fn default_schedule(t: usize, d: f64, g: f64) -> Schedule {
    let t = t.max(1);
    let k = t * t;
    let gp = t as f64 * g * d;
    let eta = if gp > 0.0 { d / (gp * (k as f64).sqrt()) } else { 1.0 };
    Schedule {
        k,
        eta,
        epsilon: 2.0 * d * d * g,
    }
}

/// Smallest `K` for which the OGD average regret bound `G′D/√K` is at most `ε/2`,
/// capped at `k_cap`, with the matching step size.
pub fn schedule_for(epsilon: f64, gprime: f64, d: f64, k_cap: usize) -> Schedule {
    let k = if gprime <= 0.0 || d <= 0.0 {
        1
    } else {
        let raw = (2.0 * gprime * d / epsilon).powi(2).ceil();
        if raw >= k_cap as f64 {
            k_cap
        } else {
            (raw as usize).max(1)
        }
    };
    let eta = if gprime > 0.0 && d > 0.0 {
        d / (gprime * (k as f64).sqrt())
    } else {
        1.0
    };
    Schedule { k, eta, epsilon }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolveOptions {
    /// Stop at the first power-of-two iteration count whose average already
    /// certifies at `ε/2`, the accuracy the full schedule guarantees.
    pub early_stop: bool,
}

fn operator_value(s: &dyn Fn(&[f64]) -> Vec<f64>, p: &[f64], iterate: usize) -> Result<Vec<f64>> {
    let v = s(p);
    if v.len() != p.len() {
        return Err(Error::Dimension {
            expected: p.len(),
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Operator { iterate });
    }
    Ok(v)
}

pub fn solve_evi(
    s: &dyn Fn(&[f64]) -> Vec<f64>,
    domain: &ConvexDomain,
    epsilon: f64,
    k: usize,
    eta: f64,
) -> Result<EviSolution> {
    solve_evi_with(s, domain, epsilon, k, eta, SolveOptions::default())
}

pub fn solve_evi_with(
    s: &dyn Fn(&[f64]) -> Vec<f64>,
    domain: &ConvexDomain,
    epsilon: f64,
    k: usize,
    eta: f64,
    opts: SolveOptions,
) -> Result<EviSolution> {
    if !(epsilon > 0.0) || k == 0 || !(eta > 0.0) {
        return Err(Error::Input("solve_evi needs epsilon > 0, K >= 1, eta > 0".into()));
    }
    let dim = domain.dim();
    let mut p = domain.project(&vec![0.0; dim])?;
    let mut atoms = Vec::with_capacity(k.min(1 << 16));
    let mut c = vec![0.0; dim];
    let mut constant = 0.0;
    let mut next_check = 1;
    let mut iterations = 0;
    for it in 0..k {
        let g = operator_value(s, &p, it)?;
        for (ci, gi) in c.iter_mut().zip(&g) {
            *ci += gi;
        }
        constant += dot(&g, &p);
        iterations = it + 1;
        if opts.early_stop && iterations == next_check && iterations < k {
            next_check *= 2;
            let n = iterations as f64;
            let avg: Vec<f64> = c.iter().map(|x| x / n).collect();
            let value = domain.linear_max(&avg)?.1 - constant / n;
            if value <= 0.5 * epsilon {
                atoms.push(p);
                break;
            }
        }
        if it + 1 < k {
            let step: Vec<f64> = p.iter().zip(&g).map(|(pi, gi)| pi + eta * gi).collect();
            let next = domain.project(&step)?;
            atoms.push(std::mem::replace(&mut p, next));
        } else {
            atoms.push(p.clone());
        }
    }
    let distribution = AtomicDistribution::uniform(atoms).tidy();
    let residual = certify_residual(&distribution, s, domain)?;
    if residual > epsilon {
        return Err(Error::Certification {
            round: 0,
            residual,
            epsilon,
        });
    }
    Ok(EviSolution {
        distribution,
        certified_residual: residual,
        iterations,
    })
}

/// `max_z E_{p∼D}[S(p)·(z − p)]`, exact through one linear maximization.
pub fn certify_residual(
    dist: &AtomicDistribution,
    s: &dyn Fn(&[f64]) -> Vec<f64>,
    domain: &ConvexDomain,
) -> Result<f64> {
    let mut c = vec![0.0; domain.dim()];
    let mut constant = 0.0;
    for (i, (p, w)) in dist.iter().enumerate() {
        let g = operator_value(s, p, i)?;
        for (ci, gi) in c.iter_mut().zip(&g) {
            *ci += w * gi;
        }
        constant += w * dot(&g, p);
    }
    Ok(domain.linear_max(&c)?.1 - constant)
}

/// Reweight onto at most `q + 1` atoms while preserving `E[stat(p)]` (and total
/// mass), where `q` is the length of `stat`. Works by recursive clustering: the
/// elimination runs on cluster means and a vanishing cluster drops all its atoms.
pub fn compress(dist: AtomicDistribution, stat: &dyn Fn(&[f64]) -> Vec<f64>) -> AtomicDistribution {
    if dist.len() <= 1 {
        return dist;
    }
    let g: Vec<Vec<f64>> = dist.atoms.iter().map(|a| stat(a)).collect();
    let q = g[0].len();
    let mut w = dist.weights.clone();
    let mut active: Vec<usize> = (0..dist.len()).filter(|&i| w[i] > 0.0).collect();
    let limit = q + 1;
    let mut guard = 0;
    while active.len() > limit && guard < 100_000 {
        guard += 1;
        let k = (limit + 1).min(active.len());
        let n = active.len();
        let clusters: Vec<&[usize]> = (0..k).map(|c| &active[c * n / k..(c + 1) * n / k]).collect();
        let m = clusters.len();
        let mut cw = vec![0.0; m];
        let mut cols = DMatrix::zeros(q + 1, m);
        for (c, members) in clusters.iter().enumerate() {
            let tot: f64 = members.iter().map(|&i| w[i]).sum();
            cw[c] = tot;
            for &i in members.iter() {
                for r in 0..q {
                    cols[(r, c)] += w[i] / tot * g[i][r];
                }
            }
            cols[(q, c)] = 1.0;
        }
        let Some(v) = null_vector(&cols, 1e-10) else { break };
        // Move weights along ±v until the first cluster vanishes.
        let v: Vec<f64> = if v.iter().any(|x| *x > 0.0) { v.iter().copied().collect() } else { v.iter().map(|x| -x).collect() };
        let mut alpha = f64::INFINITY;
        let mut hit = 0;
        for c in 0..m {
            if v[c] > 0.0 && cw[c] / v[c] < alpha {
                alpha = cw[c] / v[c];
                hit = c;
            }
        }
        let mut next_active = Vec::with_capacity(active.len());
        for (c, members) in clusters.iter().enumerate() {
            let nw = if c == hit { 0.0 } else { (cw[c] - alpha * v[c]).max(0.0) };
            let ratio = nw / cw[c];
            for &i in members.iter() {
                w[i] *= ratio;
                if w[i] > 0.0 {
                    next_active.push(i);
                }
            }
        }
        active = next_active;
    }
    let s: f64 = active.iter().map(|&i| w[i]).sum();
    AtomicDistribution {
        atoms: active.iter().map(|&i| dist.atoms[i].clone()).collect(),
        weights: active.iter().map(|&i| w[i] / s).collect(),
    }
    .tidy()
}
