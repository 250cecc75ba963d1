//! Newline-delimited JSON transcripts.
//!
//! Line 1 is a [`Header`]; every further line is one [`Record`]. Floats are
//! written in shortest round-trip form, so reading a transcript back yields
//! bit-identical values. An empty file is a valid transcript with no rounds.

use crate::calibrate::{accumulate, RoundRecord};
use crate::domains::{ConvexDomain, Point};
use crate::error::{Error, Result};
use crate::evi::{certify_residual, AtomicDistribution};
use crate::generate::{AtomicMeasure, Outcome, StatisticMap};
use crate::kernels::KernelSpec;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const FORMAT: &str = "defgen-transcript";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub domain: ConvexDomain,
    pub kernel: KernelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<StatisticMap>,
    pub diameter: f64,
    pub g: f64,
    /// Safety margin folded into `g` when it was estimated by search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_margin: Option<f64>,
    /// The experiment configuration that produced the run.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Header {
    pub fn new(domain: ConvexDomain, kernel: KernelSpec, map: Option<StatisticMap>, g: f64) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            diameter: domain.diameter(),
            domain,
            kernel,
            map,
            g,
            g_margin: None,
            config: serde_json::Value::Null,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub t: usize,
    pub x: Vec<f64>,
    pub atoms: Vec<Point>,
    pub weights: Vec<f64>,
    pub p_sampled: Point,
    pub z: Point,
    pub epsilon: f64,
    pub residual: f64,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Outcome>,
    /// Backfit measure for each atom, in atom order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measures: Option<Vec<AtomicMeasure>>,
}

impl Record {
    pub fn from_round(r: &RoundRecord) -> Self {
        Self {
            t: r.t,
            x: r.x.clone(),
            atoms: r.dist.atoms.clone(),
            weights: r.dist.weights.clone(),
            p_sampled: r.p_sampled.clone(),
            z: r.z.clone(),
            epsilon: r.epsilon,
            residual: r.residual,
            iterations: r.iterations,
            y: None,
            measures: None,
        }
    }

    pub fn distribution(&self) -> AtomicDistribution {
        AtomicDistribution {
            atoms: self.atoms.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn to_round(&self) -> RoundRecord {
        RoundRecord {
            t: self.t,
            x: self.x.clone(),
            dist: self.distribution(),
            p_sampled: self.p_sampled.clone(),
            z: self.z.clone(),
            epsilon: self.epsilon,
            residual: self.residual,
            iterations: self.iterations,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    pub header: Option<Header>,
    pub records: Vec<Record>,
}

impl Transcript {
    pub fn new(header: Header, records: Vec<Record>) -> Self {
        Self {
            header: Some(header),
            records,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let Some(h) = &self.header else {
            return Ok(());
        };
        writeln!(w, "{}", to_json(h)?)?;
        for r in &self.records {
            writeln!(w, "{}", to_json(r)?)?;
        }
        Ok(())
    }

    pub fn to_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(String::from_utf8(buf).expect("json is utf-8"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut out = Transcript::default();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if out.header.is_none() {
                let h: Header = serde_json::from_str(&line)
                    .map_err(|e| Error::Corrupt(format!("line {}: header: {e}", i + 1)))?;
                if h.format != FORMAT || h.version != VERSION {
                    return Err(Error::Corrupt(format!(
                        "unsupported transcript format {} version {}",
                        h.format, h.version
                    )));
                }
                out.header = Some(h);
            } else {
                let r: Record = serde_json::from_str(&line)
                    .map_err(|e| Error::Corrupt(format!("line {}: {e}", i + 1)))?;
                out.records.push(r);
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Corrupt(format!("serialization: {e}")))
}

/// The first check a transcript fails.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub round: usize,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "round {}: {}", self.round, self.message)
    }
}

/// What [`Transcript::verify`] checked.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Verification {
    pub rounds: usize,
    pub max_residual: f64,
    /// `‖m_T‖²` of the accumulated feature vector.
    pub potential: f64,
    pub violation: Option<Violation>,
}

impl Verification {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

const WEIGHT_TOL: f64 = 1e-9;
const MOMENT_TOL: f64 = 1e-8;

impl Transcript {
    /// Replays the run from the records alone: re-certifies every residual
    /// against the rebuilt operator, checks each forecast distribution and
    /// backfit measure, and checks `‖m_t‖² <= t D² G + 2 Σ r_s` after each round.
    /// Stops at the first violation. A transcript without rounds passes.
    pub fn verify(&self) -> Result<Verification> {
        let mut out = Verification::default();
        let Some(h) = &self.header else {
            if self.records.is_empty() {
                return Ok(out);
            }
            return Err(Error::Corrupt("records without a header".into()));
        };
        let kernel = h.kernel.build().map_err(|e| Error::Corrupt(format!("header kernel: {e}")))?;
        let domain = &h.domain;
        if kernel.d() != domain.dim() {
            return Err(Error::Corrupt("header kernel and domain dimensions differ".into()));
        }
        let d2g = h.diameter * h.diameter * h.g;
        let mut m: Option<Vec<f64>> = None;
        let mut twice_residuals = 0.0;
        let fail = |out: &mut Verification, round: usize, message: String| {
            out.violation = Some(Violation { round, message });
        };
        for (i, r) in self.records.iter().enumerate() {
            let t = i + 1;
            out.rounds = t;
            if r.t != t {
                fail(&mut out, t, format!("round index {} out of sequence", r.t));
                return Ok(out);
            }
            if let Some(msg) = check_distribution(&r.atoms, &r.weights, domain) {
                fail(&mut out, t, msg);
                return Ok(out);
            }
            if !domain.contains(&r.z) {
                fail(&mut out, t, "target lies outside the domain".into());
                return Ok(out);
            }
            let feats = m.get_or_insert_with(|| vec![0.0; kernel.feature_dim(r.x.len())]);
            let dist = r.distribution();
            let op = |p: &[f64]| kernel.phi_t_apply(&r.x, p, feats).unwrap_or_else(|_| vec![f64::NAN; p.len()]);
            let residual = match certify_residual(&dist, &op, domain) {
                Ok(v) => v,
                Err(e) => {
                    fail(&mut out, t, format!("cannot re-certify: {e}"));
                    return Ok(out);
                }
            };
            out.max_residual = out.max_residual.max(residual);
            let slack = 1e-9 * (1.0 + r.epsilon.abs());
            if residual > r.epsilon + slack {
                fail(&mut out, t, format!("residual {residual} exceeds epsilon {}", r.epsilon));
                return Ok(out);
            }
            if let Some(msg) = check_outcome(r, h.map.as_ref()) {
                fail(&mut out, t, msg);
                return Ok(out);
            }
            accumulate(&kernel, feats, &r.x, &dist, &r.z)?;
            twice_residuals += 2.0 * residual.max(0.0);
            let pot: f64 = feats.iter().map(|v| v * v).sum();
            out.potential = pot;
            let cap = t as f64 * d2g + twice_residuals;
            if pot > cap * (1.0 + 1e-9) + 1e-9 {
                fail(&mut out, t, format!("potential {pot} exceeds {cap}"));
                return Ok(out);
            }
        }
        Ok(out)
    }
}

fn check_distribution(atoms: &[Point], weights: &[f64], domain: &ConvexDomain) -> Option<String> {
    if atoms.is_empty() || atoms.len() != weights.len() {
        return Some(format!("{} atoms with {} weights", atoms.len(), weights.len()));
    }
    if let Some((k, w)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0 && **w <= 1.0)) {
        return Some(format!("weight {k} is {w}"));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > WEIGHT_TOL {
        return Some(format!("weights sum to {s}"));
    }
    if let Some(k) = atoms.iter().position(|a| !domain.contains(a)) {
        return Some(format!("atom {k} lies outside the domain"));
    }
    None
}

fn check_outcome(r: &Record, map: Option<&StatisticMap>) -> Option<String> {
    let (Some(map), Some(y)) = (map, &r.y) else {
        return None;
    };
    if !map.contains(y) {
        return Some("outcome lies outside the outcome space".into());
    }
    match map.stat(y) {
        Ok(s) if s.iter().zip(&r.z).all(|(a, b)| (a - b).abs() <= MOMENT_TOL) && s.len() == r.z.len() => {}
        _ => return Some("target is not the statistic of the outcome".into()),
    }
    let measures = r.measures.as_ref()?;
    if measures.len() != r.atoms.len() {
        return Some(format!("{} backfit measures for {} atoms", measures.len(), r.atoms.len()));
    }
    for (k, (mu, p)) in measures.iter().zip(&r.atoms).enumerate() {
        if mu.is_empty() || mu.atoms.len() != mu.weights.len() {
            return Some(format!("backfit measure {k} is malformed"));
        }
        if mu.weights.iter().any(|w| !(*w >= 0.0 && *w <= 1.0)) || (mu.weights.iter().sum::<f64>() - 1.0).abs() > WEIGHT_TOL {
            return Some(format!("backfit measure {k} has invalid weights"));
        }
        if mu.atoms.iter().any(|y| !map.contains(y)) {
            return Some(format!("backfit measure {k} has an atom outside the outcome space"));
        }
        match mu.expected_statistic(map) {
            Ok(s) if s.len() == p.len() && s.iter().zip(p).all(|(a, b)| (a - b).abs() <= MOMENT_TOL) => {}
            _ => return Some(format!("backfit measure {k} does not match its forecast")),
        }
    }
    None
}
