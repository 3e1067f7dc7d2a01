//! TOML scenario and quadratic-problem documents.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::conditions::BoundConstants;
use crate::dmpc::{self, AgentBoxes, AgentDynamics, DmpcSpec};
use crate::problem::{BoxSet, CommGraph, DistributedProblem, LocalProblem, Projector, QuadraticCost, Unconstrained};
use crate::sim::{self, BoundSource, LipschitzSource, RateSpec, Scenario};

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("field `{field}`: {msg}")]
    Field { field: String, msg: String },
}

fn field(field: &str, msg: impl Into<String>) -> DocumentError {
    DocumentError::Field { field: field.into(), msg: msg.into() }
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, DocumentError> {
    let r = rows.len();
    let c = rows.first().map_or(0, |v| v.len());
    if r == 0 || c == 0 || rows.iter().any(|v| v.len() != c) {
        return Err(field(name, "must be a nonempty rectangular array of rows"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Either one value shared by every agent or one per agent.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PerAgent<T> {
    Each(Vec<T>),
    Shared(T),
}

impl<T: Clone> PerAgent<T> {
    fn expand(&self, name: &str, m: usize) -> Result<Vec<T>, DocumentError> {
        match self {
            PerAgent::Shared(v) => Ok(vec![v.clone(); m]),
            PerAgent::Each(v) if v.len() == m => Ok(v.clone()),
            PerAgent::Each(v) => Err(field(name, format!("expected {m} entries, got {}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub agents: usize,
    pub a: PerAgent<Vec<Vec<f64>>>,
    pub b: PerAgent<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    /// 1-based neighborhoods, each including the agent itself.
    pub neighborhoods: Option<Vec<Vec<usize>>>,
    /// "chain" as a shorthand.
    pub kind: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostsSection {
    pub horizon: usize,
    /// Diagonal of Q_i.
    pub q: PerAgent<Vec<f64>>,
    /// Diagonal of R_i.
    pub r: PerAgent<Vec<f64>>,
    #[serde(default)]
    pub coupling_weight: f64,
    /// 1-based state coordinate the coupling acts on.
    #[serde(default = "one")]
    pub coupling_state: usize,
    pub x_ref: Vec<Vec<f64>>,
    pub u_ref: Option<Vec<Vec<f64>>>,
    /// Replaces the closed-form terminal level.
    pub terminal_level: Option<f64>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsSection {
    pub x_lo: PerAgent<Vec<f64>>,
    pub x_hi: PerAgent<Vec<f64>>,
    pub u_lo: PerAgent<Vec<f64>>,
    pub u_hi: PerAgent<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LipschitzEntry {
    Value(f64),
    Method(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSection {
    pub budget: Option<u64>,
    pub n: Option<u32>,
    pub k: Option<usize>,
    pub kappa: Option<f64>,
    pub eta: Option<f64>,
    pub lipschitz: LipschitzEntry,
    #[serde(default = "default_pairs")]
    pub lipschitz_pairs: usize,
    #[serde(default = "default_fraction")]
    pub lipschitz_box_fraction: f64,
    #[serde(default = "default_margin")]
    pub lipschitz_margin: f64,
    #[serde(default = "default_lip_seed")]
    pub lipschitz_seed: u64,
}

fn default_pairs() -> usize {
    200
}
fn default_fraction() -> f64 {
    0.25
}
fn default_margin() -> f64 {
    1.5
}
fn default_lip_seed() -> u64 {
    7
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum BoundsEntry {
    Method(String),
    Values(BoundConstants),
}

impl BoundsEntry {
    fn resolve(&self) -> Result<BoundSource, DocumentError> {
        match self {
            BoundsEntry::Method(s) if s == "derived" => Ok(BoundSource::Derived),
            BoundsEntry::Method(s) => Err(field("bound_constants", format!("unknown method `{s}`; use \"derived\" or a1..b3"))),
            BoundsEntry::Values(b) => {
                b.validate().map_err(|e| field("bound_constants", e.to_string()))?;
                Ok(BoundSource::Given(*b))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub bound: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub steps: usize,
    #[serde(default = "one_u64")]
    pub seed: u64,
    pub out: Option<String>,
    pub x0: Vec<Vec<f64>>,
    #[serde(default = "default_dt")]
    pub sample_time: f64,
}

fn one_u64() -> u64 {
    1
}
fn default_dt() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    pub name: Option<String>,
    pub dynamics: DynamicsSection,
    pub graph: GraphSection,
    pub costs: CostsSection,
    pub constraints: ConstraintsSection,
    pub rate: RateSection,
    pub bound_constants: Option<BoundsEntry>,
    pub noise: Option<NoiseSection>,
    pub run: RunSection,
}

fn read(path: &Path) -> Result<String, DocumentError> {
    std::fs::read_to_string(path).map_err(|source| DocumentError::Io { path: path.display().to_string(), source })
}

fn graph_from(g: &GraphSection, m: usize) -> Result<CommGraph, DocumentError> {
    match (&g.neighborhoods, g.kind.as_deref()) {
        (Some(nb), None) => {
            if nb.len() != m {
                return Err(field("graph.neighborhoods", format!("expected {m} entries")));
            }
            let zero: Vec<Vec<usize>> = nb
                .iter()
                .map(|v| v.iter().map(|&j| j.checked_sub(1).ok_or_else(|| field("graph.neighborhoods", "indices are 1-based"))).collect())
                .collect::<Result<_, _>>()?;
            CommGraph::new(zero).map_err(|e| field("graph.neighborhoods", e.to_string()))
        }
        (None, Some("chain")) => Ok(CommGraph::chain(m)),
        (None, Some(k)) => Err(field("graph.kind", format!("unknown kind `{k}`"))),
        _ => Err(field("graph", "give exactly one of `neighborhoods` or `kind`")),
    }
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

impl ScenarioDocument {
    pub fn from_str(text: &str) -> Result<Self, DocumentError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, DocumentError> {
        Self::from_str(&read(path)?)
    }

    pub fn has_bounds(&self) -> bool {
        self.bound_constants.is_some()
    }

    pub fn to_scenario(&self) -> Result<Scenario, DocumentError> {
        let m = self.dynamics.agents;
        if m == 0 {
            return Err(field("dynamics.agents", "must be positive"));
        }
        let a = self.dynamics.a.expand("dynamics.a", m)?;
        let b = self.dynamics.b.expand("dynamics.b", m)?;
        let dynamics: Vec<AgentDynamics> = a
            .iter()
            .zip(&b)
            .map(|(a, b)| Ok(AgentDynamics { a: matrix("dynamics.a", a)?, b: matrix("dynamics.b", b)? }))
            .collect::<Result<_, DocumentError>>()?;
        let graph = graph_from(&self.graph, m)?;
        let c = &self.costs;
        let q: Vec<DMatrix<f64>> = c.q.expand("costs.q", m)?.iter().map(|v| diag(v)).collect();
        let r: Vec<DMatrix<f64>> = c.r.expand("costs.r", m)?.iter().map(|v| diag(v)).collect();
        for i in 0..m {
            if q[i].nrows() != dynamics[i].nx() {
                return Err(field("costs.q", format!("agent {} needs {} entries", i + 1, dynamics[i].nx())));
            }
            if r[i].nrows() != dynamics[i].nu() {
                return Err(field("costs.r", format!("agent {} needs {} entries", i + 1, dynamics[i].nu())));
            }
        }
        if c.coupling_state == 0 || dynamics.iter().any(|d| c.coupling_state > d.nx()) {
            return Err(field("costs.coupling_state", "1-based index within every agent's state"));
        }
        let coupling = (c.coupling_weight != 0.0).then_some((c.coupling_weight, c.coupling_state - 1));
        let stage = dmpc::coupled_stage_weights(&graph, &q, &r, coupling);
        let k = &self.constraints;
        let (xl, xh) = (k.x_lo.expand("constraints.x_lo", m)?, k.x_hi.expand("constraints.x_hi", m)?);
        let (ul, uh) = (k.u_lo.expand("constraints.u_lo", m)?, k.u_hi.expand("constraints.u_hi", m)?);
        let mut boxes = Vec::new();
        for i in 0..m {
            let (nx, nu) = (dynamics[i].nx(), dynamics[i].nu());
            if xl[i].len() != nx || xh[i].len() != nx || ul[i].len() != nu || uh[i].len() != nu {
                return Err(field("constraints", format!("agent {} box dimensions", i + 1)));
            }
            boxes.push(AgentBoxes { x_lo: xl[i].clone(), x_hi: xh[i].clone(), u_lo: ul[i].clone(), u_hi: uh[i].clone() });
        }
        let check_len = |name: &str, v: &[Vec<f64>], dims: &dyn Fn(usize) -> usize| {
            if v.len() != m || v.iter().enumerate().any(|(i, x)| x.len() != dims(i)) {
                Err(field(name, "one vector per agent of matching dimension"))
            } else {
                Ok(())
            }
        };
        check_len("costs.x_ref", &c.x_ref, &|i| dynamics[i].nx())?;
        let u_ref = c.u_ref.clone().unwrap_or_else(|| dynamics.iter().map(|d| vec![0.0; d.nu()]).collect());
        check_len("costs.u_ref", &u_ref, &|i| dynamics[i].nu())?;
        check_len("run.x0", &self.run.x0, &|i| dynamics[i].nx())?;
        if c.horizon == 0 {
            return Err(field("costs.horizon", "must be positive"));
        }
        let spec = DmpcSpec {
            horizon: c.horizon,
            graph,
            dynamics,
            stage,
            terminal_weight: Vec::new(),
            terminal_level: Vec::new(),
            terminal_gain: Vec::new(),
            boxes,
            x_ref: c.x_ref.clone(),
            u_ref,
        };
        let spec = sim::with_lqr_terminal(spec, c.terminal_level).map_err(|e| field("costs", e.to_string()))?;
        spec.validate().map_err(|e| field("scenario", e.to_string()))?;

        let rt = &self.rate;
        let rate = match (rt.budget, rt.n, rt.k) {
            (Some(t), None, None) => RateSpec::Budget(t),
            (None, Some(n), Some(k)) => RateSpec::Explicit { n, k },
            (Some(_), Some(n), Some(k)) => RateSpec::Explicit { n, k },
            _ => return Err(field("rate", "give `budget`, or both `n` and `k`")),
        };
        let lipschitz = match &rt.lipschitz {
            LipschitzEntry::Value(l) if *l > 0.0 => LipschitzSource::Fixed(*l),
            LipschitzEntry::Value(_) => return Err(field("rate.lipschitz", "must be positive")),
            LipschitzEntry::Method(s) if s == "estimate" => LipschitzSource::Estimate {
                pairs: rt.lipschitz_pairs,
                seed: rt.lipschitz_seed,
                box_fraction: rt.lipschitz_box_fraction,
                margin: rt.lipschitz_margin,
            },
            LipschitzEntry::Method(s) => return Err(field("rate.lipschitz", format!("unknown method `{s}`"))),
        };
        let bounds = self.bound_constants.as_ref().map(|b| b.resolve()).transpose()?;
        let noise = self.noise.as_ref().map(|n| n.bound);
        if noise.map_or(false, |e| !(e >= 0.0 && e.is_finite())) {
            return Err(field("noise.bound", "must be finite and nonnegative"));
        }
        Ok(Scenario {
            name: self.name.clone().unwrap_or_else(|| "scenario".into()),
            spec,
            x0: self.run.x0.clone(),
            rate,
            kappa: rt.kappa,
            eta: rt.eta,
            lipschitz,
            bounds,
            steps: self.run.steps,
            noise,
            seed: self.run.seed,
            sample_time: self.run.sample_time,
        })
    }
}

// ---------------------------------------------------------------------------
// Standalone quadratic problems

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticAgent {
    pub dim: usize,
    /// H_i over z_𝒩i, f_i = zᵀH_iz + g_iᵀz.
    pub hessian: Vec<Vec<f64>>,
    pub linear: Option<Vec<f64>>,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    pub n: u32,
    pub k: usize,
    pub kappa: Option<f64>,
    pub eta: Option<f64>,
    pub c_alpha: Option<f64>,
    pub c_beta: Option<f64>,
    pub z0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDocument {
    pub graph: GraphSection,
    pub agent: Vec<QuadraticAgent>,
    pub optimizer: SolveSection,
    pub bound_constants: Option<BoundsEntry>,
}

impl ProblemDocument {
    pub fn load(path: &Path) -> Result<Self, DocumentError> {
        Ok(toml::from_str(&read(path)?)?)
    }

    pub fn from_str(text: &str) -> Result<Self, DocumentError> {
        Ok(toml::from_str(text)?)
    }

    pub fn bounds(&self) -> Result<Option<BoundSource>, DocumentError> {
        self.bound_constants.as_ref().map(|b| b.resolve()).transpose()
    }

    pub fn problem(&self) -> Result<DistributedProblem, DocumentError> {
        let m = self.agent.len();
        let graph = graph_from(&self.graph, m)?;
        let mut agents = Vec::new();
        for (i, a) in self.agent.iter().enumerate() {
            let h = matrix(&format!("agent[{i}].hessian"), &a.hessian)?;
            let set: Arc<dyn Projector> = match (&a.lo, &a.hi) {
                (None, None) => Arc::new(Unconstrained(a.dim)),
                (lo, hi) => {
                    let lo = lo.clone().unwrap_or_else(|| vec![f64::NEG_INFINITY; a.dim]);
                    let hi = hi.clone().unwrap_or_else(|| vec![f64::INFINITY; a.dim]);
                    if lo.len() != a.dim || hi.len() != a.dim || lo.iter().zip(&hi).any(|(l, h)| l > h) {
                        return Err(field(&format!("agent[{i}]"), "box bounds must match dim with lo ≤ hi"));
                    }
                    Arc::new(BoxSet::new(lo, hi))
                }
            };
            agents.push(LocalProblem {
                dim: a.dim,
                cost: Arc::new(QuadraticCost::from_dense(&h, a.linear.clone())),
                set,
            });
        }
        DistributedProblem::new(graph, agents).map_err(|e| field("agent", e.to_string()))
    }
}
