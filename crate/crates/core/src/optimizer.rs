//! Synchronous distributed projected gradient with progressively quantized
//! exchange of iterates and gradients.

use rayon::prelude::*;
use thiserror::Error;

use crate::conditions::BoundConstants;
use crate::linalg;
use crate::problem::{DistributedProblem, ProblemConstants};
use crate::quantizer::UniformQuantizer;

#[derive(Debug, Error, PartialEq)]
pub enum OptimizerError {
    #[error("K must be at least 1")]
    Iterations,
    #[error("bit number must be at least 1")]
    Bits,
    #[error("kappa {kappa} outside ({lo}, 1)")]
    Kappa { kappa: f64, lo: f64 },
    #[error("step size {eta} outside (0, 1/L_f = {max})")]
    Eta { eta: f64, max: f64 },
    #[error("initial intervals must be nonnegative and finite")]
    Interval,
    #[error("initial point has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub k: usize,
    pub n: u32,
    pub kappa: f64,
    pub eta: f64,
    pub c_alpha: f64,
    pub c_beta: f64,
    pub parallel: bool,
}

impl OptimizerConfig {
    /// Require line: 1−γ < κ < 1, 0 < η < 1/L_f, K ≥ 1.
    pub fn validate(&self, consts: &ProblemConstants) -> Result<(), OptimizerError> {
        if self.k < 1 {
            return Err(OptimizerError::Iterations);
        }
        if self.n < 1 {
            return Err(OptimizerError::Bits);
        }
        let lo = 1.0 - consts.gamma;
        if !(self.kappa > lo && self.kappa < 1.0) {
            return Err(OptimizerError::Kappa { kappa: self.kappa, lo });
        }
        let max = 1.0 / consts.l_f;
        if !(self.eta > 0.0 && self.eta < max) {
            return Err(OptimizerError::Eta { eta: self.eta, max });
        }
        if !(self.c_alpha >= 0.0 && self.c_beta >= 0.0)
            || !self.c_alpha.is_finite()
            || !self.c_beta.is_finite()
        {
            return Err(OptimizerError::Interval);
        }
        Ok(())
    }
}

/// Bits sent during one call. Every transmitted scalar costs n bits; the
/// k = 0 round reproduces the mid-values exactly and is not transmitted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitLedger {
    pub n: u32,
    pub rounds: usize,
    /// Per agent: bits spent on its decision variable z_i.
    pub z_bits: Vec<u64>,
    /// Per agent: bits spent on its gradient ∇f_i.
    pub grad_bits: Vec<u64>,
    /// Per scalar variable, over the whole call.
    pub bits_per_variable: u64,
}

impl BitLedger {
    pub fn total(&self) -> u64 {
        self.z_bits.iter().sum::<u64>() + self.grad_bits.iter().sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    /// ‖z^{k+1} − z*‖ when an oracle point is supplied.
    pub gap: Option<f64>,
    pub l_alpha: f64,
    pub l_beta: f64,
    pub saturations: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub z: Vec<f64>,
    pub ledger: BitLedger,
    pub trace: Vec<IterationRecord>,
    pub saturations: usize,
}

/// Per-agent state carried across iterations.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub z: Vec<f64>,
    pub zhat_prev: Vec<f64>,
    pub gradhat_prev: Vec<f64>,
}

/// Warm-start storage for iterative projectors, reusable across calls.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    pub step4: Vec<Vec<f64>>,
    pub step9: Vec<Vec<f64>>,
}

impl Workspace {
    pub fn new(agents: usize) -> Self {
        Self { step4: vec![Vec::new(); agents], step9: vec![Vec::new(); agents] }
    }
}

/// Quantize `x` against `mid`. A zero interval collapses to the mid-value
/// (every coordinate that differs counts as saturated).
fn send(mid: &[f64], x: &[f64], interval: f64, bits: u32) -> (Vec<f64>, usize) {
    if interval > 0.0 {
        let q = UniformQuantizer { mid: mid.to_vec(), interval, bits };
        q.transmit(x).expect("dimensions agree by construction")
    } else {
        let sat = x.iter().zip(mid).filter(|(a, b)| (*a - *b).abs() > 1e-9 * b.abs().max(1.0)).count();
        (mid.to_vec(), sat)
    }
}

fn for_agents<T: Send, F>(parallel: bool, m: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    if parallel {
        (0..m).into_par_iter().map(f).collect()
    } else {
        (0..m).map(f).collect()
    }
}

fn for_agents_mut<T: Send, S: Send, F>(parallel: bool, state: &mut [S], f: F) -> Vec<T>
where
    F: Fn(usize, &mut S) -> T + Sync + Send,
{
    if parallel {
        state.par_iter_mut().enumerate().map(|(i, s)| f(i, s)).collect()
    } else {
        state.iter_mut().enumerate().map(|(i, s)| f(i, s)).collect()
    }
}

pub fn run(
    problem: &DistributedProblem,
    cfg: &OptimizerConfig,
    z0: &[f64],
    oracle: Option<&[f64]>,
) -> Result<RunOutput, OptimizerError> {
    let mut ws = Workspace::new(problem.agent_count());
    run_with(problem, cfg, z0, oracle, &mut ws)
}

pub fn run_with(
    problem: &DistributedProblem,
    cfg: &OptimizerConfig,
    z0: &[f64],
    oracle: Option<&[f64]>,
    ws: &mut Workspace,
) -> Result<RunOutput, OptimizerError> {
    if cfg.k < 1 {
        return Err(OptimizerError::Iterations);
    }
    if cfg.n < 1 {
        return Err(OptimizerError::Bits);
    }
    if z0.len() != problem.total_dim() {
        return Err(OptimizerError::Dimension { expected: problem.total_dim(), got: z0.len() });
    }
    let m = problem.agent_count();
    let maps = &problem.maps;
    if ws.step4.len() != m {
        *ws = Workspace::new(m);
    }
    let par = cfg.parallel;

    // Require line: ẑ⁻¹ = z⁰, ∇̂f⁻¹ = ∇f_i(Proj_{C_𝒩i}(z⁰_𝒩i)), computed locally.
    let mut agents: Vec<AgentState> = for_agents(par, m, |i| {
        let z = maps.block(z0, i).to_vec();
        let local = maps.gather(z0, i);
        let proj = problem.project_neighborhood(i, &local);
        AgentState { zhat_prev: z.clone(), gradhat_prev: problem.agents[i].cost.grad(&proj), z }
    });

    let mut ledger = BitLedger {
        n: cfg.n,
        rounds: 0,
        z_bits: vec![0; m],
        grad_bits: vec![0; m],
        bits_per_variable: 0,
    };
    let mut trace = Vec::with_capacity(cfg.k + 1);
    let mut total_sat = 0;

    for k in 0..=cfg.k {
        let decay = cfg.kappa.powi(k as i32);
        let l_alpha = cfg.c_alpha * decay;
        let l_beta = cfg.c_beta * decay;

        // Steps 1–3: quantize and broadcast z_i^k.
        let sent: Vec<(Vec<f64>, usize)> =
            for_agents(par, m, |i| send(&agents[i].zhat_prev, &agents[i].z, l_alpha, cfg.n));
        // barrier: every ẑ_j^k is visible below.

        // Step 4: Proj_{C_𝒩i}(ẑ_𝒩i) factors into per-agent projections.
        let zhat: Vec<&Vec<f64>> = sent.iter().map(|(v, _)| v).collect();
        let proj: Vec<Vec<f64>> = for_agents_mut(par, &mut ws.step4, |j, warm| {
            problem.agents[j].set.project_warm(zhat[j], warm)
        });

        // Steps 5–8: local gradients, quantize, broadcast.
        let grads: Vec<(Vec<f64>, usize)> = for_agents(par, m, |j| {
            let local = maps.gather_parts(&proj, j);
            let g = problem.agents[j].cost.grad(&local);
            send(&agents[j].gradhat_prev, &g, l_beta, cfg.n)
        });
        // barrier: every ∇̂f_j^k is visible below.

        // Step 9: z_i^{k+1} = Proj_{C_i}(z_i^k − η Σ_{j∈𝒩i} F_ji ∇̂f_j^k).
        let next: Vec<Vec<f64>> = for_agents_mut(par, &mut ws.step9, |i, warm| {
            let mut step = agents[i].z.clone();
            for &j in problem.graph.neighbors(i) {
                let block = maps.pick(&grads[j].0, j, i).expect("i ∈ 𝒩_j");
                for (s, g) in step.iter_mut().zip(block) {
                    *s -= cfg.eta * g;
                }
            }
            problem.agents[i].set.project_warm(&step, warm)
        });

        let sat: usize = sent.iter().map(|s| s.1).sum::<usize>() + grads.iter().map(|g| g.1).sum::<usize>();
        total_sat += sat;
        if k > 0 {
            ledger.rounds += 1;
            for i in 0..m {
                ledger.z_bits[i] += cfg.n as u64 * maps.dims[i] as u64;
                ledger.grad_bits[i] += cfg.n as u64 * maps.neighborhood_dim(i) as u64;
            }
            ledger.bits_per_variable += cfg.n as u64;
        }
        for (i, a) in agents.iter_mut().enumerate() {
            a.zhat_prev = sent[i].0.clone();
            a.gradhat_prev = grads[i].0.clone();
            a.z = next[i].clone();
        }
        let gap = oracle.map(|zs| {
            let z: Vec<f64> = agents.iter().flat_map(|a| a.z.iter().cloned()).collect();
            linalg::dist(&z, zs)
        });
        trace.push(IterationRecord { k, gap, l_alpha, l_beta, saturations: sat });
    }

    let z = agents.into_iter().flat_map(|a| a.z).collect();
    Ok(RunOutput { z, ledger, trace, saturations: total_sat })
}

/// Relative slack used when testing the interval conditions; the pair
/// (J_α ρ, J_β ρ) meets them with equality.
pub const INTERVAL_SLACK: f64 = 1e-12;

/// a₁ρ + a₂C_α/2^{n+1} + a₃C_β/2^{n+1} ≤ C_α/2 and
/// b₁ρ + b₂C_α/2^{n+1} + b₃C_β/2^{n+1} ≤ C_β/2.
pub fn check_interval_conditions(c_alpha: f64, c_beta: f64, rho: f64, n: u32, c: &BoundConstants) -> bool {
    interval_margins(c_alpha, c_beta, rho, n, c).iter().all(|&m| m >= 0.0)
}

/// (rhs − lhs + slack) for both inequalities; nonnegative means satisfied.
pub fn interval_margins(c_alpha: f64, c_beta: f64, rho: f64, n: u32, c: &BoundConstants) -> [f64; 2] {
    let q = 2f64.powi(n as i32 + 1);
    let lhs1 = c.a1 * rho + c.a2 * c_alpha / q + c.a3 * c_beta / q;
    let lhs2 = c.b1 * rho + c.b2 * c_alpha / q + c.b3 * c_beta / q;
    let r1 = c_alpha / 2.0;
    let r2 = c_beta / 2.0;
    [
        r1 - lhs1 + INTERVAL_SLACK * lhs1.abs().max(r1.abs()),
        r2 - lhs2 + INTERVAL_SLACK * lhs2.abs().max(r2.abs()),
    ]
}

/// CSV rows `k,gap,l_alpha,l_beta,sat`.
pub fn trace_csv(trace: &[IterationRecord]) -> String {
    let mut s = String::from("k,gap,l_alpha,l_beta,sat\n");
    for r in trace {
        let gap = r.gap.map_or(String::from(""), |g| format!("{:.16e}", g));
        s.push_str(&format!("{},{},{:.16e},{:.16e},{}\n", r.k, gap, r.l_alpha, r.l_beta, r.saturations));
    }
    s
}
