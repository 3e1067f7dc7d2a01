//! Closed-loop harness: oracle solver, built-in scenarios, plant propagation,
//! trace logging and trajectory-level verification.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::conditions::{
    self, BoundConstants, ConditionsError, DesignInputs, DesignReport, GainSet, RateDesign, SmallGainReport,
};
use crate::dmpc::{
    self, AgentBoxes, AgentDynamics, DmpcError, DmpcModel, DmpcSpec, LipschitzEstimate, TerminalReport,
};
use crate::linalg;
use crate::optimizer::{self, OptimizerError};
use crate::problem::{CommGraph, DistributedProblem, ProblemError};
use crate::refinement::{Controller, NoiseModel, RefinementError, RefinementParams};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario: {0}")]
    Config(String),
    #[error("bound constants a1..b3 are not configured; add a [bound_constants] section")]
    MissingBounds,
    #[error("design is not compliant: {0}")]
    NonCompliant(String),
    #[error("infeasible state at t = {t}: {msg}")]
    Infeasible { t: usize, msg: String },
    #[error("oracle did not converge at t = {t} (residual {residual:.3e})")]
    Oracle { t: usize, residual: f64 },
    #[error(transparent)]
    Dmpc(#[from] DmpcError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Conditions(#[from] ConditionsError),
    #[error(transparent)]
    Refinement(#[from] RefinementError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
}

// ---------------------------------------------------------------------------
// Oracle

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    /// Stop when ‖z − Proj_C(z − ∇f(z)/L_f)‖ ≤ tol.
    pub tol: f64,
    pub max_iter: usize,
    /// Gradient Lipschitz constant; computed from the Hessian when absent.
    pub l_f: Option<f64>,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 1_000_000, l_f: None }
    }
}

impl OracleOptions {
    /// Tighter setting used for trajectory diagnostics.
    pub fn precise() -> Self {
        Self { tol: 1e-12, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub z: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

fn gradient_lipschitz(problem: &DistributedProblem) -> f64 {
    if let Ok(c) = problem.constants() {
        return c.l_f;
    }
    // Power iteration on gradient differences.
    let n = problem.total_dim();
    let base = problem.grad(&vec![0.0; n]);
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
    let mut lam = 0.0;
    for _ in 0..200 {
        let nv = linalg::norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let g = problem.grad(&v);
        let w: Vec<f64> = g.iter().zip(&base).map(|(a, b)| a - b).collect();
        lam = linalg::norm(&w);
        v = w;
    }
    lam * 1.01
}

/// Accelerated projected gradient with gradient-based restart.
pub fn oracle_solve(problem: &DistributedProblem, init: Option<&[f64]>, opts: &OracleOptions) -> OracleSolution {
    let n = problem.total_dim();
    let l_f = opts.l_f.unwrap_or_else(|| gradient_lipschitz(problem));
    let step = 1.0 / l_f;
    let mut warm = vec![Vec::new(); problem.agent_count()];
    let mut check_warm = vec![Vec::new(); problem.agent_count()];
    let start = init.map(|z| z.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let mut z = problem.project_warm(&start, &mut warm);
    let mut y = z.clone();
    let mut theta = 1.0f64;
    let mut residual = f64::INFINITY;
    let residual_at = |z: &[f64], ws: &mut [Vec<f64>]| {
        let g = problem.grad(z);
        let s: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        linalg::dist(z, &problem.project_warm(&s, ws))
    };
    for it in 0..opts.max_iter {
        if it % 10 == 0 {
            residual = residual_at(&z, &mut check_warm);
            if residual <= opts.tol {
                return OracleSolution { z, iterations: it, residual, converged: true };
            }
        }
        let g = problem.grad(&y);
        let s: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        let z_new = problem.project_warm(&s, &mut warm);
        // Restart when the momentum direction opposes the gradient step.
        let restart: f64 = y.iter().zip(&z_new).zip(&z).map(|((yy, zn), zo)| (yy - zn) * (zn - zo)).sum();
        if restart > 0.0 {
            theta = 1.0;
            y = z_new.clone();
        } else {
            let theta_new = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            let beta = (theta - 1.0) / theta_new;
            y = z_new.iter().zip(&z).map(|(a, b)| a + beta * (a - b)).collect();
            theta = theta_new;
        }
        z = z_new;
    }
    let residual_final = residual_at(&z, &mut check_warm);
    residual = residual.min(residual_final);
    OracleSolution { z, iterations: opts.max_iter, residual, converged: residual_final <= opts.tol }
}

// ---------------------------------------------------------------------------
// Scenarios

#[derive(Debug, Clone)]
pub struct Plant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    dims: Vec<usize>,
}

impl Plant {
    pub fn new(dynamics: &[AgentDynamics]) -> Self {
        let a: Vec<_> = dynamics.iter().map(|d| d.a.clone()).collect();
        let b: Vec<_> = dynamics.iter().map(|d| d.b.clone()).collect();
        Self { a: linalg::block_diag(&a), b: linalg::block_diag(&b), dims: dynamics.iter().map(|d| d.nx()).collect() }
    }

    pub fn step(&self, x: &[Vec<f64>], u: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let xv = DVector::from_iterator(self.a.ncols(), x.iter().flatten().cloned());
        let uv = DVector::from_iterator(self.b.ncols(), u.iter().flatten().cloned());
        let next = &self.a * xv + &self.b * uv;
        let mut out = Vec::new();
        let mut at = 0;
        for &d in &self.dims {
            out.push(next.as_slice()[at..at + d].to_vec());
            at += d;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RateSpec {
    /// Bit budget T; (n, K) chosen by the design search.
    Budget(u64),
    /// User-fixed (n, K), only checked.
    Explicit { n: u32, k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum BoundSource {
    Given(BoundConstants),
    /// Sufficient constants derived from the problem data.
    Derived,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LipschitzSource {
    Fixed(f64),
    Estimate { pairs: usize, seed: u64, box_fraction: f64, margin: f64 },
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub spec: DmpcSpec,
    pub x0: Vec<Vec<f64>>,
    pub rate: RateSpec,
    pub kappa: Option<f64>,
    pub eta: Option<f64>,
    pub lipschitz: LipschitzSource,
    pub bounds: Option<BoundSource>,
    pub steps: usize,
    pub noise: Option<f64>,
    pub seed: u64,
    pub sample_time: f64,
}

fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows[0].len();
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

/// Fill terminal weight, gain and level from the per-agent LQR design;
/// `level_override` replaces the closed-form level.
pub fn with_lqr_terminal(mut spec: DmpcSpec, level_override: Option<f64>) -> Result<DmpcSpec, DmpcError> {
    let t = dmpc::lqr_terminal(&spec.graph, &spec.dynamics, &spec.stage, &spec.boxes, &spec.x_ref, &spec.u_ref)?;
    spec.terminal_weight = t.iter().map(|d| d.p.clone()).collect();
    spec.terminal_gain = t.iter().map(|d| d.k.clone()).collect();
    spec.terminal_level = t.iter().map(|d| level_override.unwrap_or(d.level)).collect();
    Ok(spec)
}

/// Three double integrators on a chain with relative-position coupling.
pub fn di_scenario() -> Scenario {
    let m = 3;
    let a = mat(&[&[1.0, 0.1], &[0.0, 1.0]]);
    let b = mat(&[&[0.0], &[0.1]]);
    let graph = CommGraph::chain(m);
    let q = vec![DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 2.0])); m];
    let r = vec![DMatrix::from_element(1, 1, 0.5); m];
    let stage = dmpc::coupled_stage_weights(&graph, &q, &r, Some((0.5, 0)));
    let boxes = vec![
        AgentBoxes { x_lo: vec![-4.0, -2.0], x_hi: vec![4.0, 2.0], u_lo: vec![-2.0], u_hi: vec![2.0] };
        m
    ];
    let spec = DmpcSpec {
        horizon: 10,
        graph,
        dynamics: vec![AgentDynamics { a, b }; m],
        stage,
        terminal_weight: Vec::new(),
        terminal_level: Vec::new(),
        terminal_gain: Vec::new(),
        boxes,
        x_ref: vec![vec![-1.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]],
        u_ref: vec![vec![0.0]; m],
    };
    let spec = with_lqr_terminal(spec, None).expect("double-integrator terminal design");
    Scenario {
        name: "double-integrator".into(),
        spec,
        x0: vec![vec![-0.6, 0.4], vec![0.3, -0.3], vec![0.7, 0.2]],
        rate: RateSpec::Budget(1_000_000),
        kappa: None,
        eta: None,
        lipschitz: LipschitzSource::Estimate { pairs: 200, seed: 7, box_fraction: 0.25, margin: 1.5 },
        bounds: Some(BoundSource::Derived),
        steps: 50,
        noise: None,
        seed: 1,
        sample_time: 0.1,
    }
}

/// Five AUVs in a y-axis formation.
pub fn auv_scenario() -> Scenario {
    let (td, vc, nw, inertia) = (0.1, 1.0, 1.0, 2.0);
    let a = mat(&[&[1.0, td * vc, 0.0], &[0.0, 1.0, td], &[0.0, 0.0, 1.0 - nw / inertia]]);
    let b = mat(&[&[0.0], &[0.0], &[1.0 / inertia]]);
    let m = 5;
    // 𝒩₃ also lists agent 5 so the graph is undirected.
    let graph = CommGraph::new(vec![vec![0, 1, 2], vec![0, 1], vec![0, 2, 3, 4], vec![2, 3], vec![2, 4]])
        .expect("AUV graph");
    let q = vec![DMatrix::identity(3, 3); m];
    let r = vec![DMatrix::identity(1, 1); m];
    let stage = dmpc::coupled_stage_weights(&graph, &q, &r, Some((1.0, 0)));
    let boxes = vec![
        AgentBoxes { x_lo: vec![-5.0, -1.0, -2.0], x_hi: vec![5.0, 1.0, 2.0], u_lo: vec![-0.3], u_hi: vec![0.3] };
        m
    ];
    let refs = [2.0, 1.0, 0.0, -1.0, -2.0];
    let spec = DmpcSpec {
        horizon: 40,
        graph,
        dynamics: vec![AgentDynamics { a, b }; m],
        stage,
        terminal_weight: Vec::new(),
        terminal_level: Vec::new(),
        terminal_gain: Vec::new(),
        boxes,
        x_ref: refs.iter().map(|&y| vec![y, 0.0, 0.0]).collect(),
        u_ref: vec![vec![0.0]; m],
    };
    let spec = with_lqr_terminal(spec, Some(0.082)).expect("AUV terminal design");
    Scenario {
        name: "auv".into(),
        spec,
        x0: [5.0, 0.0, 1.0, -0.5, -3.5].iter().map(|&y| vec![y, 0.0, 0.0]).collect(),
        rate: RateSpec::Explicit { n: 19, k: 917 },
        kappa: None,
        eta: None,
        lipschitz: LipschitzSource::Fixed(12.45),
        bounds: Some(BoundSource::Derived),
        steps: 100,
        noise: None,
        seed: 1,
        sample_time: td,
    }
}

// ---------------------------------------------------------------------------
// Preparation

#[derive(Clone)]
pub struct Prepared {
    pub model: DmpcModel,
    pub inputs: DesignInputs,
    pub design: RateDesign,
    pub report: Option<DesignReport>,
    pub gains: GainSet,
    pub cycles: SmallGainReport,
    pub params: RefinementParams,
    pub lipschitz: Option<LipschitzEstimate>,
    pub terminal: TerminalReport,
    /// Reasons the design fails the stability conditions; empty when compliant.
    pub issues: Vec<String>,
}

impl Prepared {
    pub fn compliant(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Model plus every scalar the design formulas need.
pub fn design_inputs(sc: &Scenario) -> Result<(DmpcModel, DesignInputs, Option<LipschitzEstimate>), SimError> {
    let model = DmpcModel::new(sc.spec.clone())?;
    let pc = model.constants()?;
    let eta = sc.eta.unwrap_or(0.99 / pc.l_f);
    let q = 1.0 - eta * pc.alpha_f;
    let kappa = sc.kappa.unwrap_or(0.5 * (1.0 + q));
    let bounds = match sc.bounds.as_ref().ok_or(SimError::MissingBounds)? {
        BoundSource::Given(b) => *b,
        BoundSource::Derived => BoundConstants::derived(&pc, kappa, eta)?,
    };
    let (l, est) = match &sc.lipschitz {
        LipschitzSource::Fixed(l) => (*l, None),
        LipschitzSource::Estimate { pairs, seed, box_fraction, margin } => {
            let opts = OracleOptions { l_f: Some(pc.l_f), ..OracleOptions::precise() };
            let e = dmpc::estimate_lipschitz(&model, *pairs, *seed, *box_fraction, &opts)?;
            (e.l * margin, Some(e))
        }
    };
    let (a, b) = model.plant_matrices();
    let a_minus_i = &a - DMatrix::identity(a.nrows(), a.ncols());
    let lw = model.lyapunov_weights()?;
    let inputs = DesignInputs {
        problem: pc,
        kappa,
        eta,
        bounds,
        l,
        norm_a_minus_i: linalg::spectral_norm(&a_minus_i),
        norm_b: linalg::spectral_norm(&b),
        lam_min_q: lw.lam_min_q,
        lam_max_h: lw.lam_max_h,
        lam_min_h: lw.lam_min_h,
    };
    Ok((model, inputs, est))
}

pub fn prepare(sc: &Scenario) -> Result<Prepared, SimError> {
    let (model, inputs, lipschitz) = design_inputs(sc)?;
    let noisy = sc.noise.map_or(false, |e| e > 0.0);
    let mut issues = Vec::new();
    let (design, report) = match sc.rate {
        RateSpec::Budget(t) => {
            let rep = conditions::design(t, &inputs, noisy);
            let d = rep.selected.ok_or_else(|| {
                SimError::NonCompliant(rep.infeasible_reason.clone().unwrap_or_else(|| "no feasible (n, K)".into()))
            })?;
            (d, Some(rep))
        }
        RateSpec::Explicit { n, k } => {
            let d = RateDesign {
                t_budget: n as u64 * k as u64,
                n,
                k,
                c_alpha0: 0.0,
                c_beta0: 0.0,
                kappa: inputs.kappa,
                eta: inputs.eta,
            };
            (d, None)
        }
    };
    match conditions::n_min(&inputs.bounds) {
        Some(nm) if design.n >= nm => {}
        Some(nm) => issues.push(format!("n = {} below n_min = {nm}", design.n)),
        None => issues.push("no n satisfies the interval feasibility inequalities".into()),
    }
    if design.n as u64 * design.k as u64 > design.t_budget {
        issues.push(format!("n·K = {} exceeds T = {}", design.n as u64 * design.k as u64, design.t_budget));
    }
    let gains = conditions::gains_unchecked(design.n, design.k, &inputs, noisy)?;
    if let Err(e) = conditions::gains(design.n, design.k, &inputs, noisy) {
        issues.push(e.to_string());
    }
    let cycles = conditions::small_gain_check(&gains);
    if !cycles.pass {
        issues.push(format!("cycle conditions fail: {}", cycles.failing().join(", ")));
    }
    let terminal = dmpc::verify_terminal_ingredients(&model, 2000, sc.seed);
    if !terminal.pass {
        issues.push(format!(
            "terminal ingredients fail sampling check (invariance {:.3e}, input {:.3e}, state {:.3e}, decrease {:.3e})",
            terminal.invariance_margin, terminal.input_margin, terminal.state_margin, terminal.decrease_margin
        ));
    }
    let params = RefinementParams::new(&design, &inputs)?;
    Ok(Prepared { model, inputs, design, report, gains, cycles, params, lipschitz, terminal, issues })
}

// ---------------------------------------------------------------------------
// Closed loop

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub t: usize,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub psi: f64,
    pub c_alpha: f64,
    pub c_beta: f64,
    /// ‖z^K_t − z*_t‖; zero at t = 0 where the optimal input is applied.
    pub eps: f64,
    /// ‖z⁰_t − z*_t‖.
    pub rho: f64,
    pub delta_x: f64,
    /// Bits spent per transmitted variable at this step.
    pub bits: u64,
    pub sat: usize,
    /// Largest box violation of x_t (0 when feasible).
    pub state_violation: f64,
    /// Largest violation of the shifted candidate built from z^K_{t−1}.
    pub shift_violation: f64,
    pub oracle_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimTrace {
    pub name: String,
    pub rows: Vec<TraceRow>,
    pub noise: Option<f64>,
    pub sample_time: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub oracle: OracleOptions,
    /// Run even when the design fails the stability conditions.
    pub allow_noncompliant: bool,
    pub parallel: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { oracle: OracleOptions::precise(), allow_noncompliant: false, parallel: false }
    }
}

fn box_violation(model: &DmpcModel, x: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, xi) in x.iter().enumerate() {
        let bx = &model.spec.boxes[i];
        for (k, v) in xi.iter().enumerate() {
            worst = worst.max(bx.x_lo[k] - v).max(v - bx.x_hi[k]);
        }
    }
    worst
}

pub fn run_closed_loop(sc: &Scenario, prep: &Prepared, opts: &SimOptions) -> Result<SimTrace, SimError> {
    if !prep.compliant() && !opts.allow_noncompliant {
        return Err(SimError::NonCompliant(prep.issues.join("; ")));
    }
    let started = Instant::now();
    let model = &prep.model;
    let plant = Plant::new(&model.spec.dynamics);
    let oracle = OracleOptions { l_f: Some(prep.inputs.problem.l_f), ..opts.oracle };
    let noise = sc.noise.filter(|e| *e > 0.0).map(|e| NoiseModel::new(e, sc.seed));
    let mut ctl = Controller::new(model, prep.params, noise);
    ctl.parallel = opts.parallel;
    ctl.offline_init(&sc.x0, &oracle).map_err(|e| match e {
        RefinementError::InitialState(d) => SimError::Infeasible { t: 0, msg: d.to_string() },
        other => other.into(),
    })?;

    let mut rows = Vec::with_capacity(sc.steps + 1);
    let mut x = sc.x0.clone();
    let mut z_star_prev: Option<Vec<f64>> = None;
    let mut z_k_prev: Option<Vec<f64>> = None;
    for t in 0..=sc.steps {
        let problem = model.build_checked(&x).map_err(|e| SimError::Infeasible { t, msg: e.to_string() })?;
        let init = z_star_prev.as_ref().map(|z| model.shift_solution(z));
        let sol = oracle_solve(&problem, init.as_deref(), &oracle);
        if !sol.converged {
            return Err(SimError::Oracle { t, residual: sol.residual });
        }
        let psi = problem.cost(&sol.z).max(0.0).sqrt();
        let shift_violation = z_k_prev.as_ref().map_or(0.0, |z| problem.violation(&model.shift_solution(z)));
        let out = ctl.step(&x)?;
        let d = &out.diagnostics;
        let (eps, rho) = if t == 0 {
            (0.0, 0.0)
        } else {
            (linalg::dist(&d.z_final, &sol.z), linalg::dist(&d.z_start, &sol.z))
        };
        rows.push(TraceRow {
            t,
            x: x.clone(),
            u: out.u.clone(),
            psi,
            c_alpha: d.c_alpha,
            c_beta: d.c_beta,
            eps,
            rho,
            delta_x: d.delta_x_norm,
            bits: d.ledger.as_ref().map_or(0, |l| l.bits_per_variable),
            sat: d.saturations,
            state_violation: box_violation(model, &x),
            shift_violation,
            oracle_residual: sol.residual,
        });
        z_star_prev = Some(sol.z);
        z_k_prev = Some(d.z_final.clone());
        x = plant.step(&x, &out.u);
    }
    Ok(SimTrace {
        name: sc.name.clone(),
        rows,
        noise: sc.noise,
        sample_time: sc.sample_time,
        elapsed_s: started.elapsed().as_secs_f64(),
    })
}

/// CSV with header `t,psi,c_alpha,c_beta,eps,rho,bits,sat` followed by
/// per-agent state and input columns, 17 significant digits.
pub fn trace_csv(trace: &SimTrace) -> String {
    let mut s = String::from("t,psi,c_alpha,c_beta,eps,rho,bits,sat");
    if let Some(r) = trace.rows.first() {
        for (i, xi) in r.x.iter().enumerate() {
            for k in 0..xi.len() {
                let _ = write!(s, ",x{}_{}", i + 1, k + 1);
            }
        }
        for (i, ui) in r.u.iter().enumerate() {
            for k in 0..ui.len() {
                let _ = write!(s, ",u{}_{}", i + 1, k + 1);
            }
        }
    }
    s.push('\n');
    for r in &trace.rows {
        let _ = write!(
            s,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
            r.t, r.psi, r.c_alpha, r.c_beta, r.eps, r.rho, r.bits, r.sat
        );
        for v in r.x.iter().flatten().chain(r.u.iter().flatten()) {
            let _ = write!(s, ",{:.16e}", v);
        }
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// Verification

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyOptions {
    /// Relative tolerance on every inequality.
    pub rel_tol: f64,
    /// Absolute floor covering oracle inaccuracy in ε, ρ and ψ.
    pub abs_tol: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-8, abs_tol: 1e-9 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepCheck {
    pub t: usize,
    /// lhs − rhs for each inequality (≤ tolerance means it holds); None when
    /// not applicable at this t.
    pub iss_psi: Option<f64>,
    pub iss_dx: Option<f64>,
    pub iss_c_alpha: Option<f64>,
    pub iss_eps: Option<f64>,
    pub interval: Option<[f64; 2]>,
    pub ok_psi: bool,
    pub ok_dx: bool,
    pub ok_c_alpha: bool,
    pub ok_eps: bool,
    pub ok_interval: bool,
    pub ok_state: bool,
    pub ok_shift: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub steps: Vec<StepCheck>,
    pub violations_psi: usize,
    pub violations_dx: usize,
    pub violations_c_alpha: usize,
    pub violations_eps: usize,
    pub violations_interval: usize,
    pub violations_state: usize,
    pub violations_shift: usize,
    pub final_psi: f64,
    pub final_eps: f64,
    pub final_c_alpha: f64,
    pub pass: bool,
}

impl VerifyReport {
    pub fn total_violations(&self) -> usize {
        self.violations_psi
            + self.violations_dx
            + self.violations_c_alpha
            + self.violations_eps
            + self.violations_interval
            + self.violations_state
            + self.violations_shift
    }
}

fn holds(lhs: f64, rhs: f64, o: &VerifyOptions) -> (f64, bool) {
    (lhs - rhs, lhs <= rhs + o.rel_tol * rhs.abs().max(lhs.abs()) + o.abs_tol)
}

/// Evaluate the ISS inequalities, interval conditions and feasibility at
/// every step of a trace.
pub fn verify_trajectory(trace: &SimTrace, prep: &Prepared, opts: &VerifyOptions) -> VerifyReport {
    let g = &prep.gains;
    let inp = &prep.inputs;
    let ebar = trace.noise.unwrap_or(0.0);
    let w_over = inp.w() / inp.lam_min_h.sqrt();
    let rows = &trace.rows;
    let mut steps = Vec::with_capacity(rows.len());
    for (idx, r) in rows.iter().enumerate() {
        let next = rows.get(idx + 1);
        let mut c = StepCheck {
            t: r.t,
            iss_psi: None,
            iss_dx: None,
            iss_c_alpha: None,
            iss_eps: None,
            interval: None,
            ok_psi: true,
            ok_dx: true,
            ok_c_alpha: true,
            ok_eps: true,
            ok_interval: true,
            ok_state: r.state_violation <= 1e-9,
            ok_shift: r.shift_violation <= 1e-7,
        };
        if let Some(nx) = next {
            let (d, ok) = holds(nx.psi, (1.0 - g.alpha_1) * r.psi + g.gamma_13 * r.eps, opts);
            c.iss_psi = Some(d);
            c.ok_psi = ok;
            let (d, ok) = holds(nx.delta_x, w_over * r.psi + inp.norm_b * r.eps, opts);
            c.iss_dx = Some(d);
            c.ok_dx = ok;
            let drive = (g.gamma_21 * r.psi).max(g.gamma_23 * r.eps).max(g.gamma_2e * ebar);
            let (d, ok) = holds(nx.c_alpha, (1.0 - g.alpha_2) * r.c_alpha + drive, opts);
            c.iss_c_alpha = Some(d);
            c.ok_c_alpha = ok;
            let drive = (g.gamma_31 * r.psi).max(g.gamma_32 * r.c_alpha);
            let (d, ok) = holds(nx.eps, (1.0 - g.alpha_3) * r.eps + drive, opts);
            c.iss_eps = Some(d);
            c.ok_eps = ok;
        }
        if r.t >= 1 {
            let m = optimizer::interval_margins(r.c_alpha, r.c_beta, r.rho, prep.design.n, &inp.bounds);
            // Margins are rhs − lhs; tolerate the oracle error in ρ scaled by a₁, b₁.
            let slack = [inp.bounds.a1 * opts.abs_tol, inp.bounds.b1 * opts.abs_tol];
            c.ok_interval = m[0] >= -slack[0] && m[1] >= -slack[1];
            c.interval = Some(m);
        }
        steps.push(c);
    }
    let count = |f: fn(&StepCheck) -> bool| steps.iter().filter(|s| !f(s)).count();
    let last = rows.last();
    let mut rep = VerifyReport {
        violations_psi: count(|s| s.ok_psi),
        violations_dx: count(|s| s.ok_dx),
        violations_c_alpha: count(|s| s.ok_c_alpha),
        violations_eps: count(|s| s.ok_eps),
        violations_interval: count(|s| s.ok_interval),
        violations_state: count(|s| s.ok_state),
        violations_shift: count(|s| s.ok_shift),
        final_psi: last.map_or(0.0, |r| r.psi),
        final_eps: last.map_or(0.0, |r| r.eps),
        final_c_alpha: last.map_or(0.0, |r| r.c_alpha),
        pass: false,
        steps,
    };
    rep.pass = rep.total_violations() == 0;
    rep
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceSummary {
    pub psi0: f64,
    pub eps1: f64,
    pub c_alpha1: f64,
    pub final_psi: f64,
    pub final_eps: f64,
    pub final_c_alpha: f64,
    /// max over the last 10% of steps over max over the first 10%, per quantity.
    pub tail_ratio_psi: f64,
    pub tail_ratio_eps: f64,
    pub tail_ratio_c_alpha: f64,
    pub max_input_abs: f64,
    pub total_saturations: usize,
}

pub fn summarize(trace: &SimTrace) -> ConvergenceSummary {
    let rows = &trace.rows;
    let n = rows.len();
    let w = (n / 10).max(1);
    let ratio = |f: fn(&TraceRow) -> f64| {
        let head = rows[..w].iter().map(f).fold(0.0, f64::max);
        let tail = rows[n - w..].iter().map(f).fold(0.0, f64::max);
        if head > 0.0 { tail / head } else { 0.0 }
    };
    let second = rows.get(1);
    let last = rows.last();
    ConvergenceSummary {
        psi0: rows.first().map_or(0.0, |r| r.psi),
        eps1: second.map_or(0.0, |r| r.eps),
        c_alpha1: second.map_or(0.0, |r| r.c_alpha),
        final_psi: last.map_or(0.0, |r| r.psi),
        final_eps: last.map_or(0.0, |r| r.eps),
        final_c_alpha: last.map_or(0.0, |r| r.c_alpha),
        tail_ratio_psi: ratio(|r| r.psi),
        tail_ratio_eps: ratio(|r| r.eps),
        tail_ratio_c_alpha: ratio(|r| r.c_alpha),
        max_input_abs: rows.iter().flat_map(|r| r.u.iter().flatten()).fold(0.0, |m, v| m.max(v.abs())),
        total_saturations: rows.iter().map(|r| r.sat).sum(),
    }
}
