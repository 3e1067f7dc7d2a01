//! DMPC problem construction: per-agent condensed-free formulation with
//! z_i = [x_i(0..N), u_i(0..N−1)] in coordinates shifted by the reference.

pub mod local_set;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg;
use crate::problem::{
    CommGraph, DistributedProblem, Ellipsoid, LocalProblem, ProblemConstants, ProblemError,
    QuadraticCost,
};
pub use local_set::MpcLocalSet;

#[derive(Debug, Error)]
pub enum DmpcError {
    #[error("agent {agent}: {msg}")]
    Agent { agent: usize, msg: String },
    #[error("state x_t lies outside the state box of agent {0}")]
    StateOutsideBox(usize),
    #[error("the local MPC problem is infeasible at this state (agent {0} has an empty constraint set)")]
    Infeasible(usize),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone)]
pub struct AgentDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl AgentDynamics {
    pub fn nx(&self) -> usize {
        self.a.nrows()
    }
    pub fn nu(&self) -> usize {
        self.b.ncols()
    }
}

/// Box constraints in absolute coordinates.
#[derive(Debug, Clone)]
pub struct AgentBoxes {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DmpcSpec {
    pub horizon: usize,
    pub graph: CommGraph,
    pub dynamics: Vec<AgentDynamics>,
    /// H_i over [x_𝒩i; u_𝒩i] (neighbor states in neighborhood order, then inputs).
    pub stage: Vec<DMatrix<f64>>,
    pub terminal_weight: Vec<DMatrix<f64>>,
    pub terminal_level: Vec<f64>,
    pub terminal_gain: Vec<DMatrix<f64>>,
    pub boxes: Vec<AgentBoxes>,
    pub x_ref: Vec<Vec<f64>>,
    pub u_ref: Vec<Vec<f64>>,
}

/// H_i over [x_𝒩i; u_𝒩i]. Agent j's weights Q_j, R_j are split evenly over
/// the |𝒩_j| neighborhoods that contain j, so every H_i is positive definite
/// and Σ_i E_iᵀH_iE_i = blkdiag(Q, R) + coupling. The coupling adds
/// w(y_i − y_j)² for each neighbor j ≠ i on state coordinate `coupling.1`.
pub fn coupled_stage_weights(
    graph: &CommGraph,
    q: &[DMatrix<f64>],
    r: &[DMatrix<f64>],
    coupling: Option<(f64, usize)>,
) -> Vec<DMatrix<f64>> {
    (0..graph.agent_count())
        .map(|i| {
            let nb = graph.neighbors(i);
            let nx: usize = nb.iter().map(|&j| q[j].nrows()).sum();
            let nu: usize = nb.iter().map(|&j| r[j].nrows()).sum();
            let mut h = DMatrix::zeros(nx + nu, nx + nu);
            let mut xo = 0;
            let mut uo = nx;
            let mut own_x = 0;
            let mut x_offsets = Vec::new();
            for &j in nb {
                x_offsets.push(xo);
                if j == i {
                    own_x = xo;
                }
                let share = 1.0 / graph.neighbors(j).len() as f64;
                h.view_mut((xo, xo), q[j].shape()).copy_from(&(&q[j] * share));
                h.view_mut((uo, uo), r[j].shape()).copy_from(&(&r[j] * share));
                xo += q[j].nrows();
                uo += r[j].nrows();
            }
            if let Some((w, c)) = coupling {
                for (pos, &j) in nb.iter().enumerate() {
                    if j == i || w == 0.0 {
                        continue;
                    }
                    let a = own_x + c;
                    let b = x_offsets[pos] + c;
                    h[(a, a)] += w;
                    h[(b, b)] += w;
                    h[(a, b)] -= w;
                    h[(b, a)] -= w;
                }
            }
            h
        })
        .collect()
}

/// Index of agent j's block inside the global stage vector [x_1..x_M, u_1..u_M].
struct StageLayout {
    x_off: Vec<usize>,
    u_off: Vec<usize>,
    nx: Vec<usize>,
    nu: Vec<usize>,
    total: usize,
}

impl StageLayout {
    fn new(dynamics: &[AgentDynamics]) -> Self {
        let nx: Vec<usize> = dynamics.iter().map(|d| d.nx()).collect();
        let nu: Vec<usize> = dynamics.iter().map(|d| d.nu()).collect();
        let total_x: usize = nx.iter().sum();
        let mut x_off = Vec::new();
        let mut u_off = Vec::new();
        let (mut xo, mut uo) = (0, total_x);
        for j in 0..nx.len() {
            x_off.push(xo);
            u_off.push(uo);
            xo += nx[j];
            uo += nu[j];
        }
        Self { x_off, u_off, total: uo, nx, nu }
    }

    /// Row indices in the global stage vector for H_i's rows.
    fn local_indices(&self, graph: &CommGraph, i: usize) -> Vec<usize> {
        let nb = graph.neighbors(i);
        let mut idx = Vec::new();
        for &j in nb {
            idx.extend(self.x_off[j]..self.x_off[j] + self.nx[j]);
        }
        for &j in nb {
            idx.extend(self.u_off[j]..self.u_off[j] + self.nu[j]);
        }
        idx
    }
}

/// Σ_i E_iᵀ H_i E_i over one stage, ordered [x_1..x_M, u_1..u_M].
pub fn global_stage_weight(graph: &CommGraph, dynamics: &[AgentDynamics], stage: &[DMatrix<f64>]) -> DMatrix<f64> {
    let lay = StageLayout::new(dynamics);
    let mut w = DMatrix::zeros(lay.total, lay.total);
    for i in 0..graph.agent_count() {
        let idx = lay.local_indices(graph, i);
        for (a, &ga) in idx.iter().enumerate() {
            for (b, &gb) in idx.iter().enumerate() {
                w[(ga, gb)] += stage[i][(a, b)];
            }
        }
    }
    w
}

/// Terminal weight, gain and level for one agent.
#[derive(Debug, Clone)]
pub struct TerminalDesign {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub level: f64,
}

/// Per-agent LQR on a block-diagonal upper bound of the coupled stage weight.
///
/// Each diagonal block is inflated by the absolute row sums of the
/// off-diagonal blocks, so blkdiag(Q̄, R̄) − W is diagonally dominant and the
/// block-diagonal terminal cost decreases by at least the coupled stage cost.
/// The level is the largest c with {xᵀPx ≤ c} inside the state box and
/// K_f x inside the input box.
pub fn lqr_terminal(
    graph: &CommGraph,
    dynamics: &[AgentDynamics],
    stage: &[DMatrix<f64>],
    boxes: &[AgentBoxes],
    x_ref: &[Vec<f64>],
    u_ref: &[Vec<f64>],
) -> Result<Vec<TerminalDesign>, DmpcError> {
    let lay = StageLayout::new(dynamics);
    let w = global_stage_weight(graph, dynamics, stage);
    let blocks: Vec<(usize, usize)> = (0..dynamics.len())
        .map(|j| (lay.x_off[j], lay.nx[j]))
        .chain((0..dynamics.len()).map(|j| (lay.u_off[j], lay.nu[j])))
        .collect();
    let block_of = |row: usize| blocks.iter().position(|&(o, n)| row >= o && row < o + n).unwrap();
    let mut bar = DMatrix::zeros(lay.total, lay.total);
    for (bi, &(o, n)) in blocks.iter().enumerate() {
        bar.view_mut((o, o), (n, n)).copy_from(&w.view((o, o), (n, n)));
        for r in o..o + n {
            let extra: f64 = (0..lay.total).filter(|&c| block_of(c) != bi).map(|c| w[(r, c)].abs()).sum();
            bar[(r, r)] += extra;
        }
    }
    let mut out = Vec::new();
    for (j, d) in dynamics.iter().enumerate() {
        let qb = bar.view((lay.x_off[j], lay.x_off[j]), (lay.nx[j], lay.nx[j])).into_owned();
        let rb = bar.view((lay.u_off[j], lay.u_off[j]), (lay.nu[j], lay.nu[j])).into_owned();
        let (p, k) = linalg::dare(&d.a, &d.b, &qb, &rb)
            .ok_or_else(|| DmpcError::Agent { agent: j, msg: "Riccati iteration did not converge".into() })?;
        let p_inv = p.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| DmpcError::Agent {
            agent: j,
            msg: "terminal weight not positive definite".into(),
        })?;
        let mut level = f64::INFINITY;
        let bx = &boxes[j];
        for kk in 0..d.nx() {
            let room = (bx.x_hi[kk] - x_ref[j][kk]).min(x_ref[j][kk] - bx.x_lo[kk]);
            level = level.min(room * room / p_inv[(kk, kk)]);
        }
        for r in 0..d.nu() {
            let g = k.row(r).transpose();
            let s = g.dot(&(&p_inv * &g));
            if s > 0.0 {
                let room = (bx.u_hi[r] - u_ref[j][r]).min(u_ref[j][r] - bx.u_lo[r]);
                level = level.min(room * room / s);
            }
        }
        if !(level > 0.0 && level.is_finite()) {
            return Err(DmpcError::Agent { agent: j, msg: format!("terminal level {level} not positive") });
        }
        out.push(TerminalDesign { p, k, level });
    }
    Ok(out)
}

impl DmpcSpec {
    pub fn agent_count(&self) -> usize {
        self.dynamics.len()
    }

    pub fn validate(&self) -> Result<(), DmpcError> {
        let m = self.agent_count();
        if self.graph.agent_count() != m {
            return Err(DmpcError::Other("graph size differs from agent count".into()));
        }
        if self.horizon < 1 {
            return Err(DmpcError::Other("horizon must be at least 1".into()));
        }
        let lay = StageLayout::new(&self.dynamics);
        for i in 0..m {
            let d = &self.dynamics[i];
            let err = |msg: String| DmpcError::Agent { agent: i, msg };
            if d.a.ncols() != d.nx() || d.b.nrows() != d.nx() {
                return Err(err("A/B dimensions inconsistent".into()));
            }
            if !linalg::controllable(&d.a, &d.b) {
                return Err(err("(A, B) is not controllable".into()));
            }
            let n = lay.local_indices(&self.graph, i).len();
            if self.stage[i].shape() != (n, n) {
                return Err(err(format!("stage weight must be {n}×{n}")));
            }
            if linalg::sym_eigen_range(&self.stage[i]).0 <= 0.0 {
                return Err(err("stage weight not positive definite".into()));
            }
            if linalg::sym_eigen_range(&self.terminal_weight[i]).0 <= 0.0 {
                return Err(err("terminal weight not positive definite".into()));
            }
            if !(self.terminal_level[i] > 0.0) {
                return Err(err("terminal level must be positive".into()));
            }
            let bx = &self.boxes[i];
            for k in 0..d.nx() {
                let r = self.x_ref[i][k];
                if !(bx.x_lo[k] < r && r < bx.x_hi[k]) {
                    return Err(err("reference state not strictly inside the state box".into()));
                }
            }
            for k in 0..d.nu() {
                let r = self.u_ref[i][k];
                if !(bx.u_lo[k] < r && r < bx.u_hi[k]) {
                    return Err(err("reference input not strictly inside the input box".into()));
                }
            }
            let x = DVector::from_column_slice(&self.x_ref[i]);
            let u = DVector::from_column_slice(&self.u_ref[i]);
            let drift = (&d.a * &x + &d.b * &u - &x).amax();
            if drift > 1e-9 * (1.0 + x.amax()) {
                return Err(err(format!("reference is not an equilibrium (drift {drift:.3e})")));
            }
        }
        Ok(())
    }

    pub fn zdim(&self, i: usize) -> usize {
        let d = &self.dynamics[i];
        d.nx() * (self.horizon + 1) + d.nu() * self.horizon
    }

    pub fn x_offset(&self, i: usize, t: usize) -> usize {
        t * self.dynamics[i].nx()
    }

    pub fn u_offset(&self, i: usize, t: usize) -> usize {
        self.dynamics[i].nx() * (self.horizon + 1) + t * self.dynamics[i].nu()
    }

    pub fn state_dims(&self) -> Vec<usize> {
        self.dynamics.iter().map(|d| d.nx()).collect()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.dynamics.iter().map(|d| d.nu()).collect()
    }

    /// f_i(z_𝒩i) = ‖x_i(N)‖²_{P_i} + Σ_τ ‖[x_𝒩i(τ); u_𝒩i(τ)]‖²_{H_i}.
    fn local_cost(&self, i: usize) -> QuadraticCost {
        let nb = self.graph.neighbors(i);
        let mut offs = Vec::new();
        let mut at = 0;
        for &j in nb {
            offs.push(at);
            at += self.zdim(j);
        }
        let nxs: Vec<usize> = nb.iter().map(|&j| self.dynamics[j].nx()).collect();
        let nus: Vec<usize> = nb.iter().map(|&j| self.dynamics[j].nu()).collect();
        // Map H_i's row index to (neighbor position, is_input, component).
        let mut rows = Vec::new();
        for (p, &n) in nxs.iter().enumerate() {
            rows.extend((0..n).map(|k| (p, false, k)));
        }
        for (p, &n) in nus.iter().enumerate() {
            rows.extend((0..n).map(|k| (p, true, k)));
        }
        let h = &self.stage[i];
        let mut trip = Vec::new();
        for tau in 0..self.horizon {
            let pos = |(p, is_u, k): (usize, bool, usize)| {
                let j = nb[p];
                offs[p] + if is_u { self.u_offset(j, tau) } else { self.x_offset(j, tau) } + k
            };
            for (a, &ra) in rows.iter().enumerate() {
                for (b, &rb) in rows.iter().enumerate() {
                    let v = h[(a, b)];
                    if v != 0.0 {
                        trip.push((pos(ra), pos(rb), v));
                    }
                }
            }
        }
        let own = nb.iter().position(|&j| j == i).unwrap();
        let base = offs[own] + self.x_offset(i, self.horizon);
        let p = &self.terminal_weight[i];
        for a in 0..p.nrows() {
            for b in 0..p.ncols() {
                if p[(a, b)] != 0.0 {
                    trip.push((base + a, base + b, p[(a, b)]));
                }
            }
        }
        QuadraticCost::from_triplets(at, &trip)
    }

    fn local_set(&self, i: usize, x_shift: Vec<f64>) -> Result<MpcLocalSet, DmpcError> {
        let d = &self.dynamics[i];
        let bx = &self.boxes[i];
        let xr = &self.x_ref[i];
        let ur = &self.u_ref[i];
        let sub = |v: &[f64], r: &[f64]| v.iter().zip(r).map(|(a, b)| a - b).collect::<Vec<_>>();
        let ell = Ellipsoid::new(self.terminal_weight[i].clone(), self.terminal_level[i])?;
        Ok(MpcLocalSet::new(
            d.a.clone(),
            d.b.clone(),
            self.horizon,
            x_shift,
            sub(&bx.x_lo, xr),
            sub(&bx.x_hi, xr),
            sub(&bx.u_lo, ur),
            sub(&bx.u_hi, ur),
            ell,
        ))
    }
}

/// Spectral data of the assembled Lyapunov weight H.
#[derive(Debug, Clone, Serialize)]
pub struct LyapunovWeights {
    pub lam_min_q: f64,
    pub lam_max_h: f64,
    pub lam_min_h: f64,
}

/// Prepared model: costs and sets built once, re-anchored at each state.
#[derive(Clone)]
pub struct DmpcModel {
    pub spec: DmpcSpec,
    costs: Vec<Arc<QuadraticCost>>,
    sets: Vec<MpcLocalSet>,
}

impl DmpcModel {
    pub fn new(spec: DmpcSpec) -> Result<Self, DmpcError> {
        spec.validate()?;
        let costs = (0..spec.agent_count()).map(|i| Arc::new(spec.local_cost(i))).collect();
        let sets = (0..spec.agent_count())
            .map(|i| spec.local_set(i, vec![0.0; spec.dynamics[i].nx()]))
            .collect::<Result<_, _>>()?;
        Ok(Self { spec, costs, sets })
    }

    pub fn agent_count(&self) -> usize {
        self.spec.agent_count()
    }

    /// x_t − x_ref per agent.
    pub fn shifted_state(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter().zip(&self.spec.x_ref).map(|(a, r)| a.iter().zip(r).map(|(p, q)| p - q).collect()).collect()
    }

    pub fn state_in_box(&self, x: &[Vec<f64>]) -> Result<(), DmpcError> {
        for (i, xi) in x.iter().enumerate() {
            let bx = &self.spec.boxes[i];
            if xi.iter().zip(bx.x_lo.iter().zip(&bx.x_hi)).any(|(v, (l, h))| v < l || v > h) {
                return Err(DmpcError::StateOutsideBox(i));
            }
        }
        Ok(())
    }

    /// The MPC problem at absolute state `x` as a distributed problem in shifted coordinates.
    pub fn build(&self, x: &[Vec<f64>]) -> Result<DistributedProblem, DmpcError> {
        self.state_in_box(x)?;
        let xs = self.shifted_state(x);
        let agents = (0..self.agent_count())
            .map(|i| LocalProblem {
                dim: self.spec.zdim(i),
                cost: self.costs[i].clone(),
                set: Arc::new(self.sets[i].with_x_init(xs[i].clone())),
            })
            .collect();
        Ok(DistributedProblem::new(self.spec.graph.clone(), agents)?)
    }

    /// As [`build`](Self::build), additionally checking that every C_i is nonempty.
    pub fn build_checked(&self, x: &[Vec<f64>]) -> Result<DistributedProblem, DmpcError> {
        self.state_in_box(x)?;
        let xs = self.shifted_state(x);
        for i in 0..self.agent_count() {
            if !self.sets[i].with_x_init(xs[i].clone()).is_feasible() {
                return Err(DmpcError::Infeasible(i));
            }
        }
        self.build(x)
    }

    /// Reference trajectory in shifted coordinates: all zeros.
    pub fn z_ref(&self) -> Vec<f64> {
        vec![0.0; (0..self.agent_count()).map(|i| self.spec.zdim(i)).sum()]
    }

    pub fn constants(&self) -> Result<ProblemConstants, DmpcError> {
        let p = self.build(&self.spec.x_ref)?;
        Ok(p.constants()?)
    }

    pub fn lyapunov_weights(&self) -> Result<LyapunovWeights, DmpcError> {
        let p = self.build(&self.spec.x_ref)?;
        let h = p.global_hessian().expect("quadratic costs") * 0.5;
        let (lam_min_h, lam_max_h) = linalg::sym_eigen_range(&h);
        let w = global_stage_weight(&self.spec.graph, &self.spec.dynamics, &self.spec.stage);
        let nx: usize = self.spec.dynamics.iter().map(|d| d.nx()).sum();
        let q = w.view((0, 0), (nx, nx)).into_owned();
        let (lam_min_q, _) = linalg::sym_eigen_range(&q);
        Ok(LyapunovWeights { lam_min_q, lam_max_h, lam_min_h })
    }

    /// Block-diagonal plant (A, B).
    pub fn plant_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let a: Vec<_> = self.spec.dynamics.iter().map(|d| d.a.clone()).collect();
        let b: Vec<_> = self.spec.dynamics.iter().map(|d| d.b.clone()).collect();
        (linalg::block_diag(&a), linalg::block_diag(&b))
    }

    fn offsets(&self) -> Vec<usize> {
        let mut o = vec![0];
        for i in 0..self.agent_count() {
            o.push(o[i] + self.spec.zdim(i));
        }
        o
    }

    /// Ξz: first-stage inputs of every agent (shifted coordinates).
    pub fn extract_control(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let o = self.offsets();
        (0..self.agent_count())
            .map(|i| {
                let s = o[i] + self.spec.u_offset(i, 0);
                z[s..s + self.spec.dynamics[i].nu()].to_vec()
            })
            .collect()
    }

    /// Absolute first-stage inputs u_ref + Ξz.
    pub fn control_input(&self, z: &[f64]) -> Vec<Vec<f64>> {
        self.extract_control(z)
            .into_iter()
            .zip(&self.spec.u_ref)
            .map(|(u, r)| u.iter().zip(r).map(|(a, b)| a + b).collect())
            .collect()
    }

    /// Shifted candidate: drop stage 0, append the terminal controller step.
    pub fn shift_solution(&self, z: &[f64]) -> Vec<f64> {
        let o = self.offsets();
        let n = self.spec.horizon;
        let mut out = vec![0.0; z.len()];
        for i in 0..self.agent_count() {
            let d = &self.spec.dynamics[i];
            let (nx, nu) = (d.nx(), d.nu());
            let zi = &z[o[i]..o[i + 1]];
            let oi = &mut out[o[i]..o[i + 1]];
            for t in 0..n {
                let src = self.spec.x_offset(i, t + 1);
                let dst = self.spec.x_offset(i, t);
                oi[dst..dst + nx].copy_from_slice(&zi[src..src + nx]);
            }
            for t in 0..n.saturating_sub(1) {
                let src = self.spec.u_offset(i, t + 1);
                let dst = self.spec.u_offset(i, t);
                oi[dst..dst + nu].copy_from_slice(&zi[src..src + nu]);
            }
            let xn = DVector::from_column_slice(&zi[self.spec.x_offset(i, n)..self.spec.x_offset(i, n) + nx]);
            let kf = &self.spec.terminal_gain[i];
            let un = kf * &xn;
            let xn1 = &d.a * &xn + &d.b * &un;
            let uo = self.spec.u_offset(i, n - 1);
            oi[uo..uo + nu].copy_from_slice(un.as_slice());
            let xo = self.spec.x_offset(i, n);
            oi[xo..xo + nx].copy_from_slice(xn1.as_slice());
        }
        out
    }

    /// Global stage cost ℓ(x, u) in shifted coordinates.
    pub fn stage_cost(&self, x: &[Vec<f64>], u: &[Vec<f64>]) -> f64 {
        let w = global_stage_weight(&self.spec.graph, &self.spec.dynamics, &self.spec.stage);
        let mut s: Vec<f64> = x.iter().flatten().cloned().collect();
        s.extend(u.iter().flatten());
        let v = DVector::from_vec(s);
        v.dot(&(&w * &v))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TerminalReport {
    pub samples: usize,
    /// min over samples of c − x⁺ᵀPx⁺ (per-agent invariance).
    pub invariance_margin: f64,
    /// min over samples of the input-box slack of K_f x.
    pub input_margin: f64,
    /// min over samples of the state-box slack of x (C_f ⊆ C_x).
    pub state_margin: f64,
    /// min over samples of ℓ_f(x) − ℓ_f(x⁺) − ℓ(x, K_f x) for the coupled cost.
    pub decrease_margin: f64,
    pub pass: bool,
}

/// Sample boundary and interior points of every terminal ellipsoid and check
/// invariance, input admissibility, containment and the decrease condition.
pub fn verify_terminal_ingredients(model: &DmpcModel, samples: usize, seed: u64) -> TerminalReport {
    let spec = &model.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = spec.agent_count();
    let mut inv = f64::INFINITY;
    let mut inp = f64::INFINITY;
    let mut st = f64::INFINITY;
    let mut dec = f64::INFINITY;
    let tol = 1e-9;
    for s in 0..samples {
        let mut xs = Vec::with_capacity(m);
        let mut us = Vec::with_capacity(m);
        let mut lf = 0.0;
        let mut lf_next = 0.0;
        for i in 0..m {
            let d = &spec.dynamics[i];
            let p = &spec.terminal_weight[i];
            let c = spec.terminal_level[i];
            let dir = DVector::from_iterator(d.nx(), (0..d.nx()).map(|_| rng.gen_range(-1.0..1.0)));
            let nrm = dir.dot(&(p * &dir)).sqrt().max(1e-300);
            let radius = if s % 2 == 0 { 1.0 } else { rng.gen_range(0.0f64..1.0) };
            let x = dir * (c.sqrt() * radius / nrm);
            let u = &spec.terminal_gain[i] * &x;
            let xn = &d.a * &x + &d.b * &u;
            inv = inv.min(c - xn.dot(&(p * &xn)));
            let bx = &spec.boxes[i];
            for k in 0..d.nu() {
                let ua = u[k] + spec.u_ref[i][k];
                inp = inp.min((bx.u_hi[k] - ua).min(ua - bx.u_lo[k]));
            }
            for k in 0..d.nx() {
                let xa = x[k] + spec.x_ref[i][k];
                st = st.min((bx.x_hi[k] - xa).min(xa - bx.x_lo[k]));
            }
            lf += x.dot(&(p * &x));
            lf_next += xn.dot(&(p * &xn));
            xs.push(x.iter().cloned().collect::<Vec<_>>());
            us.push(u.iter().cloned().collect::<Vec<_>>());
        }
        let l = model.stage_cost(&xs, &us);
        dec = dec.min(lf - lf_next - l);
    }
    let scale = spec.terminal_level.iter().cloned().fold(1.0, f64::max);
    let pass = inv >= -tol * scale && inp >= -tol && st >= -tol && dec >= -tol * scale;
    TerminalReport {
        samples,
        invariance_margin: inv,
        input_margin: inp,
        state_margin: st,
        decrease_margin: dec,
        pass,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzEstimate {
    pub l: f64,
    pub raw_max: f64,
    pub pairs_used: usize,
    pub pairs_rejected: usize,
}

/// Sample feasible pairs (x, Ax + Bu), solve both to optimality and return
/// max ‖z*(x) − z*(x̃)‖ / ‖x − x̃‖, floored at 1.
pub fn estimate_lipschitz(
    model: &DmpcModel,
    pairs: usize,
    seed: u64,
    box_fraction: f64,
    oracle: &crate::sim::OracleOptions,
) -> Result<LipschitzEstimate, DmpcError> {
    let spec = &model.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    let mut used = 0;
    let mut rejected = 0;
    let attempts_cap = pairs * 50 + 100;
    let mut attempts = 0;
    while used < pairs && attempts < attempts_cap {
        attempts += 1;
        let mut x = Vec::new();
        let mut xt = Vec::new();
        for i in 0..spec.agent_count() {
            let d = &spec.dynamics[i];
            let bx = &spec.boxes[i];
            let xi: Vec<f64> = (0..d.nx())
                .map(|k| {
                    let r = spec.x_ref[i][k];
                    let lo = r + box_fraction * (bx.x_lo[k] - r);
                    let hi = r + box_fraction * (bx.x_hi[k] - r);
                    rng.gen_range(lo..=hi)
                })
                .collect();
            let ui: Vec<f64> = (0..d.nu()).map(|k| rng.gen_range(bx.u_lo[k]..=bx.u_hi[k])).collect();
            let xv = DVector::from_column_slice(&xi);
            let uv = DVector::from_column_slice(&ui);
            let next = &d.a * &xv + &d.b * &uv;
            x.push(xi);
            xt.push(next.iter().cloned().collect::<Vec<_>>());
        }
        let dx: f64 = x.iter().flatten().zip(xt.iter().flatten()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dx == 0.0 {
            rejected += 1;
            continue;
        }
        let (Ok(p1), Ok(p2)) = (model.build_checked(&x), model.build_checked(&xt)) else {
            rejected += 1;
            continue;
        };
        let s1 = crate::sim::oracle_solve(&p1, None, oracle);
        let s2 = crate::sim::oracle_solve(&p2, Some(&s1.z), oracle);
        if !(s1.converged && s2.converged) {
            rejected += 1;
            continue;
        }
        best = best.max(linalg::dist(&s1.z, &s2.z) / dx);
        used += 1;
    }
    if used < 2 {
        return Err(DmpcError::Other(format!("only {used} feasible pairs found")));
    }
    Ok(LipschitzEstimate { l: best.max(1.0), raw_max: best, pairs_used: used, pairs_rejected: rejected })
}
