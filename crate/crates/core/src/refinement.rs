//! On-line controller: off-line initialization, per-step refinement of the
//! initial quantization intervals, warm starting and the optimizer call.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use thiserror::Error;

use crate::conditions::{self, ConditionsError, DesignInputs, RateDesign};
use crate::dmpc::{DmpcError, DmpcModel};
use crate::linalg;
use crate::optimizer::{self, BitLedger, OptimizerConfig, OptimizerError, Workspace};
use crate::sim::{oracle_solve, OracleOptions};

#[derive(Debug, Error)]
pub enum RefinementError {
    #[error("controller used before offline_init")]
    NotInitialized,
    #[error("initial state: {0}")]
    InitialState(DmpcError),
    #[error("state at t = {t}: {source}")]
    State { t: usize, source: DmpcError },
    #[error("oracle did not converge at the initial state (residual {0:.3e})")]
    Oracle(f64),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Conditions(#[from] ConditionsError),
}

/// The scalars the refinement law needs, frozen for one design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementParams {
    pub n: u32,
    pub k: usize,
    pub kappa: f64,
    pub eta: f64,
    pub j_alpha: f64,
    pub j_beta: f64,
    pub y: f64,
    pub l: f64,
}

impl RefinementParams {
    pub fn new(design: &RateDesign, inp: &DesignInputs) -> Result<Self, ConditionsError> {
        Ok(Self {
            n: design.n,
            k: design.k,
            kappa: design.kappa,
            eta: design.eta,
            j_alpha: conditions::j_alpha(design.n, &inp.bounds)?,
            j_beta: conditions::j_beta(design.n, &inp.bounds)?,
            y: conditions::y(design.n, inp)?,
            l: inp.l,
        })
    }

    /// κ^{K+1}(1 + Y), the per-step decay factor of C_α.
    pub fn decay(&self) -> f64 {
        self.kappa.powf(self.k as f64 + 1.0) * (1.0 + self.y)
    }
}

#[derive(Debug, Clone)]
pub struct ControllerState {
    pub t: usize,
    pub c_alpha: f64,
    pub c_beta: f64,
    pub z_warm: Vec<f64>,
    pub x_prev: Vec<Vec<f64>>,
}

/// C_{α,t} = κ^{K+1}(1+Y)C_{α,t−1} + J_α L‖Δx_{t−1}‖, C_{β,t} = (J_β/J_α)C_{α,t}.
pub fn update_intervals(c_alpha_prev: f64, delta_x_norm: f64, p: &RefinementParams) -> (f64, f64) {
    let ca = p.decay() * c_alpha_prev + p.j_alpha * p.l * delta_x_norm;
    (ca, p.j_beta / p.j_alpha * ca)
}

/// Noisy variant: the linear term uses ‖Δ̄x‖ + ē.
pub fn update_intervals_noisy(
    c_alpha_prev: f64,
    measured_delta_norm: f64,
    bound: f64,
    p: &RefinementParams,
) -> (f64, f64) {
    update_intervals(c_alpha_prev, measured_delta_norm + bound, p)
}

/// Estimation error on Δx, uniform on the ball of radius `bound`.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub bound: f64,
    rng: ChaCha8Rng,
}

impl NoiseModel {
    pub fn new(bound: f64, seed: u64) -> Self {
        assert!(bound >= 0.0 && bound.is_finite(), "noise bound must be finite and nonnegative");
        Self { bound, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn sample(&mut self, dim: usize) -> Vec<f64> {
        if self.bound == 0.0 || dim == 0 {
            return vec![0.0; dim];
        }
        let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        let nrm = linalg::norm(&g).max(f64::MIN_POSITIVE);
        let u: f64 = Uniform::new(0.0, 1.0).sample(&mut self.rng);
        let r = self.bound * u.powf(1.0 / dim as f64);
        g.into_iter().map(|v| v * r / nrm).collect()
    }
}

#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub t: usize,
    pub c_alpha: f64,
    pub c_beta: f64,
    /// ‖Δx_{t−1}‖ from exact states.
    pub delta_x_norm: f64,
    /// What the controller used: ‖Δx‖ or ‖Δ̄x‖ + ē.
    pub delta_used: f64,
    /// z⁰_t, the warm start handed to the optimizer.
    pub z_start: Vec<f64>,
    /// z^K_t.
    pub z_final: Vec<f64>,
    pub ledger: Option<BitLedger>,
    pub saturations: usize,
}

pub struct StepOutput {
    /// Absolute inputs per agent.
    pub u: Vec<Vec<f64>>,
    pub diagnostics: StepDiagnostics,
}

/// One controller instance per simulation.
pub struct Controller<'a> {
    pub model: &'a DmpcModel,
    pub params: RefinementParams,
    pub parallel: bool,
    state: Option<ControllerState>,
    noise: Option<NoiseModel>,
    ws: Workspace,
}

impl<'a> Controller<'a> {
    pub fn new(model: &'a DmpcModel, params: RefinementParams, noise: Option<NoiseModel>) -> Self {
        Self { model, params, parallel: false, state: None, noise, ws: Workspace::default() }
    }

    pub fn state(&self) -> Option<&ControllerState> {
        self.state.as_ref()
    }

    /// Intervals start at zero and the warm start is the exact optimizer at x0.
    pub fn offline_init(&mut self, x0: &[Vec<f64>], oracle: &OracleOptions) -> Result<&ControllerState, RefinementError> {
        let problem = self.model.build_checked(x0).map_err(RefinementError::InitialState)?;
        let sol = oracle_solve(&problem, None, oracle);
        if !sol.converged {
            return Err(RefinementError::Oracle(sol.residual));
        }
        self.ws = Workspace::new(problem.agent_count());
        self.state = Some(ControllerState { t: 0, c_alpha: 0.0, c_beta: 0.0, z_warm: sol.z, x_prev: x0.to_vec() });
        Ok(self.state.as_ref().unwrap())
    }

    /// Produce u_t for the measured state x_t. At t = 0 this applies the
    /// optimal input from the off-line solve.
    pub fn step(&mut self, x_t: &[Vec<f64>]) -> Result<StepOutput, RefinementError> {
        let st = self.state.as_mut().ok_or(RefinementError::NotInitialized)?;
        let t = st.t;
        if t == 0 {
            let u = self.model.control_input(&st.z_warm);
            let diagnostics = StepDiagnostics {
                t,
                c_alpha: 0.0,
                c_beta: 0.0,
                delta_x_norm: 0.0,
                delta_used: 0.0,
                z_start: st.z_warm.clone(),
                z_final: st.z_warm.clone(),
                ledger: None,
                saturations: 0,
            };
            st.t = 1;
            st.x_prev = x_t.to_vec();
            return Ok(StepOutput { u, diagnostics });
        }

        let dx: Vec<f64> = x_t.iter().flatten().zip(st.x_prev.iter().flatten()).map(|(a, b)| a - b).collect();
        let delta_x_norm = linalg::norm(&dx);
        let (delta_used, (c_alpha, c_beta)) = match self.noise.as_mut() {
            Some(noise) => {
                let e = noise.sample(dx.len());
                let measured: Vec<f64> = dx.iter().zip(&e).map(|(a, b)| a + b).collect();
                let mn = linalg::norm(&measured);
                (mn + noise.bound, update_intervals_noisy(st.c_alpha, mn, noise.bound, &self.params))
            }
            None => (delta_x_norm, update_intervals(st.c_alpha, delta_x_norm, &self.params)),
        };

        let problem = self.model.build(x_t).map_err(|source| RefinementError::State { t, source })?;
        let cfg = OptimizerConfig {
            k: self.params.k,
            n: self.params.n,
            kappa: self.params.kappa,
            eta: self.params.eta,
            c_alpha,
            c_beta,
            parallel: self.parallel,
        };
        let z_start = st.z_warm.clone();
        let out = optimizer::run_with(&problem, &cfg, &z_start, None, &mut self.ws)?;
        let u = self.model.control_input(&out.z);

        st.t += 1;
        st.c_alpha = c_alpha;
        st.c_beta = c_beta;
        st.z_warm = out.z.clone();
        st.x_prev = x_t.to_vec();
        Ok(StepOutput {
            u,
            diagnostics: StepDiagnostics {
                t,
                c_alpha,
                c_beta,
                delta_x_norm,
                delta_used,
                z_start,
                z_final: out.z,
                ledger: Some(out.ledger),
                saturations: out.saturations,
            },
        })
    }
}
