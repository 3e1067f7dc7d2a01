//! Closed-form data-rate design: S_α, S_β, J_α, J_β, Y, the K bounds,
//! ISS gains, small-gain cycles and the (n, K) search.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::ProblemConstants;

#[derive(Debug, Error, PartialEq)]
pub enum ConditionsError {
    #[error("kappa + gamma − 1 = {0} must be positive")]
    KappaGamma(f64),
    #[error("gamma = {0} must lie in (0, 1)")]
    Gamma(f64),
    #[error("n = {n} is below n_min = {n_min}")]
    BelowNmin { n: u32, n_min: u32 },
    #[error("bound constants must be positive: {0}")]
    Constants(String),
    #[error("no feasible K at this n: {0}")]
    NoFeasibleK(String),
    #[error("K = {k} violates {bound} = {required}")]
    KBound { k: usize, bound: &'static str, required: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
}

impl BoundConstants {
    pub fn validate(&self) -> Result<(), ConditionsError> {
        let all = [self.a1, self.a2, self.a3, self.b1, self.b2, self.b3];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(ConditionsError::Constants(format!("{:?}", self)))
        }
    }

    /// Sufficient constants for the quantized projected gradient with step η
    /// and contraction q = 1 − ηα_f < κ. They make the induction
    /// ‖z^k − z*‖ ≤ κ^k (ρ + c_α C_α/2^{n+1} + c_β C_β/2^{n+1}) go through with
    /// no quantizer saturation, where c_α = ηΣ_j L_j√m_𝒩j/(κ−q) and
    /// c_β = ηΣ_j √m_𝒩j/(κ−q).
    pub fn derived(pc: &ProblemConstants, kappa: f64, eta: f64) -> Result<Self, ConditionsError> {
        let q = 1.0 - eta * pc.alpha_f;
        if !(kappa > q) {
            return Err(ConditionsError::Constants(format!(
                "derived constants need kappa > 1 − eta·alpha_f = {q}"
            )));
        }
        let gap = kappa - q;
        let g_alpha: f64 = pc
            .local_lipschitz
            .iter()
            .zip(&pc.neighborhood_dims)
            .map(|(l, m)| l * (*m as f64).sqrt())
            .sum();
        let g_beta: f64 = pc.neighborhood_dims.iter().map(|m| (*m as f64).sqrt()).sum();
        let c_a = eta * g_alpha / gap;
        let c_b = eta * g_beta / gap;
        let m_bar = pc.neighborhood_dims.iter().cloned().max().unwrap_or(1) as f64;
        let r = (1.0 + kappa) / kappa;
        Ok(Self {
            a1: r,
            a2: r * c_a + 1.0 / kappa,
            a3: r * c_b,
            b1: pc.l_max * r,
            b2: pc.l_max * r * (c_a + m_bar.sqrt()),
            b3: pc.l_max * r * c_b + 1.0 / kappa,
        })
    }
}

/// Everything the design formulas consume.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignInputs {
    pub problem: ProblemConstants,
    pub kappa: f64,
    pub eta: f64,
    pub bounds: BoundConstants,
    /// Lipschitz constant of x ↦ z*(x).
    pub l: f64,
    pub norm_a_minus_i: f64,
    pub norm_b: f64,
    pub lam_min_q: f64,
    pub lam_max_h: f64,
    pub lam_min_h: f64,
}

impl DesignInputs {
    pub fn w(&self) -> f64 {
        self.norm_a_minus_i + self.norm_b
    }
}

fn pow2(n: u32) -> f64 {
    2f64.powi(n as i32)
}

fn s_common(n: u32, pc: &ProblemConstants, kappa: f64, numer: f64) -> Result<f64, ConditionsError> {
    let g = pc.gamma;
    if !(g > 0.0 && g < 1.0) {
        return Err(ConditionsError::Gamma(g));
    }
    let kg = kappa + g - 1.0;
    if !(kg > 0.0) {
        return Err(ConditionsError::KappaGamma(kg));
    }
    let m = pc.agents as f64;
    Ok(kappa * m * (pc.m_tilde as f64).sqrt() * numer / (2.0 * pow2(n) * pc.l_f * kg * (1.0 - g)))
}

/// (S_α(n), S_β(n)) from the problem constants alone.
pub fn s_pair(n: u32, pc: &ProblemConstants, kappa: f64) -> Result<(f64, f64), ConditionsError> {
    Ok((
        s_common(n, pc, kappa, pc.l_max * pc.d as f64 + pc.l_f)?,
        s_common(n, pc, kappa, (pc.d as f64).sqrt())?,
    ))
}

/// S_α(n) = κM√m̃(L_max d + L_f) / (2^{n+1} L_f (κ+γ−1)(1−γ)).
pub fn s_alpha(n: u32, inp: &DesignInputs) -> Result<f64, ConditionsError> {
    Ok(s_pair(n, &inp.problem, inp.kappa)?.0)
}

/// S_β(n): as S_α with (L_max d + L_f) replaced by √d.
pub fn s_beta(n: u32, inp: &DesignInputs) -> Result<f64, ConditionsError> {
    Ok(s_pair(n, &inp.problem, inp.kappa)?.1)
}

/// κ^{K+1}(ρ + S_α C_α + S_β C_β), the bound on ‖z^K − z*‖.
pub fn suboptimality_bound(
    n: u32,
    k: usize,
    pc: &ProblemConstants,
    kappa: f64,
    rho: f64,
    c_alpha: f64,
    c_beta: f64,
) -> Result<f64, ConditionsError> {
    let (sa, sb) = s_pair(n, pc, kappa)?;
    Ok(kappa.powf(k as f64 + 1.0) * (rho + sa * c_alpha + sb * c_beta))
}

/// 4ⁿ − 2ⁿ(a₂+b₃) + a₂b₃ − a₃b₂, divided by 4ⁿ.
fn det_scaled(n: u32, c: &BoundConstants) -> f64 {
    let t = pow2(n);
    1.0 - (c.a2 + c.b3) / t + (c.a2 * c.b3 - c.a3 * c.b2) / (t * t)
}

pub fn det(n: u32, c: &BoundConstants) -> f64 {
    let t = pow2(n);
    t * t - t * (c.a2 + c.b3) + c.a2 * c.b3 - c.a3 * c.b2
}

/// J_α(n) = (4ⁿ2a₁ + 2ⁿ2(a₃b₁ − a₁b₃)) / (4ⁿ − 2ⁿ(a₂+b₃) + a₂b₃ − a₃b₂).
pub fn j_alpha(n: u32, c: &BoundConstants) -> Result<f64, ConditionsError> {
    require_nmin(n, c)?;
    let t = pow2(n);
    Ok((2.0 * c.a1 + 2.0 * (c.a3 * c.b1 - c.a1 * c.b3) / t) / det_scaled(n, c))
}

/// J_β(n) = (4ⁿ2b₁ + 2ⁿ2(a₁b₂ − a₂b₁)) / (same denominator).
pub fn j_beta(n: u32, c: &BoundConstants) -> Result<f64, ConditionsError> {
    require_nmin(n, c)?;
    let t = pow2(n);
    Ok((2.0 * c.b1 + 2.0 * (c.a1 * c.b2 - c.a2 * c.b1) / t) / det_scaled(n, c))
}

fn require_nmin(n: u32, c: &BoundConstants) -> Result<(), ConditionsError> {
    if !bit_inequalities(n, c) {
        return Err(ConditionsError::BelowNmin { n, n_min: n_min(c).unwrap_or(u32::MAX) });
    }
    Ok(())
}

/// Y(n) = S_α J_α + S_β J_β.
pub fn y(n: u32, inp: &DesignInputs) -> Result<f64, ConditionsError> {
    Ok(s_alpha(n, inp)? * j_alpha(n, &inp.bounds)? + s_beta(n, inp)? * j_beta(n, &inp.bounds)?)
}

/// The three strict inequalities that make the interval conditions feasible:
/// 2ⁿ > a₂, 2ⁿ > b₃ and a positive determinant.
pub fn bit_inequalities(n: u32, c: &BoundConstants) -> bool {
    let t = pow2(n);
    t > c.a2 && t > c.b3 && det(n, c) > 0.0
}

pub const N_MAX: u32 = 1000;

/// Smallest n ≥ 1 satisfying [`bit_inequalities`], by ascending enumeration.
pub fn n_min(c: &BoundConstants) -> Option<u32> {
    (1..=N_MAX).find(|&n| bit_inequalities(n, c))
}

/// Closed-form root expression, kept for comparison with the enumeration:
/// ⌈log₂ max(a₂, b₂, −(a₂ − b₂ − √((a₂−b₂)² + 4a₃b₃)))⌉.
pub fn n_min_closed_form(c: &BoundConstants) -> f64 {
    let disc = ((c.a2 - c.b2).powi(2) + 4.0 * c.a3 * c.b3).sqrt();
    let m = c.a2.max(c.b2).max(-(c.a2 - c.b2 - disc));
    m.log2().ceil()
}

/// A line C_β = slope·C_α + intercept in the (C_α, C_β) plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Line {
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionReport {
    pub n: u32,
    /// (2ⁿ − a₂)C_α − a₃C_β = 2^{n+1}a₁ρ.
    pub h1: Line,
    /// −b₂C_α + (2ⁿ − b₃)C_β = 2^{n+1}b₁ρ.
    pub h2: Line,
    pub vertex: Option<(f64, f64)>,
    /// The feasible wedge above both hyperplanes opens into the positive
    /// orthant with its vertex there (on the boundary when ρ = 0).
    pub positive_vertex: bool,
    pub inequalities_hold: bool,
}

/// Geometry of the interval conditions at equality.
pub fn feasibility_region(n: u32, rho: f64, c: &BoundConstants) -> RegionReport {
    let t = pow2(n);
    let (p11, p12, r1) = (t - c.a2, -c.a3, 2.0 * t * c.a1 * rho);
    let (p21, p22, r2) = (-c.b2, t - c.b3, 2.0 * t * c.b1 * rho);
    let h1 = Line { slope: -p11 / p12, intercept: r1 / p12 };
    let h2 = Line { slope: -p21 / p22, intercept: r2 / p22 };
    let d = p11 * p22 - p12 * p21;
    let vertex = if d != 0.0 {
        Some(((r1 * p22 - p12 * r2) / d, (p11 * r2 - r1 * p21) / d))
    } else {
        None
    };
    // Evaluate both inequalities a step into the wedge: the region is
    // {p11 Cα + p12 Cβ ≥ r1, p21 Cα + p22 Cβ ≥ r2}.
    let positive_vertex = match vertex {
        Some((va, vb)) => {
            let in_orthant = if rho > 0.0 { va > 0.0 && vb > 0.0 } else { va >= 0.0 && vb >= 0.0 };
            let opens = h1.slope > 0.0 && h2.slope > 0.0 && h1.slope > h2.slope;
            let probe = {
                let step = 1.0 + va.abs();
                let sa = va + step;
                let sb = vb + step * 0.5 * (h1.slope + h2.slope);
                let g1 = p11 * sa + p12 * sb - r1;
                let g2 = p21 * sa + p22 * sb - r2;
                g1 > 0.0 && g2 > 0.0 && sa > 0.0 && sb > 0.0
            };
            in_orthant && opens && probe
        }
        None => false,
    };
    RegionReport { n, h1, h2, vertex, positive_vertex, inequalities_hold: bit_inequalities(n, c) }
}

fn log_kappa(x: f64, kappa: f64) -> f64 {
    x.ln() / kappa.ln()
}

fn clamp_k(raw: f64) -> Result<usize, ConditionsError> {
    if !raw.is_finite() {
        return Err(ConditionsError::NoFeasibleK(format!("non-finite bound {raw}")));
    }
    Ok(raw.ceil().max(1.0) as usize)
}

/// K₁(n) = ⌈−log_κ(1 + Y) − 1⌉, at least 1.
pub fn k1_from_y(yv: f64, kappa: f64) -> usize {
    clamp_k(-log_kappa(1.0 + yv, kappa) - 1.0).unwrap_or(1)
}

/// K₂(n) = ⌈−log_κ(L‖B‖(1 + Y) + 1) − 1⌉, at least 1.
pub fn k2_from_arg(arg: f64, kappa: f64) -> usize {
    clamp_k(-log_kappa(arg, kappa) - 1.0).unwrap_or(1)
}

pub fn k1(n: u32, inp: &DesignInputs) -> Result<usize, ConditionsError> {
    Ok(k1_from_y(y(n, inp)?, inp.kappa))
}

pub fn k2(n: u32, inp: &DesignInputs) -> Result<usize, ConditionsError> {
    let yv = y(n, inp)?;
    Ok(k2_from_arg(inp.l * inp.norm_b * (1.0 + yv) + 1.0, inp.kappa))
}

/// ā, b̄, c̄, d̄ of the K₃–K₅ formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KAux {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

pub fn k_aux(n: u32, inp: &DesignInputs, noisy: bool) -> Result<KAux, ConditionsError> {
    let yv = y(n, inp)?;
    let ja = j_alpha(n, &inp.bounds)?;
    let g = static_gains(n, inp, noisy)?;
    Ok(KAux {
        a: 1.0 + yv,
        b: inp.norm_b * (1.0 + inp.l * yv) + 1.0,
        c: yv * (1.0 + yv) * g.gamma_23 / ja,
        d: yv * (1.0 + yv) * g.gamma_13 * g.gamma_21 / (g.alpha_1 * ja),
    })
}

/// Positive root of (c − ab)r² + (a+b)r − 1 = 0 in cancellation-free form;
/// reduces to 1/(a+b) when c = ab.
pub fn quadratic_root(a: f64, b: f64, c: f64) -> f64 {
    let disc = (a - b).powi(2) + 4.0 * c;
    2.0 / ((a + b) + disc.sqrt())
}

pub fn k3(n: u32, inp: &DesignInputs, noisy: bool) -> Result<usize, ConditionsError> {
    let aux = k_aux(n, inp, noisy)?;
    let g = static_gains(n, inp, noisy)?;
    let sq = inp.lam_min_h.sqrt();
    let arg = sq / (sq * aux.b + inp.l * inp.w() * g.gamma_13 * aux.a / g.alpha_1);
    if !(arg > 0.0) {
        return Err(ConditionsError::NoFeasibleK(format!("K3 log argument {arg}")));
    }
    clamp_k(log_kappa(arg, inp.kappa) - 1.0)
}

pub fn k4(n: u32, inp: &DesignInputs, noisy: bool) -> Result<usize, ConditionsError> {
    let aux = k_aux(n, inp, noisy)?;
    clamp_k(log_kappa(quadratic_root(aux.a, aux.b, aux.c), inp.kappa) - 1.0)
}

pub fn k5(n: u32, inp: &DesignInputs, noisy: bool) -> Result<usize, ConditionsError> {
    let aux = k_aux(n, inp, noisy)?;
    clamp_k(log_kappa(quadratic_root(aux.a, aux.b, aux.d), inp.kappa) - 1.0)
}

/// ISS gains of the three subsystems. With `noisy`, γ₂₁ and γ₂₃ carry the
/// 3/2 factor of the noisy update rule and `gamma_2e` is populated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainSet {
    pub alpha_1: f64,
    pub alpha_2: f64,
    pub alpha_3: f64,
    pub gamma_13: f64,
    pub gamma_21: f64,
    pub gamma_23: f64,
    pub gamma_31: f64,
    pub gamma_32: f64,
    pub gamma_2e: f64,
}

struct StaticGains {
    alpha_1: f64,
    gamma_13: f64,
    gamma_21: f64,
    gamma_23: f64,
}

/// (α₁, γ₁₃); neither depends on n or K.
fn subsystem1_gains(inp: &DesignInputs) -> (f64, f64) {
    let ratio = inp.lam_min_q / (inp.l * inp.l * inp.lam_max_h);
    (1.0 - (1.0 - ratio).max(0.0).sqrt(), inp.lam_max_h.sqrt() * inp.norm_b * inp.l)
}

fn static_gains(n: u32, inp: &DesignInputs, noisy: bool) -> Result<StaticGains, ConditionsError> {
    let ja = j_alpha(n, &inp.bounds)?;
    let (alpha_1, gamma_13) = subsystem1_gains(inp);
    let f = if noisy { 1.5 } else { 1.0 };
    Ok(StaticGains {
        alpha_1,
        gamma_13,
        gamma_21: f * 2.0 * ja * inp.l * inp.w() / inp.lam_min_h.sqrt(),
        gamma_23: f * 2.0 * ja * inp.l * inp.norm_b,
    })
}

/// Evaluate every gain; α₂ and α₃ must be positive. They equal 1 only when
/// κ^{K+1} underflows.
pub fn gains(n: u32, k: usize, inp: &DesignInputs, noisy: bool) -> Result<GainSet, ConditionsError> {
    let g = gains_unchecked(n, k, inp, noisy)?;
    if !(g.alpha_2 > 0.0 && g.alpha_2 <= 1.0) {
        return Err(ConditionsError::KBound { k, bound: "K1", required: k1(n, inp)? });
    }
    if !(g.alpha_3 > 0.0 && g.alpha_3 <= 1.0) {
        return Err(ConditionsError::KBound { k, bound: "K2", required: k2(n, inp)? });
    }
    Ok(g)
}

pub fn gains_unchecked(n: u32, k: usize, inp: &DesignInputs, noisy: bool) -> Result<GainSet, ConditionsError> {
    let s = static_gains(n, inp, noisy)?;
    let yv = y(n, inp)?;
    let ja = j_alpha(n, &inp.bounds)?;
    let x = inp.kappa.powf(k as f64 + 1.0);
    Ok(GainSet {
        alpha_1: s.alpha_1,
        alpha_2: 1.0 - x * (1.0 + yv),
        alpha_3: 1.0 - x * (inp.l * inp.norm_b * (1.0 + yv) + 1.0),
        gamma_13: s.gamma_13,
        gamma_21: s.gamma_21,
        gamma_23: s.gamma_23,
        gamma_31: 2.0 * x * inp.l * (1.0 + yv) * inp.w() / inp.lam_min_h.sqrt(),
        gamma_32: 2.0 * x * x * yv * (1.0 + yv) / ja,
        gamma_2e: if noisy { 6.0 * ja * inp.l } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleReport {
    pub name: &'static str,
    pub product: f64,
    /// 1 − product.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmallGainReport {
    pub cycles: [CycleReport; 3],
    pub pass: bool,
}

impl SmallGainReport {
    pub fn failing(&self) -> Vec<&'static str> {
        self.cycles.iter().filter(|c| !c.pass).map(|c| c.name).collect()
    }
}

/// Linear-gain cycle conditions: each product strictly below 1.
pub fn small_gain_check(g: &GainSet) -> SmallGainReport {
    let r13 = g.gamma_13 / g.alpha_1;
    let r31 = g.gamma_31 / g.alpha_3;
    let r23 = g.gamma_23 / g.alpha_2;
    let r32 = g.gamma_32 / g.alpha_3;
    let r21 = g.gamma_21 / g.alpha_2;
    let mk = |name, product: f64| CycleReport { name, product, margin: 1.0 - product, pass: product < 1.0 };
    let cycles = [
        mk("1-3-1", r13 * r31),
        mk("2-3-2", r23 * r32),
        mk("1-3-2-1", r13 * r32 * r21),
    ];
    let pass = cycles.iter().all(|c| c.pass);
    SmallGainReport { cycles, pass }
}

/// Output of the design: the bit budget and the (n, K) pair to run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateDesign {
    pub t_budget: u64,
    pub n: u32,
    pub k: usize,
    pub c_alpha0: f64,
    pub c_beta0: f64,
    pub kappa: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignRow {
    pub n: u32,
    pub s_alpha: f64,
    pub s_beta: f64,
    pub j_alpha: f64,
    pub j_beta: f64,
    pub y: f64,
    pub k_bounds: [usize; 5],
    /// max(K₁..K₅, 1).
    pub k_formula: usize,
    /// Smallest K ≥ k_formula passing the gain preconditions and all cycles.
    pub k: usize,
    pub nk: u64,
    pub binding: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignReport {
    pub t_budget: u64,
    pub n_min: Option<u32>,
    pub n_min_closed_form: f64,
    pub rows: Vec<DesignRow>,
    pub selected: Option<RateDesign>,
    pub gains: Option<GainSet>,
    pub cycles: Option<SmallGainReport>,
    pub infeasible_reason: Option<String>,
}

const K_CAP: usize = 50_000_000;

/// Smallest K ≥ k0 for which gains() succeeds and all cycles pass.
pub fn settle_k(n: u32, k0: usize, inp: &DesignInputs, noisy: bool) -> Result<usize, ConditionsError> {
    let ok = |k: usize| -> Result<bool, ConditionsError> {
        match gains(n, k, inp, noisy) {
            Ok(g) => Ok(small_gain_check(&g).pass),
            Err(ConditionsError::KBound { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    };
    if ok(k0)? {
        return Ok(k0);
    }
    // The products fall monotonically in K: bracket, then bisect.
    let mut lo = k0;
    let mut hi = k0.max(1);
    loop {
        hi = hi.saturating_mul(2);
        if hi > K_CAP {
            return Err(ConditionsError::NoFeasibleK(format!("no K ≤ {K_CAP} passes at n = {n}")));
        }
        if ok(hi)? {
            break;
        }
        lo = hi;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

pub fn design_row(n: u32, inp: &DesignInputs, noisy: bool) -> Result<DesignRow, ConditionsError> {
    let kb = [k1(n, inp)?, k2(n, inp)?, k3(n, inp, noisy)?, k4(n, inp, noisy)?, k5(n, inp, noisy)?];
    let k_formula = kb.iter().cloned().max().unwrap_or(1).max(1);
    let k = settle_k(n, k_formula, inp, noisy)?;
    let names = ["K1", "K2", "K3", "K4", "K5"];
    let binding = if k > k_formula {
        let g = gains_unchecked(n, k_formula, inp, noisy)?;
        let sg = small_gain_check(&g);
        format!("cycle {} (formula K {} raised)", sg.failing().join(","), k_formula)
    } else {
        let i = kb.iter().position(|&v| v == k_formula).unwrap_or(0);
        names[i].to_string()
    };
    Ok(DesignRow {
        n,
        s_alpha: s_alpha(n, inp)?,
        s_beta: s_beta(n, inp)?,
        j_alpha: j_alpha(n, &inp.bounds)?,
        j_beta: j_beta(n, &inp.bounds)?,
        y: y(n, inp)?,
        k_bounds: kb,
        k_formula,
        k,
        nk: n as u64 * k as u64,
        binding,
    })
}

/// Lower bound on the design K valid for every n: cycle 1-3-1 and α₃ > 0
/// evaluated at Y = 0, where both are least restrictive.
pub fn k_floor(inp: &DesignInputs) -> Result<usize, ConditionsError> {
    let (alpha_1, gamma_13) = subsystem1_gains(inp);
    let g = gamma_13 / alpha_1;
    let c = 2.0 * inp.l * inp.w() / inp.lam_min_h.sqrt();
    let e = inp.l * inp.norm_b + 1.0;
    Ok(k2_from_arg(g * c + e, inp.kappa))
}

/// Search n upward from n_min for the feasible (n, K) with smallest n·K ≤ T.
pub fn design(t_budget: u64, inp: &DesignInputs, noisy: bool) -> DesignReport {
    let mut report = DesignReport {
        t_budget,
        n_min: n_min(&inp.bounds),
        n_min_closed_form: n_min_closed_form(&inp.bounds),
        rows: Vec::new(),
        selected: None,
        gains: None,
        cycles: None,
        infeasible_reason: None,
    };
    if let Err(e) = inp.bounds.validate() {
        report.infeasible_reason = Some(e.to_string());
        return report;
    }
    let Some(n0) = report.n_min else {
        report.infeasible_reason = Some(format!("no n ≤ {N_MAX} satisfies the feasibility inequalities"));
        return report;
    };
    if (n0 as u64) > t_budget {
        report.infeasible_reason = Some(format!("T = {t_budget} is below n_min = {n0}"));
        return report;
    }
    let mut best: Option<(u64, u32, usize)> = None;
    let mut last_err = None;
    let k_floor = match k_floor(inp) {
        Ok(k) => k as u64,
        Err(e) => {
            report.infeasible_reason = Some(e.to_string());
            return report;
        }
    };
    let mut n = n0;
    while n <= N_MAX && (n as u64) <= t_budget {
        if let Some((nk, _, _)) = best {
            if n as u64 >= nk {
                break;
            }
        }
        match design_row(n, inp, noisy) {
            Ok(row) => {
                let cand = (row.nk, n, row.k);
                let better = match best {
                    None => true,
                    Some((bnk, _, _)) => row.nk < bnk,
                };
                if better {
                    best = Some(cand);
                }
                report.rows.push(row);
                // Every later K is at least k_floor.
                if let Some((bnk, _, _)) = best {
                    if (n as u64 + 1) * k_floor >= bnk {
                        break;
                    }
                }
            }
            Err(e) => last_err = Some(e.to_string()),
        }
        n += 1;
    }
    match best {
        Some((nk, n, k)) if nk <= t_budget => {
            report.selected = Some(RateDesign {
                t_budget,
                n,
                k,
                c_alpha0: 0.0,
                c_beta0: 0.0,
                kappa: inp.kappa,
                eta: inp.eta,
            });
            if let Ok(g) = gains(n, k, inp, noisy) {
                report.cycles = Some(small_gain_check(&g));
                report.gains = Some(g);
            }
        }
        Some((nk, n, k)) => {
            report.infeasible_reason = Some(format!(
                "smallest n·K = {nk} (n = {n}, K = {k}) exceeds T = {t_budget}"
            ));
        }
        None => {
            report.infeasible_reason =
                Some(last_err.unwrap_or_else(|| String::from("no n evaluated")));
        }
    }
    report
}
