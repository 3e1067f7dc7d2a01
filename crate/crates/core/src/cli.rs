//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::conditions::{self, DesignInputs, DesignRow};
use crate::optimizer::{self, OptimizerConfig};
use crate::problem::ProblemConstants;
use crate::scenario::{ProblemDocument, ScenarioDocument};
use crate::sim::{self, BoundSource, RateSpec, SimError, SimOptions, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "qdmpc", version, about = "Distributed MPC over bit-rate-limited networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Flags {
    /// Closed-loop steps (overrides run.steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seed for noise and sampling (overrides run.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bound on the Δx estimation error (overrides noise.bound).
    #[arg(long)]
    pub noise: Option<f64>,
    /// Output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluate the design for every n in A:B.
    #[arg(long, value_name = "A:B")]
    pub sweep_n: Option<String>,
    /// Report violations without failing; run non-compliant designs.
    #[arg(long)]
    pub no_strict: bool,
    /// Emit one JSON document instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search the bit number n and iteration count K for a budget T.
    Design {
        path: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Evaluate gains and cycle products for the configured (n, K).
    Check {
        path: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Run the quantized optimizer on a quadratic problem document.
    Solve {
        path: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Closed-loop simulation.
    Simulate {
        path: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
}

/// Text or JSON, written to stdout by the caller.
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Outcome {
    fn input(msg: impl std::fmt::Display) -> Self {
        Self { code: EXIT_INPUT, stdout: String::new(), stderr: format!("error: {msg}\n") }
    }
}

pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Design { path, flags } => cmd_design(&path, &flags),
        Command::Check { path, flags } => cmd_check(&path, &flags),
        Command::Solve { path, flags } => cmd_solve(&path, &flags),
        Command::Simulate { path, flags } => cmd_simulate(&path, &flags),
    }
}

fn load_scenario(path: &Path, flags: &Flags, need_bounds: bool) -> Result<sim::Scenario, Outcome> {
    let doc = ScenarioDocument::load(path).map_err(|e| Outcome::input(format!("{}: {e}", path.display())))?;
    if need_bounds && !doc.has_bounds() {
        return Err(Outcome::input(format!(
            "{}: missing [bound_constants]; supply a1, a2, a3, b1, b2, b3 or bound_constants = \"derived\"",
            path.display()
        )));
    }
    let mut sc = doc.to_scenario().map_err(|e| Outcome::input(format!("{}: {e}", path.display())))?;
    if let Some(s) = flags.steps {
        sc.steps = s;
    }
    if let Some(s) = flags.seed {
        sc.seed = s;
    }
    if let Some(e) = flags.noise {
        if !(e >= 0.0 && e.is_finite()) {
            return Err(Outcome::input("--noise must be finite and nonnegative"));
        }
        sc.noise = Some(e);
    }
    Ok(sc)
}

fn sim_error(e: SimError) -> Outcome {
    let code = match e {
        SimError::Config(_) | SimError::MissingBounds | SimError::Dmpc(_) | SimError::Problem(_) => EXIT_INPUT,
        _ => EXIT_FAIL,
    };
    Outcome { code, stdout: String::new(), stderr: format!("error: {e}\n") }
}

fn parse_sweep(s: &str) -> Result<(u32, u32), Outcome> {
    let bad = || Outcome::input(format!("--sweep-n expects A:B with 1 ≤ A ≤ B, got `{s}`"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let a: u32 = a.trim().parse().map_err(|_| bad())?;
    let b: u32 = b.trim().parse().map_err(|_| bad())?;
    if a < 1 || a > b {
        return Err(bad());
    }
    Ok((a, b))
}

fn inputs_json(inp: &DesignInputs) -> serde_json::Value {
    let pc: &ProblemConstants = &inp.problem;
    json!({
        "alpha_f": pc.alpha_f, "l_f": pc.l_f, "gamma": pc.gamma, "l_max": pc.l_max,
        "m_tilde": pc.m_tilde, "d": pc.d, "agents": pc.agents,
        "kappa": inp.kappa, "eta": inp.eta, "l": inp.l,
        "norm_a_minus_i": inp.norm_a_minus_i, "norm_b": inp.norm_b,
        "lam_min_q": inp.lam_min_q, "lam_max_h": inp.lam_max_h, "lam_min_h": inp.lam_min_h,
        "bounds": inp.bounds,
    })
}

fn write_inputs(s: &mut String, inp: &DesignInputs) {
    let pc = &inp.problem;
    let b = &inp.bounds;
    let _ = writeln!(s, "alpha_f = {:.6e}\nL_f = {:.6e}\ngamma = {:.6e}\nL_max = {:.6e}", pc.alpha_f, pc.l_f, pc.gamma, pc.l_max);
    let _ = writeln!(s, "m_tilde = {}\nd = {}\nM = {}", pc.m_tilde, pc.d, pc.agents);
    let _ = writeln!(s, "kappa = {:.12}\neta = {:.6e}\nL = {:.6e}", inp.kappa, inp.eta, inp.l);
    let _ = writeln!(s, "|A-I| = {:.6e}\n|B| = {:.6e}", inp.norm_a_minus_i, inp.norm_b);
    let _ = writeln!(s, "lambda_min(Q) = {:.6e}\nlambda_max(H) = {:.6e}\nlambda_min(H) = {:.6e}", inp.lam_min_q, inp.lam_max_h, inp.lam_min_h);
    let _ = writeln!(s, "a1..a3 = {:.6e} {:.6e} {:.6e}\nb1..b3 = {:.6e} {:.6e} {:.6e}", b.a1, b.a2, b.a3, b.b1, b.b2, b.b3);
}

fn row_line(r: &DesignRow) -> String {
    format!(
        "{:>4} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>12}  {}",
        r.n, r.s_alpha, r.s_beta, r.j_alpha, r.j_beta, r.y, r.k_bounds[0], r.k_bounds[1], r.k_bounds[2],
        r.k_bounds[3], r.k_bounds[4], r.k, r.nk, r.binding
    )
}

const ROW_HEADER: &str = "   n      S_alpha       S_beta      J_alpha       J_beta            Y        K1        K2        K3        K4        K5         K          n*K  binding";

pub fn cmd_design(path: &Path, flags: &Flags) -> Outcome {
    let sc = match load_scenario(path, flags, true) {
        Ok(s) => s,
        Err(o) => return o,
    };
    let sweep = match flags.sweep_n.as_deref().map(parse_sweep).transpose() {
        Ok(s) => s,
        Err(o) => return o,
    };
    let (_, inp, _) = match sim::design_inputs(&sc) {
        Ok(v) => v,
        Err(e) => return sim_error(e),
    };
    let noisy = sc.noise.map_or(false, |e| e > 0.0);
    let budget = match sc.rate {
        RateSpec::Budget(t) => t,
        RateSpec::Explicit { n, k } => n as u64 * k as u64,
    };
    let rep = conditions::design(budget, &inp, noisy);
    let sweep_rows: Vec<Result<DesignRow, String>> = sweep
        .map(|(a, b)| (a..=b).map(|n| conditions::design_row(n, &inp, noisy).map_err(|e| format!("n = {n}: {e}"))).collect())
        .unwrap_or_default();
    let code = if rep.selected.is_some() { EXIT_OK } else { EXIT_FAIL };
    if flags.json {
        let doc = json!({
            "command": "design",
            "feasible": rep.selected.is_some(),
            "inputs": inputs_json(&inp),
            "report": rep,
            "n_min_note": "n_min is enumerated from the feasibility inequalities; n_min_closed_form is the closed-form root expression and may disagree with the enumeration",
            "sweep": sweep_rows.iter().map(|r| match r { Ok(r) => json!(r), Err(e) => json!({"error": e}) }).collect::<Vec<_>>(),
        });
        return Outcome { code, stdout: format!("{}\n", serde_json::to_string_pretty(&doc).unwrap()), stderr: String::new() };
    }
    let mut s = String::new();
    let _ = writeln!(s, "# design: {}", sc.name);
    write_inputs(&mut s, &inp);
    let _ = writeln!(s, "T = {budget}");
    match rep.n_min {
        Some(n) => {
            let _ = writeln!(s, "n_min = {n}");
        }
        None => {
            let _ = writeln!(s, "n_min = none");
        }
    }
    let _ = writeln!(s, "n_min (closed form) = {:.6}", rep.n_min_closed_form);
    if !rep.rows.is_empty() {
        let _ = writeln!(s, "{ROW_HEADER}");
        for r in &rep.rows {
            let _ = writeln!(s, "{}", row_line(r));
        }
    }
    match (&rep.selected, &rep.gains, &rep.cycles) {
        (Some(d), Some(g), Some(c)) => {
            let _ = writeln!(s, "selected n = {}\nselected K = {}\nn*K = {}", d.n, d.k, d.n as u64 * d.k as u64);
            let _ = writeln!(s, "gains = {}", serde_json::to_string(g).unwrap());
            for cy in &c.cycles {
                let _ = writeln!(s, "cycle {} = {:.6e} ({})", cy.name, cy.product, if cy.pass { "pass" } else { "fail" });
            }
            let _ = writeln!(s, "result = feasible");
        }
        _ => {
            let _ = writeln!(s, "result = infeasible: {}", rep.infeasible_reason.clone().unwrap_or_default());
        }
    }
    if !sweep_rows.is_empty() {
        let _ = writeln!(s, "# sweep\n{ROW_HEADER}");
        for r in &sweep_rows {
            match r {
                Ok(r) => {
                    let _ = writeln!(s, "{}", row_line(r));
                }
                Err(e) => {
                    let _ = writeln!(s, "{e}");
                }
            }
        }
    }
    Outcome { code, stdout: s, stderr: String::new() }
}

pub fn cmd_check(path: &Path, flags: &Flags) -> Outcome {
    let sc = match load_scenario(path, flags, true) {
        Ok(s) => s,
        Err(o) => return o,
    };
    let RateSpec::Explicit { n, k } = sc.rate else {
        return Outcome::input("check needs rate.n and rate.k");
    };
    let (_, inp, _) = match sim::design_inputs(&sc) {
        Ok(v) => v,
        Err(e) => return sim_error(e),
    };
    let noisy = sc.noise.map_or(false, |e| e > 0.0);
    let n_min = conditions::n_min(&inp.bounds);
    let gains = match conditions::gains_unchecked(n, k, &inp, noisy) {
        Ok(g) => g,
        Err(e) => {
            return Outcome { code: EXIT_FAIL, stdout: format!("result = fail: {e}\n"), stderr: String::new() };
        }
    };
    let pre = conditions::gains(n, k, &inp, noisy).err().map(|e| e.to_string());
    let cycles = conditions::small_gain_check(&gains);
    let n_ok = n_min.map_or(false, |m| n >= m);
    let pass = n_ok && pre.is_none() && cycles.pass;
    let code = if pass { EXIT_OK } else { EXIT_FAIL };
    if flags.json {
        let doc = json!({
            "command": "check", "n": n, "k": k, "n_min": n_min, "inputs": inputs_json(&inp),
            "gains": gains, "preconditions": pre, "cycles": cycles, "pass": pass,
        });
        return Outcome { code, stdout: format!("{}\n", serde_json::to_string_pretty(&doc).unwrap()), stderr: String::new() };
    }
    let mut s = String::new();
    let _ = writeln!(s, "# check: {}", sc.name);
    write_inputs(&mut s, &inp);
    let _ = writeln!(s, "n = {n}\nK = {k}\nn_min = {}", n_min.map_or("none".into(), |v| v.to_string()));
    let _ = writeln!(s, "gains = {}", serde_json::to_string(&gains).unwrap());
    if let Some(p) = &pre {
        let _ = writeln!(s, "precondition = {p}");
    }
    for cy in &cycles.cycles {
        let _ = writeln!(s, "cycle {} = {:.6e} ({})", cy.name, cy.product, if cy.pass { "pass" } else { "fail" });
    }
    let _ = writeln!(s, "result = {}", if pass { "pass" } else { "fail" });
    Outcome { code, stdout: s, stderr: String::new() }
}

#[derive(Serialize)]
struct SolveSummary {
    n: u32,
    k: usize,
    kappa: f64,
    eta: f64,
    c_alpha: f64,
    c_beta: f64,
    rho: f64,
    final_gap: f64,
    bound: Option<f64>,
    bound_holds: Option<bool>,
    bits_per_variable: u64,
    saturations: usize,
}

pub fn cmd_solve(path: &Path, flags: &Flags) -> Outcome {
    let doc = match ProblemDocument::load(path) {
        Ok(d) => d,
        Err(e) => return Outcome::input(format!("{}: {e}", path.display())),
    };
    let problem = match doc.problem() {
        Ok(p) => p,
        Err(e) => return Outcome::input(format!("{}: {e}", path.display())),
    };
    let pc = match problem.constants() {
        Ok(c) => c,
        Err(e) => return Outcome::input(format!("{}: {e}", path.display())),
    };
    let o = &doc.optimizer;
    let eta = o.eta.unwrap_or(0.99 / pc.l_f);
    let kappa = o.kappa.unwrap_or(0.5 * (2.0 - eta * pc.alpha_f));
    let bounds = match doc.bounds() {
        Ok(Some(BoundSource::Given(b))) => Some(b),
        Ok(Some(BoundSource::Derived)) => match conditions::BoundConstants::derived(&pc, kappa, eta) {
            Ok(b) => Some(b),
            Err(e) => return Outcome::input(e),
        },
        Ok(None) => None,
        Err(e) => return Outcome::input(e),
    };
    let z0 = o.z0.clone().unwrap_or_else(|| vec![0.0; problem.total_dim()]);
    if z0.len() != problem.total_dim() {
        return Outcome::input(format!("optimizer.z0 must have {} entries", problem.total_dim()));
    }
    let oracle = sim::oracle_solve(&problem, None, &sim::OracleOptions::default());
    if !oracle.converged {
        return Outcome { code: EXIT_FAIL, stdout: String::new(), stderr: format!("error: oracle did not converge (residual {:.3e})\n", oracle.residual) };
    }
    let rho = crate::linalg::dist(&z0, &oracle.z);
    let (c_alpha, c_beta) = match (o.c_alpha, o.c_beta, bounds.as_ref()) {
        (Some(a), Some(b), _) => (a, b),
        (None, None, Some(bc)) => match (conditions::j_alpha(o.n, bc), conditions::j_beta(o.n, bc)) {
            (Ok(ja), Ok(jb)) => (ja * rho, jb * rho),
            (Err(e), _) | (_, Err(e)) => return Outcome { code: EXIT_FAIL, stdout: String::new(), stderr: format!("error: {e}\n") },
        },
        _ => return Outcome::input("give both optimizer.c_alpha and optimizer.c_beta, or a [bound_constants] section"),
    };
    let cfg = OptimizerConfig { k: o.k, n: o.n, kappa, eta, c_alpha, c_beta, parallel: false };
    if let Err(e) = cfg.validate(&pc) {
        return Outcome::input(e);
    }
    let out = match optimizer::run(&problem, &cfg, &z0, Some(&oracle.z)) {
        Ok(o) => o,
        Err(e) => return Outcome::input(e),
    };
    let final_gap = crate::linalg::dist(&out.z, &oracle.z);
    let bound = bounds
        .and_then(|_| conditions::suboptimality_bound(o.n, o.k, &pc, kappa, rho, c_alpha, c_beta).ok());
    // The bound applies to the optimizer output; an absolute floor covers oracle error.
    let holds = bound.map(|b| final_gap <= b + 1e-9);
    let summary = SolveSummary {
        n: o.n,
        k: o.k,
        kappa,
        eta,
        c_alpha,
        c_beta,
        rho,
        final_gap,
        bound,
        bound_holds: holds,
        bits_per_variable: out.ledger.bits_per_variable,
        saturations: out.saturations,
    };
    let code = if holds == Some(false) { EXIT_FAIL } else { EXIT_OK };
    let csv = optimizer::trace_csv(&out.trace);
    let mut stderr = String::new();
    let stdout = if flags.json {
        let doc = json!({ "command": "solve", "summary": summary, "trace_csv": csv });
        format!("{}\n", serde_json::to_string_pretty(&doc).unwrap())
    } else {
        let mut s = String::new();
        if let Some(p) = &flags.out {
            if let Err(e) = std::fs::write(p, &csv) {
                return Outcome::input(format!("{}: {e}", p.display()));
            }
        } else {
            s.push_str(&csv);
        }
        let _ = writeln!(
            stderr,
            "final_gap = {:.6e}\nbound = {}\nbound_holds = {}\nbits_per_variable = {}\nsaturations = {}",
            final_gap,
            bound.map_or("n/a".into(), |b| format!("{b:.6e}")),
            holds.map_or("n/a".into(), |h| h.to_string()),
            summary.bits_per_variable,
            summary.saturations
        );
        s
    };
    Outcome { code, stdout, stderr }
}

pub fn cmd_simulate(path: &Path, flags: &Flags) -> Outcome {
    let sc = match load_scenario(path, flags, true) {
        Ok(s) => s,
        Err(o) => return o,
    };
    let out_path = flags
        .out
        .clone()
        .or_else(|| ScenarioDocument::load(path).ok().and_then(|d| d.run.out.map(PathBuf::from)))
        .unwrap_or_else(|| PathBuf::from(format!("{}_trace.csv", sc.name)));
    let prep = match sim::prepare(&sc) {
        Ok(p) => p,
        Err(e) => return sim_error(e),
    };
    let mut stderr = String::new();
    if !prep.compliant() {
        if !flags.no_strict {
            return Outcome {
                code: EXIT_FAIL,
                stdout: String::new(),
                stderr: format!("error: design is not compliant: {}\n(use --no-strict to run anyway)\n", prep.issues.join("; ")),
            };
        }
        let _ = writeln!(stderr, "warning: running a non-compliant design: {}", prep.issues.join("; "));
    }
    let opts = SimOptions { allow_noncompliant: flags.no_strict, ..SimOptions::default() };
    let trace = match sim::run_closed_loop(&sc, &prep, &opts) {
        Ok(t) => t,
        Err(e) => {
            let mut o = sim_error(e);
            o.stderr.insert_str(0, &stderr);
            return o;
        }
    };
    if let Err(e) = std::fs::write(&out_path, sim::trace_csv(&trace)) {
        return Outcome::input(format!("{}: {e}", out_path.display()));
    }
    let rep = sim::verify_trajectory(&trace, &prep, &VerifyOptions::default());
    let summary = sim::summarize(&trace);
    let violations = rep.total_violations();
    let code = if violations > 0 && !flags.no_strict { EXIT_FAIL } else { EXIT_OK };
    if flags.json {
        let doc = json!({
            "command": "simulate", "scenario": sc.name, "trace": out_path.display().to_string(),
            "n": prep.design.n, "k": prep.design.k, "compliant": prep.compliant(), "issues": prep.issues,
            "summary": summary,
            "violations": {
                "iss_psi": rep.violations_psi, "iss_dx": rep.violations_dx, "iss_c_alpha": rep.violations_c_alpha,
                "iss_eps": rep.violations_eps, "interval": rep.violations_interval,
                "state": rep.violations_state, "shift": rep.violations_shift,
            },
            "elapsed_s": trace.elapsed_s,
        });
        return Outcome { code, stdout: format!("{}\n", serde_json::to_string_pretty(&doc).unwrap()), stderr };
    }
    let mut s = String::new();
    let _ = writeln!(s, "# simulate: {}\ntrace = {}", sc.name, out_path.display());
    let _ = writeln!(s, "n = {}\nK = {}\nsteps = {}", prep.design.n, prep.design.k, sc.steps);
    let _ = writeln!(s, "psi0 = {:.6e}\nfinal_psi = {:.6e}", summary.psi0, summary.final_psi);
    let _ = writeln!(s, "eps1 = {:.6e}\nfinal_eps = {:.6e}", summary.eps1, summary.final_eps);
    let _ = writeln!(s, "c_alpha1 = {:.6e}\nfinal_c_alpha = {:.6e}", summary.c_alpha1, summary.final_c_alpha);
    let _ = writeln!(s, "max_abs_input = {:.6e}\nsaturations = {}", summary.max_input_abs, summary.total_saturations);
    let _ = writeln!(
        s,
        "violations iss_psi = {}\nviolations iss_dx = {}\nviolations iss_c_alpha = {}\nviolations iss_eps = {}\nviolations interval = {}\nviolations state = {}\nviolations shift = {}",
        rep.violations_psi, rep.violations_dx, rep.violations_c_alpha, rep.violations_eps, rep.violations_interval, rep.violations_state, rep.violations_shift
    );
    let _ = writeln!(s, "elapsed_s = {:.2}", trace.elapsed_s);
    Outcome { code, stdout: s, stderr }
}
