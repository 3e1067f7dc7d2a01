use nalgebra::{Matrix2, Vector2};
use proptest::prelude::*;
use qdmpc::conditions::*;
use qdmpc::problem::ProblemConstants;

fn pc(alpha_f: f64, l_f: f64, l_max: f64, m_tilde: usize, d: usize, agents: usize) -> ProblemConstants {
    ProblemConstants {
        alpha_f,
        l_f,
        gamma: alpha_f / l_f,
        l_max,
        m_tilde,
        d,
        agents,
        local_lipschitz: vec![l_max; agents],
        neighborhood_dims: vec![m_tilde; agents],
    }
}

fn ones() -> BoundConstants {
    BoundConstants { a1: 1.0, a2: 1.0, a3: 1.0, b1: 1.0, b2: 1.0, b3: 1.0 }
}

fn inputs(problem: ProblemConstants, kappa: f64, bounds: BoundConstants) -> DesignInputs {
    DesignInputs {
        problem,
        kappa,
        eta: 0.1,
        bounds,
        l: 1.0,
        norm_a_minus_i: 1.0,
        norm_b: 1.0,
        lam_min_q: 1.0,
        lam_max_h: 4.0,
        lam_min_h: 4.0,
    }
}

/// Solve the interval conditions at equality with ρ = 1.
fn j_oracle(n: u32, c: &BoundConstants) -> (f64, f64) {
    let t = 2f64.powi(n as i32);
    let m = Matrix2::new(t - c.a2, -c.a3, -c.b2, t - c.b3);
    let r = Vector2::new(2.0 * t * c.a1, 2.0 * t * c.b1);
    let s = m.lu().solve(&r).unwrap();
    (s[0], s[1])
}

/// 2ⁿ above both diagonal entries and the larger root of the determinant.
fn n_min_oracle(c: &BoundConstants) -> u32 {
    let root = 0.5 * (c.a2 + c.b3 + ((c.a2 - c.b3).powi(2) + 4.0 * c.a3 * c.b2).sqrt());
    let thr = c.a2.max(c.b3).max(root);
    (1u32..).find(|&n| 2f64.powi(n as i32) > thr).unwrap()
}

#[test]
fn s_examples() {
    let inp = inputs(pc(0.5, 1.0, 1.0, 4, 1, 2), 0.9, ones());
    assert!((s_alpha(3, &inp).unwrap() - 2.25).abs() < 1e-12);
    assert!((s_beta(3, &inp).unwrap() - 1.125).abs() < 1e-12);
    assert!((s_alpha(4, &inp).unwrap() - 2.25 / 2.0).abs() < 1e-12);
    let bad = inputs(pc(0.5, 1.0, 1.0, 4, 1, 2), 0.4, ones());
    assert!(matches!(s_alpha(3, &bad), Err(ConditionsError::KappaGamma(_))));
}

#[test]
fn j_examples() {
    let c = ones();
    assert!((j_alpha(3, &c).unwrap() - 128.0 / 48.0).abs() < 1e-12);
    let (ja, jb) = j_oracle(3, &c);
    assert!((j_alpha(3, &c).unwrap() - ja).abs() < 1e-12);
    assert!((j_beta(3, &c).unwrap() - jb).abs() < 1e-12);
    let dec = BoundConstants { a1: 0.7, a2: 1.3, a3: 0.0, b1: 0.4, b2: 0.2, b3: 0.0 };
    for n in 1..8 {
        let closed = 2.0 * dec.a1 / (1.0 - dec.a2 / 2f64.powi(n as i32));
        assert!((j_alpha(n, &dec).unwrap() - closed).abs() < 1e-12 * closed);
    }
    assert!(matches!(j_alpha(1, &c), Err(ConditionsError::BelowNmin { .. })));
}

#[test]
fn y_vanishes_with_bits() {
    let inp = inputs(pc(0.5, 1.0, 1.0, 4, 2, 3), 0.9, ones());
    let (y30, y40) = (y(30, &inp).unwrap(), y(40, &inp).unwrap());
    assert!(y40 < y30 && y40 < 1e-9);
    assert!((y30 / y40 - 1024.0).abs() < 1e-3);
}

#[test]
fn n_min_examples() {
    assert_eq!(n_min(&ones()), Some(2));
    assert!(!bit_inequalities(1, &ones()));
    // b₂ does not bound 2ⁿ on its own; it enters only through the determinant.
    let c = BoundConstants { a1: 1.0, a2: 3.0, a3: 0.0, b1: 1.0, b2: 5.0, b3: 0.0 };
    assert_eq!(n_min(&c), Some(2));
    assert_eq!(n_min(&c), Some(n_min_oracle(&c)));
}

#[test]
fn k_examples() {
    assert_eq!(k1_from_y(0.0, 0.975), 1);
    assert_eq!(k1_from_y(0.1, 0.975), 3);
    assert_eq!(k2_from_arg(2.0, 0.975), 27);
    let r = quadratic_root(2.0, 3.0, 7.0);
    assert!((r - (-5.0 + 29f64.sqrt()) / 2.0).abs() < 1e-12);
    assert_eq!((r.ln() / 0.975f64.ln() - 1.0).ceil() as usize, 65);
    // c = ab degenerates to a linear equation.
    assert!((quadratic_root(2.0, 3.0, 6.0) - 0.2).abs() < 1e-15);
}

#[test]
fn gains_examples() {
    let mut inp = inputs(pc(0.5, 1.0, 1.0, 4, 1, 2), 0.9, ones());
    inp.lam_max_h = 4.0;
    inp.lam_min_q = 1.0;
    let n = 4;
    let g = gains(n, 400, &inp, false).unwrap();
    assert!((g.alpha_1 - (1.0 - 0.75f64.sqrt())).abs() < 1e-12);
    assert!((g.alpha_1 - 0.1340).abs() < 1e-4);
    let ja = j_alpha(n, &inp.bounds).unwrap();
    // 2·J_α·L·(‖A−I‖+‖B‖)/√λ̲(H) with the values above: J_α = 2 would give 4.
    assert!((g.gamma_21 - 2.0 * ja * 1.0 * 2.0 / 2.0).abs() < 1e-12);
    assert!((g.gamma_13 - 2.0).abs() < 1e-12);
    let gn = gains(n, 400, &inp, true).unwrap();
    assert!((gn.gamma_21 - 1.5 * g.gamma_21).abs() < 1e-12);
    assert!((gn.gamma_2e - 6.0 * ja).abs() < 1e-12);
    // K → ∞.
    let big = gains(n, 100_000, &inp, false).unwrap();
    assert!(big.alpha_2 > 1.0 - 1e-12 && big.alpha_3 > 1.0 - 1e-12);
    assert!(big.gamma_31 < 1e-12 && big.gamma_32 < 1e-12);
    // K = 1 violates K₁ or K₂.
    assert!(matches!(gains(n, 1, &inp, false), Err(ConditionsError::KBound { .. })));
}

#[test]
fn small_gain_examples() {
    let zero = GainSet {
        alpha_1: 0.5,
        alpha_2: 0.5,
        alpha_3: 0.5,
        gamma_13: 0.0,
        gamma_21: 0.0,
        gamma_23: 0.0,
        gamma_31: 0.0,
        gamma_32: 0.0,
        gamma_2e: 0.0,
    };
    let r = small_gain_check(&zero);
    assert!(r.pass && r.cycles.iter().all(|c| c.product == 0.0));
    // Products 0.5, 0.9 and 0.99.
    let g = GainSet {
        alpha_1: 1.0,
        alpha_2: 1.0,
        alpha_3: 1.0,
        gamma_13: 0.5,
        gamma_31: 1.0,
        gamma_23: 0.9,
        gamma_32: 1.0,
        gamma_21: 1.98,
        gamma_2e: 0.0,
    };
    let r = small_gain_check(&g);
    assert!(r.pass);
    let want = [0.5, 0.9, 0.99];
    for (c, w) in r.cycles.iter().zip(want) {
        assert!((c.product - w).abs() < 1e-12 && (c.margin - (1.0 - w)).abs() < 1e-12);
    }
    let mut f = g;
    f.gamma_23 = 1.0;
    let r = small_gain_check(&f);
    assert!(!r.pass);
    assert_eq!(r.failing(), vec!["2-3-2"]);
}

#[test]
fn region_examples() {
    let c = BoundConstants { a1: 0.3, a2: 2.5, a3: 1.7, b1: 0.9, b2: 3.1, b3: 1.2 };
    let n0 = n_min(&c).unwrap();
    let at = feasibility_region(n0, 1.0, &c);
    let (va, vb) = at.vertex.unwrap();
    assert!(at.positive_vertex && va > 0.0 && vb > 0.0);
    let (ja, jb) = j_oracle(n0, &c);
    assert!((va - ja).abs() < 1e-9 * ja && (vb - jb).abs() < 1e-9 * jb);
    let below = feasibility_region(n0 - 1, 1.0, &c);
    assert!(!below.inequalities_hold && !below.positive_vertex);
    let zero = feasibility_region(n0, 0.0, &c);
    assert_eq!(zero.vertex, Some((0.0, 0.0)));
    assert!(zero.positive_vertex);
}

#[test]
fn design_infeasible_budget() {
    let c = BoundConstants { a1: 1.0, a2: 30.0, a3: 1.0, b1: 1.0, b2: 1.0, b3: 1.0 };
    let inp = inputs(pc(0.5, 1.0, 1.0, 4, 2, 3), 0.9, c);
    let r = design(3, &inp, false);
    assert!(r.selected.is_none());
    assert!(r.infeasible_reason.unwrap().contains("below n_min"));
}

fn arb_bounds() -> impl Strategy<Value = BoundConstants> {
    (0.05f64..5.0, 0.05f64..20.0, 0.05f64..5.0, 0.05f64..5.0, 0.05f64..20.0, 0.05f64..20.0)
        .prop_map(|(a1, a2, a3, b1, b2, b3)| BoundConstants { a1, a2, a3, b1, b2, b3 })
}

fn arb_inputs() -> impl Strategy<Value = DesignInputs> {
    (arb_bounds(), 0.05f64..0.95, 0.1f64..0.99, 1.0f64..20.0, 0.0f64..2.0, 0.01f64..2.0, 1usize..4, 1usize..4, 2usize..6)
        .prop_map(|(bounds, gamma, kfrac, l, na, nb, m_tilde, d, agents)| {
            let problem = pc(gamma * 10.0, 10.0, 3.0, m_tilde, d.min(agents), agents);
            let kappa = 1.0 - gamma + kfrac * gamma;
            DesignInputs {
                problem,
                kappa,
                eta: 0.09,
                bounds,
                l,
                norm_a_minus_i: na,
                norm_b: nb,
                lam_min_q: 0.5,
                lam_max_h: 10.0,
                lam_min_h: 0.5,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn n_min_matches_root_formula(c in arb_bounds()) {
        let n = n_min(&c).unwrap();
        prop_assert_eq!(n, n_min_oracle(&c));
        prop_assert!(bit_inequalities(n, &c));
        prop_assert!(n == 1 || !bit_inequalities(n - 1, &c));
    }

    #[test]
    fn j_matches_linear_solve(c in arb_bounds(), extra in 0u32..6) {
        let n = n_min(&c).unwrap() + extra;
        let (ja, jb) = j_oracle(n, &c);
        prop_assert!((j_alpha(n, &c).unwrap() - ja).abs() <= 1e-9 * ja.abs().max(1.0));
        prop_assert!((j_beta(n, &c).unwrap() - jb).abs() <= 1e-9 * jb.abs().max(1.0));
    }

    #[test]
    fn j_rho_pair_satisfies_interval_conditions(c in arb_bounds(), extra in 0u32..6, rho in 1e-6f64..1e3) {
        let n = n_min(&c).unwrap() + extra;
        let (ja, jb) = (j_alpha(n, &c).unwrap(), j_beta(n, &c).unwrap());
        prop_assert!(qdmpc::optimizer::check_interval_conditions(ja * rho, jb * rho, rho, n, &c));
    }

    #[test]
    fn k1_k2_are_tight(inp in arb_inputs(), extra in 0u32..4) {
        let n = n_min(&inp.bounds).unwrap() + extra;
        let yv = y(n, &inp).unwrap();
        let kap = inp.kappa;
        let k1v = k1(n, &inp).unwrap();
        let f1 = |k: usize| kap.powf(k as f64 + 1.0) * (1.0 + yv);
        prop_assert!(f1(k1v) <= 1.0 + 1e-12);
        prop_assert!(k1v == 1 || f1(k1v - 1) > 1.0 - 1e-12);
        let arg = inp.l * inp.norm_b * (1.0 + yv) + 1.0;
        let k2v = k2(n, &inp).unwrap();
        let f2 = |k: usize| kap.powf(k as f64 + 1.0) * arg;
        prop_assert!(f2(k2v) <= 1.0 + 1e-12);
        prop_assert!(k2v == 1 || f2(k2v - 1) > 1.0 - 1e-12);
    }

    #[test]
    fn k3_to_k5_nonincreasing_in_n(inp in arb_inputs()) {
        let n0 = n_min(&inp.bounds).unwrap();
        let mut prev: Option<[usize; 3]> = None;
        for n in n0..n0 + 10 {
            let cur = [k3(n, &inp, false).unwrap(), k4(n, &inp, false).unwrap(), k5(n, &inp, false).unwrap()];
            if let Some(p) = prev {
                for i in 0..3 {
                    prop_assert!(cur[i] <= p[i], "K{} rose from {} to {} at n = {}", i + 3, p[i], cur[i], n);
                }
            }
            prev = Some(cur);
        }
    }

    #[test]
    fn design_output_passes_all_checks(inp in arb_inputs()) {
        let r = design(u64::MAX / 4, &inp, false);
        let sel = r.selected.expect("unbounded budget is feasible");
        let n0 = r.n_min.unwrap();
        prop_assert!(sel.n >= n0);
        let kb = [k1(sel.n, &inp).unwrap(), k2(sel.n, &inp).unwrap(), k3(sel.n, &inp, false).unwrap(),
                  k4(sel.n, &inp, false).unwrap(), k5(sel.n, &inp, false).unwrap()];
        prop_assert!(kb.iter().all(|&k| sel.k >= k));
        let g = gains(sel.n, sel.k, &inp, false).unwrap();
        let sg = small_gain_check(&g);
        prop_assert!(sg.pass);
        prop_assert!(sg.cycles.iter().all(|c| c.product < 1.0));
        prop_assert_eq!(sel.c_alpha0, 0.0);
        // No smaller n·K among the evaluated rows.
        let best = r.rows.iter().map(|row| row.nk).min().unwrap();
        prop_assert_eq!(best, sel.n as u64 * sel.k as u64);
    }

    #[test]
    fn doubling_budget_never_increases_nk(inp in arb_inputs(), scale in 1u64..4) {
        let full = design(u64::MAX / 4, &inp, false).selected.unwrap();
        let nk = full.n as u64 * full.k as u64;
        let t = nk / scale.max(1) + 1;
        let a = design(t, &inp, false).selected.map(|s| s.n as u64 * s.k as u64);
        let b = design(2 * t, &inp, false).selected.map(|s| s.n as u64 * s.k as u64);
        match (a, b) {
            (Some(x), Some(y)) => prop_assert!(y <= x),
            (Some(_), None) => prop_assert!(false, "doubling T lost feasibility"),
            _ => {}
        }
        if let Some(x) = a {
            prop_assert!(x <= t);
        }
    }

    #[test]
    fn region_vertex_iff_n_at_least_n_min(c in arb_bounds(), rho in 1e-3f64..10.0) {
        let n0 = n_min(&c).unwrap();
        for n in 1..n0 + 4 {
            prop_assert_eq!(feasibility_region(n, rho, &c).positive_vertex, n >= n0, "n = {}", n);
        }
    }
}
