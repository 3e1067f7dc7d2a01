use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use qdmpc::dmpc::{
    self, coupled_stage_weights, estimate_lipschitz, verify_terminal_ingredients, AgentBoxes, AgentDynamics,
    DmpcError, DmpcModel, DmpcSpec, MpcLocalSet,
};
use qdmpc::problem::{AffineSet, BoxSet, CommGraph, Dykstra, Ellipsoid, ProductSet, Projector, Unconstrained};
use qdmpc::sim::{self, oracle_solve, OracleOptions, Plant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn di() -> (DMatrix<f64>, DMatrix<f64>) {
    (DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]), DMatrix::from_row_slice(2, 1, &[0.0, 0.1]))
}

/// One double integrator with boxes far away from the sampled states.
fn single_agent(horizon: usize, wide: f64) -> DmpcSpec {
    let (a, b) = di();
    let graph = CommGraph::chain(1);
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
    let r = DMatrix::from_element(1, 1, 0.7);
    let stage = coupled_stage_weights(&graph, &[q], &[r], None);
    let spec = DmpcSpec {
        horizon,
        graph,
        dynamics: vec![AgentDynamics { a, b }],
        stage,
        terminal_weight: Vec::new(),
        terminal_level: Vec::new(),
        terminal_gain: Vec::new(),
        boxes: vec![AgentBoxes { x_lo: vec![-wide; 2], x_hi: vec![wide; 2], u_lo: vec![-wide], u_hi: vec![wide] }],
        x_ref: vec![vec![0.0, 0.0]],
        u_ref: vec![vec![0.0]],
    };
    sim::with_lqr_terminal(spec, None).unwrap()
}

/// u* = −(R + BᵀPB)⁻¹BᵀPA x for the one-step problem.
fn one_step_gain(spec: &DmpcSpec) -> DMatrix<f64> {
    let d = &spec.dynamics[0];
    let p = &spec.terminal_weight[0];
    let r = spec.stage[0].view((2, 2), (1, 1)).into_owned();
    let m = &r + d.b.transpose() * p * &d.b;
    -(m.try_inverse().unwrap() * d.b.transpose() * p * &d.a)
}

#[test]
fn one_step_matches_normal_equations() {
    // Boxes wide enough to stay inactive for the sampled pairs.
    let spec = single_agent(1, 10.0);
    let k = one_step_gain(&spec);
    let model = DmpcModel::new(spec.clone()).unwrap();
    for x in [[0.5, -0.2], [-1.0, 0.7], [0.03, 0.0]] {
        let p = model.build_checked(&[x.to_vec()]).unwrap();
        let zs = oracle_solve(&p, None, &OracleOptions::precise());
        assert!(zs.converged);
        let u = &k * DVector::from_column_slice(&x);
        let got = model.extract_control(&zs.z)[0][0];
        assert!((got - u[0]).abs() < 1e-9, "{got} vs {}", u[0]);
    }
}

#[test]
fn reference_state_gives_zero_solution() {
    let sc = sim::di_scenario();
    let model = DmpcModel::new(sc.spec.clone()).unwrap();
    let p = model.build_checked(&sc.spec.x_ref).unwrap();
    let zs = oracle_solve(&p, None, &OracleOptions::precise());
    assert!(zs.converged);
    assert!(zs.z.iter().all(|v| v.abs() < 1e-12));
    assert_eq!(p.cost(&zs.z), 0.0);
    assert_eq!(model.control_input(&zs.z), sc.spec.u_ref);
}

#[test]
fn extract_control_layout() {
    let spec = single_agent(2, 10.0);
    let model = DmpcModel::new(spec.clone()).unwrap();
    // [x0 x1 x2 | u0 u1]
    let z = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
    assert_eq!(model.extract_control(&z), vec![vec![7.0]]);
    let mut z2 = vec![0.0; 8];
    z2[6] = 7.0;
    assert_eq!(model.extract_control(&z2), model.extract_control(&z));
}

#[test]
fn optimal_input_advances_along_predicted_state() {
    let sc = sim::di_scenario();
    let model = DmpcModel::new(sc.spec.clone()).unwrap();
    let p = model.build_checked(&sc.x0).unwrap();
    let zs = oracle_solve(&p, None, &OracleOptions::precise());
    let plant = Plant::new(&sc.spec.dynamics);
    let x1 = plant.step(&sc.x0, &model.control_input(&zs.z));
    let mut at = 0;
    for i in 0..3 {
        for k in 0..2 {
            let pred = zs.z[at + sc.spec.x_offset(i, 1) + k] + sc.spec.x_ref[i][k];
            assert!((x1[i][k] - pred).abs() < 1e-9);
        }
        at += sc.spec.zdim(i);
    }
}

#[test]
fn shifted_candidate_is_feasible_and_decreases_cost() {
    let sc = sim::di_scenario();
    let model = DmpcModel::new(sc.spec.clone()).unwrap();
    let plant = Plant::new(&sc.spec.dynamics);
    let mut x = sc.x0.clone();
    for _ in 0..5 {
        let p = model.build_checked(&x).unwrap();
        let zs = oracle_solve(&p, None, &OracleOptions::precise());
        let u = model.control_input(&zs.z);
        let x1 = plant.step(&x, &u);
        let shifted = model.shift_solution(&zs.z);
        let p1 = model.build_checked(&x1).unwrap();
        assert!(p1.violation(&shifted) < 1e-9);
        let l0 = model.stage_cost(&model.shifted_state(&x), &model.extract_control(&zs.z));
        let v0 = p.cost(&zs.z);
        assert!(p1.cost(&shifted) <= v0 - l0 + 1e-9 * v0.max(1.0));
        x = x1;
    }
}

#[test]
fn shift_appends_zero_tail_at_origin() {
    let spec = single_agent(3, 10.0);
    let model = DmpcModel::new(spec.clone()).unwrap();
    let mut z = vec![0.0; spec.zdim(0)];
    z[spec.x_offset(0, 1)] = 0.4;
    z[spec.u_offset(0, 1)] = -0.2;
    let s = model.shift_solution(&z);
    assert_eq!(s[spec.x_offset(0, 0)], 0.4);
    assert_eq!(s[spec.u_offset(0, 0)], -0.2);
    assert!(s[spec.x_offset(0, 3)..spec.x_offset(0, 3) + 2].iter().all(|v| *v == 0.0));
    assert_eq!(s[spec.u_offset(0, 2)], 0.0);
}

#[test]
fn optimal_cost_decrease_along_closed_loop() {
    let sc = sim::di_scenario();
    let model = DmpcModel::new(sc.spec.clone()).unwrap();
    let plant = Plant::new(&sc.spec.dynamics);
    let w = dmpc::global_stage_weight(&sc.spec.graph, &sc.spec.dynamics, &sc.spec.stage);
    let q = w.view((0, 0), (6, 6)).into_owned();
    let mut x = sc.x0.clone();
    let mut v_prev: Option<(f64, f64)> = None;
    for _ in 0..10 {
        let p = model.build_checked(&x).unwrap();
        let zs = oracle_solve(&p, None, &OracleOptions::precise());
        let v = p.cost(&zs.z);
        let xs = DVector::from_iterator(6, model.shifted_state(&x).into_iter().flatten());
        let xq = xs.dot(&(&q * &xs));
        if let Some((vp, xqp)) = v_prev {
            assert!(v <= vp - xqp + 1e-9 * vp.max(1.0), "{v} > {vp} − {xqp}");
        }
        v_prev = Some((v, xq));
        x = plant.step(&x, &model.control_input(&zs.z));
    }
}

#[test]
fn terminal_ingredients_pass_and_inflated_level_fails() {
    let sc = sim::di_scenario();
    let model = DmpcModel::new(sc.spec.clone()).unwrap();
    let rep = verify_terminal_ingredients(&model, 400, 3);
    assert!(rep.pass, "{rep:?}");
    assert!(rep.decrease_margin >= -1e-9);
    let mut spec = sc.spec.clone();
    for c in spec.terminal_level.iter_mut() {
        *c *= 25.0;
    }
    let bad = verify_terminal_ingredients(&DmpcModel::new(spec).unwrap(), 400, 3);
    assert!(!bad.pass);
    assert!(bad.input_margin < 0.0 || bad.state_margin < 0.0);
}

#[test]
fn terminal_check_at_origin_has_slack() {
    let sc = sim::di_scenario();
    let mut spec = sc.spec.clone();
    for c in spec.terminal_level.iter_mut() {
        *c *= 1e-12;
    }
    let rep = verify_terminal_ingredients(&DmpcModel::new(spec).unwrap(), 50, 1);
    assert!(rep.pass && rep.input_margin > 1.0 && rep.state_margin > 1.0);
}

#[test]
fn lipschitz_matches_linear_solution_map() {
    // Boxes wide enough to stay inactive for the sampled pairs.
    let spec = single_agent(1, 10.0);
    let k = one_step_gain(&spec);
    let (a, b) = di();
    // z* = [x; (A + BK)x; Kx].
    let mut m = DMatrix::zeros(5, 2);
    m.view_mut((0, 0), (2, 2)).copy_from(&DMatrix::identity(2, 2));
    m.view_mut((2, 0), (2, 2)).copy_from(&(&a + &b * &k));
    m.view_mut((4, 0), (1, 2)).copy_from(&k);
    let exact = m.singular_values().max();
    let model = DmpcModel::new(spec).unwrap();
    let est = estimate_lipschitz(&model, 300, 9, 0.1, &OracleOptions::precise()).unwrap();
    assert_eq!(est.pairs_used, 300);
    assert!(est.raw_max <= exact * (1.0 + 1e-6));
    assert!(est.raw_max >= 0.95 * exact, "{} vs {exact}", est.raw_max);
    assert!(est.l >= 1.0);
}

#[test]
fn ssn_projection_matches_dykstra() {
    let (a, b) = di();
    let n = 3;
    let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let ell = Ellipsoid::new(p.clone(), 0.05).unwrap();
    let x0 = vec![0.1, -0.3];
    let set = MpcLocalSet::new(
        a.clone(),
        b.clone(),
        n,
        x0.clone(),
        vec![-0.6, -0.5],
        vec![0.6, 0.5],
        vec![-1.0],
        vec![1.0],
        ell.clone(),
    );
    assert!(set.is_feasible());
    // G z = h: x(0) = x0 and x(t+1) − A x(t) − B u(t) = 0.
    let zd = set.zdim();
    let mut g = DMatrix::zeros(2 * (n + 1), zd);
    let mut h = vec![0.0; 2 * (n + 1)];
    g.view_mut((0, 0), (2, 2)).copy_from(&DMatrix::identity(2, 2));
    h[..2].copy_from_slice(&x0);
    for t in 0..n {
        let r = 2 * (t + 1);
        g.view_mut((r, 2 * (t + 1)), (2, 2)).copy_from(&DMatrix::identity(2, 2));
        g.view_mut((r, 2 * t), (2, 2)).copy_from(&(-&a));
        g.view_mut((r, 2 * (n + 1) + t), (2, 1)).copy_from(&(-&b));
    }
    let inf = f64::INFINITY;
    let mut lo = vec![-inf; zd];
    let mut hi = vec![inf; zd];
    for t in 1..n {
        lo[2 * t..2 * t + 2].copy_from_slice(&[-0.6, -0.5]);
        hi[2 * t..2 * t + 2].copy_from_slice(&[0.6, 0.5]);
    }
    for t in 0..n {
        lo[2 * (n + 1) + t] = -1.0;
        hi[2 * (n + 1) + t] = 1.0;
    }
    let terminal = ProductSet::new(vec![
        Arc::new(Unconstrained(2 * n)),
        Arc::new(ell),
        Arc::new(Unconstrained(n)),
    ]);
    let dyk = Dykstra {
        sets: vec![Arc::new(AffineSet::new(g, h).unwrap()), Arc::new(BoxSet::new(lo, hi)), Arc::new(terminal)],
        tol: 1e-14,
        max_sweeps: 200_000,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let v: Vec<f64> = (0..zd).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ssn = set.project(&v);
        let oracle = dyk.run(&v);
        let d: f64 = ssn.iter().zip(&oracle.point).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(d < 1e-6, "difference {d:e}, dykstra sweeps {}", oracle.sweeps);
        assert!(set.violation(&ssn) < 1e-10);
    }
}

#[test]
fn spec_validation() {
    let mut spec = single_agent(2, 10.0);
    spec.x_ref = vec![vec![10.0, 0.0]];
    assert!(matches!(DmpcModel::new(spec), Err(DmpcError::Agent { .. })));
    let mut spec = single_agent(2, 10.0);
    spec.dynamics[0].b = DMatrix::from_row_slice(2, 1, &[0.0, 0.0]);
    assert!(matches!(DmpcModel::new(spec), Err(DmpcError::Agent { .. })));
    let mut spec = single_agent(2, 10.0);
    spec.x_ref = vec![vec![1.0, 1.0]];
    assert!(DmpcModel::new(spec).is_err(), "moving reference is not an equilibrium");
    let model = DmpcModel::new(single_agent(2, 10.0)).unwrap();
    assert!(matches!(model.build(&[vec![20.0, 0.0]]), Err(DmpcError::StateOutsideBox(0))));
}

#[test]
fn lyapunov_weights_are_consistent() {
    let sc = sim::di_scenario();
    let model = DmpcModel::new(sc.spec.clone()).unwrap();
    let w = model.lyapunov_weights().unwrap();
    assert!(w.lam_min_h > 0.0 && w.lam_min_h <= w.lam_max_h);
    // Q part: diag(5, 2) per agent plus a positive semidefinite coupling.
    assert!((w.lam_min_q - 2.0).abs() < 1e-9);
    let pc = model.constants().unwrap();
    assert!((pc.l_f - 2.0 * w.lam_max_h).abs() < 1e-9 * pc.l_f);
}
