mod common;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use qdmpc::problem::{
    assemble_global, constants_for_quadratic, scatter_global, BoxSet, CommGraph, Dykstra, Ellipsoid,
    ProblemError, Projector, SelectionMaps,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn assemble_concatenates() {
    let z = assemble_global(&[vec![1.0, 2.0], vec![3.0, 4.0, 5.0]], &[2, 3]).unwrap();
    assert_eq!(z, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    assert_eq!(assemble_global(&[vec![7.0]], &[1]).unwrap(), vec![7.0]);
    assert_eq!(
        assemble_global(&[vec![1.0]], &[2]),
        Err(ProblemError::Dimension { expected: 2, got: 1 })
    );
    assert!(scatter_global(&[1.0, 2.0], &[1, 2]).is_err());
}

#[test]
fn graph_validation() {
    assert_eq!(CommGraph::new(vec![vec![0, 1], vec![1]]), Err(ProblemError::Asymmetric(0, 1)));
    assert_eq!(CommGraph::new(vec![vec![1], vec![0, 1]]), Err(ProblemError::NoSelfLoop(0)));
    assert_eq!(CommGraph::new(vec![vec![0], vec![1]]), Err(ProblemError::Disconnected));
    assert_eq!(CommGraph::new(vec![vec![0, 2], vec![1]]), Err(ProblemError::BadIndex(2)));
    let g = CommGraph::chain(4);
    assert_eq!(g.neighbors(0), &[0, 1]);
    assert_eq!(g.neighbors(2), &[1, 2, 3]);
    assert_eq!(g.degree(), 3);
}

#[test]
fn selection_maps_pick_blocks() {
    let g = CommGraph::chain(3);
    let maps = SelectionMaps::new(&g, &[2, 1, 3]);
    let z: Vec<f64> = (0..6).map(|v| v as f64).collect();
    for i in 0..3 {
        let e = maps.e_matrix(i);
        assert!(e.iter().all(|v| *v == 0.0 || *v == 1.0));
        let local = &e * DVector::from_column_slice(&z);
        assert_eq!(local.as_slice(), maps.gather(&z, i).as_slice());
        for &j in g.neighbors(i) {
            let f = maps.f_matrix(i, j).unwrap();
            let picked = &f * &local;
            assert_eq!(picked.as_slice(), maps.block(&z, j));
        }
    }
    assert!(maps.f_matrix(0, 2).is_none());
}

#[test]
fn quadratic_constants_examples() {
    let (a, l) = constants_for_quadratic(&DMatrix::identity(3, 3)).unwrap();
    assert_eq!((a, l), (2.0, 2.0));
    let (a, l) = constants_for_quadratic(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]))).unwrap();
    assert!((a - 2.0).abs() < 1e-12 && (l - 8.0).abs() < 1e-12);
    assert!((a / l - 0.25).abs() < 1e-12);
    assert!(constants_for_quadratic(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]))).is_err());
}

#[test]
fn problem_constants_match_dense_eigenvalues() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let m = rng.gen_range(2..5);
        let dims: Vec<usize> = (0..m).map(|_| rng.gen_range(1..4)).collect();
        let p = common::random_problem(&mut rng, m, &dims, true);
        let pc = p.constants().unwrap();
        // Oracle: finite-difference Hessian of the global cost.
        let n = p.total_dim();
        let h = DMatrix::from_fn(n, n, |r, c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            let g1 = p.grad(&e);
            let g0 = p.grad(&vec![0.0; n]);
            g1[r] - g0[r]
        });
        let eig = h.symmetric_eigen().eigenvalues;
        let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((pc.alpha_f - lo).abs() < 1e-9 * hi);
        assert!((pc.l_f - hi).abs() < 1e-9 * hi);
        assert!(pc.gamma > 0.0 && pc.gamma <= 1.0);
        assert_eq!(pc.d, p.graph.degree());
        assert_eq!(pc.m_tilde, *dims.iter().max().unwrap());
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = common::random_problem(&mut rng, 3, &[2, 3, 2], false);
    let n = p.total_dim();
    let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g = p.grad(&z);
    let h = 1e-6;
    for k in 0..n {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[k] += h;
        zm[k] -= h;
        let fd = (p.cost(&zp) - p.cost(&zm)) / (2.0 * h);
        assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1.0), "coord {k}: {fd} vs {}", g[k]);
    }
}

#[test]
fn ellipsoid_projection_matches_dykstra_free_kkt() {
    // KKT oracle: y = (I + μP)⁻¹v with yᵀPy = c, μ ≥ 0.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let p = common::random_spd(&mut rng, 3, 0.3);
        let e = Ellipsoid::new(p.clone(), 0.5).unwrap();
        let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let pr = e.project_with_multiplier(&v);
        if pr.mu == 0.0 {
            assert!(e.value(&v) <= 0.5);
            continue;
        }
        let y = DVector::from_column_slice(&pr.point);
        assert!((e.value(&pr.point) - 0.5).abs() < 1e-10);
        let lhs = (DMatrix::identity(3, 3) + &p * pr.mu) * &y;
        assert!((lhs - DVector::from_column_slice(&v)).amax() < 1e-9);
    }
}

#[test]
fn dykstra_box_and_halfspace() {
    struct HalfSpace;
    impl Projector for HalfSpace {
        fn dim(&self) -> usize {
            2
        }
        fn project(&self, v: &[f64]) -> Vec<f64> {
            // x + y ≤ 1
            let s = v[0] + v[1] - 1.0;
            if s <= 0.0 {
                v.to_vec()
            } else {
                vec![v[0] - s / 2.0, v[1] - s / 2.0]
            }
        }
        fn violation(&self, v: &[f64]) -> f64 {
            (v[0] + v[1] - 1.0).max(0.0)
        }
    }
    let d = Dykstra {
        sets: vec![Arc::new(BoxSet::new(vec![0.0, 0.0], vec![2.0, 2.0])), Arc::new(HalfSpace)],
        tol: 1e-12,
        max_sweeps: 10_000,
    };
    let out = d.run(&[3.0, 0.5]);
    assert!(out.converged);
    // Nearest point of the triangle to (3, 0.5) is (1, 0).
    assert!((out.point[0] - 1.0).abs() < 1e-9 && out.point[1].abs() < 1e-9);
}

fn vec_in(n: usize, r: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-r..r, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scatter_assemble_roundtrip(parts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 1..4), 1..5)) {
        let dims: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        let z = assemble_global(&parts, &dims).unwrap();
        prop_assert_eq!(scatter_global(&z, &dims).unwrap(), parts);
    }

    #[test]
    fn strong_convexity_and_lipschitz(seed in 0u64..10_000, a in vec_in(12, 3.0), b in vec_in(12, 3.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::random_problem(&mut rng, 3, &[2, 3, 2], true);
        let pc = p.constants().unwrap();
        let (z1, z2) = (&a[..7], &b[..7]);
        let g2 = p.grad(z2);
        let d: Vec<f64> = z1.iter().zip(z2).map(|(x, y)| x - y).collect();
        let dn2: f64 = d.iter().map(|v| v * v).sum();
        let lin: f64 = g2.iter().zip(&d).map(|(g, v)| g * v).sum();
        let scale = p.cost(z1).abs() + p.cost(z2).abs() + 1.0;
        prop_assert!(p.cost(z1) >= p.cost(z2) + lin + 0.5 * pc.alpha_f * dn2 - 1e-9 * scale);
        let g1 = p.grad(z1);
        prop_assert!(common::dist(&g1, &g2) <= pc.l_f * dn2.sqrt() * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn box_projection_idempotent_nonexpansive(v in vec_in(4, 5.0), w in vec_in(4, 5.0)) {
        let b = BoxSet::new(vec![-1.0, 0.0, -2.0, 0.5], vec![1.0, 0.5, 3.0, 0.5]);
        let pv = b.project(&v);
        prop_assert_eq!(b.project(&pv), pv.clone());
        prop_assert!(common::dist(&pv, &b.project(&w)) <= common::dist(&v, &w) + 1e-15);
        prop_assert_eq!(b.violation(&pv), 0.0);
    }

    #[test]
    fn ellipsoid_projection_idempotent_nonexpansive(seed in 0u64..1000, v in vec_in(3, 5.0), w in vec_in(3, 5.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Ellipsoid::new(common::random_spd(&mut rng, 3, 0.2), 0.3).unwrap();
        let pv = e.project(&v);
        let pw = e.project(&w);
        prop_assert!(e.value(&pv) <= 0.3 * (1.0 + 1e-9));
        prop_assert!(common::dist(&e.project(&pv), &pv) <= 1e-9);
        prop_assert!(common::dist(&pv, &pw) <= common::dist(&v, &w) + 1e-9);
    }
}
