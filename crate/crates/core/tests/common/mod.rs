#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::DMatrix;
use qdmpc::problem::{
    BoxSet, CommGraph, DistributedProblem, LocalProblem, Projector, QuadraticCost, Unconstrained,
};
use rand::Rng;

/// Chain plus a few random extra edges.
pub fn random_graph<R: Rng>(rng: &mut R, m: usize) -> CommGraph {
    let mut nb: Vec<Vec<usize>> = CommGraph::chain(m).neighborhoods().to_vec();
    for i in 0..m {
        for j in i + 2..m {
            if rng.gen_bool(0.3) {
                nb[i].push(j);
                nb[j].push(i);
            }
        }
    }
    CommGraph::new(nb).unwrap()
}

pub fn random_spd<R: Rng>(rng: &mut R, n: usize, floor: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * floor
}

/// Coupled quadratic f_i(z_𝒩i) = z_𝒩iᵀ H_i z_𝒩i + g_iᵀ z_𝒩i with optional boxes.
pub fn random_problem<R: Rng>(rng: &mut R, m: usize, dims: &[usize], boxed: bool) -> DistributedProblem {
    let graph = random_graph(rng, m);
    let agents = (0..m)
        .map(|i| {
            let nd: usize = graph.neighbors(i).iter().map(|&j| dims[j]).sum();
            let floor = rng.gen_range(0.2..1.0);
            let h = random_spd(rng, nd, floor);
            let g: Vec<f64> = (0..nd).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let set: Arc<dyn Projector> = if boxed {
                let lo = (0..dims[i]).map(|_| rng.gen_range(-1.5..-0.2)).collect();
                let hi = (0..dims[i]).map(|_| rng.gen_range(0.2..1.5)).collect();
                Arc::new(BoxSet::new(lo, hi))
            } else {
                Arc::new(Unconstrained(dims[i]))
            };
            LocalProblem { dim: dims[i], cost: Arc::new(QuadraticCost::from_dense(&h, Some(g))), set }
        })
        .collect();
    DistributedProblem::new(graph, agents).unwrap()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
