//! Distributed optimization problem: local costs over neighborhoods,
//! constraint projectors, selection maps and convexity constants.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error, PartialEq)]
pub enum ProblemError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("graph is not undirected: {0} lists {1} but not vice versa")]
    Asymmetric(usize, usize),
    #[error("agent {0} is missing from its own neighborhood")]
    NoSelfLoop(usize),
    #[error("graph is not connected")]
    Disconnected,
    #[error("neighbor index {0} out of range")]
    BadIndex(usize),
    #[error("matrix is not positive definite (min eigenvalue {0})")]
    NotPositiveDefinite(f64),
}

/// Undirected connected communication graph; 𝒩_i contains i and is sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    neighborhoods: Vec<Vec<usize>>,
}

impl CommGraph {
    pub fn new(neighborhoods: Vec<Vec<usize>>) -> Result<Self, ProblemError> {
        let m = neighborhoods.len();
        let mut nb: Vec<Vec<usize>> = neighborhoods;
        for (i, set) in nb.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            if let Some(&j) = set.iter().find(|&&j| j >= m) {
                return Err(ProblemError::BadIndex(j));
            }
            if !set.contains(&i) {
                return Err(ProblemError::NoSelfLoop(i));
            }
        }
        for i in 0..m {
            for &j in &nb[i] {
                if !nb[j].contains(&i) {
                    return Err(ProblemError::Asymmetric(i, j));
                }
            }
        }
        let mut seen = vec![false; m];
        let mut stack = vec![0];
        while let Some(i) = stack.pop() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            stack.extend(nb[i].iter().filter(|&&j| !seen[j]));
        }
        if m > 0 && seen.iter().any(|s| !s) {
            return Err(ProblemError::Disconnected);
        }
        Ok(Self { neighborhoods: nb })
    }

    /// Chain 0 – 1 – … – (m−1).
    pub fn chain(m: usize) -> Self {
        let nb = (0..m)
            .map(|i| (i.saturating_sub(1)..(i + 2).min(m)).collect())
            .collect();
        Self::new(nb).expect("chain graph is valid")
    }

    pub fn agent_count(&self) -> usize {
        self.neighborhoods.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighborhoods[i]
    }

    pub fn neighborhoods(&self) -> &[Vec<usize>] {
        &self.neighborhoods
    }

    /// d = max_i |𝒩_i|.
    pub fn degree(&self) -> usize {
        self.neighborhoods.iter().map(|n| n.len()).max().unwrap_or(0)
    }
}

/// Index bookkeeping for E_i (global → neighborhood) and F_ij (neighborhood → agent j).
#[derive(Debug, Clone)]
pub struct SelectionMaps {
    pub dims: Vec<usize>,
    pub offsets: Vec<usize>,
    /// For each i, the block ranges of z_{𝒩_i} ordered like `graph.neighbors(i)`.
    pub local_ranges: Vec<Vec<(usize, Range<usize>)>>,
}

impl SelectionMaps {
    pub fn new(graph: &CommGraph, dims: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(dims.len() + 1);
        let mut acc = 0;
        for &d in dims {
            offsets.push(acc);
            acc += d;
        }
        offsets.push(acc);
        let local_ranges = (0..dims.len())
            .map(|i| {
                let mut at = 0;
                graph
                    .neighbors(i)
                    .iter()
                    .map(|&j| {
                        let r = at..at + dims[j];
                        at += dims[j];
                        (j, r)
                    })
                    .collect()
            })
            .collect();
        Self { dims: dims.to_vec(), offsets, local_ranges }
    }

    pub fn total_dim(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn neighborhood_dim(&self, i: usize) -> usize {
        self.local_ranges[i].last().map_or(0, |(_, r)| r.end)
    }

    pub fn block<'a>(&self, z: &'a [f64], j: usize) -> &'a [f64] {
        &z[self.offsets[j]..self.offsets[j + 1]]
    }

    /// E_i z.
    pub fn gather(&self, z: &[f64], i: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.neighborhood_dim(i));
        for (j, _) in &self.local_ranges[i] {
            out.extend_from_slice(self.block(z, *j));
        }
        out
    }

    /// E_i applied to per-agent blocks.
    pub fn gather_parts(&self, parts: &[Vec<f64>], i: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.neighborhood_dim(i));
        for (j, _) in &self.local_ranges[i] {
            out.extend_from_slice(&parts[*j]);
        }
        out
    }

    /// F_ij applied to a neighborhood vector of agent i: the z_j block.
    pub fn pick<'a>(&self, local: &'a [f64], i: usize, j: usize) -> Option<&'a [f64]> {
        self.local_ranges[i].iter().find(|(k, _)| *k == j).map(|(_, r)| &local[r.clone()])
    }

    /// Row-selection matrix E_i.
    pub fn e_matrix(&self, i: usize) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.neighborhood_dim(i), self.total_dim());
        for (j, r) in &self.local_ranges[i] {
            for (k, row) in r.clone().enumerate() {
                e[(row, self.offsets[*j] + k)] = 1.0;
            }
        }
        e
    }

    /// Row-selection matrix F_ij (z_{𝒩_i} → z_j).
    pub fn f_matrix(&self, i: usize, j: usize) -> Option<DMatrix<f64>> {
        let (_, r) = self.local_ranges[i].iter().find(|(k, _)| *k == j)?;
        let mut f = DMatrix::zeros(self.dims[j], self.neighborhood_dim(i));
        for (k, col) in r.clone().enumerate() {
            f[(k, col)] = 1.0;
        }
        Some(f)
    }
}

pub fn assemble_global(parts: &[Vec<f64>], dims: &[usize]) -> Result<Vec<f64>, ProblemError> {
    if parts.len() != dims.len() {
        return Err(ProblemError::Dimension { expected: dims.len(), got: parts.len() });
    }
    let mut z = Vec::with_capacity(dims.iter().sum());
    for (p, &d) in parts.iter().zip(dims) {
        if p.len() != d {
            return Err(ProblemError::Dimension { expected: d, got: p.len() });
        }
        z.extend_from_slice(p);
    }
    Ok(z)
}

pub fn scatter_global(z: &[f64], dims: &[usize]) -> Result<Vec<Vec<f64>>, ProblemError> {
    let total: usize = dims.iter().sum();
    if z.len() != total {
        return Err(ProblemError::Dimension { expected: total, got: z.len() });
    }
    let mut at = 0;
    Ok(dims
        .iter()
        .map(|&d| {
            let p = z[at..at + d].to_vec();
            at += d;
            p
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Projectors

/// Euclidean projection onto a closed convex set.
///
/// `project_warm` lets iterative projectors reuse dual information between
/// calls; the result must not depend on the warm start beyond solver tolerance.
pub trait Projector: Send + Sync {
    fn dim(&self) -> usize;
    fn project(&self, v: &[f64]) -> Vec<f64>;
    fn project_warm(&self, v: &[f64], _warm: &mut Vec<f64>) -> Vec<f64> {
        self.project(v)
    }
    /// Distance of `v` to the set in the max-violation sense, 0 when inside.
    fn violation(&self, v: &[f64]) -> f64;
}

#[derive(Debug, Clone)]
pub struct Unconstrained(pub usize);

impl Projector for Unconstrained {
    fn dim(&self) -> usize {
        self.0
    }
    fn project(&self, v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }
    fn violation(&self, _v: &[f64]) -> f64 {
        0.0
    }
}

/// Axis-aligned box; infinite bounds allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(l, h)| l <= h), "empty box");
        Self { lo, hi }
    }
}

impl Projector for BoxSet {
    fn dim(&self) -> usize {
        self.lo.len()
    }
    fn project(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(self.lo.iter().zip(&self.hi)).map(|(x, (l, h))| x.clamp(*l, *h)).collect()
    }
    fn violation(&self, v: &[f64]) -> f64 {
        v.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(x, (l, h))| (l - x).max(x - h).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// {ζ : ζᵀPζ ≤ c}.
#[derive(Debug, Clone)]
pub struct Ellipsoid {
    p: DMatrix<f64>,
    level: f64,
    basis: DMatrix<f64>,
    eig: Vec<f64>,
}

/// Projection of `v` onto an ellipsoid together with its multiplier μ,
/// y = (I + μP)⁻¹ v.
pub struct EllipsoidProjection {
    pub point: Vec<f64>,
    pub mu: f64,
}

impl Ellipsoid {
    pub fn new(p: DMatrix<f64>, level: f64) -> Result<Self, ProblemError> {
        let sym = (&p + p.transpose()) * 0.5;
        let se = SymmetricEigen::new(sym.clone());
        let lo = se.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(lo > 0.0) {
            return Err(ProblemError::NotPositiveDefinite(lo));
        }
        assert!(level > 0.0, "ellipsoid level must be positive");
        Ok(Self {
            p: sym,
            level,
            basis: se.eigenvectors,
            eig: se.eigenvalues.iter().cloned().collect(),
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn value(&self, v: &[f64]) -> f64 {
        let x = nalgebra::DVector::from_column_slice(v);
        x.dot(&(&self.p * &x))
    }

    pub fn project_with_multiplier(&self, v: &[f64]) -> EllipsoidProjection {
        if self.value(v) <= self.level {
            return EllipsoidProjection { point: v.to_vec(), mu: 0.0 };
        }
        let x = nalgebra::DVector::from_column_slice(v);
        let w = self.basis.transpose() * &x;
        let g = |mu: f64| -> f64 {
            w.iter()
                .zip(&self.eig)
                .map(|(wk, lk)| {
                    let y = wk / (1.0 + mu * lk);
                    lk * y * y
                })
                .sum::<f64>()
                - self.level
        };
        let mut lo = 0.0;
        let mut hi = 1.0;
        while g(hi) > 0.0 {
            lo = hi;
            hi *= 2.0;
        }
        while hi - lo > 1e-6 * hi.max(1e-300) {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // g is convex and decreasing, so Newton from the left stays below the root.
        let dg = |mu: f64| -> f64 {
            w.iter()
                .zip(&self.eig)
                .map(|(wk, lk)| -2.0 * lk * lk * wk * wk / (1.0 + mu * lk).powi(3))
                .sum()
        };
        let mut mu = lo;
        for _ in 0..50 {
            let gv = g(mu);
            let d = dg(mu);
            if gv <= 0.0 || d >= 0.0 {
                break;
            }
            let next = (mu - gv / d).min(hi);
            if next <= mu {
                break;
            }
            mu = next;
            if gv <= 1e-15 * self.level {
                break;
            }
        }
        let yw: nalgebra::DVector<f64> = nalgebra::DVector::from_iterator(
            w.len(),
            w.iter().zip(&self.eig).map(|(wk, lk)| wk / (1.0 + mu * lk)),
        );
        let y = &self.basis * yw;
        EllipsoidProjection { point: y.iter().cloned().collect(), mu }
    }

    /// Generalized Jacobian of the projection at `v`.
    pub fn projection_jacobian(&self, v: &[f64]) -> DMatrix<f64> {
        let n = v.len();
        let pr = self.project_with_multiplier(v);
        if pr.mu == 0.0 {
            return DMatrix::identity(n, n);
        }
        let r_diag: Vec<f64> = self.eig.iter().map(|l| 1.0 / (1.0 + pr.mu * l)).collect();
        let y = self.basis.transpose() * nalgebra::DVector::from_column_slice(&pr.point);
        let s = nalgebra::DVector::from_iterator(
            n,
            (0..n).map(|k| r_diag[k] * self.eig[k] * y[k]),
        );
        let py = nalgebra::DVector::from_iterator(n, (0..n).map(|k| self.eig[k] * y[k]));
        let denom = py.dot(&s);
        let mut j = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(r_diag));
        if denom > 0.0 {
            j -= &s * s.transpose() / denom;
        }
        &self.basis * j * self.basis.transpose()
    }
}

impl Projector for Ellipsoid {
    fn dim(&self) -> usize {
        self.p.nrows()
    }
    fn project(&self, v: &[f64]) -> Vec<f64> {
        self.project_with_multiplier(v).point
    }
    fn violation(&self, v: &[f64]) -> f64 {
        let val = self.value(v);
        if val <= self.level {
            0.0
        } else {
            (val / self.level).sqrt() - 1.0
        }
    }
}

/// Cartesian product of sets acting on consecutive coordinate blocks.
#[derive(Clone)]
pub struct ProductSet {
    parts: Vec<Arc<dyn Projector>>,
}

impl ProductSet {
    pub fn new(parts: Vec<Arc<dyn Projector>>) -> Self {
        Self { parts }
    }
}

impl Projector for ProductSet {
    fn dim(&self) -> usize {
        self.parts.iter().map(|p| p.dim()).sum()
    }
    fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(v.len());
        let mut at = 0;
        for p in &self.parts {
            out.extend(p.project(&v[at..at + p.dim()]));
            at += p.dim();
        }
        out
    }
    fn violation(&self, v: &[f64]) -> f64 {
        let mut at = 0;
        let mut worst: f64 = 0.0;
        for p in &self.parts {
            worst = worst.max(p.violation(&v[at..at + p.dim()]));
            at += p.dim();
        }
        worst
    }
}

/// Affine subspace {z : Gz = h} with G of full row rank.
#[derive(Debug, Clone)]
pub struct AffineSet {
    g: DMatrix<f64>,
    h: nalgebra::DVector<f64>,
    gram_inv: DMatrix<f64>,
}

impl AffineSet {
    pub fn new(g: DMatrix<f64>, h: Vec<f64>) -> Option<Self> {
        let gram = &g * g.transpose();
        let gram_inv = gram.cholesky()?.inverse();
        Some(Self { g, h: nalgebra::DVector::from_vec(h), gram_inv })
    }
}

impl Projector for AffineSet {
    fn dim(&self) -> usize {
        self.g.ncols()
    }
    fn project(&self, v: &[f64]) -> Vec<f64> {
        let x = nalgebra::DVector::from_column_slice(v);
        let r = &self.g * &x - &self.h;
        let out = x - self.g.transpose() * (&self.gram_inv * r);
        out.iter().cloned().collect()
    }
    fn violation(&self, v: &[f64]) -> f64 {
        let x = nalgebra::DVector::from_column_slice(v);
        (&self.g * x - &self.h).amax()
    }
}

/// Dykstra's alternating projection onto an intersection of convex sets.
pub struct Dykstra {
    pub sets: Vec<Arc<dyn Projector>>,
    pub tol: f64,
    pub max_sweeps: usize,
}

pub struct DykstraOutcome {
    pub point: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

impl Dykstra {
    pub fn run(&self, v: &[f64]) -> DykstraOutcome {
        let k = self.sets.len();
        let mut x = v.to_vec();
        let mut incr = vec![vec![0.0; v.len()]; k];
        for sweep in 1..=self.max_sweeps {
            let start = x.clone();
            for (s, inc) in self.sets.iter().zip(incr.iter_mut()) {
                let y: Vec<f64> = x.iter().zip(inc.iter()).map(|(a, b)| a + b).collect();
                let p = s.project(&y);
                for ((ii, yy), pp) in inc.iter_mut().zip(&y).zip(&p) {
                    *ii = yy - pp;
                }
                x = p;
            }
            if linalg::dist(&x, &start) <= self.tol {
                return DykstraOutcome { point: x, sweeps: sweep, converged: true };
            }
        }
        DykstraOutcome { point: x, sweeps: self.max_sweeps, converged: false }
    }
}

impl Projector for Dykstra {
    fn dim(&self) -> usize {
        self.sets.first().map_or(0, |s| s.dim())
    }
    fn project(&self, v: &[f64]) -> Vec<f64> {
        self.run(v).point
    }
    fn violation(&self, v: &[f64]) -> f64 {
        self.sets.iter().map(|s| s.violation(v)).fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Costs

pub trait LocalCost: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, z: &[f64]) -> f64;
    fn grad(&self, z: &[f64]) -> Vec<f64>;
    /// Hessian when the cost is quadratic.
    fn hessian(&self) -> Option<DMatrix<f64>> {
        None
    }
}

/// f(z) = zᵀHz + gᵀz with H symmetric, stored as CSR.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    linear: Vec<f64>,
}

impl QuadraticCost {
    pub fn from_dense(h: &DMatrix<f64>, linear: Option<Vec<f64>>) -> Self {
        let n = h.nrows();
        let sym = (h + h.transpose()) * 0.5;
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let v = sym[(i, j)];
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { n, row_ptr, cols, vals, linear: linear.unwrap_or_else(|| vec![0.0; n]) }
    }

    /// Build from (row, col, value) triplets; duplicates are summed and the
    /// result is symmetrized.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
        for &(i, j, v) in triplets {
            *rows[i].entry(j).or_insert(0.0) += 0.5 * v;
            *rows[j].entry(i).or_insert(0.0) += 0.5 * v;
        }
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for r in rows {
            for (j, v) in r {
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { n, row_ptr, cols, vals, linear: vec![0.0; n] }
    }

    pub fn mul(&self, z: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1]).map(|k| self.vals[k] * z[self.cols[k]]).sum()
            })
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                h[(i, self.cols[k])] = self.vals[k];
            }
        }
        h
    }
}

impl LocalCost for QuadraticCost {
    fn dim(&self) -> usize {
        self.n
    }
    fn value(&self, z: &[f64]) -> f64 {
        let hz = self.mul(z);
        z.iter().zip(&hz).map(|(a, b)| a * b).sum::<f64>()
            + self.linear.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
    }
    fn grad(&self, z: &[f64]) -> Vec<f64> {
        self.mul(z).iter().zip(&self.linear).map(|(hz, g)| 2.0 * hz + g).collect()
    }
    fn hessian(&self) -> Option<DMatrix<f64>> {
        Some(self.to_dense() * 2.0)
    }
}

// ---------------------------------------------------------------------------

/// Agent i's data: cost f_i over z_{𝒩_i} and its own set C_i.
#[derive(Clone)]
pub struct LocalProblem {
    pub dim: usize,
    pub cost: Arc<dyn LocalCost>,
    pub set: Arc<dyn Projector>,
}

#[derive(Clone)]
pub struct DistributedProblem {
    pub graph: CommGraph,
    pub maps: SelectionMaps,
    pub agents: Vec<LocalProblem>,
}

impl DistributedProblem {
    pub fn new(graph: CommGraph, agents: Vec<LocalProblem>) -> Result<Self, ProblemError> {
        if graph.agent_count() != agents.len() {
            return Err(ProblemError::Dimension { expected: graph.agent_count(), got: agents.len() });
        }
        let dims: Vec<usize> = agents.iter().map(|a| a.dim).collect();
        let maps = SelectionMaps::new(&graph, &dims);
        for (i, a) in agents.iter().enumerate() {
            if a.set.dim() != a.dim {
                return Err(ProblemError::Dimension { expected: a.dim, got: a.set.dim() });
            }
            let nd = maps.neighborhood_dim(i);
            if a.cost.dim() != nd {
                return Err(ProblemError::Dimension { expected: nd, got: a.cost.dim() });
            }
        }
        Ok(Self { graph, maps, agents })
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.maps.dims
    }

    pub fn total_dim(&self) -> usize {
        self.maps.total_dim()
    }

    /// f(z) = Σ_i f_i(E_i z).
    pub fn cost(&self, z: &[f64]) -> f64 {
        (0..self.agent_count()).map(|i| self.agents[i].cost.value(&self.maps.gather(z, i))).sum()
    }

    /// ∇f(z) = Σ_i E_iᵀ ∇f_i(E_i z).
    pub fn grad(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; z.len()];
        for i in 0..self.agent_count() {
            let gi = self.agents[i].cost.grad(&self.maps.gather(z, i));
            for (j, r) in &self.maps.local_ranges[i] {
                let off = self.maps.offsets[*j];
                for (k, v) in gi[r.clone()].iter().enumerate() {
                    g[off + k] += v;
                }
            }
        }
        g
    }

    /// Proj_C(z) = (Proj_{C_i}(z_i))_i.
    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(z.len());
        for (j, a) in self.agents.iter().enumerate() {
            out.extend(a.set.project(self.maps.block(z, j)));
        }
        out
    }

    pub fn project_warm(&self, z: &[f64], warm: &mut [Vec<f64>]) -> Vec<f64> {
        let mut out = Vec::with_capacity(z.len());
        for (j, a) in self.agents.iter().enumerate() {
            out.extend(a.set.project_warm(self.maps.block(z, j), &mut warm[j]));
        }
        out
    }

    /// Proj_{C_{𝒩_i}}(z_{𝒩_i}) as the product of the neighbors' projections.
    pub fn project_neighborhood(&self, i: usize, local: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(local.len());
        for (j, r) in &self.maps.local_ranges[i] {
            out.extend(self.agents[*j].set.project(&local[r.clone()]));
        }
        out
    }

    pub fn violation(&self, z: &[f64]) -> f64 {
        (0..self.agent_count())
            .map(|j| self.agents[j].set.violation(self.maps.block(z, j)))
            .fold(0.0, f64::max)
    }

    /// Global Hessian Σ E_iᵀ ∇²f_i E_i, when every local cost is quadratic.
    pub fn global_hessian(&self) -> Option<DMatrix<f64>> {
        let n = self.total_dim();
        let mut h = DMatrix::zeros(n, n);
        for i in 0..self.agent_count() {
            let hi = self.agents[i].cost.hessian()?;
            let idx: Vec<usize> = self.maps.local_ranges[i]
                .iter()
                .flat_map(|(j, r)| {
                    let off = self.maps.offsets[*j];
                    (0..r.len()).map(move |k| off + k)
                })
                .collect();
            for (a, &ga) in idx.iter().enumerate() {
                for (b, &gb) in idx.iter().enumerate() {
                    h[(ga, gb)] += hi[(a, b)];
                }
            }
        }
        Some(h)
    }

    pub fn constants(&self) -> Result<ProblemConstants, ProblemError> {
        let h = self.global_hessian().ok_or(ProblemError::NotPositiveDefinite(f64::NAN))?;
        let local: Vec<DMatrix<f64>> = self
            .agents
            .iter()
            .map(|a| a.cost.hessian().ok_or(ProblemError::NotPositiveDefinite(f64::NAN)))
            .collect::<Result<_, _>>()?;
        constants_for_hessians(&h, &local, &self.graph, &self.maps)
    }
}

/// Convexity and Lipschitz data used by the design formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConstants {
    pub alpha_f: f64,
    pub l_f: f64,
    pub gamma: f64,
    pub l_max: f64,
    /// Largest local dimension m̃.
    pub m_tilde: usize,
    pub d: usize,
    pub agents: usize,
    pub local_lipschitz: Vec<f64>,
    pub neighborhood_dims: Vec<usize>,
}

/// Constants for f(z) = zᵀHz (Hessian 2H): α_f = 2λ_min(H), L_f = 2λ_max(H).
pub fn constants_for_quadratic(h: &DMatrix<f64>) -> Result<(f64, f64), ProblemError> {
    let (lo, hi) = linalg::sym_eigen_range(h);
    if !(lo > 0.0) {
        return Err(ProblemError::NotPositiveDefinite(lo));
    }
    Ok((2.0 * lo, 2.0 * hi))
}

/// Same as [`constants_for_quadratic`] but taking Hessians (2H) directly.
pub fn constants_for_hessians(
    global_hessian: &DMatrix<f64>,
    local_hessians: &[DMatrix<f64>],
    graph: &CommGraph,
    maps: &SelectionMaps,
) -> Result<ProblemConstants, ProblemError> {
    let (alpha_f, l_f) = constants_for_quadratic(&(global_hessian * 0.5))?;
    let local_lipschitz: Vec<f64> = local_hessians
        .iter()
        .map(|h| linalg::sym_eigen_range(h).1.max(0.0))
        .collect();
    let l_max = local_lipschitz.iter().cloned().fold(0.0, f64::max);
    Ok(ProblemConstants {
        alpha_f,
        l_f,
        gamma: alpha_f / l_f,
        l_max,
        m_tilde: maps.dims.iter().cloned().max().unwrap_or(0),
        d: graph.degree(),
        agents: graph.agent_count(),
        local_lipschitz,
        neighborhood_dims: (0..graph.agent_count()).map(|i| maps.neighborhood_dim(i)).collect(),
    })
}
