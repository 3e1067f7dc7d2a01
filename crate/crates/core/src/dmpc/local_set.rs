//! Projection onto one agent's DMPC constraint set
//! C_i = {z = (x(0..N), u(0..N−1)) : x(0) = x_t, x(τ+1) = A x(τ) + B u(τ),
//!        x(1..N−1) ∈ box, u ∈ box, x(N) ∈ ellipsoid}.
//!
//! The affine part is dualized: with S the product of the simple sets,
//! z(λ) = Proj_S(v − Gᵀλ) and the multiplier solves F(λ) = G z(λ) − h = 0.
//! F is the gradient of a concave piecewise-smooth dual, so a damped
//! semismooth Newton method with a dual line search converges; its Newton
//! matrix G J Gᵀ is block tridiagonal in time.

use nalgebra::{DMatrix, DVector};

use crate::linalg;
use crate::problem::{Ellipsoid, Projector};

#[derive(Debug, Clone)]
pub struct MpcLocalSet {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    horizon: usize,
    x_init: Vec<f64>,
    x_lo: Vec<f64>,
    x_hi: Vec<f64>,
    u_lo: Vec<f64>,
    u_hi: Vec<f64>,
    terminal: Ellipsoid,
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone)]
pub struct SsnOutcome {
    pub point: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

impl MpcLocalSet {
    /// All vectors are in the (shifted) coordinates the optimizer uses.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        horizon: usize,
        x_init: Vec<f64>,
        x_lo: Vec<f64>,
        x_hi: Vec<f64>,
        u_lo: Vec<f64>,
        u_hi: Vec<f64>,
        terminal: Ellipsoid,
    ) -> Self {
        assert!(horizon >= 1);
        Self { a, b, horizon, x_init, x_lo, x_hi, u_lo, u_hi, terminal, tol: 1e-13, max_iter: 500 }
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn x_init(&self) -> &[f64] {
        &self.x_init
    }

    pub fn terminal(&self) -> &Ellipsoid {
        &self.terminal
    }

    pub fn with_x_init(&self, x_init: Vec<f64>) -> Self {
        let mut s = self.clone();
        s.x_init = x_init;
        s
    }

    fn x_off(&self, t: usize) -> usize {
        t * self.nx()
    }

    fn u_off(&self, t: usize) -> usize {
        self.nx() * (self.horizon + 1) + t * self.nu()
    }

    pub fn zdim(&self) -> usize {
        self.nx() * (self.horizon + 1) + self.nu() * self.horizon
    }

    /// Gᵀλ.
    fn gt(&self, lam: &[f64]) -> Vec<f64> {
        let (nx, nu, n) = (self.nx(), self.nu(), self.horizon);
        let mut out = vec![0.0; self.zdim()];
        let blk = |r: usize| DVector::from_column_slice(&lam[r * nx..(r + 1) * nx]);
        for t in 0..=n {
            let mut v = blk(t);
            if t < n {
                v -= self.a.transpose() * blk(t + 1);
            }
            out[self.x_off(t)..self.x_off(t) + nx].copy_from_slice(v.as_slice());
        }
        for t in 0..n {
            let v = -(self.b.transpose() * blk(t + 1));
            out[self.u_off(t)..self.u_off(t) + nu].copy_from_slice(v.as_slice());
        }
        out
    }

    /// Gz − h.
    fn residual(&self, z: &[f64]) -> Vec<f64> {
        let (nx, nu, n) = (self.nx(), self.nu(), self.horizon);
        let mut f = vec![0.0; nx * (n + 1)];
        for k in 0..nx {
            f[k] = z[k] - self.x_init[k];
        }
        for t in 0..n {
            let x = DVector::from_column_slice(&z[self.x_off(t)..self.x_off(t) + nx]);
            let u = DVector::from_column_slice(&z[self.u_off(t)..self.u_off(t) + nu]);
            let pred = &self.a * x + &self.b * u;
            for k in 0..nx {
                f[(t + 1) * nx + k] = z[self.x_off(t + 1) + k] - pred[k];
            }
        }
        f
    }

    fn gv_minus_h(&self, v: &[f64]) -> Vec<f64> {
        self.residual(v)
    }

    /// Proj_S and the active-set data needed for its Jacobian.
    fn proj_s(&self, w: &[f64]) -> (Vec<f64>, Vec<bool>, Option<DMatrix<f64>>) {
        let (nx, n) = (self.nx(), self.horizon);
        let mut p = w.to_vec();
        let mut free = vec![true; w.len()];
        for t in 1..n {
            for k in 0..nx {
                let i = self.x_off(t) + k;
                let (lo, hi) = (self.x_lo[k], self.x_hi[k]);
                if w[i] < lo {
                    p[i] = lo;
                    free[i] = false;
                } else if w[i] > hi {
                    p[i] = hi;
                    free[i] = false;
                }
            }
        }
        for t in 0..n {
            for k in 0..self.nu() {
                let i = self.u_off(t) + k;
                let (lo, hi) = (self.u_lo[k], self.u_hi[k]);
                if w[i] < lo {
                    p[i] = lo;
                    free[i] = false;
                } else if w[i] > hi {
                    p[i] = hi;
                    free[i] = false;
                }
            }
        }
        let xn = &w[self.x_off(n)..self.x_off(n) + nx];
        let pe = self.terminal.project_with_multiplier(xn);
        let jac = if pe.mu > 0.0 { Some(self.terminal.projection_jacobian(xn)) } else { None };
        p[self.x_off(n)..self.x_off(n) + nx].copy_from_slice(&pe.point);
        (p, free, jac)
    }

    fn dual_value(&self, lam: &[f64], v: &[f64], gvh: &[f64]) -> f64 {
        let gtl = self.gt(lam);
        let w: Vec<f64> = v.iter().zip(&gtl).map(|(a, b)| a - b).collect();
        let (p, _, _) = self.proj_s(&w);
        let d2: f64 = w.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
        let g2: f64 = gtl.iter().map(|x| x * x).sum();
        let lin: f64 = lam.iter().zip(gvh).map(|(a, b)| a * b).sum();
        0.5 * d2 - 0.5 * g2 + lin
    }

    /// Solve (G J Gᵀ + μI) d = F with J from the active set.
    fn newton_direction(
        &self,
        free: &[bool],
        jac_n: &Option<DMatrix<f64>>,
        mu: f64,
        f: &[f64],
    ) -> Option<Vec<f64>> {
        let (nx, nu, n) = (self.nx(), self.nu(), self.horizon);
        let diag_j = |t: usize| -> DMatrix<f64> {
            if t == n {
                return jac_n.clone().unwrap_or_else(|| DMatrix::identity(nx, nx));
            }
            let mut d = DMatrix::zeros(nx, nx);
            for k in 0..nx {
                if free[self.x_off(t) + k] {
                    d[(k, k)] = 1.0;
                }
            }
            d
        };
        let ju = |t: usize| -> DMatrix<f64> {
            let mut d = DMatrix::zeros(nu, nu);
            for k in 0..nu {
                if free[self.u_off(t) + k] {
                    d[(k, k)] = 1.0;
                }
            }
            d
        };
        let jx: Vec<DMatrix<f64>> = (0..=n).map(diag_j).collect();
        let eye = DMatrix::<f64>::identity(nx, nx) * mu;
        let mut diag = Vec::with_capacity(n + 1);
        let mut upper = Vec::with_capacity(n);
        diag.push(&jx[0] + &eye);
        for t in 0..n {
            let m = &self.a * &jx[t] * self.a.transpose()
                + &jx[t + 1]
                + &self.b * ju(t) * self.b.transpose()
                + &eye;
            diag.push(m);
            upper.push(-(&jx[t] * self.a.transpose()));
        }
        let rhs: Vec<DVector<f64>> =
            (0..=n).map(|r| DVector::from_column_slice(&f[r * nx..(r + 1) * nx])).collect();
        let sol = linalg::block_tridiag_solve(&diag, &upper, &rhs)?;
        let mut d: Vec<f64> = Vec::with_capacity(nx * (n + 1));
        for s in sol {
            d.extend(s.iter());
        }
        if d.iter().all(|x| x.is_finite()) {
            Some(d)
        } else {
            None
        }
    }

    pub fn solve(&self, v: &[f64], warm: &mut Vec<f64>) -> SsnOutcome {
        let nl = self.nx() * (self.horizon + 1);
        let mut lam = if warm.len() == nl { warm.clone() } else { vec![0.0; nl] };
        let gvh = self.gv_minus_h(v);
        let scale = 1.0
            + v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
            + self.x_init.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let tol = self.tol * scale;

        let eval = |lam: &[f64]| {
            let gtl = self.gt(lam);
            let w: Vec<f64> = v.iter().zip(&gtl).map(|(a, b)| a - b).collect();
            let (p, free, jac) = self.proj_s(&w);
            let f = self.residual(&p);
            let nf = linalg::norm(&f);
            (p, free, jac, f, nf)
        };
        let (mut p, mut free, mut jac, mut f, mut nf) = eval(&lam);
        let mut damping = 0.01;
        let mut it = 0;
        while it < self.max_iter && nf > tol {
            it += 1;
            let mu = (damping * nf.min(1.0)).max(1e-10);
            let Some(d) = self.newton_direction(&free, &jac, mu, &f) else {
                damping *= 10.0;
                continue;
            };
            let trial: Vec<f64> = lam.iter().zip(&d).map(|(a, b)| a + b).collect();
            let (p1, free1, jac1, f1, n1) = eval(&trial);
            if n1 <= 0.9 * nf {
                lam = trial;
                (p, free, jac, f, nf) = (p1, free1, jac1, f1, n1);
                damping = (damping * 0.5).max(1e-4);
                continue;
            }
            // Armijo on the concave dual along the ascent direction d.
            let q0 = self.dual_value(&lam, v, &gvh);
            let slope: f64 = f.iter().zip(&d).map(|(a, b)| a * b).sum();
            let mut s = 1.0;
            let mut accepted = false;
            while s > 1e-10 {
                let cand: Vec<f64> = lam.iter().zip(&d).map(|(a, b)| a + s * b).collect();
                if self.dual_value(&cand, v, &gvh) >= q0 + 1e-4 * s * slope {
                    lam = cand;
                    accepted = true;
                    break;
                }
                s *= 0.5;
            }
            if accepted {
                (p, free, jac, f, nf) = eval(&lam);
            } else {
                damping *= 10.0;
                if damping > 1e8 {
                    break;
                }
            }
        }
        *warm = lam;
        SsnOutcome { point: p, iterations: it, residual: nf, converged: nf <= tol }
    }

    /// Dynamics residual and simple-set violation of `z`.
    pub fn constraint_violation(&self, z: &[f64]) -> f64 {
        let dyn_res = self.residual(z).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let (p, _, _) = self.proj_s(z);
        let box_res = z.iter().zip(&p).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        dyn_res.max(box_res)
    }

    /// True when the set is nonempty (the projector converges).
    pub fn is_feasible(&self) -> bool {
        let mut warm = Vec::new();
        let out = self.solve(&vec![0.0; self.zdim()], &mut warm);
        let scale = 1.0 + self.x_init.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        out.residual <= 1e-9 * scale
    }
}

impl Projector for MpcLocalSet {
    fn dim(&self) -> usize {
        self.zdim()
    }
    fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut warm = Vec::new();
        self.solve(v, &mut warm).point
    }
    fn project_warm(&self, v: &[f64], warm: &mut Vec<f64>) -> Vec<f64> {
        let out = self.solve(v, warm);
        if out.converged {
            out.point
        } else {
            warm.clear();
            self.solve(v, warm).point
        }
    }
    fn violation(&self, v: &[f64]) -> f64 {
        self.constraint_violation(v)
    }
}
