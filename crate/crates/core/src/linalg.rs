//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

pub fn sym_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let ev = sym.symmetric_eigenvalues();
    let lo = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(r, c);
    let (mut i, mut j) = (0, 0);
    for b in blocks {
        out.view_mut((i, j), (b.nrows(), b.ncols())).copy_from(b);
        i += b.nrows();
        j += b.ncols();
    }
    out
}

pub fn controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        ctrb.view_mut((0, k * m), (n, m)).copy_from(&blk);
        blk = a * blk;
    }
    let sv = ctrb.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > smax * 1e-10).count() == n
}

/// Discrete algebraic Riccati equation by fixed-point iteration.
/// Returns (P, K) with u = K x the optimal feedback.
pub fn dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let mut p = q.clone();
    for _ in 0..200_000 {
        let s = r + b.transpose() * &p * b;
        let s_inv = s.clone().cholesky()?.inverse();
        let next = q + a.transpose() * &p * a
            - a.transpose() * &p * b * &s_inv * b.transpose() * &p * a;
        let next = (&next + next.transpose()) * 0.5;
        let diff = (&next - &p).abs().max();
        let scale = next.abs().max().max(1.0);
        p = next;
        if diff <= 1e-14 * scale {
            let s = r + b.transpose() * &p * b;
            let k = -(s.cholesky()?.inverse() * b.transpose() * &p * a);
            return Some((p, k));
        }
    }
    None
}

/// Solves a symmetric positive definite block-tridiagonal system in place.
/// `diag[r]` are the diagonal blocks, `upper[r]` couples block r to r+1.
pub fn block_tridiag_solve(
    diag: &[DMatrix<f64>],
    upper: &[DMatrix<f64>],
    rhs: &[DVector<f64>],
) -> Option<Vec<DVector<f64>>> {
    let nb = diag.len();
    let mut chol = Vec::with_capacity(nb);
    let mut lower: Vec<DMatrix<f64>> = Vec::with_capacity(nb.saturating_sub(1));
    let mut y = Vec::with_capacity(nb);
    for r in 0..nb {
        let mut d = diag[r].clone();
        let mut b = rhs[r].clone();
        if r > 0 {
            let l: &DMatrix<f64> = &lower[r - 1];
            d -= l * upper[r - 1].clone();
            b -= l * &y[r - 1];
        }
        let c = d.cholesky()?;
        if r + 1 < nb {
            // L_{r+1} = U_rᵀ D_r⁻¹
            let l = c.solve(&upper[r]).transpose();
            lower.push(l);
        }
        y.push(b);
        chol.push(c);
    }
    // back substitution: D_r x_r = y_r − U_r x_{r+1}
    let mut x: Vec<DVector<f64>> = vec![DVector::zeros(0); nb];
    for r in (0..nb).rev() {
        let mut b = y[r].clone();
        if r + 1 < nb {
            b -= &upper[r] * &x[r + 1];
        }
        x[r] = chol[r].solve(&b);
    }
    Some(x)
}
