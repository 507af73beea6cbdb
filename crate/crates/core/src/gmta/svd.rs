//! Thin SVD of tall matrices by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns are rotated pairwise until mutually orthogonal; their norms are
//! the singular values and the accumulated rotations form `V`. The method
//! keeps high relative accuracy on small singular values, which matters for
//! condition numbers.

use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 60;

/// `G = U diag(sigma) V^T` with `U` of shape `P x T`, `V` of shape `T x T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Svd {
    /// Columns of `U`, each of length `P`.
    pub u: Vec<Vec<f64>>,
    /// Descending singular values.
    pub sigma: Vec<f64>,
    /// Columns of `V`, each of length `T`.
    pub v: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xa, yb) = (*x, *y);
        *x = c * xa - s * yb;
        *y = s * xa + c * yb;
    }
}

/// SVD of the matrix whose columns are `cols`. `rank_tol` is relative to the
/// largest singular value; left singular vectors of columns below it are
/// replaced by an orthonormal completion.
pub fn svd_columns(cols: &[Vec<f64>], rank_tol: f64) -> Result<Svd> {
    let t = cols.len();
    let p = cols.first().map_or(0, Vec::len);
    if t == 0 || p < t || cols.iter().any(|c| c.len() != p) {
        return Err(Error::shape("svd", format!("need P >= T >= 1 equal-length columns, got T={t}")));
    }
    if cols.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::domain("svd", "non-finite entry"));
    }
    let mut a: Vec<Vec<f64>> = cols.to_vec();
    let mut v: Vec<Vec<f64>> = (0..t)
        .map(|i| (0..t).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    // Dot products of length-P columns carry rounding of order sqrt(P) eps,
    // so a pair counts as orthogonal once its cosine drops below that.
    let tol = f64::EPSILON * (p as f64).sqrt().max(1.0);
    let mut converged = t == 1;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..t {
            for j in i + 1..t {
                let alpha = dot(&a[i], &a[i]);
                let beta = dot(&a[j], &a[j]);
                let gamma = dot(&a[i], &a[j]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let tan = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + tan * tan).sqrt();
                let s = c * tan;
                let (lo, hi) = a.split_at_mut(j);
                rotate(&mut lo[i], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(j);
                rotate(&mut lo[i], &mut hi[0], c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::NonConvergence(MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..t).collect();
    let norms: Vec<f64> = a.iter().map(|c| norm(c)).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let sigma: Vec<f64> = order.iter().map(|&k| norms[k]).collect();
    let v: Vec<Vec<f64>> = order.iter().map(|&k| v[k].clone()).collect();

    let cutoff = rank_tol * sigma[0];
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(t);
    for (idx, &k) in order.iter().enumerate() {
        if sigma[idx] > cutoff && sigma[idx] > 0.0 {
            u.push(a[k].iter().map(|x| x / sigma[idx]).collect());
        }
    }
    complete_basis(&mut u, p, t);
    Ok(Svd { u, sigma, v })
}

/// Extend orthonormal `u` to `t` columns using Gram-Schmidt on unit vectors.
fn complete_basis(u: &mut Vec<Vec<f64>>, p: usize, t: usize) {
    let mut e = 0;
    while u.len() < t && e < p {
        let mut cand = vec![0.0; p];
        cand[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for q in u.iter() {
                let d = dot(&cand, q);
                for (c, qv) in cand.iter_mut().zip(q) {
                    *c -= d * qv;
                }
            }
        }
        let n = norm(&cand);
        if n > 0.5 {
            u.push(cand.into_iter().map(|x| x / n).collect());
        }
    }
}
