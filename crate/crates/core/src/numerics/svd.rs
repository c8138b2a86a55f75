//! One-sided (Hestenes) Jacobi SVD.
//!
//! Computation runs in `f64` regardless of the element type; results are
//! cast back on return. Deterministic: fixed sweep order, fixed sign
//! convention (largest-magnitude entry of every left singular vector is
//! non-negative), singular values sorted in descending order.

use alloc::vec;
use alloc::vec::Vec;

use super::{Matrix, Real};
use crate::error::value_err;
use crate::{Error, Result};

const MAX_SWEEPS: usize = 80;
const TOL: f64 = 1e-15;

/// Thin SVD `m = U diag(s) Vᵀ` with `n = min(rows, cols)` components.
#[derive(Debug, Clone)]
pub struct Svd {
    /// rows × n
    pub u: Matrix<f64>,
    pub s: Vec<f64>,
    /// n × cols
    pub vt: Matrix<f64>,
}

impl Svd {
    pub fn compute<T: Real>(m: &Matrix<T>) -> Result<Self> {
        if !m.is_finite() {
            return Err(value_err!("SVD input has non-finite entries"));
        }
        let a: Matrix<f64> = m.cast();
        if a.rows() >= a.cols() {
            let (u, s, v) = jacobi_tall(&a);
            Ok(finish(u, s, v))
        } else {
            // m = (mᵀ)ᵀ = (U' S V'ᵀ)ᵀ = V' S U'ᵀ
            let (u2, s, v2) = jacobi_tall(&a.transpose());
            Ok(finish(v2, s, u2))
        }
    }
}

/// Returns (U: rows×n column-scaled basis, s, V: n×n) for rows ≥ cols.
fn jacobi_tall(a: &Matrix<f64>) -> (Matrix<f64>, Vec<f64>, Matrix<f64>) {
    let (rows, n) = a.shape();
    // Column-major working copies so rotations touch contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..rows).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..rows {
                        al += cp[i] * cp[i];
                        be += cq[i] * cq[i];
                        ga += cp[i] * cq[i];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= TOL * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (libm::sqrt(c.iter().map(|x| x * x).sum::<f64>()), j))
        .collect();
    // Descending by value, ties by original column index.
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let s: Vec<f64> = order.iter().map(|o| o.0).collect();
    let u = Matrix::from_fn(rows, n, |i, k| {
        let (sigma, j) = order[k];
        if sigma > 0.0 {
            cols[j][i] / sigma
        } else {
            0.0
        }
    });
    let vm = Matrix::from_fn(n, n, |i, k| v[order[k].1][i]);
    (u, s, vm)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Applies the sign convention and builds `Vᵀ`.
fn finish(mut u: Matrix<f64>, s: Vec<f64>, v: Matrix<f64>) -> Svd {
    let n = s.len();
    let mut vt = v.transpose();
    for k in 0..n {
        let mut best = 0.0f64;
        let mut best_val = 0.0f64;
        for i in 0..u.rows() {
            let x = u.get(i, k);
            if x.abs() > best {
                best = x.abs();
                best_val = x;
            }
        }
        if best_val < 0.0 {
            for i in 0..u.rows() {
                u.set(i, k, -u.get(i, k));
            }
            for j in 0..vt.cols() {
                vt.set(k, j, -vt.get(k, j));
            }
        }
    }
    Svd { u, s, vt }
}

/// Singular values in descending order.
pub fn singular_values<T: Real>(m: &Matrix<T>) -> Result<Vec<f64>> {
    Ok(Svd::compute(m)?.s)
}

/// Best rank-`k` factorization `m ≈ U_k V_k` with the singular values split
/// evenly between the factors: `U_k = U √Σ` (rows×k), `V_k = √Σ Vᵀ` (k×cols).
pub fn truncated_svd<T: Real>(m: &Matrix<T>, k: usize) -> Result<(Matrix<T>, Matrix<T>)> {
    let max = m.rows().min(m.cols());
    if k == 0 || k > max {
        return Err(Error::Rank { requested: k, max });
    }
    let svd = Svd::compute(m)?;
    let root: Vec<f64> = svd.s[..k].iter().map(|&x| libm::sqrt(x)).collect();
    let uk = Matrix::from_fn(m.rows(), k, |i, j| T::cast(svd.u.get(i, j) * root[j]));
    let vk = Matrix::from_fn(k, m.cols(), |i, j| T::cast(root[i] * svd.vt.get(i, j)));
    Ok((uk, vk))
}
