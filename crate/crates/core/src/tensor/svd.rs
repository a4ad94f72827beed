//! Truncated SVD via one-sided Jacobi rotations.
//!
//! Sized for the small dense weight matrices in this crate (tens to a few
//! hundred per side), where Jacobi's simplicity and accuracy beat anything
//! fancier.

use crate::error::{QartError, Result};
use crate::tensor::Tensor;

/// `a ≈ u @ diag(s) @ vt` with orthonormal `u` columns and `vt` rows,
/// `s` sorted non-increasing, truncated to the requested rank.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub vt: Tensor,
}

/// Convergence threshold on the normalized off-diagonal inner product.
const TOL: f64 = 1e-14;

pub fn svd_truncated(a: &Tensor, rank: usize) -> Result<Svd> {
    let (m, n) = a.dims2()?;
    if rank == 0 || rank > m.min(n) {
        return Err(QartError::param(format!(
            "rank {} out of range for {}x{} matrix",
            rank, m, n
        )));
    }
    if m >= n {
        jacobi(a.data(), m, n, rank)
    } else {
        // Work on the transpose, then swap the factors back.
        let mut at = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                at[j * m + i] = a.data()[i * n + j];
            }
        }
        let f = jacobi(&at, n, m, rank)?;
        let (un, ur) = f.u.dims2()?;
        let (vr, vm) = f.vt.dims2()?;
        let mut u = vec![0.0; vm * vr];
        for i in 0..vr {
            for j in 0..vm {
                u[j * vr + i] = f.vt.data()[i * vm + j];
            }
        }
        let mut vt = vec![0.0; ur * un];
        for i in 0..un {
            for j in 0..ur {
                vt[j * un + i] = f.u.data()[i * ur + j];
            }
        }
        Ok(Svd {
            u: Tensor::from_vec(vec![vm, vr], u)?,
            s: f.s,
            vt: Tensor::from_vec(vec![ur, un], vt)?,
        })
    }
}

/// One-sided Jacobi on an m x n matrix with m >= n: orthogonalize column
/// pairs of a working copy until all pairwise inner products vanish.
fn jacobi(a: &[f64], m: usize, n: usize, rank: usize) -> Result<Svd> {
    let mut b = a.to_vec(); // column-rotated copy of a, row-major
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let max_sweeps = 100 * n.max(1);
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let bp = b[i * n + p];
                    let bq = b[i * n + q];
                    alpha += bp * bp;
                    beta += bq * bq;
                    gamma += bp * bq;
                }
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let bp = b[i * n + p];
                    let bq = b[i * n + q];
                    b[i * n + p] = c * bp - s * bq;
                    b[i * n + q] = s * bp + c * bq;
                }
                for i in 0..n {
                    let vp = v[i * n + p];
                    let vq = v[i * n + q];
                    v[i * n + p] = c * vp - s * vq;
                    v[i * n + q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(QartError::numeric(format!(
            "jacobi svd did not converge within {} sweeps",
            max_sweeps
        )));
    }

    // Column norms are the singular values; sort descending.
    let mut order: Vec<usize> = (0..n).collect();
    let sigmas: Vec<f64> = (0..n)
        .map(|j| {
            (0..m)
                .map(|i| b[i * n + j] * b[i * n + j])
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    order.sort_by(|&x, &y| sigmas[y].partial_cmp(&sigmas[x]).unwrap());

    let mut u = vec![0.0; m * rank];
    let mut s = Vec::with_capacity(rank);
    let mut vt = vec![0.0; rank * n];
    for (out_j, &j) in order.iter().take(rank).enumerate() {
        let sigma = sigmas[j];
        s.push(sigma);
        if sigma > 0.0 {
            for i in 0..m {
                u[i * rank + out_j] = b[i * n + j] / sigma;
            }
        }
        for i in 0..n {
            vt[out_j * n + i] = v[i * n + j];
        }
    }
    Ok(Svd {
        u: Tensor::from_vec(vec![m, rank], u)?,
        s,
        vt: Tensor::from_vec(vec![rank, n], vt)?,
    })
}
