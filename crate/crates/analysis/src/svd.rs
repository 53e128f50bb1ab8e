//! One-sided Jacobi singular value decomposition.

use karat_core::{KaratError, Result, Tensor};

const MAX_SWEEPS: usize = 80;

/// `A = U·diag(s)·Vᵀ` with `s` sorted descending; `U` is `m×k`, `V` is `n×k`, `k = min(m, n)`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor {
        let (m, k) = self.u.dims2();
        let n = self.v.rows();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += self.u.get2(i, t) * self.s[t] * self.v.get2(j, t);
                }
                out.set2(i, j, acc);
            }
        }
        out
    }

    /// `‖A − U S Vᵀ‖_F / ‖A‖_F` (absolute error when `A = 0`).
    pub fn relative_error(&self, a: &Tensor) -> f64 {
        let r = self.reconstruct();
        let diff: f64 = r.data().iter().zip(a.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = a.frobenius_norm();
        if norm > 0.0 {
            diff / norm
        } else {
            diff
        }
    }
}

/// Decomposes a rank-2 tensor.
pub fn svd(a: &Tensor) -> Result<Svd> {
    let (m, n) = a.dims2();
    if m < n {
        let t = svd(&a.transpose())?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    if !a.is_finite() {
        return Err(KaratError::numeric("SVD input has non-finite entries"));
    }
    // Columns stored contiguously for the rotations.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get2(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| (i == j) as u8 as f64).collect()).collect();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = dots(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(KaratError::numeric(format!("Jacobi SVD of a {m}×{n} matrix did not converge")));
    }
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let mut u = Tensor::zeros(&[m, n]);
    let mut vt = Tensor::zeros(&[n, n]);
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > 0.0 {
            for i in 0..m {
                u.set2(i, k, cols[j][i] / sigma);
            }
        }
        for i in 0..n {
            vt.set2(i, k, v[j][i]);
        }
    }
    Ok(Svd { u, s, v: vt })
}

fn dots(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (mut a, mut b, mut g) = (0.0, 0.0, 0.0);
    for (p, q) in x.iter().zip(y) {
        a += p * p;
        b += q * q;
        g += p * q;
    }
    (a, b, g)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}
