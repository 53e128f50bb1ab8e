//! Euclidean projection onto the probability simplex `{x : x ≥ 0, Σx = 1}`.

use crate::error::{KaratError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SimplexResult {
    pub x_star: Vec<f64>,
    /// Threshold subtracted from every coordinate.
    pub lambda: f64,
    /// Size of the active set.
    pub rho: usize,
}

/// Sort-based projection: `x* = max(y − λ, 0)`.
///
/// Coordinates are ranked in descending order with ties broken by original
/// index. `ρ` is the largest rank `i` for which `y_(i) − (Σ_{j≤i} y_(j) − 1)/i`
/// is positive and `λ = (Σ_{j≤ρ} y_(j) − 1)/ρ`.
pub fn project_simplex(y: &[f64]) -> Result<SimplexResult> {
    if y.is_empty() {
        return Err(KaratError::dim("cannot project an empty vector"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(KaratError::numeric("simplex projection input is not finite"));
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| y[b].total_cmp(&y[a]));

    let mut cum = 0.0;
    let mut rho = 1;
    let mut cum_at_rho = y[order[0]];
    for (i, &idx) in order.iter().enumerate() {
        cum += y[idx];
        let rank = (i + 1) as f64;
        if y[idx] - (cum - 1.0) / rank > 0.0 {
            rho = i + 1;
            cum_at_rho = cum;
        }
    }
    let lambda = (cum_at_rho - 1.0) / rho as f64;
    let x_star = y.iter().map(|v| (v - lambda).max(0.0)).collect();
    Ok(SimplexResult { x_star, lambda, rho })
}

/// Reference projection by bisection on `λ` over `[min(y) − 1, max(y)]`.
///
/// Solves `Σ max(y − λ, 0) = 1` without sorting; used to cross-check
/// [`project_simplex`].
pub fn oracle_project(y: &[f64]) -> Vec<f64> {
    let mass = |lambda: f64| y.iter().map(|v| (v - lambda).max(0.0)).sum::<f64>();
    let mut lo = y.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    y.iter().map(|v| (v - lambda).max(0.0)).collect()
}

/// Applies [`project_simplex`] to every row independently.
pub fn project_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        out.extend(project_simplex(a.row(i))?.x_star);
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// KKT residuals of a projection: stationarity `max |x* − y + λ − μ|` with
/// `μ = max(λ − y, 0)`, and complementary slackness `μᵀx*`.
pub fn kkt_residuals(y: &[f64], res: &SimplexResult) -> (f64, f64) {
    let mut stationarity: f64 = 0.0;
    let mut slack = 0.0;
    for (yi, xi) in y.iter().zip(&res.x_star) {
        let mu = (res.lambda - yi).max(0.0);
        stationarity = stationarity.max((xi - yi + res.lambda - mu).abs());
        slack += mu * xi;
    }
    (stationarity, slack)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn already_on_simplex() {
        let r = project_simplex(&[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(r.x_star, vec![0.2, 0.3, 0.5]);
        assert_eq!(r.lambda, 0.0);
        assert_eq!(r.rho, 3);
    }

    #[test]
    fn dominant_coordinate() {
        let r = project_simplex(&[5.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.x_star, vec![1.0, 0.0, 0.0]);
        assert_eq!(r.rho, 1);
    }

    #[test]
    fn symmetric_pair() {
        assert_eq!(project_simplex(&[1.0, 1.0]).unwrap().x_star, vec![0.5, 0.5]);
    }

    #[test]
    fn oracle_trivial_cases() {
        let close = |a: Vec<f64>, b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        assert!(close(oracle_project(&[0.2, 0.3, 0.5]), &[0.2, 0.3, 0.5]));
        assert!(close(oracle_project(&[2.0, -1.0]), &[1.0, 0.0]));
    }

    #[test]
    fn single_coordinate() {
        assert_eq!(project_simplex(&[-7.5]).unwrap().x_star, vec![1.0]);
    }

    #[test]
    fn nan_rejected() {
        assert!(matches!(project_simplex(&[1.0, f64::NAN]), Err(KaratError::Numeric(_))));
    }

    #[test]
    fn identity_rows_unchanged() {
        let eye = Tensor::eye(5);
        assert_eq!(project_rows(&eye).unwrap(), eye);
    }

    #[test]
    fn zero_rows_become_uniform() {
        let p = project_rows(&Tensor::zeros(&[4, 4])).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.25));
    }
}
