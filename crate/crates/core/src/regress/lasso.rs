use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::ridge::{center_rows, LinearFit};
use crate::error::{Error, Result};

pub const LASSO_TOL: f64 = 1e-7;
pub const LASSO_MAX_SWEEPS: usize = 10_000;

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Coordinate descent for `0.5 |y - F^T w - c|^2 / T + lambda |w|_1`, one
/// label at a time (labels in parallel). Observations are the columns.
///
/// A sweep updates every coordinate (or only the active ones between full
/// sweeps); iteration stops once a full sweep moves no coefficient by more
/// than `1e-7`, or after 10,000 sweeps with `converged = false`.
pub fn lasso_fit(
    features: &DMatrix<f64>,
    labels: &DMatrix<f64>,
    lambda: f64,
    intercept: bool,
) -> Result<LinearFit> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidSpec(format!("lambda must be >= 0, got {lambda}")));
    }
    if features.nrows() == 0 {
        return Err(Error::TooFewDonors {
            needed: 1,
            available: 0,
        });
    }
    if features.ncols() != labels.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "features have {} observations, labels {}",
            features.ncols(),
            labels.ncols()
        )));
    }
    let (x_mean, y_mean, x, y) = if intercept {
        let (xm, xc) = center_rows(features);
        let (ym, yc) = center_rows(labels);
        (Some(xm), Some(ym), xc, yc)
    } else {
        (None, None, features.clone(), labels.clone())
    };
    // observations × features, so each feature is a contiguous column
    let xt = x.transpose();
    let t = xt.nrows() as f64;
    let col_sq: Vec<f64> = xt.column_iter().map(|c| c.norm_squared() / t).collect();

    let per_label: Vec<(Vec<f64>, bool)> = (0..y.nrows())
        .into_par_iter()
        .map(|i| {
            let target: Vec<f64> = y.row(i).iter().copied().collect();
            descend(&xt, &col_sq, &target, lambda)
        })
        .collect();

    let m = x.nrows();
    let mut coef = DMatrix::zeros(labels.nrows(), m);
    let mut converged = true;
    for (i, (w, ok)) in per_label.into_iter().enumerate() {
        converged &= ok;
        for d in 0..m {
            coef[(i, d)] = w[d];
        }
    }
    let intercept = match (x_mean, y_mean) {
        (Some(xm), Some(ym)) => ym - &coef * xm,
        _ => DVector::zeros(labels.nrows()),
    };
    Ok(LinearFit {
        coef,
        intercept,
        converged,
    })
}

fn descend(xt: &DMatrix<f64>, col_sq: &[f64], y: &[f64], lambda: f64) -> (Vec<f64>, bool) {
    let m = xt.ncols();
    let t = xt.nrows() as f64;
    let mut w = vec![0.0; m];
    let mut resid = y.to_vec();
    let mut full = true;
    for _ in 0..LASSO_MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for d in 0..m {
            if col_sq[d] == 0.0 || (!full && w[d] == 0.0) {
                continue;
            }
            let col = xt.column(d);
            let rho = col.iter().zip(&resid).map(|(a, b)| a * b).sum::<f64>() / t + col_sq[d] * w[d];
            let new = soft_threshold(rho, lambda) / col_sq[d];
            let delta = new - w[d];
            if delta != 0.0 {
                for (r, a) in resid.iter_mut().zip(col.iter()) {
                    *r -= delta * a;
                }
                w[d] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < LASSO_TOL {
            if full {
                return (w, true);
            }
            full = true;
        } else {
            full = false;
        }
    }
    (w, false)
}

/// Smallest lambda with an all-zero solution: `max_d |F_d . y_c| / T` on
/// centered data (uncentered without intercept).
pub fn lasso_lambda_max(features: &DMatrix<f64>, y: &[f64], intercept: bool) -> f64 {
    let t = features.ncols() as f64;
    let yb = if intercept { y.iter().sum::<f64>() / t } else { 0.0 };
    features
        .row_iter()
        .map(|row| {
            let xb = if intercept { row.sum() / t } else { 0.0 };
            row.iter()
                .zip(y)
                .map(|(a, b)| (a - xb) * (b - yb))
                .sum::<f64>()
                .abs()
                / t
        })
        .fold(0.0, f64::max)
}

pub fn lasso_objective(features: &DMatrix<f64>, y: &[f64], w: &[f64], c: f64, lambda: f64) -> f64 {
    let t = features.ncols();
    let mut sq = 0.0;
    for j in 0..t {
        let pred: f64 = (0..features.nrows()).map(|d| w[d] * features[(d, j)]).sum::<f64>() + c;
        sq += (y[j] - pred).powi(2);
    }
    0.5 * sq / t as f64 + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance() -> (DMatrix<f64>, DMatrix<f64>) {
        let x = DMatrix::from_row_slice(
            3,
            8,
            &[
                1.0, -0.5, 2.0, 0.3, -1.2, 0.8, 1.5, -0.7, //
                0.2, 1.1, -0.4, 0.9, 0.5, -1.3, 0.6, 1.0, //
                -0.8, 0.4, 0.7, -1.5, 1.2, 0.1, -0.3, 0.9,
            ],
        );
        let w_true = [1.5, -2.0, 0.5];
        let y = DMatrix::from_fn(1, 8, |_, t| {
            (0..3).map(|d| w_true[d] * x[(d, t)]).sum::<f64>() + 0.3 + 0.01 * ((t * 7 % 5) as f64 - 2.0)
        });
        (x, y)
    }

    #[test]
    fn zero_penalty_matches_least_squares() {
        let (x, y) = instance();
        let lasso = lasso_fit(&x, &y, 0.0, true).unwrap();
        let ols = super::super::ridge::ridge_fit(&x, &y, 0.0, true).unwrap();
        assert!(lasso.converged);
        assert!((&lasso.coef - &ols.coef).abs().max() < 1e-6);
        assert!((lasso.intercept[0] - ols.intercept[0]).abs() < 1e-6);
    }

    #[test]
    fn lambda_max_gives_zero() {
        let (x, y) = instance();
        let yv: Vec<f64> = y.row(0).iter().copied().collect();
        let lmax = lasso_lambda_max(&x, &yv, true);
        let fit = lasso_fit(&x, &y, lmax, true).unwrap();
        assert!(fit.coef.iter().all(|&v| v == 0.0));
        let fit = lasso_fit(&x, &y, lmax * 0.9, true).unwrap();
        assert!(fit.coef.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn constant_feature_stays_zero() {
        let mut x = DMatrix::from_element(2, 5, 1.0);
        x[(1, 0)] = 2.0;
        x[(1, 3)] = -1.0;
        let y = DMatrix::from_row_slice(1, 5, &[3.0, 1.0, 1.0, -1.0, 1.0]);
        let fit = lasso_fit(&x, &y, 0.01, true).unwrap();
        assert_eq!(fit.coef[(0, 0)], 0.0);
    }
}
