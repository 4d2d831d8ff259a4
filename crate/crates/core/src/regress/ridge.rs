use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Coefficients for every label over a shared feature matrix.
#[derive(Debug, Clone)]
pub struct LinearFit {
    /// labels × features
    pub coef: DMatrix<f64>,
    pub intercept: DVector<f64>,
    /// False only for a lasso that hit the sweep cap.
    pub converged: bool,
}

/// Row means and the row-centered copy of `m`.
pub(crate) fn center_rows(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let t = m.ncols() as f64;
    let means = DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.sum() / t));
    let mut c = m.clone();
    for (i, mut row) in c.row_iter_mut().enumerate() {
        row.add_scalar_mut(-means[i]);
    }
    (means, c)
}

fn cholesky_solve(mut gram: DMatrix<f64>, rhs: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("Gram matrix is not positive definite".into()))?;
    if lambda == 0.0 {
        let diag = chol.l_dirty().diagonal();
        let max = diag.max();
        let min = diag.min();
        if !(min > 0.0) || min * min <= max * max * 1e-13 {
            return Err(Error::SingularSystem(
                "rank-deficient Gram matrix with lambda = 0".into(),
            ));
        }
    }
    Ok(chol.solve(rhs))
}

/// Multi-label ridge regression in the vertical orientation: columns of
/// `features` (features × obs) and `labels` (labels × obs) are the
/// observations. Minimizes `|y - F^T w - c|^2 + lambda |w|^2` per label with
/// `c` unpenalized.
///
/// The Gram matrix is factorized once and shared by all labels: the
/// features × features form when features <= obs, otherwise the
/// obs × obs kernel form.
pub fn ridge_fit(
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
    let (m, t) = x.shape();
    // w^T: features × labels
    let wt = if m <= t {
        cholesky_solve(&x * x.transpose(), &(&x * y.transpose()), lambda)?
    } else {
        let alpha = cholesky_solve(x.transpose() * &x, &y.transpose(), lambda)?;
        &x * alpha
    };
    let coef = wt.transpose();
    let intercept = match (x_mean, y_mean) {
        (Some(xm), Some(ym)) => ym - &coef * xm,
        _ => DVector::zeros(labels.nrows()),
    };
    Ok(LinearFit {
        coef,
        intercept,
        converged: true,
    })
}

/// Ridge objective for one label, used by tests and oracles.
pub fn ridge_objective(features: &DMatrix<f64>, y: &[f64], w: &[f64], c: f64, lambda: f64) -> f64 {
    let mut loss = 0.0;
    for t in 0..features.ncols() {
        let pred: f64 = (0..features.nrows()).map(|d| w[d] * features[(d, t)]).sum::<f64>() + c;
        loss += (y[t] - pred).powi(2);
    }
    loss + lambda * w.iter().map(|v| v * v).sum::<f64>()
}
