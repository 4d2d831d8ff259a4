//! Latent donors (thin SVD of the donor pre-period block) and rank selection
//! by the optimal hard threshold for matrices with unknown noise level.

use nalgebra::DMatrix;

/// `donor_pre = u * diag(singular_values) * vt`, singular values descending.
/// Rows of `vt` are the latent donors.
#[derive(Debug, Clone)]
pub struct LatentBasis {
    pub singular_values: Vec<f64>,
    /// donors × r
    pub u: DMatrix<f64>,
    /// r × periods
    pub vt: DMatrix<f64>,
}

impl LatentBasis {
    /// Number of singular values numerically distinguishable from zero.
    pub fn numerical_rank(&self) -> usize {
        let (m, t) = (self.u.nrows(), self.vt.ncols());
        let smax = self.singular_values.first().copied().unwrap_or(0.0);
        let tol = smax * (m.max(t) as f64) * f64::EPSILON;
        self.singular_values.iter().filter(|&&s| s > tol).count()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * &self.vt
    }
}

/// Thin SVD of a nonempty matrix; `vt` has `min(rows, cols)` rows.
pub fn latent_donors(donor_pre: &DMatrix<f64>) -> LatentBasis {
    let svd = donor_pre.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    LatentBasis {
        singular_values: order.iter().map(|&i| sv[i]).collect(),
        u: DMatrix::from_fn(u.nrows(), order.len(), |i, j| u[(i, order[j])]),
        vt: DMatrix::from_fn(order.len(), vt.ncols(), |i, j| vt[(order[i], j)]),
    }
}

/// Median-based threshold coefficient, quartic approximation in the aspect
/// ratio `beta = min/max` (0 < beta <= 1).
pub fn omega(beta: f64) -> f64 {
    0.56 * beta.powi(3) - 0.95 * beta.powi(2) + 1.82 * beta + 1.43
}

fn median(sorted_desc: &[f64]) -> f64 {
    let mut v = sorted_desc.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Number of singular values above `omega(beta) * median(singular_values)`,
/// floored at 1.
pub fn hard_threshold_rank(singular_values: &[f64], rows: usize, cols: usize) -> usize {
    if singular_values.is_empty() {
        return 1;
    }
    let beta = rows.min(cols) as f64 / rows.max(cols) as f64;
    let tau = omega(beta) * median(singular_values);
    singular_values.iter().filter(|&&s| s > tau).count().max(1)
}
