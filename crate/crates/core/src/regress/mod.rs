//! Phase two: vertical-regression predictors of the treated units'
//! untreated outcomes.
//!
//! Time periods are the observations and donor units are the features.
//! Every predictor reduces to a weight vector over donors plus an
//! intercept per treated unit, so predicting any column range is
//! `weights * donor_block + intercept`. PCR variants keep their native
//! coefficients over latent donors as well; extending them to new columns
//! goes through `(U Σ)^+` applied to the donor columns, which is exactly
//! what the donor weights encode.

mod lasso;
mod pcr;
mod ridge;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use lasso::{lasso_fit, lasso_lambda_max, lasso_objective, LASSO_MAX_SWEEPS, LASSO_TOL};
pub use pcr::{hard_threshold_rank, latent_donors, omega, LatentBasis};
pub use ridge::{ridge_fit, ridge_objective, LinearFit};

use crate::error::{Error, Result};
use crate::panel::PanelMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Knn { k: usize },
    Ridge { lambda: f64 },
    Lasso { lambda: f64 },
    /// `rank: None` selects the rank by hard thresholding.
    Pcr { rank: Option<usize> },
    PcrRidge { lambda: f64 },
    PcrLasso { lambda: f64 },
}

/// Cross-sectional centering applied before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Center {
    #[default]
    None,
    /// Subtract the donor mean of every period from donors and labels, and
    /// add it back to predictions.
    Column,
}

impl std::str::FromStr for Center {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Center::None),
            "column" => Ok(Center::Column),
            other => Err(Error::Parse(format!("unknown centering `{other}`"))),
        }
    }
}

impl fmt::Display for Center {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Center::None => "none",
            Center::Column => "column",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub method: Method,
    /// Unpenalized intercept; ignored by kNN.
    pub intercept: bool,
    #[serde(default)]
    pub center: Center,
}

impl ModelSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            intercept: true,
            center: Center::None,
        }
    }

    pub fn knn(k: usize) -> Self {
        Self::new(Method::Knn { k })
    }

    pub fn ridge(lambda: f64) -> Self {
        Self::new(Method::Ridge { lambda })
    }

    pub fn lasso(lambda: f64) -> Self {
        Self::new(Method::Lasso { lambda })
    }

    pub fn pcr(rank: Option<usize>) -> Self {
        Self::new(Method::Pcr { rank })
    }

    pub fn pcr_ridge(lambda: f64) -> Self {
        Self::new(Method::PcrRidge { lambda })
    }

    pub fn pcr_lasso(lambda: f64) -> Self {
        Self::new(Method::PcrLasso { lambda })
    }

    pub fn with_intercept(mut self, intercept: bool) -> Self {
        self.intercept = intercept;
        self
    }

    pub fn with_center(mut self, center: Center) -> Self {
        self.center = center;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.method {
            Method::Knn { .. } => "knn",
            Method::Ridge { .. } => "ridge",
            Method::Lasso { .. } => "lasso",
            Method::Pcr { .. } => "pcr",
            Method::PcrRidge { .. } => "pcr_ridge",
            Method::PcrLasso { .. } => "pcr_lasso",
        }
    }

    /// Simplicity order used to break ties in model selection.
    pub fn simplicity_rank(&self) -> u8 {
        match self.method {
            Method::Knn { .. } => 0,
            Method::Pcr { .. } => 1,
            Method::Ridge { .. } => 2,
            Method::PcrRidge { .. } => 3,
            Method::PcrLasso { .. } => 4,
            Method::Lasso { .. } => 5,
        }
    }

    /// The single hyperparameter as a number (automatic PCR rank is 0).
    pub fn hyper_value(&self) -> f64 {
        match self.method {
            Method::Knn { k } => k as f64,
            Method::Pcr { rank } => rank.unwrap_or(0) as f64,
            Method::Ridge { lambda }
            | Method::Lasso { lambda }
            | Method::PcrRidge { lambda }
            | Method::PcrLasso { lambda } => lambda,
        }
    }

    pub fn hyper_label(&self) -> String {
        match self.method {
            Method::Knn { k } => format!("k={k}"),
            Method::Pcr { rank: Some(r) } => format!("rank={r}"),
            Method::Pcr { rank: None } => "rank=auto".to_string(),
            Method::Ridge { lambda }
            | Method::Lasso { lambda }
            | Method::PcrRidge { lambda }
            | Method::PcrLasso { lambda } => format!("lambda={lambda}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            Method::Knn { k: 0 } => Err(Error::InvalidSpec("knn needs k >= 1".into())),
            Method::Pcr { rank: Some(0) } => Err(Error::InvalidSpec("pcr rank must be >= 1".into())),
            Method::Ridge { lambda }
            | Method::Lasso { lambda }
            | Method::PcrRidge { lambda }
            | Method::PcrLasso { lambda }
                if !(lambda >= 0.0 && lambda.is_finite()) =>
            {
                Err(Error::InvalidSpec(format!("lambda must be finite and >= 0, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    /// Key-value form, e.g. `method=ridge`, `lambda=0.1`, `intercept=true`.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![("method".to_string(), self.name().to_string())];
        match self.method {
            Method::Knn { k } => kv.push(("k".into(), k.to_string())),
            Method::Pcr { rank } => kv.push((
                "rank".into(),
                rank.map_or_else(|| "auto".to_string(), |r| r.to_string()),
            )),
            Method::Ridge { lambda }
            | Method::Lasso { lambda }
            | Method::PcrRidge { lambda }
            | Method::PcrLasso { lambda } => kv.push(("lambda".into(), lambda.to_string())),
        }
        kv.push(("intercept".into(), self.intercept.to_string()));
        kv.push(("center".into(), self.center.to_string()));
        kv
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |key: &str| {
            kv.get(key)
                .map(|s| s.trim())
                .ok_or_else(|| Error::InvalidSpec(format!("missing key `{key}`")))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?
                .parse::<f64>()
                .map_err(|_| Error::InvalidSpec(format!("`{key}` is not a number")))
        };
        let method = match get("method")? {
            "knn" => Method::Knn {
                k: get("k")?
                    .parse()
                    .map_err(|_| Error::InvalidSpec("`k` is not an integer".into()))?,
            },
            "ridge" => Method::Ridge { lambda: num("lambda")? },
            "lasso" => Method::Lasso { lambda: num("lambda")? },
            "pcr_ridge" => Method::PcrRidge { lambda: num("lambda")? },
            "pcr_lasso" => Method::PcrLasso { lambda: num("lambda")? },
            "pcr" => Method::Pcr {
                rank: match kv.get("rank").map(|s| s.trim()) {
                    None | Some("auto") => None,
                    Some(r) => Some(
                        r.parse()
                            .map_err(|_| Error::InvalidSpec("`rank` is not an integer".into()))?,
                    ),
                },
            },
            other => return Err(Error::InvalidSpec(format!("unknown method `{other}`"))),
        };
        let intercept = match kv.get("intercept").map(|s| s.trim()) {
            None | Some("true") => true,
            Some("false") => false,
            Some(other) => return Err(Error::InvalidSpec(format!("bad intercept `{other}`"))),
        };
        let center = match kv.get("center") {
            Some(c) => c.trim().parse()?,
            None => Center::None,
        };
        let spec = Self {
            method,
            intercept,
            center,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name(), self.hyper_label())
    }
}

/// 17 log-spaced values over [1e-4, 1e4].
pub fn lambda_grid() -> Vec<f64> {
    (0..17).map(|i| 10f64.powf(-4.0 + 0.5 * i as f64)).collect()
}

pub const KNN_GRID: [usize; 5] = [1, 2, 5, 10, 20];

/// Full candidate grid: kNN, automatic-rank PCR, and the four penalized
/// methods over [`lambda_grid`].
pub fn default_grid() -> Vec<ModelSpec> {
    let mut grid: Vec<ModelSpec> = KNN_GRID.iter().map(|&k| ModelSpec::knn(k)).collect();
    grid.push(ModelSpec::pcr(None));
    for make in [ModelSpec::ridge, ModelSpec::pcr_ridge, ModelSpec::pcr_lasso, ModelSpec::lasso] {
        grid.extend(lambda_grid().into_iter().map(make));
    }
    grid
}

/// Model fitted for a set of labels (treated units) on a set of donors over
/// a training column range.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub spec: ModelSpec,
    /// Panel rows used as features.
    pub donors: Vec<usize>,
    /// Panel rows being predicted.
    pub labels: Vec<usize>,
    pub train_cols: Range<usize>,
    /// labels × features, over donors or (PCR variants) latent donors.
    pub coefficients: DMatrix<f64>,
    /// labels × donors
    pub weights: DMatrix<f64>,
    pub intercept: DVector<f64>,
    pub basis: Option<LatentBasis>,
    /// Rank used by PCR (selected or overridden).
    pub rank: Option<usize>,
    pub converged: bool,
}

struct CoreFit {
    coefficients: DMatrix<f64>,
    weights: DMatrix<f64>,
    intercept: DVector<f64>,
    basis: Option<LatentBasis>,
    rank: Option<usize>,
    converged: bool,
}

fn knn_weights(x: &DMatrix<f64>, y: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let m = x.nrows();
    if k > m {
        return Err(Error::TooFewDonors {
            needed: k,
            available: m,
        });
    }
    let mut w = DMatrix::zeros(y.nrows(), m);
    for i in 0..y.nrows() {
        let mut dist: Vec<(f64, usize)> = (0..m)
            .map(|d| {
                let d2: f64 = (0..x.ncols()).map(|t| (x[(d, t)] - y[(i, t)]).powi(2)).sum();
                (d2, d)
            })
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, d) in &dist[..k] {
            w[(i, d)] = 1.0 / k as f64;
        }
    }
    Ok(w)
}

/// Least squares of each label row on the rows of `features`, with an
/// optional unpenalized intercept, via the pseudo-inverse.
fn least_squares(features: &DMatrix<f64>, y: &DMatrix<f64>, intercept: bool) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (k, t) = features.shape();
    let cols = k + usize::from(intercept);
    let design = DMatrix::from_fn(t, cols, |r, c| if c < k { features[(c, r)] } else { 1.0 });
    let pinv = design
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::SingularSystem(e.to_string()))?;
    let beta = pinv * y.transpose(); // cols × labels
    let coef = beta.rows(0, k).transpose();
    let c = if intercept {
        DVector::from_iterator(y.nrows(), beta.row(k).iter().copied())
    } else {
        DVector::zeros(y.nrows())
    };
    Ok((coef, c))
}

fn fit_core(spec: &ModelSpec, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<CoreFit> {
    spec.validate()?;
    if x.nrows() == 0 {
        return Err(Error::TooFewDonors {
            needed: 1,
            available: 0,
        });
    }
    let linear = |fit: LinearFit| CoreFit {
        weights: fit.coef.clone(),
        coefficients: fit.coef,
        intercept: fit.intercept,
        basis: None,
        rank: None,
        converged: fit.converged,
    };
    match spec.method {
        Method::Knn { k } => {
            let w = knn_weights(x, y, k)?;
            Ok(CoreFit {
                coefficients: w.clone(),
                weights: w,
                intercept: DVector::zeros(y.nrows()),
                basis: None,
                rank: None,
                converged: true,
            })
        }
        Method::Ridge { lambda } => Ok(linear(ridge_fit(x, y, lambda, spec.intercept)?)),
        Method::Lasso { lambda } => Ok(linear(lasso_fit(x, y, lambda, spec.intercept)?)),
        Method::Pcr { rank } => {
            let basis = latent_donors(x);
            let numerical = basis.numerical_rank();
            if numerical == 0 {
                return Err(Error::SingularSystem("donor block is identically zero".into()));
            }
            let k = match rank {
                Some(r) if r > basis.singular_values.len() => {
                    return Err(Error::InvalidSpec(format!(
                        "rank {r} exceeds min(donors, periods) = {}",
                        basis.singular_values.len()
                    )))
                }
                Some(r) => r.min(numerical),
                None => hard_threshold_rank(&basis.singular_values, x.nrows(), x.ncols()).min(numerical),
            };
            let latent = basis.vt.rows(0, k).into_owned();
            let (beta, c) = least_squares(&latent, y, spec.intercept)?;
            // w = beta Σ_k^{-1} U_k^T
            let mut scaled = beta.clone();
            for j in 0..k {
                scaled.column_mut(j).scale_mut(1.0 / basis.singular_values[j]);
            }
            let weights = scaled * basis.u.columns(0, k).transpose();
            Ok(CoreFit {
                coefficients: beta,
                weights,
                intercept: c,
                basis: Some(basis),
                rank: Some(k),
                converged: true,
            })
        }
        Method::PcrRidge { lambda } | Method::PcrLasso { lambda } => {
            let basis = latent_donors(x);
            let r = basis.numerical_rank();
            if r == 0 {
                return Err(Error::SingularSystem("donor block is identically zero".into()));
            }
            // principal component scores: Σ_r V_r^T = U_r^T X
            let mut scores = basis.vt.rows(0, r).into_owned();
            for j in 0..r {
                scores.row_mut(j).scale_mut(basis.singular_values[j]);
            }
            let fit = if matches!(spec.method, Method::PcrRidge { .. }) {
                ridge_fit(&scores, y, lambda, spec.intercept)?
            } else {
                lasso_fit(&scores, y, lambda, spec.intercept)?
            };
            let weights = &fit.coef * basis.u.columns(0, r).transpose();
            Ok(CoreFit {
                coefficients: fit.coef,
                weights,
                intercept: fit.intercept,
                basis: Some(basis),
                rank: Some(r),
                converged: fit.converged,
            })
        }
    }
}

fn column_means(b: &DMatrix<f64>) -> DVector<f64> {
    let m = b.nrows() as f64;
    DVector::from_iterator(b.ncols(), b.column_iter().map(|c| c.sum() / m))
}

fn subtract_columns(b: &DMatrix<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    let mut out = b.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mu[j]);
    }
    out
}

/// Fits `spec` for `labels` on `donors` using the columns in `train`.
pub fn fit_model(
    panel: &PanelMatrix,
    labels: &[usize],
    donors: &[usize],
    train: Range<usize>,
    spec: &ModelSpec,
) -> Result<FittedModel> {
    if train.is_empty() || train.end > panel.n_periods() {
        return Err(Error::InsufficientColumns(format!("bad training range {train:?}")));
    }
    let mut x = panel.block(donors, train.clone());
    let mut y = panel.block(labels, train.clone());
    if spec.center == Center::Column && !matches!(spec.method, Method::Knn { .. }) {
        let mu = column_means(&x);
        x = subtract_columns(&x, &mu);
        y = subtract_columns(&y, &mu);
    }
    let core = fit_core(spec, &x, &y)?;
    Ok(FittedModel {
        spec: *spec,
        donors: donors.to_vec(),
        labels: labels.to_vec(),
        train_cols: train,
        coefficients: core.coefficients,
        weights: core.weights,
        intercept: core.intercept,
        basis: core.basis,
        rank: core.rank,
        converged: core.converged,
    })
}

impl FittedModel {
    /// Predictions for the model's labels over `cols` (labels × cols).
    pub fn predict(&self, panel: &PanelMatrix, cols: Range<usize>) -> DMatrix<f64> {
        let b = panel.block(&self.donors, cols);
        let centered = self.spec.center == Center::Column && !matches!(self.spec.method, Method::Knn { .. });
        let mut out = if centered {
            let mu = column_means(&b);
            let mut p = &self.weights * subtract_columns(&b, &mu);
            for (j, mut col) in p.column_iter_mut().enumerate() {
                col.add_scalar_mut(mu[j]);
            }
            p
        } else {
            &self.weights * b
        };
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row.add_scalar_mut(self.intercept[i]);
        }
        out
    }
}

/// Donors available to phase two: one shared set, or one set per label.
#[derive(Debug, Clone, PartialEq)]
pub enum DonorPool {
    Union(Vec<usize>),
    PerUnit(BTreeMap<usize, Vec<usize>>),
}

impl DonorPool {
    /// Every donor row referenced by the pool, sorted.
    pub fn all_donors(&self) -> Vec<usize> {
        match self {
            DonorPool::Union(d) => d.clone(),
            DonorPool::PerUnit(map) => {
                let mut all: Vec<usize> = map.values().flatten().copied().collect();
                all.sort_unstable();
                all.dedup();
                all
            }
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            DonorPool::Union(_) => "union",
            DonorPool::PerUnit(_) => "per-unit",
        }
    }
}

/// Fits one model per pool component.
pub fn fit_pool(
    panel: &PanelMatrix,
    labels: &[usize],
    pool: &DonorPool,
    spec: &ModelSpec,
    train: Range<usize>,
) -> Result<Vec<FittedModel>> {
    match pool {
        DonorPool::Union(donors) => Ok(vec![fit_model(panel, labels, donors, train, spec)?]),
        DonorPool::PerUnit(map) => labels
            .par_iter()
            .map(|&l| {
                let donors = map
                    .get(&l)
                    .ok_or_else(|| Error::InvalidSpec(format!("no donor list for row {l}")))?;
                fit_model(panel, &[l], donors, train.clone(), spec)
            })
            .collect(),
    }
}

/// Stacks predictions of `models` in label order.
pub fn predict_models(models: &[FittedModel], panel: &PanelMatrix, cols: Range<usize>) -> DMatrix<f64> {
    let n: usize = models.iter().map(|m| m.labels.len()).sum();
    let mut out = DMatrix::zeros(n, cols.len());
    let mut row = 0;
    for m in models {
        let p = m.predict(panel, cols.clone());
        out.rows_mut(row, p.nrows()).copy_from(&p);
        row += p.nrows();
    }
    out
}

/// Predicted untreated outcomes for a set of labels: out-of-sample for the
/// post period, in-sample fit for the pre period.
#[derive(Debug, Clone)]
pub struct CounterfactualPrediction {
    pub labels: Vec<usize>,
    /// labels × t0
    pub yhat_pre: DMatrix<f64>,
    /// labels × (T - t0)
    pub yhat_post: DMatrix<f64>,
    pub models: Vec<FittedModel>,
}

impl CounterfactualPrediction {
    pub fn spec(&self) -> Option<&ModelSpec> {
        self.models.first().map(|m| &m.spec)
    }
}

/// Fits on `train` and predicts every pre and post column for `labels`.
pub fn counterfactual(
    panel: &PanelMatrix,
    labels: &[usize],
    pool: &DonorPool,
    spec: &ModelSpec,
    train: Range<usize>,
) -> Result<CounterfactualPrediction> {
    let models = fit_pool(panel, labels, pool, spec, train)?;
    let yhat_pre = predict_models(&models, panel, panel.pre_cols());
    let yhat_post = predict_models(&models, panel, panel.post_cols());
    if yhat_pre.iter().chain(yhat_post.iter()).any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem(format!("{spec} produced non-finite predictions")));
    }
    Ok(CounterfactualPrediction {
        labels: labels.to_vec(),
        yhat_pre,
        yhat_post,
        models,
    })
}

fn treated_counterfactual(panel: &PanelMatrix, donors: &[usize], spec: ModelSpec) -> Result<CounterfactualPrediction> {
    counterfactual(
        panel,
        panel.treated(),
        &DonorPool::Union(donors.to_vec()),
        &spec,
        panel.pre_cols(),
    )
}

/// Mean outcome of the `k` donors closest to each treated unit in
/// pre-period Euclidean distance.
pub fn knn_predict(panel: &PanelMatrix, donors: &[usize], k: usize) -> Result<CounterfactualPrediction> {
    treated_counterfactual(panel, donors, ModelSpec::knn(k))
}

pub fn ridge_predict(panel: &PanelMatrix, donors: &[usize], lambda: f64) -> Result<CounterfactualPrediction> {
    treated_counterfactual(panel, donors, ModelSpec::ridge(lambda))
}

pub fn lasso_predict(panel: &PanelMatrix, donors: &[usize], lambda: f64) -> Result<CounterfactualPrediction> {
    treated_counterfactual(panel, donors, ModelSpec::lasso(lambda))
}

/// PCR with hard-threshold rank unless `rank_override` is given.
pub fn pcr_predict(panel: &PanelMatrix, donors: &[usize], rank_override: Option<usize>) -> Result<CounterfactualPrediction> {
    treated_counterfactual(panel, donors, ModelSpec::pcr(rank_override))
}

pub fn pcr_ridge_predict(panel: &PanelMatrix, donors: &[usize], lambda: f64) -> Result<CounterfactualPrediction> {
    treated_counterfactual(panel, donors, ModelSpec::pcr_ridge(lambda))
}

pub fn pcr_lasso_predict(panel: &PanelMatrix, donors: &[usize], lambda: f64) -> Result<CounterfactualPrediction> {
    treated_counterfactual(panel, donors, ModelSpec::pcr_lasso(lambda))
}
