//! Prediction-quality metrics and hyperparameter selection by temporal
//! cross-validation inside the pre-treatment window.
//!
//! The selection objective is `relative_error + alpha * |bias|`, where
//! `bias = mean(actual - prediction)`. With `alpha = 0` it ranks by relative
//! error alone.

use std::cmp::Ordering;
use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelMatrix;
use crate::regress::{fit_pool, predict_models, DonorPool, ModelSpec};

pub const DEFAULT_ALPHA: f64 = 20.0;
pub const ALPHA_SWEEP: [f64; 6] = [0.0, 1.0, 5.0, 10.0, 20.0, 50.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    /// Sum of absolute entries.
    #[default]
    L1,
    Frobenius,
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Norm::L1),
            "frobenius" => Ok(Norm::Frobenius),
            other => Err(Error::Parse(format!("unknown norm `{other}`"))),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "l1",
            Norm::Frobenius => "frobenius",
        })
    }
}

fn matrix_norm<'a>(values: impl Iterator<Item = &'a f64>, norm: Norm) -> f64 {
    match norm {
        Norm::L1 => values.map(|v| v.abs()).sum(),
        Norm::Frobenius => values.map(|v| v * v).sum::<f64>().sqrt(),
    }
}

fn check_shapes(prediction: &DMatrix<f64>, actual: &DMatrix<f64>) -> Result<()> {
    if prediction.shape() != actual.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs actual {:?}",
            prediction.shape(),
            actual.shape()
        )));
    }
    Ok(())
}

/// `|P - A| / |A|` in the chosen entrywise norm.
pub fn relative_error(prediction: &DMatrix<f64>, actual: &DMatrix<f64>, norm: Norm) -> Result<f64> {
    check_shapes(prediction, actual)?;
    let denom = matrix_norm(actual.iter(), norm);
    if denom == 0.0 {
        return Err(Error::ZeroActualNorm);
    }
    let diff = actual - prediction;
    Ok(matrix_norm(diff.iter(), norm) / denom)
}

/// Mean of `actual - prediction` over all entries.
pub fn bias(prediction: &DMatrix<f64>, actual: &DMatrix<f64>) -> f64 {
    assert_eq!(prediction.shape(), actual.shape(), "bias: shape mismatch");
    let n = actual.len() as f64;
    actual.iter().zip(prediction.iter()).map(|(a, p)| a - p).sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub relative_error: f64,
    pub bias: f64,
    /// `relative_error + alpha * |bias|` for a single validation window;
    /// the mean of those per-fold values for a fold average.
    pub combined: f64,
    pub alpha: f64,
    pub norm: Norm,
}

impl LossReport {
    pub fn new(relative_error: f64, bias: f64, alpha: f64, norm: Norm) -> Self {
        Self {
            relative_error,
            bias,
            combined: relative_error + alpha * bias.abs(),
            alpha,
            norm,
        }
    }
}

pub fn debiased_loss(prediction: &DMatrix<f64>, actual: &DMatrix<f64>, alpha: f64, norm: Norm) -> Result<LossReport> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidSpec(format!("alpha must be >= 0, got {alpha}")));
    }
    let rel = relative_error(prediction, actual, norm)?;
    Ok(LossReport::new(rel, bias(prediction, actual), alpha, norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvScheme {
    /// One fold validating the last `val_width` pre-period columns.
    #[default]
    #[serde(alias = "holdout")]
    HoldoutTail,
    /// `folds` consecutive tail windows, each trained on everything before it.
    Rolling,
}

impl std::str::FromStr for CvScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holdout" | "holdout_tail" => Ok(CvScheme::HoldoutTail),
            "rolling" => Ok(CvScheme::Rolling),
            other => Err(Error::Parse(format!("unknown cv scheme `{other}`"))),
        }
    }
}

impl fmt::Display for CvScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CvScheme::HoldoutTail => "holdout",
            CvScheme::Rolling => "rolling",
        })
    }
}

/// Column ranges are 0-based and half-open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Range<usize>,
    pub validate: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub folds: Vec<Fold>,
    pub scheme: CvScheme,
}

impl CvPlan {
    /// Last column touched by any fold (exclusive).
    pub fn max_col(&self) -> usize {
        self.folds.iter().map(|f| f.validate.end.max(f.train.end)).max().unwrap_or(0)
    }
}

/// Temporal folds inside the first `t0` columns.
pub fn make_cv_plan(t0: usize, scheme: CvScheme, folds: usize, val_width: usize) -> Result<CvPlan> {
    if folds == 0 || val_width == 0 {
        return Err(Error::InvalidSpec("folds and val_width must be >= 1".into()));
    }
    let n_windows = match scheme {
        CvScheme::HoldoutTail => 1,
        CvScheme::Rolling => folds,
    };
    let held = n_windows * val_width;
    if held >= t0 {
        return Err(Error::InsufficientColumns(format!(
            "{n_windows} validation window(s) of width {val_width} need more than {t0} pre-period columns"
        )));
    }
    let folds = (0..n_windows)
        .map(|f| {
            let start = t0 - (n_windows - f) * val_width;
            Fold {
                train: 0..start,
                validate: start..start + val_width,
            }
        })
        .collect();
    Ok(CvPlan { folds, scheme })
}

/// Predictions and actuals of one candidate on one fold.
#[derive(Debug, Clone)]
pub struct FoldEval {
    pub fold: Fold,
    pub prediction: DMatrix<f64>,
    pub actual: DMatrix<f64>,
}

/// Fits `spec` on each fold's training columns and predicts its
/// validation columns for `labels`.
pub fn evaluate_candidate(
    panel: &PanelMatrix,
    labels: &[usize],
    pool: &DonorPool,
    spec: &ModelSpec,
    plan: &CvPlan,
) -> Result<Vec<FoldEval>> {
    plan.folds
        .iter()
        .map(|fold| {
            let models = fit_pool(panel, labels, pool, spec, fold.train.clone())?;
            let prediction = predict_models(&models, panel, fold.validate.clone());
            if prediction.iter().any(|v| !v.is_finite()) {
                return Err(Error::SingularSystem(format!("{spec} produced non-finite predictions")));
            }
            Ok(FoldEval {
                fold: fold.clone(),
                prediction,
                actual: panel.block(labels, fold.validate.clone()),
            })
        })
        .collect()
}

/// Fold-averaged scores. Each fold is scored with [`debiased_loss`] and the
/// reports are averaged component-wise, so `combined` is the mean of the
/// per-fold losses and a bias that flips sign between folds is still
/// penalized. With one fold, or fold biases of one sign,
/// `combined = relative_error + alpha * |bias|` holds exactly.
pub fn score_folds(evals: &[FoldEval], alpha: f64, norm: Norm) -> Result<LossReport> {
    let (mut rel, mut b, mut combined) = (0.0, 0.0, 0.0);
    for e in evals {
        let fold = debiased_loss(&e.prediction, &e.actual, alpha, norm)?;
        rel += fold.relative_error;
        b += fold.bias;
        combined += fold.combined;
    }
    let k = evals.len() as f64;
    Ok(LossReport {
        relative_error: rel / k,
        bias: b / k,
        combined: combined / k,
        alpha,
        norm,
    })
}

#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub best: ModelSpec,
    /// Sorted best first.
    pub leaderboard: Vec<(ModelSpec, LossReport)>,
    pub cv_plan: CvPlan,
    pub failures: Vec<(ModelSpec, String)>,
}

fn rank_entries(a: &(ModelSpec, LossReport), b: &(ModelSpec, LossReport)) -> Ordering {
    a.1.combined
        .total_cmp(&b.1.combined)
        .then(a.1.bias.abs().total_cmp(&b.1.bias.abs()))
        .then(a.0.simplicity_rank().cmp(&b.0.simplicity_rank()))
        .then(a.0.hyper_value().total_cmp(&b.0.hyper_value()))
}

/// Scores every candidate on every fold (in parallel) and ranks them by
/// combined loss; ties go to lower |bias|, then the simpler method, then
/// the smaller hyperparameter.
pub fn select_model(
    panel: &PanelMatrix,
    labels: &[usize],
    pool: &DonorPool,
    candidates: &[ModelSpec],
    plan: &CvPlan,
    alpha: f64,
    norm: Norm,
) -> Result<SelectionResult> {
    if candidates.is_empty() {
        return Err(Error::InvalidSpec("no candidate models".into()));
    }
    if plan.max_col() > panel.t0() {
        return Err(Error::InsufficientColumns(format!(
            "cv plan reaches column {} beyond the pre-period ({})",
            plan.max_col(),
            panel.t0()
        )));
    }
    let scored: Vec<std::result::Result<(ModelSpec, LossReport), (ModelSpec, String)>> = candidates
        .par_iter()
        .map(|spec| {
            evaluate_candidate(panel, labels, pool, spec, plan)
                .and_then(|evals| score_folds(&evals, alpha, norm))
                .map(|loss| (*spec, loss))
                .map_err(|e| (*spec, e.to_string()))
        })
        .collect();
    let mut leaderboard = Vec::new();
    let mut failures = Vec::new();
    for s in scored {
        match s {
            Ok(entry) => leaderboard.push(entry),
            Err(f) => failures.push(f),
        }
    }
    if leaderboard.is_empty() {
        let last = failures.last().map(|f| f.1.clone()).unwrap_or_default();
        return Err(Error::AllCandidatesFailed(last));
    }
    leaderboard.sort_by(rank_entries);
    Ok(SelectionResult {
        best: leaderboard[0].0,
        leaderboard,
        cv_plan: plan.clone(),
        failures,
    })
}
