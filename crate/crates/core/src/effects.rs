//! Treatment effects from counterfactual predictions, with unit-level
//! inference.
//!
//! `hte[i, t] = observed[i, t] - predicted[i, t]` over the treated post
//! block, `tau_hat` is its mean, and each treated unit contributes one
//! observation (its mean effect) to the t-test, since a unit's outcomes are
//! dependent over time.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::panel::PanelMatrix;
use crate::regress::{counterfactual, CounterfactualPrediction, DonorPool, ModelSpec};
use crate::seed::derive_seed;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Inference {
    /// One-sample t-test on per-unit mean effects.
    #[default]
    Ttest,
    /// Two-sample Welch t-test on per-unit means of two groups.
    Welch,
    /// Rank of |tau| among pipeline re-runs on pseudo-treated donors.
    Placebo,
}

impl std::str::FromStr for Inference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ttest" => Ok(Inference::Ttest),
            "welch" => Ok(Inference::Welch),
            "placebo" => Ok(Inference::Placebo),
            other => Err(Error::Parse(format!("unknown inference mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Inference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Inference::Ttest => "ttest",
            Inference::Welch => "welch",
            Inference::Placebo => "placebo",
        })
    }
}

#[derive(Debug, Clone)]
pub struct EffectReport {
    pub tau_hat: f64,
    pub se: f64,
    pub p_value: f64,
    /// `p_value < 0.05`
    pub significant: bool,
    /// units × post periods
    pub hte: DMatrix<f64>,
    pub per_unit_effects: Vec<f64>,
    /// Panel rows of the `hte` rows.
    pub units: Vec<usize>,
    pub inference: Inference,
}

impl EffectReport {
    /// Assembles a report; `tau_hat` and per-unit effects are derived from
    /// `hte`.
    pub fn from_parts(hte: DMatrix<f64>, units: Vec<usize>, se: f64, p_value: f64, inference: Inference) -> Self {
        let per_unit_effects: Vec<f64> = hte.row_iter().map(|r| r.mean()).collect();
        let tau_hat = hte.mean();
        Self {
            tau_hat,
            se,
            p_value,
            significant: p_value < SIGNIFICANCE_LEVEL,
            hte,
            per_unit_effects,
            units,
            inference,
        }
    }

    /// A scalar-only report, e.g. for verdict fixtures.
    pub fn scalar(tau_hat: f64, p_value: f64) -> Self {
        Self {
            tau_hat,
            se: 0.0,
            p_value,
            significant: p_value < SIGNIFICANCE_LEVEL,
            hte: DMatrix::from_element(1, 1, tau_hat),
            per_unit_effects: vec![tau_hat],
            units: vec![],
            inference: Inference::Ttest,
        }
    }

    /// Replaces the p-value (e.g. with a placebo p-value).
    pub fn with_p_value(mut self, p_value: f64, inference: Inference) -> Self {
        self.p_value = p_value;
        self.significant = p_value < SIGNIFICANCE_LEVEL;
        self.inference = inference;
        self
    }
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn two_sided_t(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Degenerate-variance rule: with zero standard error the p-value is 1 for
/// a zero estimate and 0 otherwise.
fn degenerate_p(estimate: f64) -> f64 {
    if estimate == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Two-sided one-sample t-test of the per-unit effects against zero.
/// Returns `(se, p_value)`.
pub fn infer_pvalue(per_unit_effects: &[f64]) -> Result<(f64, f64)> {
    let n = per_unit_effects.len();
    if n < 2 {
        return Err(Error::TooFewUnits(n));
    }
    let (mean, sd) = mean_sd(per_unit_effects);
    let se = sd / (n as f64).sqrt();
    if se == 0.0 {
        return Ok((0.0, degenerate_p(mean)));
    }
    Ok((se, two_sided_t(mean / se, (n - 1) as f64)))
}

/// Welch two-sample t-test of `mean(a) - mean(b)`. Returns
/// `(difference, se, p_value)`.
pub fn welch_test(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::TooFewUnits(a.len().min(b.len())));
    }
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let (va, vb) = (sa * sa / a.len() as f64, sb * sb / b.len() as f64);
    let diff = ma - mb;
    let se = (va + vb).sqrt();
    if se == 0.0 {
        return Ok((diff, 0.0, degenerate_p(diff)));
    }
    let df = (va + vb).powi(2)
        / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    Ok((diff, se, two_sided_t(diff / se, df)))
}

/// Effects of the treated units given their counterfactual predictions.
pub fn estimate_effects(panel: &PanelMatrix, pred: &CounterfactualPrediction) -> Result<EffectReport> {
    let expected = (panel.n_treated(), panel.n_periods() - panel.t0());
    if pred.labels != panel.treated() || pred.yhat_post.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} for {} labels, treated post block is {:?}",
            pred.yhat_post.shape(),
            pred.labels.len(),
            expected
        )));
    }
    let observed = panel.block(panel.treated(), panel.post_cols());
    let hte = observed - &pred.yhat_post;
    let per_unit: Vec<f64> = hte.row_iter().map(|r| r.mean()).collect();
    let (se, p) = infer_pvalue(&per_unit)?;
    Ok(EffectReport::from_parts(hte, panel.treated().to_vec(), se, p, Inference::Ttest))
}

/// Placebo p-value: re-runs the prediction with `draws` random donor
/// subsets of size n posing as treated units (fitted on the remaining
/// donors) and returns `(1 + #{|tau_placebo| >= |tau_hat|}) / (draws + 1)`.
#[allow(clippy::too_many_arguments)]
pub fn placebo_pvalue(
    panel: &PanelMatrix,
    donors: &[usize],
    model: &ModelSpec,
    tau_hat: f64,
    draws: usize,
    seed: u64,
    train: Range<usize>,
) -> Result<f64> {
    let n = panel.n_treated();
    if draws == 0 {
        return Err(Error::InvalidSpec("placebo draws must be >= 1".into()));
    }
    if donors.len() <= n {
        return Err(Error::InsufficientDonors {
            needed: n + 1,
            available: donors.len(),
        });
    }
    let post = panel.post_cols();
    let taus: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, d as u64));
            let mut shuffled = donors.to_vec();
            shuffled.shuffle(&mut rng);
            let mut fake = shuffled[..n].to_vec();
            let mut rest = shuffled[n..].to_vec();
            fake.sort_unstable();
            rest.sort_unstable();
            let pred = counterfactual(panel, &fake, &DonorPool::Union(rest), model, train.clone())?;
            let observed = panel.block(&fake, post.clone());
            Ok((observed - pred.yhat_post).mean())
        })
        .collect::<Result<Vec<f64>>>()?;
    let exceed = taus.iter().filter(|t| t.abs() >= tau_hat.abs()).count();
    Ok((exceed + 1) as f64 / (draws + 1) as f64)
}

/// Per-column mean of `actual - predicted` over hold-out units.
pub fn column_bias_correction(holdout_actual: &DMatrix<f64>, holdout_pred: &DMatrix<f64>) -> Vec<f64> {
    let diff = holdout_actual - holdout_pred;
    diff.column_iter().map(|c| c.mean()).collect()
}

pub fn apply_column_correction(pred: &mut DMatrix<f64>, correction: &[f64]) {
    for (j, mut col) in pred.column_iter_mut().enumerate() {
        col.add_scalar_mut(correction[j]);
    }
}

/// Sample-splitting debias: donors are shuffled into a training part A
/// (`split_fraction` of them) and a hold-out part B. The model is fitted on
/// A for the treated units and for the B units; the per-period mean
/// residual on B's post period is added to the treated post predictions.
#[allow(clippy::too_many_arguments)]
pub fn sample_split_debias(
    panel: &PanelMatrix,
    donors: &[usize],
    model: &ModelSpec,
    split_fraction: f64,
    seed: u64,
    train: Range<usize>,
) -> Result<CounterfactualPrediction> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::BadFraction(split_fraction));
    }
    let mut shuffled = donors.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (split_fraction * shuffled.len() as f64).round() as usize;
    if cut == 0 || cut >= shuffled.len() {
        return Err(Error::EmptySplit);
    }
    let mut train_donors = shuffled[..cut].to_vec();
    let mut holdout = shuffled[cut..].to_vec();
    train_donors.sort_unstable();
    holdout.sort_unstable();
    let pool = DonorPool::Union(train_donors);
    let mut treated = counterfactual(panel, panel.treated(), &pool, model, train.clone())?;
    let hold = counterfactual(panel, &holdout, &pool, model, train)?;
    let actual = panel.block(&holdout, panel.post_cols());
    let correction = column_bias_correction(&actual, &hold.yhat_post);
    apply_column_correction(&mut treated.yhat_post, &correction);
    Ok(treated)
}
