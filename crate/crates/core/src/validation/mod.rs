//! Checking synthetic counterfactuals against experiments that do have a
//! control group.
//!
//! * ground truth: treated vs control, the experiment's own answer;
//! * A/B-ST: treated vs their synthetic counterfactual, which should agree
//!   with the ground truth in direction and significance;
//! * A/A-ST: control vs the treated units' synthetic counterfactual, which
//!   should show no effect.
//!
//! The control group never enters a donor set, so every check is done as if
//! the experiment had no control.

mod sim;

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use sim::{simulate_panel, SimConfig, SimTruth};

use crate::effects::{estimate_effects, welch_test, EffectReport, Inference};
use crate::error::{Error, Result};
use crate::panel::{CovariateTable, PanelMatrix};
use crate::pipeline::{run_pipeline, PipelineConfig, PipelineResult};
use crate::regress::{CounterfactualPrediction, ModelSpec};

#[derive(Debug, Clone)]
pub struct ExperimentBundle {
    pub panel: PanelMatrix,
    pub covariates: CovariateTable,
    /// Sorted control rows.
    pub control: Vec<usize>,
    /// Extra rows barred from donor sets (e.g. spillover).
    pub spillover: BTreeSet<usize>,
    pub truth: Option<SimTruth>,
}

impl ExperimentBundle {
    pub fn new(
        panel: PanelMatrix,
        covariates: CovariateTable,
        mut control: Vec<usize>,
        truth: Option<SimTruth>,
    ) -> Result<Self> {
        covariates.check_aligned(&panel)?;
        control.sort_unstable();
        control.dedup();
        for &c in &control {
            if c >= panel.n_units() {
                return Err(Error::InvalidPanel(format!("control row {c} out of range")));
            }
            if panel.is_treated(c) {
                return Err(Error::InvalidPanel(format!(
                    "unit {} is both treated and control",
                    panel.unit_ids()[c]
                )));
            }
        }
        Ok(Self {
            panel,
            covariates,
            control,
            spillover: BTreeSet::new(),
            truth,
        })
    }

    pub fn with_spillover(mut self, rows: BTreeSet<usize>) -> Self {
        self.spillover = rows;
        self
    }

    /// Rows that may never be donors: control plus spillover.
    pub fn donor_exclusions(&self) -> BTreeSet<usize> {
        self.control.iter().copied().chain(self.spillover.iter().copied()).collect()
    }

    fn post_means(&self, rows: &[usize]) -> Vec<f64> {
        let block = self.panel.block(rows, self.panel.post_cols());
        block.row_iter().map(|r| r.mean()).collect()
    }

    fn control_post_mean_path(&self) -> Vec<f64> {
        let block = self.panel.block(&self.control, self.panel.post_cols());
        block.column_iter().map(|c| c.mean()).collect()
    }
}

/// Treated minus control over the post period: `hte[i, t]` is treated unit
/// i's outcome minus the control mean at t, and inference is a Welch test
/// on unit-level post-period means.
pub fn ab_ground_truth(bundle: &ExperimentBundle) -> Result<EffectReport> {
    if bundle.control.is_empty() {
        return Err(Error::EmptyControl);
    }
    let panel = &bundle.panel;
    let path = bundle.control_post_mean_path();
    let mut hte = panel.block(panel.treated(), panel.post_cols());
    for (j, mut col) in hte.column_iter_mut().enumerate() {
        col.add_scalar_mut(-path[j]);
    }
    let (_, se, p) = welch_test(&bundle.post_means(panel.treated()), &bundle.post_means(&bundle.control))?;
    Ok(EffectReport::from_parts(hte, panel.treated().to_vec(), se, p, Inference::Welch))
}

/// Direction and significance agree: both significant with the same sign,
/// or both not significant.
pub fn ab_st_pass(ground_truth: &EffectReport, estimate: &EffectReport) -> bool {
    if ground_truth.significant != estimate.significant {
        return false;
    }
    !ground_truth.significant || ground_truth.tau_hat.signum() == estimate.tau_hat.signum()
}

/// The true effect is zero, so any significant difference fails.
pub fn aa_st_pass(aa: &EffectReport) -> bool {
    !aa.significant
}

pub fn ab_st_validate(bundle: &ExperimentBundle, pred: &CounterfactualPrediction) -> Result<(EffectReport, bool)> {
    let gt = ab_ground_truth(bundle)?;
    let est = estimate_effects(&bundle.panel, pred)?;
    let pass = ab_st_pass(&gt, &est);
    Ok((est, pass))
}

/// Control outcomes minus the treated units' counterfactuals, compared at
/// the group-mean level with a Welch test on unit-level post means.
pub fn aa_st_validate(bundle: &ExperimentBundle, pred: &CounterfactualPrediction) -> Result<(EffectReport, bool)> {
    if bundle.control.is_empty() {
        return Err(Error::EmptyControl);
    }
    let panel = &bundle.panel;
    if pred.labels != panel.treated() || pred.yhat_post.shape() != (panel.n_treated(), panel.n_periods() - panel.t0()) {
        return Err(Error::ShapeMismatch("prediction does not cover the treated post block".into()));
    }
    let cf_path: Vec<f64> = pred.yhat_post.column_iter().map(|c| c.mean()).collect();
    let mut hte: DMatrix<f64> = panel.block(&bundle.control, panel.post_cols());
    for (j, mut col) in hte.column_iter_mut().enumerate() {
        col.add_scalar_mut(-cf_path[j]);
    }
    let cf_means: Vec<f64> = pred.yhat_post.row_iter().map(|r| r.mean()).collect();
    let (_, se, p) = welch_test(&bundle.post_means(&bundle.control), &cf_means)?;
    let report = EffectReport::from_parts(hte, bundle.control.clone(), se, p, Inference::Welch);
    let pass = aa_st_pass(&report);
    Ok((report, pass))
}

#[derive(Debug, Clone)]
pub struct ValidationVerdict {
    pub ab_ground_truth: EffectReport,
    pub ab_st: EffectReport,
    pub aa_st: EffectReport,
    pub ab_st_pass: bool,
    pub aa_st_pass: bool,
    pub model: Option<ModelSpec>,
}

impl ValidationVerdict {
    pub fn from_reports(
        ab_ground_truth: EffectReport,
        ab_st: EffectReport,
        aa_st: EffectReport,
        model: Option<ModelSpec>,
    ) -> Self {
        Self {
            ab_st_pass: ab_st_pass(&ab_ground_truth, &ab_st),
            aa_st_pass: aa_st_pass(&aa_st),
            ab_ground_truth,
            ab_st,
            aa_st,
            model,
        }
    }

    pub fn all_pass(&self) -> bool {
        self.ab_st_pass && self.aa_st_pass
    }

    pub fn row(&self, experiment: &str) -> VerdictRow {
        let cell = |r: &EffectReport| EffectCell {
            tau: r.tau_hat,
            p_value: r.p_value,
            significant: r.significant,
        };
        VerdictRow {
            experiment: experiment.to_string(),
            ab: cell(&self.ab_ground_truth),
            ab_st: cell(&self.ab_st),
            aa_st: cell(&self.aa_st),
            model: self.model.map(|m| m.to_string()).unwrap_or_default(),
            ab_st_pass: self.ab_st_pass,
            aa_st_pass: self.aa_st_pass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectCell {
    pub tau: f64,
    pub p_value: f64,
    pub significant: bool,
}

impl EffectCell {
    /// Two decimals with a star when significant, e.g. `0.31*`.
    pub fn display(&self) -> String {
        format!("{:.2}{}", self.tau, if self.significant { "*" } else { "" })
    }
}

/// One line of a verdict table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub experiment: String,
    pub ab: EffectCell,
    pub ab_st: EffectCell,
    pub aa_st: EffectCell,
    pub model: String,
    pub ab_st_pass: bool,
    pub aa_st_pass: bool,
}

/// Mean of `Y(0) - prediction` over the treated post block, using the
/// generator's constant effect to recover `Y(0)`.
pub fn truth_bias(bundle: &ExperimentBundle, pred: &CounterfactualPrediction) -> Option<f64> {
    let tau = bundle.truth.as_ref()?.tau_true;
    let observed = bundle.panel.block(bundle.panel.treated(), bundle.panel.post_cols());
    Some((observed - &pred.yhat_post).mean() - tau)
}

#[derive(Debug, Clone)]
pub struct ValidationRun {
    pub verdict: ValidationVerdict,
    pub pipeline: PipelineResult,
    pub truth_bias: Option<f64>,
}

impl ValidationRun {
    /// Post-period bias: against the simulated truth when known, otherwise
    /// the A/A-ST difference.
    pub fn bias(&self) -> f64 {
        self.truth_bias.unwrap_or(self.verdict.aa_st.tau_hat)
    }
}

/// Runs the pipeline as if there were no control group and checks it
/// against the control.
pub fn validate(bundle: &ExperimentBundle, config: &PipelineConfig) -> Result<ValidationRun> {
    if bundle.control.is_empty() {
        return Err(Error::EmptyControl);
    }
    let excluded = bundle.donor_exclusions();
    let pipeline = run_pipeline(&bundle.panel, Some(&bundle.covariates), &excluded, config)?;
    debug_assert!(pipeline.pool.all_donors().iter().all(|d| !excluded.contains(d)));
    let gt = ab_ground_truth(bundle)?;
    let (aa, _) = aa_st_validate(bundle, &pipeline.prediction)?;
    let verdict = ValidationVerdict::from_reports(gt, pipeline.effects.clone(), aa, Some(pipeline.selection.best));
    Ok(ValidationRun {
        truth_bias: truth_bias(bundle, &pipeline.prediction),
        verdict,
        pipeline,
    })
}

#[derive(Debug, Clone)]
pub struct StalenessReport {
    pub fresh: ValidationRun,
    pub stale: ValidationRun,
}

/// Validates twice: training through t0, and training ending `stale_gap`
/// periods earlier.
pub fn staleness_study(bundle: &ExperimentBundle, stale_gap: usize, config: &PipelineConfig) -> Result<StalenessReport> {
    if stale_gap == 0 {
        return Err(Error::ConfigInvalid("stale gap must be >= 1".into()));
    }
    let fresh = validate(bundle, &PipelineConfig { stale_gap: 0, ..config.clone() })?;
    let stale = validate(bundle, &PipelineConfig { stale_gap, ..config.clone() })?;
    Ok(StalenessReport { fresh, stale })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(y: DMatrix<f64>, t0: usize, treated: Vec<usize>, control: Vec<usize>) -> ExperimentBundle {
        let n = y.nrows();
        let ids: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
        let periods = (0..y.ncols()).map(|t| format!("t{t}")).collect();
        let panel = PanelMatrix::new(ids.clone(), periods, y, t0, treated).unwrap();
        let cov = CovariateTable::new(ids, vec!["x".into()], DMatrix::from_fn(n, 1, |i, _| i as f64)).unwrap();
        ExperimentBundle::new(panel, cov, control, None).unwrap()
    }

    #[test]
    fn constant_shift_ground_truth() {
        let y = DMatrix::from_fn(6, 4, |i, t| {
            let base = (t * 3 % 5) as f64;
            if i < 2 && t >= 2 {
                base + 2.0
            } else {
                base
            }
        });
        let b = bundle(y, 2, vec![0, 1], vec![2, 3]);
        let gt = ab_ground_truth(&b).unwrap();
        assert!((gt.tau_hat - 2.0).abs() < 1e-12);
        assert_eq!(gt.p_value, 0.0);
    }

    #[test]
    fn empty_control_and_overlap() {
        let y = DMatrix::from_fn(5, 4, |i, t| (i + t) as f64);
        let b = bundle(y.clone(), 2, vec![0, 1], vec![]);
        assert!(matches!(ab_ground_truth(&b), Err(Error::EmptyControl)));
        let ids: Vec<String> = (0..5).map(|i| format!("u{i}")).collect();
        let panel = PanelMatrix::new(ids.clone(), (0..4).map(|t| t.to_string()).collect(), y, 2, vec![0, 1]).unwrap();
        let cov = CovariateTable::new(ids, vec!["x".into()], DMatrix::zeros(5, 1)).unwrap();
        assert!(ExperimentBundle::new(panel, cov, vec![1, 2], None).is_err());
    }

    #[test]
    fn verdict_rules() {
        let s = EffectReport::scalar;
        assert!(!ab_st_pass(&s(-0.14, 0.47), &s(-0.42, 0.01)));
        assert!(ab_st_pass(&s(-0.14, 0.47), &s(-0.28, 0.10)));
        assert!(ab_st_pass(&s(0.17, 0.01), &s(0.31, 0.01)));
        assert!(!ab_st_pass(&s(0.17, 0.01), &s(-0.31, 0.01)));
        assert!(!ab_st_pass(&s(0.17, 0.01), &s(0.31, 0.2)));
        assert!(aa_st_pass(&s(0.13, 0.47)));
        assert!(!aa_st_pass(&s(-0.37, 0.01)));
    }

    #[test]
    fn aa_on_perfect_counterfactual() {
        // control and treated share the same path, predictions equal it
        let y = DMatrix::from_fn(6, 5, |i, t| (t as f64).sin() + 0.01 * i as f64);
        let b = bundle(y.clone(), 3, vec![0, 1], vec![2, 3]);
        let post = b.panel.block(&[0, 1], b.panel.post_cols());
        let pred = CounterfactualPrediction {
            labels: vec![0, 1],
            yhat_pre: DMatrix::zeros(2, 3),
            yhat_post: post,
            models: vec![],
        };
        let (aa, pass) = aa_st_validate(&b, &pred).unwrap();
        assert!((aa.tau_hat - 0.02).abs() < 1e-12);
        assert!(aa.p_value > 0.0);
        assert_eq!(pass, aa_st_pass(&aa));
    }

    #[test]
    fn cell_display() {
        let c = EffectCell {
            tau: -0.374,
            p_value: 0.01,
            significant: true,
        };
        assert_eq!(c.display(), "-0.37*");
    }
}
