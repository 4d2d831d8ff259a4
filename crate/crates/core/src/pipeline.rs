//! End-to-end estimation: donor filtering, model selection on the
//! pre-period, final fit, effect estimation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::effects::{estimate_effects, placebo_pvalue, sample_split_debias, EffectReport, Inference};
use crate::error::{Error, Result};
use crate::matching::{build_index, match_donors, subsample_donors, AnnParams, DonorFilter};
use crate::panel::{CovariateTable, PanelMatrix};
use crate::regress::{counterfactual, default_grid, CounterfactualPrediction, DonorPool, ModelSpec};
use crate::seed::derive_seed;
use crate::tuning::{make_cv_plan, select_model, CvScheme, Norm, SelectionResult, DEFAULT_ALPHA};

/// Seed streams derived from the master seed.
pub mod streams {
    pub const ANN: u64 = 1;
    pub const SUBSAMPLE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const PLACEBO: u64 = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    /// One donor set, the union of all neighbor lists, shared by every
    /// treated unit.
    #[default]
    Union,
    /// Each treated unit regresses on its own neighbors only.
    #[serde(alias = "per_unit")]
    PerUnit,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "union" => Ok(PoolMode::Union),
            "per-unit" | "per_unit" => Ok(PoolMode::PerUnit),
            other => Err(Error::Parse(format!("unknown pool mode `{other}`"))),
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Union => "union",
            PoolMode::PerUnit => "per-unit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Debias {
    #[default]
    None,
    /// Hold out part of the donors to estimate and remove per-period bias.
    SampleSplit { fraction: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Covariate matching before regression; `false` regresses on every
    /// eligible donor (or a random subsample of them).
    pub two_phase: bool,
    /// Neighbors per treated unit.
    pub k: usize,
    pub ann: AnnParams,
    /// Single-phase random subsample fraction.
    pub subsample: Option<f64>,
    pub pool_mode: PoolMode,
    pub candidates: Vec<ModelSpec>,
    pub cv_scheme: CvScheme,
    pub folds: usize,
    /// Validation window width; `None` uses `max(1, train_end / 8)`.
    pub val_width: Option<usize>,
    pub alpha: f64,
    pub norm: Norm,
    pub inference: Inference,
    pub placebo_draws: usize,
    pub debias: Debias,
    pub seed: u64,
    /// Train on columns `[0, t0 - stale_gap)` only.
    pub stale_gap: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            two_phase: true,
            k: 10,
            ann: AnnParams::default(),
            subsample: None,
            pool_mode: PoolMode::Union,
            candidates: default_grid(),
            cv_scheme: CvScheme::Rolling,
            folds: 3,
            val_width: None,
            alpha: DEFAULT_ALPHA,
            norm: Norm::L1,
            inference: Inference::Ttest,
            placebo_draws: 100,
            debias: Debias::None,
            seed: 0,
            stale_gap: 0,
        }
    }
}

impl PipelineConfig {
    pub fn train_end(&self, t0: usize) -> Result<usize> {
        if self.stale_gap >= t0 {
            return Err(Error::InsufficientColumns(format!(
                "stale gap {} leaves no training columns before t0 = {t0}",
                self.stale_gap
            )));
        }
        Ok(t0 - self.stale_gap)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::ConfigInvalid("k must be >= 1".into()));
        }
        if let Some(f) = self.subsample {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::BadFraction(f));
            }
        }
        if let Debias::SampleSplit { fraction } = self.debias {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::BadFraction(fraction));
            }
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::ConfigInvalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.inference == Inference::Placebo && self.placebo_draws == 0 {
            return Err(Error::ConfigInvalid("placebo draws must be >= 1".into()));
        }
        for c in &self.candidates {
            c.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    /// Phase-one output (two-phase runs only).
    pub filter: Option<DonorFilter>,
    pub pool: DonorPool,
    pub selection: SelectionResult,
    pub prediction: CounterfactualPrediction,
    pub effects: EffectReport,
    pub train_end: usize,
    /// Wall-clock seconds per stage.
    pub timings: Vec<(String, f64)>,
}

impl PipelineResult {
    pub fn model(&self) -> &ModelSpec {
        &self.selection.best
    }
}

/// Donor rows eligible for any donor set: untreated and not excluded.
pub fn eligible_donors(panel: &PanelMatrix, excluded: &BTreeSet<usize>) -> Vec<usize> {
    panel
        .donor_rows()
        .into_iter()
        .filter(|r| !excluded.contains(r))
        .collect()
}

/// Phase one, or the single-phase donor set.
pub fn build_pool(
    panel: &PanelMatrix,
    covariates: Option<&CovariateTable>,
    excluded: &BTreeSet<usize>,
    config: &PipelineConfig,
) -> Result<(DonorPool, Option<DonorFilter>)> {
    let eligible = eligible_donors(panel, excluded);
    if eligible.is_empty() {
        return Err(Error::EmptyDonorSet);
    }
    if !config.two_phase || config.subsample.is_some() {
        let donors = match config.subsample {
            Some(f) => subsample_donors(&eligible, f, derive_seed(config.seed, streams::SUBSAMPLE))?,
            None => eligible,
        };
        return Ok((DonorPool::Union(donors), None));
    }
    let cov = covariates.ok_or_else(|| Error::ConfigInvalid("two-phase matching needs covariates".into()))?;
    cov.check_aligned(panel)?;
    let params = AnnParams {
        seed: derive_seed(config.seed, streams::ANN),
        ..config.ann.clone()
    };
    let index = build_index(cov, &eligible, params)?;
    let mut filter = match_donors(&index, cov, panel.treated(), config.k)?;
    filter.excluded = excluded.clone();
    filter.check(panel.treated())?;
    let pool = match config.pool_mode {
        PoolMode::Union => DonorPool::Union(filter.donor_union.clone()),
        PoolMode::PerUnit => DonorPool::PerUnit(
            panel
                .treated()
                .iter()
                .map(|&t| (t, filter.donors_of(t)))
                .collect::<BTreeMap<_, _>>(),
        ),
    };
    Ok((pool, Some(filter)))
}

/// Model selection on the training window, final fit, and effects.
pub fn estimate_with_pool(
    panel: &PanelMatrix,
    pool: &DonorPool,
    config: &PipelineConfig,
    timings: &mut Vec<(String, f64)>,
) -> Result<(SelectionResult, CounterfactualPrediction, EffectReport)> {
    let train_end = config.train_end(panel.t0())?;
    let val_width = config.val_width.unwrap_or((train_end / 8).max(1));
    let plan = make_cv_plan(train_end, config.cv_scheme, config.folds, val_width)?;

    let clock = Instant::now();
    let selection = select_model(panel, panel.treated(), pool, &config.candidates, &plan, config.alpha, config.norm)?;
    timings.push(("select".into(), clock.elapsed().as_secs_f64()));

    let clock = Instant::now();
    let best = selection.best;
    let prediction = match config.debias {
        Debias::None => counterfactual(panel, panel.treated(), pool, &best, 0..train_end)?,
        Debias::SampleSplit { fraction } => sample_split_debias(
            panel,
            &pool.all_donors(),
            &best,
            fraction,
            derive_seed(config.seed, streams::SPLIT),
            0..train_end,
        )?,
    };
    timings.push(("fit".into(), clock.elapsed().as_secs_f64()));

    let clock = Instant::now();
    let mut effects = estimate_effects(panel, &prediction)?;
    if config.inference == Inference::Placebo {
        let p = placebo_pvalue(
            panel,
            &pool.all_donors(),
            &best,
            effects.tau_hat,
            config.placebo_draws,
            derive_seed(config.seed, streams::PLACEBO),
            0..train_end,
        )?;
        effects = effects.with_p_value(p, Inference::Placebo);
    }
    timings.push(("effects".into(), clock.elapsed().as_secs_f64()));
    Ok((selection, prediction, effects))
}

/// Runs the whole pipeline. Rows in `excluded` (spillover, experimental
/// controls) never enter a donor set.
pub fn run_pipeline(
    panel: &PanelMatrix,
    covariates: Option<&CovariateTable>,
    excluded: &BTreeSet<usize>,
    config: &PipelineConfig,
) -> Result<PipelineResult> {
    config.validate()?;
    if let Some(&r) = excluded.iter().find(|&&r| panel.is_treated(r)) {
        return Err(Error::ExcludedIsTreated(panel.unit_ids()[r].clone()));
    }
    let mut timings = Vec::new();
    let clock = Instant::now();
    let (pool, filter) = build_pool(panel, covariates, excluded, config)?;
    timings.push(("match".into(), clock.elapsed().as_secs_f64()));
    let (selection, prediction, effects) = estimate_with_pool(panel, &pool, config, &mut timings)?;
    Ok(PipelineResult {
        filter,
        pool,
        selection,
        prediction,
        effects,
        train_end: config.train_end(panel.t0())?,
        timings,
    })
}
