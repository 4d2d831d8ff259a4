//! Run settings: defaults, overridden by a config file, overridden by
//! flags. Every resolved value remembers where it came from.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use synthpanel::effects::Inference;
use synthpanel::matching::{AnnParams, Metric};
use synthpanel::pipeline::{Debias, PipelineConfig, PoolMode};
use synthpanel::regress::{lambda_grid, Center, ModelSpec, KNN_GRID};
use synthpanel::tuning::{CvScheme, Norm, DEFAULT_ALPHA};
use synthpanel::validation::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,

    pub outcomes: Option<PathBuf>,
    pub treated: Option<PathBuf>,
    pub t0: Option<usize>,
    pub covariates: Option<PathBuf>,
    pub control: Option<PathBuf>,
    pub exclude_file: Option<PathBuf>,
    pub experiment: String,

    pub k: usize,
    pub trees: usize,
    pub leaf_size: usize,
    pub metric: Metric,
    pub exact: bool,
    pub search_k: Option<usize>,
    pub subsample: Option<f64>,
    pub single_phase: bool,
    pub pool_mode: PoolMode,

    pub center: Center,
    pub intercept: bool,
    pub alpha: f64,
    pub norm: Norm,
    pub cv: CvScheme,
    pub folds: usize,
    pub val_width: Option<usize>,
    pub grid: Option<PathBuf>,

    pub inference: Inference,
    pub placebo_draws: usize,
    pub split_fraction: Option<f64>,
    pub stale_gap: usize,

    pub units: Vec<String>,
    pub top: usize,

    pub n_units: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub n_periods: usize,
    pub n_covariates: usize,
    pub latent_rank: usize,
    pub factor_scale: f64,
    pub level_scale: f64,
    pub noise_scale: f64,
    pub tau_true: f64,
    pub heterogeneity: f64,
    pub drift: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let ann = AnnParams::default();
        let pipe = PipelineConfig::default();
        let sim = SimConfig::default();
        Self {
            seed: 0,
            threads: None,
            out: PathBuf::from("out"),
            outcomes: None,
            treated: None,
            t0: None,
            covariates: None,
            control: None,
            exclude_file: None,
            experiment: "experiment".into(),
            k: pipe.k,
            trees: ann.tree_count,
            leaf_size: ann.leaf_size,
            metric: ann.metric,
            exact: ann.exact,
            search_k: ann.search_k,
            subsample: None,
            single_phase: false,
            pool_mode: pipe.pool_mode,
            center: Center::None,
            intercept: true,
            alpha: DEFAULT_ALPHA,
            norm: pipe.norm,
            cv: pipe.cv_scheme,
            folds: pipe.folds,
            val_width: pipe.val_width,
            grid: None,
            inference: pipe.inference,
            placebo_draws: pipe.placebo_draws,
            split_fraction: None,
            stale_gap: 0,
            units: Vec::new(),
            top: 5,
            n_units: sim.n_units,
            n_treated: sim.n_treated,
            n_control: sim.n_control,
            n_periods: sim.n_periods,
            n_covariates: sim.n_covariates,
            latent_rank: sim.latent_rank,
            factor_scale: sim.factor_scale,
            level_scale: sim.level_scale,
            noise_scale: sim.noise_scale,
            tau_true: sim.tau_true,
            heterogeneity: sim.heterogeneity,
            drift: sim.drift,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    Config,
    Flag,
}

/// Settings plus the origin of each key.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub settings: Settings,
    pub sources: BTreeMap<String, Source>,
}

/// Reads a TOML or JSON config file into a flat key map. A run manifest is
/// accepted too: its `config` object is used.
pub fn read_config(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing JSON config {}", path.display()))?
    } else {
        let t: toml::Table = toml::from_str(&text).with_context(|| format!("parsing TOML config {}", path.display()))?;
        serde_json::to_value(t)?
    };
    let Value::Object(mut map) = value else {
        bail!("config {} is not a table", path.display());
    };
    if let Some(Value::Object(inner)) = map.remove("config") {
        return Ok(inner);
    }
    // relative paths inside a config file are relative to the file
    let base = path.parent().unwrap_or(Path::new(""));
    for key in ["outcomes", "treated", "covariates", "control", "exclude_file", "grid"] {
        if let Some(Value::String(p)) = map.get(key) {
            let p = Path::new(p);
            if p.is_relative() && !base.as_os_str().is_empty() {
                map.insert(key.into(), Value::String(base.join(p).to_string_lossy().into_owned()));
            }
        }
    }
    Ok(map)
}

/// Layers config-file values and flag values over the defaults.
pub fn resolve(config: Map<String, Value>, flags: Map<String, Value>) -> Result<Resolved> {
    let Value::Object(mut merged) = serde_json::to_value(Settings::default())? else {
        unreachable!("settings serialize to an object");
    };
    let mut sources: BTreeMap<String, Source> = merged.keys().map(|k| (k.clone(), Source::Default)).collect();
    for (layer, source) in [(config, Source::Config), (flags, Source::Flag)] {
        for (key, value) in layer {
            if !merged.contains_key(&key) {
                bail!("unknown setting `{key}`");
            }
            merged.insert(key.clone(), value);
            sources.insert(key, source);
        }
    }
    let settings: Settings = serde_json::from_value(Value::Object(merged)).context("invalid settings")?;
    Ok(Resolved { settings, sources })
}

/// Candidate-grid overrides read from a `--grid` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub methods: Option<Vec<String>>,
    pub knn_k: Option<Vec<usize>>,
    /// Shared by every penalized method unless a method-specific list is set.
    pub lambda: Option<Vec<f64>>,
    pub ridge_lambda: Option<Vec<f64>>,
    pub lasso_lambda: Option<Vec<f64>>,
    pub pcr_ridge_lambda: Option<Vec<f64>>,
    pub pcr_lasso_lambda: Option<Vec<f64>>,
    /// Fixed PCR ranks; 0 means automatic.
    pub pcr_rank: Option<Vec<usize>>,
}

pub const ALL_METHODS: [&str; 6] = ["knn", "pcr", "ridge", "pcr_ridge", "pcr_lasso", "lasso"];

impl GridFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading grid {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing grid {}", path.display()))
    }

    pub fn candidates(&self, intercept: bool, center: Center) -> Result<Vec<ModelSpec>> {
        let methods: Vec<String> = self
            .methods
            .clone()
            .unwrap_or_else(|| ALL_METHODS.iter().map(|m| m.to_string()).collect());
        let shared = self.lambda.clone().unwrap_or_else(lambda_grid);
        let mut out = Vec::new();
        for m in &methods {
            let lambdas = |own: &Option<Vec<f64>>| own.clone().unwrap_or_else(|| shared.clone());
            match m.as_str() {
                "knn" => out.extend(self.knn_k.clone().unwrap_or(KNN_GRID.to_vec()).into_iter().map(ModelSpec::knn)),
                "pcr" => out.extend(
                    self.pcr_rank
                        .clone()
                        .unwrap_or(vec![0])
                        .into_iter()
                        .map(|r| ModelSpec::pcr((r > 0).then_some(r))),
                ),
                "ridge" => out.extend(lambdas(&self.ridge_lambda).into_iter().map(ModelSpec::ridge)),
                "lasso" => out.extend(lambdas(&self.lasso_lambda).into_iter().map(ModelSpec::lasso)),
                "pcr_ridge" => out.extend(lambdas(&self.pcr_ridge_lambda).into_iter().map(ModelSpec::pcr_ridge)),
                "pcr_lasso" => out.extend(lambdas(&self.pcr_lasso_lambda).into_iter().map(ModelSpec::pcr_lasso)),
                other => bail!("unknown method `{other}` in grid"),
            }
        }
        let out: Vec<ModelSpec> = out
            .into_iter()
            .map(|s| s.with_intercept(intercept).with_center(center))
            .collect();
        for s in &out {
            s.validate()?;
        }
        if out.is_empty() {
            bail!("grid has no candidates");
        }
        Ok(out)
    }
}

impl Settings {
    pub fn candidates(&self) -> Result<Vec<ModelSpec>> {
        let grid = match &self.grid {
            Some(path) => GridFile::read(path)?,
            None => GridFile::default(),
        };
        grid.candidates(self.intercept, self.center)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            two_phase: !self.single_phase,
            k: self.k,
            ann: AnnParams {
                tree_count: self.trees,
                leaf_size: self.leaf_size,
                metric: self.metric,
                seed: 0,
                search_k: self.search_k,
                exact: self.exact,
            },
            subsample: self.subsample,
            pool_mode: self.pool_mode,
            candidates: self.candidates()?,
            cv_scheme: self.cv,
            folds: self.folds,
            val_width: self.val_width,
            alpha: self.alpha,
            norm: self.norm,
            inference: self.inference,
            placebo_draws: self.placebo_draws,
            debias: match self.split_fraction {
                Some(fraction) => Debias::SampleSplit { fraction },
                None => Debias::None,
            },
            seed: self.seed,
            stale_gap: self.stale_gap,
        })
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            n_units: self.n_units,
            n_treated: self.n_treated,
            n_control: self.n_control,
            n_periods: self.n_periods,
            t0: self.t0.unwrap_or(SimConfig::default().t0),
            n_covariates: self.n_covariates,
            latent_rank: self.latent_rank,
            factor_scale: self.factor_scale,
            level_scale: self.level_scale,
            noise_scale: self.noise_scale,
            tau_true: self.tau_true,
            heterogeneity: self.heterogeneity,
            drift: self.drift,
            seed: self.seed,
        }
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| anyhow::anyhow!("missing required setting --{flag}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, Value)]) -> Map<String, Value> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn precedence_and_sources() {
        let config = map(&[("k", Value::from(20)), ("alpha", Value::from(5.0))]);
        let flags = map(&[("k", Value::from(3))]);
        let r = resolve(config, flags).unwrap();
        assert_eq!(r.settings.k, 3);
        assert_eq!(r.settings.alpha, 5.0);
        assert_eq!(r.settings.trees, 32);
        assert_eq!(r.sources["k"], Source::Flag);
        assert_eq!(r.sources["alpha"], Source::Config);
        assert_eq!(r.sources["trees"], Source::Default);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(resolve(map(&[("kk", Value::from(1))]), Map::new()).is_err());
    }

    #[test]
    fn default_grid_matches_library() {
        let c = GridFile::default().candidates(true, Center::None).unwrap();
        assert_eq!(c.len(), synthpanel::regress::default_grid().len());
    }

    #[test]
    fn grid_overrides() {
        let g: GridFile = toml::from_str("methods = [\"knn\", \"ridge\"]\nknn_k = [3]\nlambda = [0.5, 2.0]").unwrap();
        let c = g.candidates(false, Center::None).unwrap();
        assert_eq!(c, vec![
            ModelSpec::knn(3).with_intercept(false),
            ModelSpec::ridge(0.5).with_intercept(false),
            ModelSpec::ridge(2.0).with_intercept(false),
        ]);
    }
}
