use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use serde::Serialize;

use synthpanel::matching::{quantile_alignment, ALIGNMENT_QUANTILES};
use synthpanel::panel::{load_covariates, load_panel, read_id_list, write_covariates, write_id_list, write_panel};
use synthpanel::pipeline::{build_pool, run_pipeline, PipelineResult};
use synthpanel::regress::{counterfactual, DonorPool};
use synthpanel::tuning::{evaluate_candidate, relative_error, score_folds};
use synthpanel::validation::{simulate_panel, staleness_study, validate, ExperimentBundle, ValidationRun, VerdictRow};
use synthpanel::{CovariateTable, Error, PanelMatrix};

use crate::manifest::RunManifest;
use crate::settings::{Resolved, Settings};

/// What a command reports back to `main`.
pub struct Outcome {
    /// Validation verdicts all passed (always true for other commands).
    pub passed: bool,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        self.files.push(name.to_string());
        Ok(path)
    }

    fn csv<R: IntoIterator<Item = Vec<String>>>(&mut self, name: &str, header: &[&str], rows: R) -> Result<()> {
        let path = self.path(name)?;
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush().with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name)?;
        let text = serde_json::to_string_pretty(value)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    fn finish(self, mut manifest: RunManifest) -> Result<()> {
        manifest.outputs = self.files;
        manifest.write(&self.dir)
    }
}

struct Inputs {
    panel: PanelMatrix,
    covariates: Option<CovariateTable>,
    control: Vec<usize>,
    exclude: BTreeSet<usize>,
}

impl Inputs {
    /// Rows barred from every donor set.
    fn donor_exclusions(&self) -> BTreeSet<usize> {
        self.control.iter().copied().chain(self.exclude.iter().copied()).collect()
    }
}

fn rows_of(panel: &PanelMatrix, path: &Path) -> Result<Vec<usize>> {
    let ids = read_id_list(path)?;
    let rows = ids
        .into_iter()
        .map(|id| panel.row_of(&id).ok_or(Error::UnknownUnitId(id)))
        .collect::<synthpanel::Result<Vec<_>>>()
        .with_context(|| format!("reading unit list {}", path.display()))?;
    Ok(rows)
}

fn load_inputs(s: &Settings) -> Result<Inputs> {
    let outcomes = s.require(&s.outcomes, "outcomes")?;
    let treated = s.require(&s.treated, "treated")?;
    let t0 = s.t0.ok_or_else(|| anyhow::anyhow!("missing required setting --t0"))?;
    let panel = load_panel(outcomes, treated, t0).with_context(|| format!("loading panel {}", outcomes.display()))?;
    let covariates = match &s.covariates {
        Some(path) => Some(load_covariates(path, &panel).with_context(|| format!("loading covariates {}", path.display()))?),
        None => None,
    };
    let control = match &s.control {
        Some(path) => rows_of(&panel, path)?,
        None => Vec::new(),
    };
    let mut exclude = BTreeSet::new();
    if let Some(path) = &s.exclude_file {
        for row in rows_of(&panel, path)? {
            if panel.is_treated(row) {
                return Err(Error::ExcludedIsTreated(panel.unit_ids()[row].clone()))
                    .with_context(|| format!("reading exclusion list {}", path.display()));
            }
            exclude.insert(row);
        }
    }
    Ok(Inputs {
        panel,
        covariates,
        control,
        exclude,
    })
}

fn ids(panel: &PanelMatrix, rows: &[usize]) -> Vec<String> {
    rows.iter().map(|&r| panel.unit_ids()[r].clone()).collect()
}

fn join<T: ToString>(values: impl Iterator<Item = T>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

fn write_neighbors(out: &mut Outputs, panel: &PanelMatrix, result_filter: Option<&synthpanel::matching::DonorFilter>) -> Result<()> {
    let Some(filter) = result_filter else {
        return Ok(());
    };
    let rows = filter.neighbors.iter().map(|(&t, list)| {
        vec![
            panel.unit_ids()[t].clone(),
            join(list.iter().map(|(d, _)| panel.unit_ids()[*d].clone())),
            join(list.iter().map(|(_, dist)| dist)),
        ]
    });
    out.csv("neighbors.csv", &["treated_id", "donor_ids", "distances"], rows)
}

fn write_donors(out: &mut Outputs, panel: &PanelMatrix, pool: &DonorPool) -> Result<()> {
    let rows = pool.all_donors().into_iter().map(|d| vec![panel.unit_ids()[d].clone()]);
    out.csv("donors.csv", &["donor_id"], rows)
}

pub fn cmd_match(resolved: &Resolved) -> Result<Outcome> {
    let s = &resolved.settings;
    let mut manifest = RunManifest::new("match", resolved)?;
    let config = s.pipeline()?;
    config.validate()?;
    let inputs = load_inputs(s)?;
    let clock = Instant::now();
    let (pool, filter) = build_pool(&inputs.panel, inputs.covariates.as_ref(), &inputs.donor_exclusions(), &config)?;
    manifest.timings.push(("match".into(), clock.elapsed().as_secs_f64()));

    let mut out = Outputs::new(&s.out)?;
    write_neighbors(&mut out, &inputs.panel, filter.as_ref())?;
    write_donors(&mut out, &inputs.panel, &pool)?;

    let control = (!inputs.control.is_empty()).then_some(inputs.control.as_slice());
    let table = quantile_alignment(&inputs.panel, &pool.all_donors(), &ALIGNMENT_QUANTILES, control)?;
    let approach = if filter.is_some() { "two-phase" } else { "single-phase" };
    let mut header = vec!["group".to_string(), "approach".to_string()];
    header.extend(table.quantiles.iter().map(|q| format!("q{q}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = table.rows.iter().map(|row| {
        let mut rec = vec![row.group.clone(), approach.to_string()];
        rec.extend(row.values.iter().map(|v| v.to_string()));
        rec
    });
    out.csv("alignment.csv", &header, rows)?;
    out.finish(manifest)?;
    Ok(Outcome { passed: true })
}

#[derive(Serialize)]
struct EffectsSummary {
    tau_hat: f64,
    se: f64,
    p_value: f64,
    significant: bool,
    inference: String,
    model: String,
    n_treated: usize,
    n_donors: usize,
    pool: String,
    train_end: usize,
}

fn write_estimate(out: &mut Outputs, panel: &PanelMatrix, result: &PipelineResult) -> Result<()> {
    let e = &result.effects;
    out.json(
        "effects.json",
        &EffectsSummary {
            tau_hat: e.tau_hat,
            se: e.se,
            p_value: e.p_value,
            significant: e.significant,
            inference: e.inference.to_string(),
            model: result.model().to_string(),
            n_treated: panel.n_treated(),
            n_donors: result.pool.all_donors().len(),
            pool: result.pool.mode_name().to_string(),
            train_end: result.train_end,
        },
    )?;

    let post: Vec<&String> = panel.periods()[panel.t0()..].iter().collect();
    let hte_rows = e.units.iter().enumerate().flat_map(|(i, &r)| {
        post.iter().enumerate().map(move |(j, p)| {
            vec![panel.unit_ids()[r].clone(), (*p).clone(), e.hte[(i, j)].to_string()]
        })
    });
    out.csv("hte.csv", &["unit_id", "period", "effect"], hte_rows)?;
    let unit_rows = e
        .units
        .iter()
        .zip(&e.per_unit_effects)
        .map(|(&r, v)| vec![panel.unit_ids()[r].clone(), v.to_string()]);
    out.csv("per_unit.csv", &["unit_id", "effect"], unit_rows)?;

    let board = result.selection.leaderboard.iter().enumerate().map(|(i, (spec, loss))| {
        vec![
            (i + 1).to_string(),
            spec.name().to_string(),
            spec.hyper_label(),
            loss.relative_error.to_string(),
            loss.bias.to_string(),
            loss.combined.to_string(),
        ]
    });
    out.csv(
        "leaderboard.csv",
        &["rank", "method", "hyper", "relative_error", "bias", "combined"],
        board,
    )?;

    let mut weight_rows = Vec::new();
    for m in &result.prediction.models {
        for (li, &label) in m.labels.iter().enumerate() {
            let id = &panel.unit_ids()[label];
            weight_rows.push(vec![id.clone(), "(intercept)".into(), m.intercept[li].to_string()]);
            for (di, &d) in m.donors.iter().enumerate() {
                let w = m.weights[(li, di)];
                if w != 0.0 {
                    weight_rows.push(vec![id.clone(), panel.unit_ids()[d].clone(), w.to_string()]);
                }
            }
        }
    }
    out.csv("weights.csv", &["treated_id", "donor_id", "weight"], weight_rows)?;

    let pred = &result.prediction;
    let t0 = panel.t0();
    let cf_rows = pred.labels.iter().enumerate().flat_map(|(i, &r)| {
        panel.periods().iter().enumerate().map(move |(c, p)| {
            let yhat = if c < t0 { pred.yhat_pre[(i, c)] } else { pred.yhat_post[(i, c - t0)] };
            vec![
                panel.unit_ids()[r].clone(),
                p.clone(),
                panel.outcomes()[(r, c)].to_string(),
                yhat.to_string(),
            ]
        })
    });
    out.csv("counterfactual.csv", &["unit_id", "period", "observed", "counterfactual"], cf_rows)?;
    write_neighbors(out, panel, result.filter.as_ref())?;
    write_donors(out, panel, &result.pool)
}

pub fn cmd_estimate(resolved: &Resolved) -> Result<Outcome> {
    let s = &resolved.settings;
    let mut manifest = RunManifest::new("estimate", resolved)?;
    let config = s.pipeline()?;
    let inputs = load_inputs(s)?;
    let result = run_pipeline(&inputs.panel, inputs.covariates.as_ref(), &inputs.donor_exclusions(), &config)?;
    manifest.set_model(result.model());
    manifest.timings = result.timings.clone();
    let mut out = Outputs::new(&s.out)?;
    let clock = Instant::now();
    write_estimate(&mut out, &inputs.panel, &result)?;
    manifest.timings.push(("write".into(), clock.elapsed().as_secs_f64()));
    out.finish(manifest)?;
    Ok(Outcome { passed: true })
}

/// A one-column constant table for single-phase runs without covariates.
fn placeholder_covariates(panel: &PanelMatrix) -> Result<CovariateTable> {
    Ok(CovariateTable::new(
        panel.unit_ids().to_vec(),
        vec!["constant".into()],
        DMatrix::zeros(panel.n_units(), 1),
    )?)
}

fn verdict_record(row: &VerdictRow, window: &str) -> Vec<String> {
    let verdict = |pass: bool| if pass { "Pass" } else { "Fail" }.to_string();
    vec![
        row.experiment.clone(),
        window.to_string(),
        row.model.clone(),
        row.ab.display(),
        row.ab.p_value.to_string(),
        row.ab_st.display(),
        row.ab_st.p_value.to_string(),
        verdict(row.ab_st_pass),
        row.aa_st.display(),
        row.aa_st.p_value.to_string(),
        verdict(row.aa_st_pass),
    ]
}

pub fn cmd_validate(resolved: &Resolved) -> Result<Outcome> {
    let s = &resolved.settings;
    let mut manifest = RunManifest::new("validate", resolved)?;
    let config = s.pipeline()?;
    let inputs = load_inputs(s)?;
    if inputs.control.is_empty() {
        return Err(Error::EmptyControl).context("validate needs a control list (--control)");
    }
    let covariates = match inputs.covariates {
        Some(c) => c,
        None => placeholder_covariates(&inputs.panel)?,
    };
    let bundle =
        ExperimentBundle::new(inputs.panel, covariates, inputs.control, None)?.with_spillover(inputs.exclude);

    let runs: Vec<(&str, ValidationRun)> = if s.stale_gap > 0 {
        let study = staleness_study(&bundle, s.stale_gap, &config)?;
        vec![("fresh", study.fresh), ("stale", study.stale)]
    } else {
        vec![("fresh", validate(&bundle, &config)?)]
    };
    let rows: Vec<(String, VerdictRow)> = runs
        .iter()
        .map(|(window, run)| (window.to_string(), run.verdict.row(&s.experiment)))
        .collect();
    let passed = runs.iter().all(|(_, run)| run.verdict.all_pass());
    if let Some((_, last)) = runs.last() {
        manifest.set_model(last.pipeline.model());
    }
    for (window, run) in &runs {
        for (stage, secs) in &run.pipeline.timings {
            manifest.timings.push((format!("{window}:{stage}"), *secs));
        }
    }

    let mut out = Outputs::new(&s.out)?;
    out.csv(
        "verdicts.csv",
        &[
            "experiment", "window", "model", "ab", "ab_p", "ab_st", "ab_st_p", "ab_st_verdict", "aa_st", "aa_st_p",
            "aa_st_verdict",
        ],
        rows.iter().map(|(w, r)| verdict_record(r, w)),
    )?;
    #[derive(Serialize)]
    struct WindowRow<'a> {
        window: &'a str,
        #[serde(flatten)]
        row: &'a VerdictRow,
    }
    let json: Vec<WindowRow> = rows.iter().map(|(w, r)| WindowRow { window: w, row: r }).collect();
    out.json("verdicts.json", &json)?;
    out.finish(manifest)?;
    Ok(Outcome { passed })
}

pub fn cmd_simulate(resolved: &Resolved) -> Result<Outcome> {
    let s = &resolved.settings;
    let mut manifest = RunManifest::new("simulate", resolved)?;
    let clock = Instant::now();
    let bundle = simulate_panel(&s.sim_config())?;
    manifest.timings.push(("simulate".into(), clock.elapsed().as_secs_f64()));
    let mut out = Outputs::new(&s.out)?;
    let outcomes = out.path("outcomes.csv")?;
    let treated = out.path("treated.txt")?;
    write_panel(&bundle.panel, &outcomes, &treated)?;
    let control = out.path("control.txt")?;
    write_id_list(&control, &ids(&bundle.panel, &bundle.control))?;
    let covariates = out.path("covariates.csv")?;
    write_covariates(&bundle.covariates, &covariates)?;
    out.json("truth.json", &bundle.truth)?;
    out.finish(manifest)?;
    Ok(Outcome { passed: true })
}

fn series_prediction(panel: &PanelMatrix, result: &PipelineResult, row: usize) -> Result<Vec<f64>> {
    let pred = &result.prediction;
    if let Some(i) = pred.labels.iter().position(|&l| l == row) {
        return Ok(pred.yhat_pre.row(i).iter().chain(pred.yhat_post.row(i).iter()).copied().collect());
    }
    let donors: Vec<usize> = result.pool.all_donors().into_iter().filter(|&d| d != row).collect();
    let p = counterfactual(panel, &[row], &DonorPool::Union(donors), result.model(), 0..result.train_end)?;
    Ok(p.yhat_pre.iter().chain(p.yhat_post.iter()).copied().collect())
}

pub fn cmd_diagnose(resolved: &Resolved) -> Result<Outcome> {
    let s = &resolved.settings;
    let mut manifest = RunManifest::new("diagnose", resolved)?;
    let config = s.pipeline()?;
    let inputs = load_inputs(s)?;
    let panel = &inputs.panel;
    let unit_rows = s
        .units
        .iter()
        .map(|id| panel.row_of(id).ok_or_else(|| Error::UnknownUnitId(id.clone())))
        .collect::<synthpanel::Result<Vec<_>>>()?;
    let result = run_pipeline(panel, inputs.covariates.as_ref(), &inputs.donor_exclusions(), &config)?;
    manifest.set_model(result.model());
    manifest.timings = result.timings.clone();

    let mut out = Outputs::new(&s.out)?;
    let clock = Instant::now();
    let plan = &result.selection.cv_plan;
    let mut rows = Vec::new();
    for (rank, (spec, _)) in result.selection.leaderboard.iter().take(s.top).enumerate() {
        let evals = evaluate_candidate(panel, panel.treated(), &result.pool, spec, plan)?;
        let model = spec.to_string();
        for (i, &r) in panel.treated().iter().enumerate() {
            let mut rel = 0.0;
            let mut bias = 0.0;
            for e in &evals {
                let pred = e.prediction.rows(i, 1).into_owned();
                let actual = e.actual.rows(i, 1).into_owned();
                rel += relative_error(&pred, &actual, config.norm).unwrap_or(f64::NAN);
                bias += (&actual - &pred).mean();
            }
            let k = evals.len() as f64;
            rows.push(vec![
                (rank + 1).to_string(),
                model.clone(),
                panel.unit_ids()[r].clone(),
                (rel / k).to_string(),
                (bias / k).to_string(),
            ]);
        }
        let summary = score_folds(&evals, config.alpha, config.norm)?;
        rows.push(vec![
            (rank + 1).to_string(),
            model,
            "mean".into(),
            summary.relative_error.to_string(),
            summary.bias.to_string(),
        ]);
    }
    out.csv("model_errors.csv", &["rank", "model", "unit_id", "relative_error", "bias"], rows)?;

    for &row in &unit_rows {
        let yhat = series_prediction(panel, &result, row)?;
        let id = &panel.unit_ids()[row];
        let series = panel.periods().iter().enumerate().map(|(c, p)| {
            vec![
                p.clone(),
                panel.outcomes()[(row, c)].to_string(),
                yhat[c].to_string(),
                u8::from(c >= panel.t0()).to_string(),
            ]
        });
        if id.contains(['/', '\\']) {
            bail!("unit id `{id}` cannot be used as a file name");
        }
        out.csv(&format!("series/{id}.csv"), &["period", "observed", "counterfactual", "is_post"], series)?;
    }
    manifest.timings.push(("diagnose".into(), clock.elapsed().as_secs_f64()));
    out.finish(manifest)?;
    Ok(Outcome { passed: true })
}
