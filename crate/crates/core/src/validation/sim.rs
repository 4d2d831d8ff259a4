//! Synthetic experiment panels with a known effect.
//!
//! Untreated outcomes follow
//! `Y_it(0) = a_i + s * sum_j u_ij v_j(t) + drift * (0.5 + d_i) * g(t) + sigma_i e_it`
//! where the loadings `u_ij` are radial functions of the unit covariates,
//! `v_j` are AR(1) factor paths, `g(t) = 3 ((t + 1) / T)^2` accelerates, `d_i`
//! is a bump centred on the experimental region, and `e_it` is unit-variance
//! Student-t(4) noise. Experimental units (treated and control) sit in a
//! covariate region at distance `heterogeneity` from the donor centre, so at
//! high heterogeneity random donors look nothing like them; `sigma_i` then
//! also grows with the distance from that region.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use super::ExperimentBundle;
use crate::error::{Error, Result};
use crate::panel::{CovariateTable, PanelMatrix};

const FACTOR_AR: f64 = 0.9;
const BUMP_WIDTH: f64 = 0.5;
const DRIFT_SHARED: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Total units: treated, control and donors.
    pub n_units: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub n_periods: usize,
    pub t0: usize,
    pub n_covariates: usize,
    pub latent_rank: usize,
    pub factor_scale: f64,
    /// Spread of the unit fixed effects `a_i`.
    pub level_scale: f64,
    pub noise_scale: f64,
    pub tau_true: f64,
    pub heterogeneity: f64,
    pub drift: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_units: 5000,
            n_treated: 200,
            n_control: 200,
            n_periods: 60,
            t0: 40,
            n_covariates: 5,
            latent_rank: 4,
            factor_scale: 2.0,
            level_scale: 1.0,
            noise_scale: 1.0,
            tau_true: 0.0,
            heterogeneity: 0.0,
            drift: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.n_treated < 2 || self.n_control < 2 {
            return bad("need at least 2 treated and 2 control units".into());
        }
        if self.n_treated + self.n_control >= self.n_units {
            return bad(format!(
                "{} treated + {} control leave no donors among {} units",
                self.n_treated, self.n_control, self.n_units
            ));
        }
        if self.t0 == 0 || self.t0 >= self.n_periods {
            return bad(format!("t0 = {} must lie in 1..{}", self.t0, self.n_periods));
        }
        if self.n_covariates == 0 {
            return bad("need at least one covariate".into());
        }
        if self.latent_rank == 0 || self.latent_rank > self.n_units.min(self.n_periods) {
            return bad(format!("latent rank {} out of range", self.latent_rank));
        }
        for (name, v) in [
            ("factor_scale", self.factor_scale),
            ("level_scale", self.level_scale),
            ("noise_scale", self.noise_scale),
            ("heterogeneity", self.heterogeneity),
            ("drift", self.drift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !self.tau_true.is_finite() {
            return bad("tau_true must be finite".into());
        }
        Ok(())
    }
}

/// What the generator knows and the estimators do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub tau_true: f64,
    pub config: SimConfig,
    /// Centre of the experimental covariate region.
    pub experimental_center: Vec<f64>,
    /// Radial-basis centres of the loadings, one per factor.
    pub loading_centers: Vec<Vec<f64>>,
    pub factor_paths: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Generates an experiment with rows `[0, n_treated)` treated,
/// `[n_treated, n_treated + n_control)` control, the rest donors.
pub fn simulate_panel(cfg: &SimConfig) -> Result<ExperimentBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, p, r, t_len) = (cfg.n_units, cfg.n_covariates, cfg.latent_rank, cfg.n_periods);
    let n_exp = cfg.n_treated + cfg.n_control;

    let center = vec![cfg.heterogeneity / (p as f64).sqrt(); p];
    let spread = 1.0 / (1.0 + cfg.heterogeneity);
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let z = normal_vec(&mut rng, p);
        for k in 0..p {
            x[(i, k)] = if i < n_exp { center[k] + spread * z[k] } else { z[k] };
        }
    }

    let mut loading_centers = vec![center.clone()];
    for _ in 1..r {
        loading_centers.push(normal_vec(&mut rng, p));
    }
    let width2 = 2.0 * p as f64;
    let raw = normal_vec(&mut rng, p);
    let raw_mean = raw.iter().sum::<f64>() / p as f64;
    let level_coef: Vec<f64> = raw.iter().map(|b| cfg.level_scale * (b - raw_mean) / (p as f64).sqrt()).collect();

    let innovation = (1.0 - FACTOR_AR * FACTOR_AR).sqrt();
    let factor_paths: Vec<Vec<f64>> = (0..r)
        .map(|_| {
            let mut v = Vec::with_capacity(t_len);
            let mut cur: f64 = rng.sample(StandardNormal);
            for _ in 0..t_len {
                v.push(cur);
                cur = FACTOR_AR * cur + innovation * rng.sample::<f64, _>(StandardNormal);
            }
            v
        })
        .collect();
    let g: Vec<f64> = (0..t_len).map(|t| 3.0 * ((t + 1) as f64 / t_len as f64).powi(2)).collect();

    let spread_growth = 0.5 * cfg.heterogeneity.min(1.0);
    let t4 = StudentT::new(4.0).expect("df 4 is valid");
    let t_scale = 2f64.sqrt();
    let mut y = DMatrix::zeros(n, t_len);
    for i in 0..n {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        let loadings: Vec<f64> = loading_centers
            .iter()
            .map(|c| (-sq_dist(&xi, c) / width2).exp())
            .collect();
        let level: f64 = xi.iter().zip(&level_coef).map(|(a, b)| a * b).sum();
        let from_center = sq_dist(&xi, &center) / p as f64;
        let bump = (-from_center / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp();
        let sigma = cfg.noise_scale * (1.0 + spread_growth * from_center.min(8.0));
        for t in 0..t_len {
            let common: f64 = loadings.iter().zip(&factor_paths).map(|(u, v)| u * v[t]).sum();
            let noise = t4.sample(&mut rng) / t_scale;
            y[(i, t)] = level + cfg.factor_scale * common + cfg.drift * (DRIFT_SHARED + bump) * g[t] + sigma * noise;
        }
    }
    for i in 0..cfg.n_treated {
        for t in cfg.t0..t_len {
            y[(i, t)] += cfg.tau_true;
        }
    }

    let width = n.to_string().len();
    let ids: Vec<String> = (0..n)
        .map(|i| {
            let prefix = if i < cfg.n_treated {
                "T"
            } else if i < n_exp {
                "C"
            } else {
                "D"
            };
            format!("{prefix}{i:0width$}")
        })
        .collect();
    let periods: Vec<String> = (1..=t_len).map(|t| format!("p{t:02}")).collect();
    let names: Vec<String> = (1..=p).map(|k| format!("x{k}")).collect();
    let panel = PanelMatrix::new(ids.clone(), periods, y, cfg.t0, (0..cfg.n_treated).collect())?;
    let covariates = CovariateTable::new(ids, names, x)?;
    let truth = SimTruth {
        tau_true: cfg.tau_true,
        config: cfg.clone(),
        experimental_center: center,
        loading_centers,
        factor_paths,
    };
    ExperimentBundle::new(panel, covariates, (cfg.n_treated..n_exp).collect(), Some(truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            n_units: 300,
            n_treated: 10,
            n_control: 10,
            n_periods: 20,
            t0: 14,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn reproducible() {
        let a = simulate_panel(&small()).unwrap();
        let b = simulate_panel(&small()).unwrap();
        assert_eq!(a.panel.outcomes(), b.panel.outcomes());
        assert_eq!(a.covariates.matrix(), b.covariates.matrix());
        let c = simulate_panel(&SimConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.panel.outcomes(), c.panel.outcomes());
    }

    #[test]
    fn layout() {
        let b = simulate_panel(&small()).unwrap();
        assert_eq!(b.panel.treated(), &(0..10).collect::<Vec<_>>()[..]);
        assert_eq!(b.control, (10..20).collect::<Vec<_>>());
        assert_eq!(b.panel.unit_ids()[0], "T000");
        assert_eq!(b.panel.unit_ids()[10], "C010");
        assert_eq!(b.panel.unit_ids()[299], "D299");
    }

    #[test]
    fn effect_is_added_to_treated_post_only() {
        let base = simulate_panel(&small()).unwrap();
        let shifted = simulate_panel(&SimConfig { tau_true: 2.5, ..small() }).unwrap();
        let diff = shifted.panel.outcomes() - base.panel.outcomes();
        for i in 0..300 {
            for t in 0..20 {
                let expect = if i < 10 && t >= 14 { 2.5 } else { 0.0 };
                assert!((diff[(i, t)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SimConfig { t0: 0, ..small() },
            SimConfig { n_treated: 150, n_control: 150, ..small() },
            SimConfig { noise_scale: -1.0, ..small() },
            SimConfig { latent_rank: 0, ..small() },
        ] {
            assert!(matches!(simulate_panel(&cfg), Err(Error::ConfigInvalid(_))));
        }
    }
}
