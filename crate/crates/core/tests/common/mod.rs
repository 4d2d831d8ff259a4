//! Independent reference implementations and checks shared by the
//! integration tests and the acceptance runner.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use synthpanel::effects::{infer_pvalue, EffectReport};
use synthpanel::matching::{build_index, AnnParams};
use synthpanel::regress::{
    fit_model, hard_threshold_rank, latent_donors, lasso_fit, lasso_lambda_max, lasso_objective, ridge_fit,
    ridge_objective, ModelSpec,
};
use synthpanel::validation::ValidationVerdict;
use synthpanel::{CovariateTable, PanelMatrix};

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn panel_from(y: DMatrix<f64>, t0: usize, treated: Vec<usize>) -> PanelMatrix {
    let ids = (0..y.nrows()).map(|i| format!("u{i}")).collect();
    let periods = (0..y.ncols()).map(|t| format!("t{t}")).collect();
    PanelMatrix::new(ids, periods, y, t0, treated).unwrap()
}

/// Accelerated gradient descent on the ridge objective
/// `|y - X^T w - c|^2 + lambda |w|^2` (c unpenalized when `intercept`).
pub fn ridge_descent(x: &DMatrix<f64>, y: &[f64], lambda: f64, intercept: bool, iters: usize) -> (Vec<f64>, f64) {
    let (m, t) = x.shape();
    let p = m + usize::from(intercept);
    let design = DMatrix::from_fn(t, p, |r, c| if c < m { x[(c, r)] } else { 1.0 });
    let top = design.singular_values().max();
    let step = 1.0 / (2.0 * (top * top + lambda));
    let grad = |b: &[f64]| -> Vec<f64> {
        let mut r = vec![0.0; t];
        for (row, r) in r.iter_mut().enumerate() {
            let fit: f64 = (0..p).map(|c| design[(row, c)] * b[c]).sum();
            *r = y[row] - fit;
        }
        (0..p)
            .map(|c| {
                let data: f64 = (0..t).map(|row| design[(row, c)] * r[row]).sum();
                let pen = if c < m { 2.0 * lambda * b[c] } else { 0.0 };
                -2.0 * data + pen
            })
            .collect()
    };
    let mut b = vec![0.0; p];
    let mut prev = b.clone();
    for k in 0..iters {
        let mom = k as f64 / (k as f64 + 3.0);
        let look: Vec<f64> = b.iter().zip(&prev).map(|(a, q)| a + mom * (a - q)).collect();
        let g = grad(&look);
        prev = b;
        b = look.iter().zip(&g).map(|(v, gv)| v - step * gv).collect();
    }
    let c = if intercept { b[m] } else { 0.0 };
    b.truncate(m);
    (b, c)
}

/// Largest KKT violation of a lasso solution of
/// `0.5 |y - X^T w - c|^2 / T + lambda |w|_1`.
pub fn lasso_kkt_violation(x: &DMatrix<f64>, y: &[f64], w: &[f64], c: f64, lambda: f64) -> f64 {
    let (m, t) = x.shape();
    let resid: Vec<f64> = (0..t)
        .map(|j| y[j] - c - (0..m).map(|d| w[d] * x[(d, j)]).sum::<f64>())
        .collect();
    (0..m)
        .map(|d| {
            let g: f64 = (0..t).map(|j| x[(d, j)] * resid[j]).sum::<f64>() / t as f64;
            if w[d] != 0.0 {
                (g - lambda * w[d].signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Least squares with intercept through the normal equations of the
/// centered data; `x` must have full row rank.
pub fn normal_equations_ls(x: &DMatrix<f64>, y: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let t = x.ncols() as f64;
    let xm: Vec<f64> = x.row_iter().map(|r| r.sum() / t).collect();
    let ym: Vec<f64> = y.row_iter().map(|r| r.sum() / t).collect();
    let xc = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - xm[i]);
    let yc = DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] - ym[i]);
    let gram = &xc * xc.transpose();
    let w = (gram.lu().solve(&(&xc * yc.transpose())).expect("full rank")).transpose();
    let c = (0..y.nrows())
        .map(|i| ym[i] - (0..x.nrows()).map(|d| w[(i, d)] * xm[d]).sum::<f64>())
        .collect();
    (w, c)
}

/// Mean of the `k` nearest donors by a full sort of squared distances,
/// ties to the lower index. Returns the chosen donor indices per label.
pub fn knn_sort_oracle(x: &DMatrix<f64>, y: &DMatrix<f64>, k: usize) -> Vec<Vec<usize>> {
    (0..y.nrows())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..x.nrows())
                .map(|d| ((0..x.ncols()).map(|t| (x[(d, t)] - y[(i, t)]).powi(2)).sum(), d))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut chosen: Vec<usize> = all[..k].iter().map(|p| p.1).collect();
            chosen.sort_unstable();
            chosen
        })
        .collect()
}

pub struct Check {
    pub pass: bool,
    pub detail: String,
}

/// Ridge closed form vs descent, lasso KKT and lambda_max, PCR at full rank
/// vs normal equations, kNN vs full sort, over `seeds` random instances.
pub fn kernel_oracles(seeds: u64) -> Check {
    let mut ridge_gap: f64 = 0.0;
    let mut kkt: f64 = 0.0;
    let mut lasso_max_nonzero = 0usize;
    let mut pcr_err: f64 = 0.0;
    let mut knn_mismatch = 0usize;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // ridge, both orientations
        for (m, t) in [(5, 12), (12, 6)] {
            let x = gaussian(&mut rng, m, t);
            let y: Vec<f64> = gaussian(&mut rng, 1, t).iter().copied().collect();
            let labels = DMatrix::from_row_slice(1, t, &y);
            for (lambda, intercept) in [(0.5, true), (3.0, false)] {
                let fit = ridge_fit(&x, &labels, lambda, intercept).unwrap();
                let w: Vec<f64> = fit.coef.row(0).iter().copied().collect();
                let closed = ridge_objective(&x, &y, &w, fit.intercept[0], lambda);
                let (wd, cd) = ridge_descent(&x, &y, lambda, intercept, 20_000);
                let descent = ridge_objective(&x, &y, &wd, cd, lambda);
                ridge_gap = ridge_gap.max((closed - descent).abs());
            }
        }
        // lasso
        let x = gaussian(&mut rng, 8, 20);
        let y: Vec<f64> = gaussian(&mut rng, 1, 20).iter().copied().collect();
        let labels = DMatrix::from_row_slice(1, 20, &y);
        let lmax = lasso_lambda_max(&x, &y, true);
        for frac in [0.05, 0.2, 0.6] {
            let fit = lasso_fit(&x, &labels, frac * lmax, true).unwrap();
            let w: Vec<f64> = fit.coef.row(0).iter().copied().collect();
            kkt = kkt.max(lasso_kkt_violation(&x, &y, &w, fit.intercept[0], frac * lmax));
            // no single-coordinate nudge lowers the objective
            let base = lasso_objective(&x, &y, &w, fit.intercept[0], frac * lmax);
            for d in 0..w.len() {
                for h in [1e-4, -1e-4] {
                    let mut v = w.clone();
                    v[d] += h;
                    if lasso_objective(&x, &y, &v, fit.intercept[0], frac * lmax) < base - 1e-12 {
                        kkt = kkt.max(1.0);
                    }
                }
            }
        }
        for scale in [1.0, 1.5] {
            let fit = lasso_fit(&x, &labels, scale * lmax, true).unwrap();
            lasso_max_nonzero += fit.coef.iter().filter(|v| **v != 0.0).count();
        }
        // PCR at full rank
        let y_all = gaussian(&mut rng, 10, 15);
        let panel = panel_from(y_all.clone(), 12, vec![0, 1]);
        let donors: Vec<usize> = (2..8).collect();
        let model = fit_model(&panel, &[0, 1], &donors, 0..12, &ModelSpec::pcr(Some(6))).unwrap();
        let (w, c) = normal_equations_ls(&panel.block(&donors, 0..12), &panel.block(&[0, 1], 0..12));
        let pred = model.predict(&panel, 0..15);
        let donors_all = panel.block(&donors, 0..15);
        let oracle = &w * &donors_all;
        for i in 0..2 {
            for j in 0..15 {
                pcr_err = pcr_err.max((pred[(i, j)] - oracle[(i, j)] - c[i]).abs());
            }
        }
        // kNN
        let x = gaussian(&mut rng, 40, 9);
        let y = gaussian(&mut rng, 3, 9);
        let mut stacked = DMatrix::zeros(43, 10);
        stacked.view_mut((0, 0), (3, 9)).copy_from(&y);
        stacked.view_mut((3, 0), (40, 9)).copy_from(&x);
        let panel = panel_from(stacked, 9, vec![0, 1, 2]);
        let donors: Vec<usize> = (3..43).collect();
        for k in [1, 5, 10] {
            let m = fit_model(&panel, &[0, 1, 2], &donors, 0..9, &ModelSpec::knn(k)).unwrap();
            let oracle = knn_sort_oracle(&x, &y, k);
            for (i, chosen) in oracle.iter().enumerate() {
                let got: Vec<usize> = (0..40).filter(|&d| m.weights[(i, d)] != 0.0).collect();
                if &got != chosen || got.iter().any(|&d| m.weights[(i, d)] != 1.0 / k as f64) {
                    knn_mismatch += 1;
                }
            }
        }
    }
    let pass = ridge_gap < 1e-6 && kkt < 1e-5 && lasso_max_nonzero == 0 && pcr_err < 1e-6 && knn_mismatch == 0;
    Check {
        pass,
        detail: format!(
            "ridge gap {ridge_gap:.2e}, lasso KKT {kkt:.2e}, nonzero at lambda_max {lasso_max_nonzero}, \
             PCR vs LS {pcr_err:.2e}, kNN mismatches {knn_mismatch}"
        ),
    }
}

/// z-scores with population standard deviation, as the index does.
fn zscore(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let n = x.nrows() as f64;
    let means: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
    let sds: Vec<f64> = x
        .column_iter()
        .zip(&means)
        .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    x.row_iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| (v - means[j]) / sds[j]).collect())
        .collect()
}

fn exact_neighbors(points: &[Vec<f64>], q: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()))
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Forest recall@10 against exact search on `n` Gaussian points in R^16,
/// plus exact mode against the same exact search.
pub fn ann_quality(n: usize, queries: usize, seed: u64) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(&mut rng, n + queries, 16);
    let ids = (0..n + queries).map(|i| format!("p{i}")).collect();
    let names = (0..16).map(|j| format!("x{j}")).collect();
    let table = CovariateTable::new(ids, names, x.clone()).unwrap();
    let donors: Vec<usize> = (0..n).collect();
    let z = zscore(&x.rows(0, n).into_owned());
    let params = AnnParams {
        tree_count: 32,
        seed,
        ..Default::default()
    };
    let forest = build_index(&table, &donors, params.clone()).unwrap();
    let exact = build_index(&table, &donors, AnnParams { exact: true, ..params }).unwrap();
    let zq = |row: usize| -> Vec<f64> {
        let nf = n as f64;
        (0..16)
            .map(|j| {
                let col = x.column(j);
                let mean = col.rows(0, n).sum() / nf;
                let sd = (col.rows(0, n).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf).sqrt();
                (x[(row, j)] - mean) / sd
            })
            .collect()
    };
    let mut hits = 0usize;
    let mut exact_ok = true;
    for q in n..n + queries {
        let truth = exact_neighbors(&z, &zq(q), 10);
        let got = forest.query(&table.row(q), 10);
        hits += got.iter().filter(|(d, _)| truth.iter().any(|(t, _)| t == d)).count();
        let ex = exact.query(&table.row(q), 10);
        exact_ok &= ex.len() == truth.len()
            && ex.iter().zip(&truth).all(|(a, b)| a.0 == b.0 && (a.1 - b.1).abs() <= 1e-12 * (1.0 + b.1));
    }
    (hits as f64 / (10 * queries) as f64, exact_ok)
}

/// Seeds out of `seeds` in which a planted rank-3 signal in a 200×50
/// matrix (Frobenius signal-to-noise 10) is recovered exactly.
pub fn rank_recovery(seeds: u64) -> usize {
    (0..seeds)
        .filter(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
            let signal = gaussian(&mut rng, 200, 3) * gaussian(&mut rng, 3, 50);
            let noise = gaussian(&mut rng, 200, 50);
            let scale = signal.norm() / (10.0 * noise.norm());
            let m = signal + noise * scale;
            let basis = latent_donors(&m);
            hard_threshold_rank(&basis.singular_values, 200, 50) == 3
        })
        .count()
}

/// Rejection rate of the unit-level t-test on i.i.d. N(0, 1) effects.
pub fn ttest_size(n: usize, reps: u64) -> f64 {
    let rejections = (0..reps)
        .filter(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(20_000 + seed);
            let effects: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            infer_pvalue(&effects).unwrap().1 < 0.05
        })
        .count();
    rejections as f64 / reps as f64
}

/// Reported significance stars become p = 0.01, unstarred cells p = 0.5.
fn cell(tau: f64, starred: bool) -> EffectReport {
    EffectReport::scalar(tau, if starred { 0.01 } else { 0.5 })
}

pub struct VerdictFixture {
    pub label: &'static str,
    pub ab: (f64, bool),
    pub ab_st: (f64, bool),
    pub aa_st: (f64, bool),
    pub ab_st_pass: bool,
    pub aa_st_pass: bool,
}

const fn fx(
    label: &'static str,
    ab: (f64, bool),
    ab_st: (f64, bool),
    aa_st: (f64, bool),
    ab_st_pass: bool,
    aa_st_pass: bool,
) -> VerdictFixture {
    VerdictFixture {
        label,
        ab,
        ab_st,
        aa_st,
        ab_st_pass,
        aa_st_pass,
    }
}

/// Published validation cells and verdicts; `true` marks a significant
/// cell.
pub const VERDICT_FIXTURES: &[VerdictFixture] = &[
    fx("single-phase", (-0.14, false), (-0.42, true), (0.28, false), false, true),
    fx("two-phase", (-0.14, false), (-0.28, false), (0.13, false), true, true),
    fx("A", (-0.14, false), (-0.28, false), (0.13, false), true, true),
    fx("B", (-1.84, true), (-1.51, true), (-0.45, false), true, true),
    fx("C", (0.17, true), (0.31, true), (-0.15, false), true, true),
    fx("D", (-0.45, false), (-0.74, false), (0.28, false), true, true),
    fx("E", (-1.48, true), (-1.36, true), (-0.2, false), true, true),
    fx("F", (0.22, true), (0.15, true), (0.07, false), true, true),
    fx("C fresh", (0.17, true), (0.31, true), (-0.15, false), true, true),
    fx("C 3 months stale", (0.17, true), (0.42, true), (-0.37, true), true, false),
    fx("B debiased", (-1.84, true), (-1.77, true), (-0.00, false), true, true),
    fx("C debiased", (0.17, true), (0.20, true), (-0.02, false), true, true),
    fx("E debiased", (-1.48, true), (-1.43, true), (-0.04, false), true, true),
    fx("F debiased", (0.22, true), (0.15, true), (0.07, false), true, true),
    fx("C debiased fresh", (0.17, true), (0.20, true), (-0.02, false), true, true),
    fx("C debiased stale", (0.17, true), (0.16, true), (0.00, false), true, true),
];

/// Fixtures whose computed verdicts disagree with the published ones.
pub fn verdict_mismatches() -> Vec<&'static str> {
    VERDICT_FIXTURES
        .iter()
        .filter(|f| {
            let v = ValidationVerdict::from_reports(
                cell(f.ab.0, f.ab.1),
                cell(f.ab_st.0, f.ab_st.1),
                cell(f.aa_st.0, f.aa_st.1),
                None,
            );
            v.ab_st_pass != f.ab_st_pass || v.aa_st_pass != f.aa_st_pass
        })
        .map(|f| f.label)
        .collect()
}
