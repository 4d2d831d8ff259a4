//! Phase one: covariate matching that shrinks the donor pool to units that
//! resemble the treated units, plus the single-phase random subsample and
//! the outcome-quantile alignment diagnostic.

mod ann;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use ann::{build_index, AnnIndex, AnnParams, Metric};

use crate::error::{Error, Result};
use crate::panel::{CovariateTable, PanelMatrix};

/// Per-treated neighbor lists and their union.
#[derive(Debug, Clone, PartialEq)]
pub struct DonorFilter {
    /// treated row -> `(donor_row, distance)` sorted by distance.
    pub neighbors: BTreeMap<usize, Vec<(usize, f64)>>,
    /// Sorted, deduplicated union of all neighbor lists.
    pub donor_union: Vec<usize>,
    pub excluded: BTreeSet<usize>,
}

impl DonorFilter {
    fn rebuild_union(&mut self) {
        let set: BTreeSet<usize> = self
            .neighbors
            .values()
            .flat_map(|l| l.iter().map(|(d, _)| *d))
            .collect();
        self.donor_union = set.into_iter().collect();
    }

    /// Neighbor rows of one treated unit, nearest first.
    pub fn donors_of(&self, treated_row: usize) -> Vec<usize> {
        self.neighbors
            .get(&treated_row)
            .map(|l| l.iter().map(|(d, _)| *d).collect())
            .unwrap_or_default()
    }

    /// Checks the structural invariants against a treated set.
    pub fn check(&self, treated: &[usize]) -> Result<()> {
        for d in &self.donor_union {
            if treated.binary_search(d).is_ok() || self.excluded.contains(d) {
                return Err(Error::InvalidPanel(format!(
                    "donor row {d} is treated or excluded"
                )));
            }
        }
        for list in self.neighbors.values() {
            if list.windows(2).any(|w| w[0].1 > w[1].1) {
                return Err(Error::InvalidPanel("neighbor list not sorted".into()));
            }
        }
        Ok(())
    }
}

/// Queries the index for the `k` nearest donors of every treated row.
pub fn match_donors(
    index: &AnnIndex,
    cov: &CovariateTable,
    treated: &[usize],
    k: usize,
) -> Result<DonorFilter> {
    if k == 0 {
        return Err(Error::InvalidSpec("k must be >= 1".into()));
    }
    let lists: Vec<(usize, Vec<(usize, f64)>)> = treated
        .par_iter()
        .map(|&t| (t, index.query(&cov.row(t), k)))
        .collect();
    let mut filter = DonorFilter {
        neighbors: lists.into_iter().collect(),
        donor_union: Vec::new(),
        excluded: BTreeSet::new(),
    };
    let mut sorted_treated = treated.to_vec();
    sorted_treated.sort_unstable();
    for list in filter.neighbors.values_mut() {
        list.retain(|(d, _)| sorted_treated.binary_search(d).is_err());
    }
    filter.rebuild_union();
    Ok(filter)
}

/// Removes the listed donors from every neighbor list and the union.
pub fn exclude_spillover(
    mut filter: DonorFilter,
    excluded_ids: &[String],
    panel: &PanelMatrix,
) -> Result<DonorFilter> {
    let mut rows = BTreeSet::new();
    for id in excluded_ids {
        let row = panel
            .row_of(id)
            .ok_or_else(|| Error::UnknownUnitId(id.clone()))?;
        if panel.is_treated(row) {
            return Err(Error::ExcludedIsTreated(id.clone()));
        }
        rows.insert(row);
    }
    for list in filter.neighbors.values_mut() {
        list.retain(|(d, _)| !rows.contains(d));
    }
    filter.excluded.extend(rows);
    filter.rebuild_union();
    Ok(filter)
}

/// Uniform sample without replacement of `max(1, round(fraction * |donors|))`
/// donors, returned sorted.
pub fn subsample_donors(donors: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::BadFraction(fraction));
    }
    if donors.is_empty() {
        return Err(Error::EmptyDonorSet);
    }
    let size = ((fraction * donors.len() as f64).round() as usize).clamp(1, donors.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = sample(&mut rng, donors.len(), size)
        .into_iter()
        .map(|i| donors[i])
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Exact k-NN by scanning every donor; used as the reference for the forest.
pub fn brute_force_knn(points: &[Vec<f64>], query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d2: f64 = p.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (i, d2.sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Quantiles of a group's pooled pre-period outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileRow {
    pub group: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTable {
    pub quantiles: Vec<f64>,
    pub rows: Vec<QuantileRow>,
}

pub const ALIGNMENT_QUANTILES: [f64; 6] = [0.01, 0.05, 0.10, 0.90, 0.95, 0.99];

/// Lower-interpolation empirical quantile of sorted data: the element at
/// index `floor(q * (n - 1))`.
pub fn lower_quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).floor() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

fn pooled_pre_quantiles(panel: &PanelMatrix, rows: &[usize], quantiles: &[f64], name: &str) -> Result<QuantileRow> {
    if rows.is_empty() {
        return Err(Error::EmptyGroup(name.to_string()));
    }
    let mut vals: Vec<f64> = rows
        .iter()
        .flat_map(|&r| (0..panel.t0()).map(move |c| panel.outcomes()[(r, c)]))
        .collect();
    vals.sort_by(f64::total_cmp);
    Ok(QuantileRow {
        group: name.to_string(),
        values: quantiles.iter().map(|&q| lower_quantile(&vals, q)).collect(),
    })
}

/// Pre-period outcome quantiles for the donor subset, the treated units and
/// (optionally) a labeled control group, in that order.
pub fn quantile_alignment(
    panel: &PanelMatrix,
    donors: &[usize],
    quantiles: &[f64],
    control: Option<&[usize]>,
) -> Result<AlignmentTable> {
    if quantiles.iter().any(|&q| !(q > 0.0 && q < 1.0)) || quantiles.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Parse("quantiles must be sorted and inside (0, 1)".into()));
    }
    let mut rows = vec![pooled_pre_quantiles(panel, donors, quantiles, "donor")?];
    if let Some(control) = control {
        rows.push(pooled_pre_quantiles(panel, control, quantiles, "control")?);
    }
    rows.push(pooled_pre_quantiles(panel, panel.treated(), quantiles, "treated")?);
    Ok(AlignmentTable {
        quantiles: quantiles.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn panel_and_cov() -> (PanelMatrix, CovariateTable) {
        // rows 0,1 treated; 2..8 donors on a line.
        let n = 8;
        let ids: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
        let y = DMatrix::from_fn(n, 3, |i, j| (i + j) as f64);
        let panel = PanelMatrix::new(ids.clone(), vec!["t1".into(), "t2".into(), "t3".into()], y, 2, vec![0, 1]).unwrap();
        let x = DMatrix::from_fn(n, 1, |i, _| match i {
            0 | 1 => 4.0,
            _ => i as f64,
        });
        let cov = CovariateTable::new(ids, vec!["x1".into()], x).unwrap();
        (panel, cov)
    }

    fn exact() -> AnnParams {
        AnnParams {
            exact: true,
            ..Default::default()
        }
    }

    #[test]
    fn identical_covariates_match_at_zero() {
        let (panel, cov) = panel_and_cov();
        let idx = build_index(&cov, &panel.donor_rows(), exact()).unwrap();
        let f = match_donors(&idx, &cov, panel.treated(), 3).unwrap();
        assert_eq!(f.neighbors[&0][0], (4, 0.0));
        // identical treated covariates give identical lists
        assert_eq!(f.neighbors[&0], f.neighbors[&1]);
        f.check(panel.treated()).unwrap();
    }

    #[test]
    fn saturated_k_takes_all_donors() {
        let (panel, cov) = panel_and_cov();
        let idx = build_index(&cov, &panel.donor_rows(), AnnParams { tree_count: 4, leaf_size: 2, ..Default::default() }).unwrap();
        let f = match_donors(&idx, &cov, panel.treated(), 50).unwrap();
        assert_eq!(f.donor_union, panel.donor_rows());
    }

    #[test]
    fn exclusion_rules() {
        let (panel, cov) = panel_and_cov();
        let idx = build_index(&cov, &panel.donor_rows(), exact()).unwrap();
        let f = match_donors(&idx, &cov, &[0], 2).unwrap();
        assert_eq!(f.donors_of(0).len(), 2);
        let union_before = f.donor_union.len();
        let first = panel.unit_ids()[f.donors_of(0)[0]].clone();
        let g = exclude_spillover(f.clone(), &[first], &panel).unwrap();
        assert_eq!(g.donors_of(0).len(), 1);
        assert_eq!(g.donor_union.len(), union_before - 1);
        assert_eq!(g.excluded.len(), 1);
        g.check(panel.treated()).unwrap();

        let far = exclude_spillover(f.clone(), &["u7".to_string()], &panel).unwrap();
        assert_eq!(far.neighbors, f.neighbors);
        assert_eq!(far.donor_union, f.donor_union);
        assert!(far.excluded.contains(&7));

        assert!(matches!(
            exclude_spillover(f.clone(), &["u0".to_string()], &panel),
            Err(Error::ExcludedIsTreated(_))
        ));
        assert!(matches!(
            exclude_spillover(f, &["nope".to_string()], &panel),
            Err(Error::UnknownUnitId(_))
        ));
    }

    #[test]
    fn subsample_sizes() {
        let donors: Vec<usize> = (0..1000).collect();
        assert_eq!(subsample_donors(&donors, 0.01, 3).unwrap().len(), 10);
        assert_eq!(subsample_donors(&donors, 1.0, 3).unwrap(), donors);
        assert_eq!(subsample_donors(&donors, 0.0001, 3).unwrap().len(), 1);
        assert_eq!(
            subsample_donors(&donors, 0.05, 9).unwrap(),
            subsample_donors(&donors, 0.05, 9).unwrap()
        );
        assert!(matches!(subsample_donors(&donors, 0.0, 1), Err(Error::BadFraction(_))));
        assert!(matches!(subsample_donors(&donors, 1.5, 1), Err(Error::BadFraction(_))));
    }

    #[test]
    fn lower_quantile_convention() {
        assert_eq!(lower_quantile(&[0.0, 0.0, 10.0], 0.5), 0.0);
        assert_eq!(lower_quantile(&[1.0, 2.0, 3.0, 4.0], 0.99), 3.0);
        assert_eq!(lower_quantile(&[1.0, 2.0, 3.0, 4.0], 0.01), 1.0);
    }

    #[test]
    fn alignment_symmetry_and_layout() {
        // two donors and two treated with the same pre-period values.
        let y = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 9.0, 3.0, 4.0, 9.0, 1.0, 2.0, 0.0, 3.0, 4.0, 0.0]);
        let ids = (0..4).map(|i| format!("u{i}")).collect();
        let panel = PanelMatrix::new(ids, vec!["a".into(), "b".into(), "c".into()], y, 2, vec![0, 1]).unwrap();
        let t = quantile_alignment(&panel, &[2, 3], &ALIGNMENT_QUANTILES, None).unwrap();
        assert_eq!(t.quantiles, ALIGNMENT_QUANTILES.to_vec());
        assert_eq!(t.rows[0].values, t.rows[1].values);
        assert!(matches!(
            quantile_alignment(&panel, &[], &ALIGNMENT_QUANTILES, None),
            Err(Error::EmptyGroup(_))
        ));
    }
}
