//! Panel data model: the N×T outcome matrix, the block treatment assignment
//! and the unit covariates, plus their CSV formats.
//!
//! Treatment is block-simultaneous: every unit in `treated` receives the
//! treatment from period `t0` onward (0-based column index), and no other
//! cell is treated. Outcomes are stored row-per-unit in an `f64` matrix.
//!
//! File formats:
//!
//! * outcomes: wide CSV, header `unit_id,t1,...,tT`, one row per unit.
//! * treated list: plain text, one unit id per line.
//! * covariates: CSV, header `unit_id,x1,...,xp`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Outcome matrix with its pre/post split and treated set.
#[derive(Debug, Clone)]
pub struct PanelMatrix {
    unit_ids: Vec<String>,
    periods: Vec<String>,
    outcomes: DMatrix<f64>,
    t0: usize,
    treated: Vec<usize>,
    is_treated: Vec<bool>,
    index: HashMap<String, usize>,
}

impl PanelMatrix {
    /// Builds and validates a panel. `treated` may be given in any order;
    /// it is stored sorted.
    pub fn new(
        unit_ids: Vec<String>,
        periods: Vec<String>,
        outcomes: DMatrix<f64>,
        t0: usize,
        mut treated: Vec<usize>,
    ) -> Result<Self> {
        let (n_units, n_periods) = outcomes.shape();
        if unit_ids.len() != n_units {
            return Err(Error::InvalidPanel(format!(
                "{} unit ids for {} outcome rows",
                unit_ids.len(),
                n_units
            )));
        }
        if periods.len() != n_periods {
            return Err(Error::InvalidPanel(format!(
                "{} period labels for {} outcome columns",
                periods.len(),
                n_periods
            )));
        }
        if n_periods < 2 || t0 < 1 || t0 >= n_periods {
            return Err(Error::BadT0 {
                t0,
                max: n_periods.saturating_sub(1),
            });
        }
        let mut index = HashMap::with_capacity(n_units);
        for (row, id) in unit_ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(Error::DuplicateUnitId(id.clone()));
            }
        }
        for row in 0..n_units {
            for col in 0..n_periods {
                if !outcomes[(row, col)].is_finite() {
                    return Err(Error::MissingValue { row, col });
                }
            }
        }
        treated.sort_unstable();
        for pair in treated.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::DuplicateUnitId(unit_ids[pair[0]].clone()));
            }
        }
        if let Some(&bad) = treated.iter().find(|&&r| r >= n_units) {
            return Err(Error::InvalidPanel(format!("treated row {bad} out of range")));
        }
        if treated.is_empty() || treated.len() >= n_units {
            return Err(Error::InvalidPanel(format!(
                "need 1 <= treated < N, got {} of {}",
                treated.len(),
                n_units
            )));
        }
        let mut is_treated = vec![false; n_units];
        for &r in &treated {
            is_treated[r] = true;
        }
        Ok(Self {
            unit_ids,
            periods,
            outcomes,
            t0,
            treated,
            is_treated,
            index,
        })
    }

    pub fn n_units(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn n_treated(&self) -> usize {
        self.treated.len()
    }

    /// Number of pre-treatment periods.
    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn periods(&self) -> &[String] {
        &self.periods
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn treated(&self) -> &[usize] {
        &self.treated
    }

    pub fn is_treated(&self, row: usize) -> bool {
        self.is_treated[row]
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// All rows that are not treated, ascending.
    pub fn donor_rows(&self) -> Vec<usize> {
        (0..self.n_units()).filter(|&r| !self.is_treated[r]).collect()
    }

    pub fn pre_cols(&self) -> Range<usize> {
        0..self.t0
    }

    pub fn post_cols(&self) -> Range<usize> {
        self.t0..self.n_periods()
    }

    /// Copies a (rows × cols) block into a dense matrix.
    pub fn block(&self, rows: &[usize], cols: Range<usize>) -> DMatrix<f64> {
        let start = cols.start;
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
            self.outcomes[(rows[i], start + j)]
        })
    }

    pub fn view(&self, rows: Vec<usize>, cols: Range<usize>) -> OutcomeView<'_> {
        OutcomeView::new(self, rows, cols)
    }

    /// Same panel with a different treated set (e.g. placebo draws).
    pub fn with_treated(&self, treated: Vec<usize>) -> Result<Self> {
        Self::new(
            self.unit_ids.clone(),
            self.periods.clone(),
            self.outcomes.clone(),
            self.t0,
            treated,
        )
    }
}

/// Unit covariates, row-aligned with a [`PanelMatrix`].
#[derive(Debug, Clone)]
pub struct CovariateTable {
    unit_ids: Vec<String>,
    names: Vec<String>,
    covariates: DMatrix<f64>,
}

impl CovariateTable {
    pub fn new(unit_ids: Vec<String>, names: Vec<String>, covariates: DMatrix<f64>) -> Result<Self> {
        if covariates.nrows() != unit_ids.len() {
            return Err(Error::RowMismatch(format!(
                "{} ids for {} covariate rows",
                unit_ids.len(),
                covariates.nrows()
            )));
        }
        if covariates.ncols() == 0 || names.len() != covariates.ncols() {
            return Err(Error::RowMismatch("need p >= 1 named covariate columns".into()));
        }
        for row in 0..covariates.nrows() {
            for col in 0..covariates.ncols() {
                if !covariates[(row, col)].is_finite() {
                    return Err(Error::MissingValue { row, col });
                }
            }
        }
        Ok(Self {
            unit_ids,
            names,
            covariates,
        })
    }

    pub fn n_features(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        self.covariates.row(r).iter().copied().collect()
    }

    /// Checks id-by-id that rows follow the panel's order.
    pub fn check_aligned(&self, panel: &PanelMatrix) -> Result<()> {
        if self.unit_ids.len() != panel.n_units() {
            return Err(Error::RowMismatch(format!(
                "{} covariate rows for {} panel units",
                self.unit_ids.len(),
                panel.n_units()
            )));
        }
        for (a, b) in self.unit_ids.iter().zip(panel.unit_ids()) {
            if a != b {
                return Err(Error::RowMismatch(format!("row for `{a}` where `{b}` expected")));
            }
        }
        Ok(())
    }
}

/// Read-only rectangular selection of a panel, keeping the parent row and
/// column indices it came from.
#[derive(Debug, Clone)]
pub struct OutcomeView<'a> {
    panel: &'a PanelMatrix,
    rows: Vec<usize>,
    cols: Range<usize>,
}

impl<'a> OutcomeView<'a> {
    /// Panics if the selection falls outside the panel or rows are not
    /// strictly increasing.
    pub fn new(panel: &'a PanelMatrix, rows: Vec<usize>, cols: Range<usize>) -> Self {
        assert!(cols.end <= panel.n_periods(), "column range out of bounds");
        assert!(
            rows.windows(2).all(|w| w[0] < w[1]),
            "view rows must be strictly increasing"
        );
        assert!(rows.iter().all(|&r| r < panel.n_units()), "view row out of bounds");
        Self { panel, rows, cols }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn cols(&self) -> Range<usize> {
        self.cols.clone()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.panel.outcomes[(self.rows[i], self.cols.start + j)]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        self.panel.block(&self.rows, self.cols.clone())
    }
}

/// The four blocks of the panel: treated/donor × pre/post.
#[derive(Debug, Clone)]
pub struct PanelViews<'a> {
    pub treated_pre: OutcomeView<'a>,
    pub treated_post: OutcomeView<'a>,
    pub donor_pre: OutcomeView<'a>,
    pub donor_post: OutcomeView<'a>,
}

pub fn split_views(panel: &PanelMatrix) -> PanelViews<'_> {
    let treated = panel.treated().to_vec();
    let donors = panel.donor_rows();
    PanelViews {
        treated_pre: panel.view(treated.clone(), panel.pre_cols()),
        treated_post: panel.view(treated, panel.post_cols()),
        donor_pre: panel.view(donors.clone(), panel.pre_cols()),
        donor_post: panel.view(donors, panel.post_cols()),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_cell(raw: &str, row: usize, col: usize) -> Result<f64> {
    let s = raw.trim();
    if s.is_empty() {
        return Err(Error::MissingValue { row, col });
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(Error::MissingValue { row, col }),
        Err(_) => Err(Error::Parse(format!(
            "cannot parse `{s}` as a number at row {row}, column {col}"
        ))),
    }
}

struct WideCsv {
    header: Vec<String>,
    ids: Vec<String>,
    values: Vec<Vec<f64>>,
}

fn read_wide_csv(path: &Path) -> Result<WideCsv> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.len() < 2 || header[0] != "unit_id" {
        return Err(Error::Parse(format!(
            "{}: header must start with `unit_id` followed by value columns",
            path.display()
        )));
    }
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err(path))?;
        ids.push(record[0].trim().to_string());
        let vals = record
            .iter()
            .skip(1)
            .enumerate()
            .map(|(col, raw)| parse_cell(raw, row, col))
            .collect::<Result<Vec<f64>>>()?;
        values.push(vals);
    }
    Ok(WideCsv {
        header: header[1..].to_vec(),
        ids,
        values,
    })
}

fn rows_to_matrix(values: &[Vec<f64>], ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(values.len(), ncols, |i, j| values[i][j])
}

/// Reads a list of unit ids, one per line; blank lines are skipped.
pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_id_list(path: &Path, ids: &[String]) -> Result<()> {
    let mut out = String::new();
    for id in ids {
        out.push_str(id);
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Loads the wide outcome CSV and the treated-id list. `t0` is the number of
/// pre-treatment periods.
pub fn load_panel(outcome_path: &Path, treated_path: &Path, t0: usize) -> Result<PanelMatrix> {
    let wide = read_wide_csv(outcome_path)?;
    let outcomes = rows_to_matrix(&wide.values, wide.header.len());
    let mut index = HashMap::with_capacity(wide.ids.len());
    for (row, id) in wide.ids.iter().enumerate() {
        if index.insert(id.as_str(), row).is_some() {
            return Err(Error::DuplicateUnitId(id.clone()));
        }
    }
    let treated = read_id_list(treated_path)?
        .into_iter()
        .map(|id| index.get(id.as_str()).copied().ok_or(Error::UnknownTreatedId(id)))
        .collect::<Result<Vec<_>>>()?;
    PanelMatrix::new(wide.ids, wide.header, outcomes, t0, treated)
}

/// Writes the panel back in the formats read by [`load_panel`]. Values use
/// the shortest representation that parses back to the same `f64`.
pub fn write_panel(panel: &PanelMatrix, outcome_path: &Path, treated_path: &Path) -> Result<()> {
    let file = fs::File::create(outcome_path).map_err(io_err(outcome_path))?;
    let mut w = std::io::BufWriter::new(file);
    let write = |w: &mut std::io::BufWriter<fs::File>, s: &str| {
        w.write_all(s.as_bytes()).map_err(io_err(outcome_path))
    };
    let mut line = String::from("unit_id");
    for p in panel.periods() {
        line.push(',');
        line.push_str(p);
    }
    line.push('\n');
    write(&mut w, &line)?;
    for (r, id) in panel.unit_ids().iter().enumerate() {
        line.clear();
        line.push_str(id);
        for c in 0..panel.n_periods() {
            line.push(',');
            line.push_str(&panel.outcomes()[(r, c)].to_string());
        }
        line.push('\n');
        write(&mut w, &line)?;
    }
    w.flush().map_err(io_err(outcome_path))?;
    let ids: Vec<String> = panel
        .treated()
        .iter()
        .map(|&r| panel.unit_ids()[r].clone())
        .collect();
    write_id_list(treated_path, &ids)
}

/// Loads covariates and reorders rows to the panel's unit order.
pub fn load_covariates(path: &Path, panel: &PanelMatrix) -> Result<CovariateTable> {
    let wide = read_wide_csv(path)?;
    let p = wide.header.len();
    let mut slots: Vec<Option<usize>> = vec![None; panel.n_units()];
    for (src, id) in wide.ids.iter().enumerate() {
        let row = panel
            .row_of(id)
            .ok_or_else(|| Error::RowMismatch(format!("covariate row for unknown unit `{id}`")))?;
        if slots[row].replace(src).is_some() {
            return Err(Error::DuplicateUnitId(id.clone()));
        }
    }
    let order = slots
        .iter()
        .enumerate()
        .map(|(row, s)| {
            s.ok_or_else(|| {
                Error::RowMismatch(format!("no covariates for unit `{}`", panel.unit_ids()[row]))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let matrix = DMatrix::from_fn(panel.n_units(), p, |i, j| wide.values[order[i]][j]);
    CovariateTable::new(panel.unit_ids().to_vec(), wide.header, matrix)
}

pub fn write_covariates(table: &CovariateTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["unit_id".to_string()];
    header.extend(table.names().iter().cloned());
    w.write_record(&header).map_err(csv_err(path))?;
    for (r, id) in table.unit_ids().iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(table.matrix().row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
