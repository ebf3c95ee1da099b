//! Scenario panel data model: per-scenario return blocks, the loss mapping,
//! row deduplication, and CSV ingestion.
//!
//! A panel stacks `m = m1 + m2` blocks of simple-return observations, one
//! block per scenario. Blocks `1..=m1` are normal-market scenarios, blocks
//! `m1+1..=m` are stressed. All blocks share the same asset count `d`.

use std::collections::HashSet;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Block-size layout of a panel: sizes `(n_1, ..., n_m)` plus the
/// normal/stressed split at `m1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    sizes: Vec<usize>,
    m1: usize,
}

impl Partition {
    pub fn new(sizes: Vec<usize>, m1: usize) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::EmptyInput("partition has no blocks".into()));
        }
        if sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidParameter("partition block of size 0".into()));
        }
        if m1 > sizes.len() {
            return Err(Error::InvalidParameter(format!(
                "m1 = {} exceeds block count {}",
                m1,
                sizes.len()
            )));
        }
        Ok(Self { sizes, m1 })
    }

    /// Total row count `n = sum n_s`.
    pub fn n(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Number of blocks.
    pub fn m(&self) -> usize {
        self.sizes.len()
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    pub fn m2(&self) -> usize {
        self.sizes.len() - self.m1
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Row range of block `s` (0-indexed) in the stacked vector.
    pub fn range(&self, s: usize) -> Range<usize> {
        let start: usize = self.sizes[..s].iter().sum();
        start..start + self.sizes[s]
    }

    pub fn is_stressed(&self, s: usize) -> bool {
        s >= self.m1
    }
}

/// Stacked per-scenario return observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPanel {
    blocks: Vec<DMatrix<f64>>,
    m1: usize,
    asset_names: Option<Vec<String>>,
    /// Optional per-row date strings; metadata only, never used in computation.
    dates: Option<Vec<String>>,
}

impl ScenarioPanel {
    pub fn new(
        blocks: Vec<DMatrix<f64>>,
        m1: usize,
        m2: usize,
        asset_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::EmptyInput("panel has no blocks".into()));
        }
        if blocks.len() != m1 + m2 {
            return Err(Error::InvalidParameter(format!(
                "block count {} does not equal m1 + m2 = {}",
                blocks.len(),
                m1 + m2
            )));
        }
        let d = blocks[0].ncols();
        if d == 0 {
            return Err(Error::InvalidParameter("panel has zero assets".into()));
        }
        for (s, b) in blocks.iter().enumerate() {
            if b.ncols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "block {} has {} columns, expected {}",
                    s + 1,
                    b.ncols(),
                    d
                )));
            }
            if b.nrows() == 0 {
                return Err(Error::EmptyInput(format!("block {} has no rows", s + 1)));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "non-finite entry in block {}",
                    s + 1
                )));
            }
        }
        if let Some(names) = &asset_names {
            if names.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "{} asset names for {} columns",
                    names.len(),
                    d
                )));
            }
        }
        Ok(Self { blocks, m1, asset_names, dates: None })
    }

    pub fn with_dates(mut self, dates: Vec<String>) -> Result<Self> {
        if dates.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "{} dates for {} rows",
                dates.len(),
                self.n()
            )));
        }
        self.dates = Some(dates);
        Ok(self)
    }

    pub fn d(&self) -> usize {
        self.blocks[0].ncols()
    }

    pub fn n(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    pub fn m2(&self) -> usize {
        self.blocks.len() - self.m1
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn block(&self, s: usize) -> &DMatrix<f64> {
        &self.blocks[s]
    }

    pub fn asset_names(&self) -> Option<&[String]> {
        self.asset_names.as_deref()
    }

    pub fn dates(&self) -> Option<&[String]> {
        self.dates.as_deref()
    }

    pub fn partition(&self) -> Partition {
        Partition {
            sizes: self.blocks.iter().map(|b| b.nrows()).collect(),
            m1: self.m1,
        }
    }

    /// The stacked observation matrix (all blocks concatenated by rows).
    pub fn stacked(&self) -> DMatrix<f64> {
        let d = self.d();
        let mut out = DMatrix::zeros(self.n(), d);
        let mut row = 0;
        for b in &self.blocks {
            out.rows_mut(row, b.nrows()).copy_from(b);
            row += b.nrows();
        }
        out
    }

    /// Column means of the stacked matrix; the usual estimate of expected
    /// returns when no external estimate is supplied.
    pub fn column_means(&self) -> DVector<f64> {
        let stacked = self.stacked();
        let n = stacked.nrows() as f64;
        DVector::from_iterator(stacked.ncols(), stacked.column_iter().map(|c| c.sum() / n))
    }
}

/// Length-`d` portfolio weight vector (fractions of wealth per asset).
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioWeights {
    values: DVector<f64>,
}

impl PortfolioWeights {
    /// Wrap a weight vector without feasibility checks.
    pub fn new_unchecked(values: DVector<f64>) -> Self {
        Self { values }
    }

    /// Wrap a weight vector, enforcing membership in `set`.
    pub fn validated(values: DVector<f64>, set: &WeightSet) -> Result<Self> {
        set.check(&values)?;
        Ok(Self { values })
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }
}

/// The feasible weight set: the simplex, optionally intersected with a
/// target-return floor `mu' u >= r0`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub mu: DVector<f64>,
    pub r0: Option<f64>,
}

impl WeightSet {
    pub fn with_target(mu: DVector<f64>, r0: f64) -> Self {
        Self { mu, r0: Some(r0) }
    }

    pub fn simplex_only(mu: DVector<f64>) -> Self {
        Self { mu, r0: None }
    }

    /// True when no weight vector can reach the target return. On the
    /// simplex the best attainable expected return is `max_i mu_i`.
    pub fn is_infeasible(&self) -> bool {
        match self.r0 {
            Some(r0) => self.mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max) < r0 - 1e-9,
            None => false,
        }
    }

    pub fn check(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.mu.len() {
            return Err(Error::DimensionMismatch(format!(
                "weights have length {}, expected {}",
                u.len(),
                self.mu.len()
            )));
        }
        let total: f64 = u.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Infeasible(format!("weights sum to {total}, not 1")));
        }
        if u.iter().any(|&w| w < -1e-12) {
            return Err(Error::Infeasible("negative weight beyond tolerance".into()));
        }
        if let Some(r0) = self.r0 {
            let ret = self.mu.dot(u);
            if ret < r0 - 1e-9 {
                return Err(Error::Infeasible(format!(
                    "expected return {ret} below target {r0}"
                )));
            }
        }
        Ok(())
    }
}

/// Stacked portfolio losses `-R u`, partitioned by scenario block.
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector {
    values: DVector<f64>,
    partition: Partition,
}

impl LossVector {
    pub fn new(values: DVector<f64>, partition: Partition) -> Result<Self> {
        if values.len() != partition.n() {
            return Err(Error::DimensionMismatch(format!(
                "loss vector length {} does not match partition total {}",
                values.len(),
                partition.n()
            )));
        }
        Ok(Self { values, partition })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    /// Loss observations of block `s` (0-indexed).
    pub fn block(&self, s: usize) -> &[f64] {
        &self.values.as_slice()[self.partition.range(s)]
    }
}

/// Per-scenario portfolio losses `x(u)` with block `s` equal to `-R^[s] u`.
pub fn loss_vector(panel: &ScenarioPanel, u: &PortfolioWeights) -> Result<LossVector> {
    if panel.d() != u.len() {
        return Err(Error::DimensionMismatch(format!(
            "panel has {} assets, weights have {}",
            panel.d(),
            u.len()
        )));
    }
    let mut values = DVector::zeros(panel.n());
    let mut row = 0;
    for b in panel.blocks() {
        let block_losses = -(b * u.as_vector());
        values.rows_mut(row, b.nrows()).copy_from(&block_losses);
        row += b.nrows();
    }
    LossVector::new(values, panel.partition())
}

/// Concatenate all block rows and drop exact duplicates, keeping the first
/// occurrence. Duplicate detection is bitwise, which is what rolling-window
/// construction produces: repeated rows are copies, not near-misses.
pub fn dedup_rows(panel: &ScenarioPanel) -> DMatrix<f64> {
    let d = panel.d();
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for b in panel.blocks() {
        for r in 0..b.nrows() {
            let key: Vec<u64> = (0..d).map(|c| b[(r, c)].to_bits()).collect();
            if seen.insert(key) {
                rows.push((0..d).map(|c| b[(r, c)]).collect());
            }
        }
    }
    DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c])
}

/// Format with 17 significant digits; round-trips exactly through `parse`.
fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Load a panel from CSV with header `scenario_id[,date],<asset_1>,...`.
/// Rows with equal `scenario_id` must be contiguous; the number of distinct
/// ids must equal `m1 + m2`, and roles are assigned by position.
pub fn load_panel_csv(path: impl AsRef<Path>, m1: usize, m2: usize) -> Result<ScenarioPanel> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path.as_ref())?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("csv header: {e}")))?
        .clone();
    if headers.is_empty() || headers.get(0) != Some("scenario_id") {
        return Err(Error::Parse("first column must be scenario_id".into()));
    }
    let has_dates = headers.get(1) == Some("date");
    let first_asset_col = if has_dates { 2 } else { 1 };
    let asset_names: Vec<String> = headers.iter().skip(first_asset_col).map(String::from).collect();
    let d = asset_names.len();
    if d == 0 {
        return Err(Error::Parse("no asset columns".into()));
    }

    let mut block_ids: Vec<String> = Vec::new();
    let mut block_rows: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut dates: Vec<String> = Vec::new();
    let mut finished: HashSet<String> = HashSet::new();
    let mut row_no = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse(format!("csv row: {e}")))?;
        row_no += 1;
        let id = record.get(0).unwrap_or_default().to_string();
        match block_ids.last() {
            Some(last) if *last == id => {}
            _ => {
                if finished.contains(&id) {
                    return Err(Error::Parse(format!(
                        "scenario_id {id} forms non-contiguous groups (row {row_no})"
                    )));
                }
                if let Some(last) = block_ids.last() {
                    finished.insert(last.clone());
                }
                block_ids.push(id.clone());
                block_rows.push(Vec::new());
            }
        }
        if has_dates {
            dates.push(record.get(1).unwrap_or_default().to_string());
        }
        let mut row = Vec::with_capacity(d);
        for c in 0..d {
            let raw = record.get(first_asset_col + c).unwrap_or_default();
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("unparseable value '{raw}' at row {row_no}")))?;
            if !v.is_finite() {
                return Err(Error::Parse(format!("non-finite entry at row {row_no}")));
            }
            row.push(v);
        }
        block_rows.last_mut().unwrap().push(row);
    }
    if block_rows.is_empty() {
        return Err(Error::EmptyInput("no observations".into()));
    }
    if block_rows.len() != m1 + m2 {
        return Err(Error::InvalidParameter(format!(
            "file has {} scenarios, expected m1 + m2 = {}",
            block_rows.len(),
            m1 + m2
        )));
    }
    let blocks: Vec<DMatrix<f64>> = block_rows
        .into_iter()
        .map(|rows| DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]))
        .collect();
    let panel = ScenarioPanel::new(blocks, m1, m2, Some(asset_names))?;
    if has_dates {
        panel.with_dates(dates)
    } else {
        Ok(panel)
    }
}

/// Write a panel as CSV. Values carry 17 significant digits so that a
/// read-back is bit-exact. Scenario ids are `s1..sm` unless dates were
/// loaded, in which case the date column is re-emitted.
pub fn write_panel_csv(panel: &ScenarioPanel, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    let names: Vec<String> = match panel.asset_names() {
        Some(names) => names.to_vec(),
        None => (1..=panel.d()).map(|i| format!("asset_{i}")).collect(),
    };
    let has_dates = panel.dates().is_some();
    write!(out, "scenario_id")?;
    if has_dates {
        write!(out, ",date")?;
    }
    for name in &names {
        write!(out, ",{name}")?;
    }
    writeln!(out)?;
    let mut flat_row = 0usize;
    for (s, b) in panel.blocks().iter().enumerate() {
        for r in 0..b.nrows() {
            write!(out, "s{}", s + 1)?;
            if let Some(dates) = panel.dates() {
                write!(out, ",{}", dates[flat_row])?;
            }
            for c in 0..b.ncols() {
                write!(out, ",{}", fmt_value(b[(r, c)]))?;
            }
            writeln!(out)?;
            flat_row += 1;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn panel_from(rows_per_block: &[&[&[f64]]], m1: usize) -> ScenarioPanel {
        let blocks: Vec<DMatrix<f64>> = rows_per_block
            .iter()
            .map(|rows| {
                DMatrix::from_fn(rows.len(), rows[0].len(), |r, c| rows[r][c])
            })
            .collect();
        let m2 = blocks.len() - m1;
        ScenarioPanel::new(blocks, m1, m2, None).unwrap()
    }

    #[test]
    fn loss_vector_selects_column() {
        let panel = panel_from(&[&[&[0.01, 0.02]]], 1);
        let u = PortfolioWeights::new_unchecked(DVector::from_vec(vec![1.0, 0.0]));
        let x = loss_vector(&panel, &u).unwrap();
        assert_abs_diff_eq!(x.values()[0], -0.01, epsilon = 1e-15);
    }

    #[test]
    fn loss_vector_hand_computed() {
        let panel = panel_from(&[&[&[0.01, 0.03]], &[&[-0.02, 0.00]]], 1);
        let u = PortfolioWeights::new_unchecked(DVector::from_vec(vec![0.5, 0.5]));
        let x = loss_vector(&panel, &u).unwrap();
        assert_abs_diff_eq!(x.values()[0], -0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(x.values()[1], 0.01, epsilon = 1e-15);
    }

    #[test]
    fn loss_vector_zero_weights() {
        let panel = panel_from(&[&[&[0.4, -0.3], &[0.1, 0.2]]], 1);
        let u = PortfolioWeights::new_unchecked(DVector::zeros(2));
        let x = loss_vector(&panel, &u).unwrap();
        assert!(x.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_vector_dimension_mismatch() {
        let panel = panel_from(&[&[&[0.01, 0.02]]], 1);
        let u = PortfolioWeights::new_unchecked(DVector::from_vec(vec![1.0]));
        assert!(matches!(loss_vector(&panel, &u), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn loss_vector_is_linear() {
        let panel = panel_from(&[&[&[0.02, -0.01], &[0.005, 0.03]], &[&[-0.04, 0.015]]], 1);
        let a = DVector::from_vec(vec![0.3, 0.7]);
        let b = DVector::from_vec(vec![-0.2, 1.2]);
        let (alpha, beta) = (1.7, -0.4);
        let combo = PortfolioWeights::new_unchecked(alpha * &a + beta * &b);
        let xa = loss_vector(&panel, &PortfolioWeights::new_unchecked(a)).unwrap();
        let xb = loss_vector(&panel, &PortfolioWeights::new_unchecked(b)).unwrap();
        let xc = loss_vector(&panel, &combo).unwrap();
        for i in 0..panel.n() {
            assert_abs_diff_eq!(
                xc.values()[i],
                alpha * xa.values()[i] + beta * xb.values()[i],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn dedup_collapses_identical_rows() {
        let panel = panel_from(&[&[&[1.0, 2.0]], &[&[1.0, 2.0]]], 1);
        let y = dedup_rows(&panel);
        assert_eq!(y.nrows(), 1);
        assert_eq!(y[(0, 0)], 1.0);
        assert_eq!(y[(0, 1)], 2.0);
    }

    #[test]
    fn dedup_keeps_distinct_rows() {
        let panel = panel_from(&[&[&[1.0, 2.0]], &[&[3.0, 4.0]]], 1);
        let y = dedup_rows(&panel);
        assert_eq!(y.nrows(), 2);
    }

    #[test]
    fn dedup_rolling_windows() {
        // Two length-10 windows over an 11-point path, shifted by one row:
        // 20 rows in the panel, 11 distinct.
        let path: Vec<[f64; 1]> = (0..11).map(|i| [i as f64 * 0.01]).collect();
        let w0: Vec<&[f64]> = path[0..10].iter().map(|r| r.as_slice()).collect();
        let w1: Vec<&[f64]> = path[1..11].iter().map(|r| r.as_slice()).collect();
        let panel = panel_from(&[&w0, &w1], 1);
        assert_eq!(panel.n(), 20);
        assert_eq!(dedup_rows(&panel).nrows(), 11);
    }

    #[test]
    fn dedup_idempotent() {
        let panel = panel_from(&[&[&[1.0, 2.0], &[1.0, 2.0], &[0.5, 0.5]], &[&[1.0, 2.0]]], 1);
        let once = dedup_rows(&panel);
        let wrapped = ScenarioPanel::new(vec![once.clone()], 1, 0, None).unwrap();
        assert_eq!(dedup_rows(&wrapped), once);
    }

    #[test]
    fn csv_round_trip_bit_exact() {
        let dir = std::env::temp_dir().join(format!("panel_rt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("panel.csv");
        let panel = panel_from(
            &[
                &[&[0.0123456789012345, -0.5], &[1.0 / 3.0, 2e-17]],
                &[&[f64::MIN_POSITIVE, 12345.6789]],
            ],
            1,
        );
        write_panel_csv(&panel, &path).unwrap();
        let loaded = load_panel_csv(&path, 1, 1).unwrap();
        assert_eq!(loaded.n(), panel.n());
        for (a, b) in loaded.blocks().iter().zip(panel.blocks()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_structural_and_error_cases() {
        let dir = std::env::temp_dir().join(format!("panel_err_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        let four = dir.join("four.csv");
        std::fs::write(
            &four,
            "scenario_id,a,b\ns1,0.1,0.2\ns2,0.3,0.4\ns3,0.5,0.6\ns4,0.7,0.8\n",
        )
        .unwrap();
        let panel = load_panel_csv(&four, 2, 2).unwrap();
        assert_eq!(panel.m1(), 2);
        assert_eq!(panel.m2(), 2);
        assert_eq!(panel.n(), 4);

        let nan = dir.join("nan.csv");
        std::fs::write(&nan, "scenario_id,a\ns1,0.1\ns1,NaN\n").unwrap();
        let err = load_panel_csv(&nan, 1, 0).unwrap_err();
        assert!(err.to_string().contains("non-finite entry at row 2"), "{err}");

        let empty = dir.join("empty.csv");
        std::fs::write(&empty, "scenario_id,a\n").unwrap();
        let err = load_panel_csv(&empty, 1, 0).unwrap_err();
        assert!(err.to_string().contains("no observations"), "{err}");

        let ragged = dir.join("ragged.csv");
        std::fs::write(&ragged, "scenario_id,a,b\ns1,0.1,0.2\ns1,0.3\n").unwrap();
        assert!(load_panel_csv(&ragged, 1, 0).is_err());

        let split = dir.join("split.csv");
        std::fs::write(&split, "scenario_id,a\ns1,0.1\ns2,0.2\ns1,0.3\n").unwrap();
        let err = load_panel_csv(&split, 1, 1).unwrap_err();
        assert!(err.to_string().contains("non-contiguous"), "{err}");

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn weight_set_checks() {
        let set = WeightSet::with_target(DVector::from_vec(vec![0.02, 0.01]), 0.03);
        assert!(set.is_infeasible());
        let set = WeightSet::with_target(DVector::from_vec(vec![0.02, 0.01]), 0.015);
        assert!(!set.is_infeasible());
        assert!(set.check(&DVector::from_vec(vec![0.4, 0.6])).is_err());
        assert!(set.check(&DVector::from_vec(vec![0.8, 0.2])).is_ok());
    }
}
