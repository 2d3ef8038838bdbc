//! Balanced-panel ingestion, validation, and transforms.
//!
//! The single ingestion format is a long CSV (one row per unit-period) with a
//! JSON column-mapping schema. Internally a panel is stored as n×T matrices;
//! periods are arbitrary consecutive integer labels mapped to indices 0..T-1.
//! Treatment is staggered-absorbing: each unit has an adoption period index
//! `g` in 1..T (never in the first period) or the sentinel `T` for units that
//! are never treated, so `D_it = 1{t >= g}` columnwise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column-mapping schema for the long CSV format.
///
/// Exactly one of `treat` (0/1 indicator column) or `group` (adoption-period
/// column, 0 = never treated) must be given. `outcome` may be omitted, which
/// yields a dataset usable for balance diagnostics but not estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    pub unit: String,
    pub time: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treat: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default)]
    pub tv: Vec<String>,
    #[serde(default)]
    pub ti: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<String>,
}

/// Ingestion switches.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Drop units already treated in the first period instead of rejecting
    /// the dataset (a warning records how many were dropped).
    pub drop_always_treated: bool,
}

/// One validation finding.
#[derive(Debug, Clone, Serialize)]
pub struct Issue {
    pub code: String,
    pub message: String,
    pub location: String,
}

impl Issue {
    fn new(code: &str, message: impl Into<String>, location: impl Into<String>) -> Self {
        Issue { code: code.to_string(), message: message.into(), location: location.into() }
    }
}

/// Validation outcome plus summary counts. A dataset with nonempty `errors`
/// is rejected by every estimator.
#[derive(Debug, Clone, Serialize, Default)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
    pub n_units: usize,
    pub n_periods: usize,
    /// (group label as string, unit count); "never" for never-treated.
    pub group_sizes: Vec<(String, usize)>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Balanced long panel: outcomes, staggered treatment groups, time-varying
/// and time-invariant covariates, per-unit sampling weights.
///
/// Immutable after construction; all views borrow or copy out of it.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    unit_ids: Vec<String>,
    periods: Vec<i64>,
    outcome: Option<DMatrix<f64>>,
    /// 0-based adoption period index in 1..T, or T for never treated.
    group_idx: Vec<usize>,
    tv: Vec<DMatrix<f64>>,
    tv_names: Vec<String>,
    ti: DMatrix<f64>,
    ti_names: Vec<String>,
    weight: DVector<f64>,
}

/// First-difference view at a two-group period t*: treated units adopt exactly
/// at t*, everyone else adopts later or never.
#[derive(Debug, Clone)]
pub struct TwoPeriodView {
    /// 1.0 for units with G = t*, else 0.0.
    pub treat: DVector<f64>,
    /// Y_{t*} − Y_{t*−1}.
    pub dy: DVector<f64>,
    /// X_{t*} − X_{t*−1}, one column per time-varying covariate.
    pub dx: DMatrix<f64>,
    pub x_pre: DMatrix<f64>,
    pub x_post: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub weight: DVector<f64>,
    pub tv_names: Vec<String>,
    pub ti_names: Vec<String>,
    pub t_star: i64,
    pub base: i64,
}

impl TwoPeriodView {
    /// Assemble a view from raw parts (used by tests and simulations).
    pub fn new(
        treat: DVector<f64>,
        dy: DVector<f64>,
        dx: DMatrix<f64>,
        x_pre: DMatrix<f64>,
        x_post: DMatrix<f64>,
        z: DMatrix<f64>,
        weight: DVector<f64>,
        tv_names: Vec<String>,
        ti_names: Vec<String>,
    ) -> Result<Self> {
        let n = treat.len();
        if dy.len() != n || dx.nrows() != n || x_pre.nrows() != n || x_post.nrows() != n
            || z.nrows() != n || weight.len() != n
        {
            return Err(Error::validation("two-period view parts have inconsistent row counts"));
        }
        if treat.iter().any(|d| *d != 0.0 && *d != 1.0) {
            return Err(Error::validation("treatment indicator must be exactly 0 or 1"));
        }
        if weight.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::validation("sampling weights must be strictly positive"));
        }
        if dx.ncols() != tv_names.len() || z.ncols() != ti_names.len() {
            return Err(Error::validation("covariate name count does not match column count"));
        }
        Ok(TwoPeriodView {
            treat, dy, dx, x_pre, x_post, z, weight, tv_names, ti_names,
            t_star: 2, base: 1,
        })
    }

    pub fn n(&self) -> usize {
        self.treat.len()
    }

    pub fn k(&self) -> usize {
        self.dx.ncols()
    }

    pub fn n_treated(&self) -> usize {
        self.treat.iter().filter(|d| **d == 1.0).count()
    }
}

impl PanelDataset {
    /// Build a dataset from parts, enforcing every structural invariant.
    ///
    /// `group_idx` uses 0-based period indices: adoption at index g in 1..T,
    /// or T for never-treated units.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        unit_ids: Vec<String>,
        periods: Vec<i64>,
        outcome: Option<DMatrix<f64>>,
        group_idx: Vec<usize>,
        tv: Vec<DMatrix<f64>>,
        tv_names: Vec<String>,
        ti: DMatrix<f64>,
        ti_names: Vec<String>,
        weight: DVector<f64>,
    ) -> Result<Self> {
        let n = unit_ids.len();
        let t_len = periods.len();
        if n == 0 || t_len < 2 {
            return Err(Error::validation("a panel needs at least one unit and two periods"));
        }
        for w in periods.windows(2) {
            if w[1] != w[0] + 1 {
                return Err(Error::validation(format!(
                    "period labels must be consecutive integers; saw {} then {}",
                    w[0], w[1]
                )));
            }
        }
        {
            let mut seen = std::collections::BTreeSet::new();
            for id in &unit_ids {
                if !seen.insert(id.clone()) {
                    return Err(Error::validation(format!("duplicate unit id '{id}'")));
                }
            }
        }
        if let Some(y) = &outcome {
            if y.nrows() != n || y.ncols() != t_len {
                return Err(Error::validation("outcome matrix shape mismatch"));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("outcome contains non-finite values"));
            }
        }
        if group_idx.len() != n {
            return Err(Error::validation("group vector length mismatch"));
        }
        for (i, g) in group_idx.iter().enumerate() {
            if *g == 0 {
                return Err(Error::validation(format!(
                    "unit '{}' is treated in the first period; staggered designs start untreated",
                    unit_ids[i]
                )));
            }
            if *g > t_len {
                return Err(Error::validation(format!(
                    "unit '{}' has adoption index {} beyond the panel length",
                    unit_ids[i], g
                )));
            }
        }
        if tv.len() != tv_names.len() {
            return Err(Error::validation("time-varying covariate name count mismatch"));
        }
        for (name, m) in tv_names.iter().zip(&tv) {
            if m.nrows() != n || m.ncols() != t_len {
                return Err(Error::validation(format!("covariate '{name}' shape mismatch")));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("covariate '{name}' contains non-finite values")));
            }
        }
        if ti.nrows() != n || ti.ncols() != ti_names.len() {
            return Err(Error::validation("time-invariant covariate shape mismatch"));
        }
        if ti.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("time-invariant covariates contain non-finite values"));
        }
        if weight.len() != n {
            return Err(Error::validation("weight vector length mismatch"));
        }
        if weight.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::validation("sampling weights must be strictly positive and finite"));
        }
        Ok(PanelDataset {
            unit_ids, periods, outcome, group_idx, tv, tv_names, ti, ti_names, weight,
        })
    }

    pub fn n(&self) -> usize {
        self.unit_ids.len()
    }

    /// Number of periods T.
    pub fn t_len(&self) -> usize {
        self.periods.len()
    }

    pub fn k(&self) -> usize {
        self.tv.len()
    }

    pub fn l(&self) -> usize {
        self.ti_names.len()
    }

    pub fn periods(&self) -> &[i64] {
        &self.periods
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn weight(&self) -> &DVector<f64> {
        &self.weight
    }

    pub fn tv_names(&self) -> &[String] {
        &self.tv_names
    }

    pub fn ti_names(&self) -> &[String] {
        &self.ti_names
    }

    pub fn tv(&self, j: usize) -> &DMatrix<f64> {
        &self.tv[j]
    }

    pub fn ti(&self) -> &DMatrix<f64> {
        &self.ti
    }

    pub fn has_outcome(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn outcome(&self) -> Result<&DMatrix<f64>> {
        self.outcome
            .as_ref()
            .ok_or_else(|| Error::validation("this operation needs an outcome column, none was mapped"))
    }

    /// 0-based adoption index; `t_len()` means never treated.
    pub fn group_idx(&self, i: usize) -> usize {
        self.group_idx[i]
    }

    pub fn is_never_treated(&self, i: usize) -> bool {
        self.group_idx[i] == self.t_len()
    }

    /// Adoption period label, or None for never-treated units.
    pub fn group_label(&self, i: usize) -> Option<i64> {
        if self.is_never_treated(i) {
            None
        } else {
            Some(self.periods[self.group_idx[i]])
        }
    }

    /// Treatment indicator D_it for a 0-based period index.
    pub fn d(&self, i: usize, t: usize) -> f64 {
        if t >= self.group_idx[i] {
            1.0
        } else {
            0.0
        }
    }

    /// Distinct adoption indices among ever-treated units, ascending.
    pub fn treated_groups(&self) -> Vec<usize> {
        let mut gs: Vec<usize> = self
            .group_idx
            .iter()
            .copied()
            .filter(|g| *g < self.t_len())
            .collect();
        gs.sort_unstable();
        gs.dedup();
        gs
    }

    pub fn never_treated_count(&self) -> usize {
        (0..self.n()).filter(|&i| self.is_never_treated(i)).count()
    }

    /// Label → 0-based index lookup.
    pub fn period_index(&self, label: i64) -> Option<usize> {
        let first = self.periods[0];
        let off = label - first;
        if off >= 0 && (off as usize) < self.periods.len() {
            Some(off as usize)
        } else {
            None
        }
    }

    /// New dataset with the selected unit rows (repeats allowed, e.g. for the
    /// cluster bootstrap). Repeated units get `#pos` id suffixes so ids stay
    /// unique.
    pub fn select_units(&self, idx: &[usize]) -> Result<PanelDataset> {
        if idx.is_empty() {
            return Err(Error::validation("cannot select an empty set of units"));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut fresh_ids = Vec::with_capacity(idx.len());
        for (pos, &i) in idx.iter().enumerate() {
            if i >= self.n() {
                return Err(Error::validation(format!("unit index {i} out of range")));
            }
            let base = &self.unit_ids[i];
            if seen.insert(base.clone()) {
                fresh_ids.push(base.clone());
            } else {
                fresh_ids.push(format!("{base}#{pos}"));
            }
        }
        let take_rows = |m: &DMatrix<f64>| -> DMatrix<f64> {
            let mut out = DMatrix::zeros(idx.len(), m.ncols());
            for (r, &i) in idx.iter().enumerate() {
                out.set_row(r, &m.row(i));
            }
            out
        };
        PanelDataset::new(
            fresh_ids,
            self.periods.clone(),
            self.outcome.as_ref().map(take_rows),
            idx.iter().map(|&i| self.group_idx[i]).collect(),
            self.tv.iter().map(take_rows).collect(),
            self.tv_names.clone(),
            take_rows(&self.ti),
            self.ti_names.clone(),
            DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.weight[i])),
        )
    }

    /// First-difference two-group view at period label `t_star`.
    ///
    /// Requires every unit to adopt exactly at t* or later (or never); units
    /// already treated before t* break the two-group structure and are an
    /// error.
    pub fn two_period_view(&self, t_star: i64) -> Result<TwoPeriodView> {
        let s = self
            .period_index(t_star)
            .ok_or_else(|| Error::validation(format!("period {t_star} is not in the panel")))?;
        if s == 0 {
            return Err(Error::validation(format!(
                "period {t_star} has no preceding period in the panel"
            )));
        }
        for i in 0..self.n() {
            if self.group_idx[i] < s {
                return Err(Error::validation(format!(
                    "not a two-group design at t*={}: unit '{}' is treated from period {}",
                    t_star,
                    self.unit_ids[i],
                    self.periods[self.group_idx[i]]
                )));
            }
        }
        let y = self.outcome()?;
        let n = self.n();
        let k = self.k();
        let mut treat = DVector::zeros(n);
        let mut dy = DVector::zeros(n);
        let mut dx = DMatrix::zeros(n, k);
        let mut x_pre = DMatrix::zeros(n, k);
        let mut x_post = DMatrix::zeros(n, k);
        for i in 0..n {
            treat[i] = if self.group_idx[i] == s { 1.0 } else { 0.0 };
            dy[i] = y[(i, s)] - y[(i, s - 1)];
            for j in 0..k {
                x_pre[(i, j)] = self.tv[j][(i, s - 1)];
                x_post[(i, j)] = self.tv[j][(i, s)];
                dx[(i, j)] = x_post[(i, j)] - x_pre[(i, j)];
            }
        }
        Ok(TwoPeriodView {
            treat,
            dy,
            dx,
            x_pre,
            x_post,
            z: self.ti.clone(),
            weight: self.weight.clone(),
            tv_names: self.tv_names.clone(),
            ti_names: self.ti_names.clone(),
            t_star,
            base: self.periods[s - 1],
        })
    }

    /// Write the panel back to a long CSV with canonical column names
    /// (`unit,time,y,...tv...,...ti...,weight,group`). Numeric cells print in
    /// shortest round-trip form, so reloading reproduces the data bit-exactly.
    pub fn write_long_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["unit".to_string(), "time".to_string()];
        if self.outcome.is_some() {
            header.push("y".to_string());
        }
        header.extend(self.tv_names.iter().cloned());
        header.extend(self.ti_names.iter().cloned());
        header.push("weight".to_string());
        header.push("group".to_string());
        w.write_record(&header)?;
        for i in 0..self.n() {
            for t in 0..self.t_len() {
                let mut rec = vec![self.unit_ids[i].clone(), self.periods[t].to_string()];
                if let Some(y) = &self.outcome {
                    rec.push(format!("{}", y[(i, t)]));
                }
                for m in &self.tv {
                    rec.push(format!("{}", m[(i, t)]));
                }
                for j in 0..self.l() {
                    rec.push(format!("{}", self.ti[(i, j)]));
                }
                rec.push(format!("{}", self.weight[i]));
                rec.push(
                    self.group_label(i)
                        .map(|g| g.to_string())
                        .unwrap_or_else(|| "0".to_string()),
                );
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Convert an n×T 0/1 treatment matrix into adoption indices.
///
/// Each row must be monotone nondecreasing (treatment is absorbing) and start
/// untreated. Returns 0-based adoption indices with T for all-zero rows.
pub fn derive_groups(treat: &DMatrix<f64>) -> Result<Vec<usize>> {
    let t_len = treat.ncols();
    let mut out = Vec::with_capacity(treat.nrows());
    for i in 0..treat.nrows() {
        let mut g = t_len;
        for t in 0..t_len {
            let v = treat[(i, t)];
            if v != 0.0 && v != 1.0 {
                return Err(Error::validation(format!(
                    "treatment indicator must be 0 or 1 (unit row {i}, period column {t})"
                )));
            }
            if v == 1.0 && g == t_len {
                g = t;
            }
            if v == 0.0 && g < t_len {
                return Err(Error::validation(format!(
                    "treatment reversal in unit row {i}; staggered adoption violated"
                )));
            }
        }
        if g == 0 {
            return Err(Error::validation(format!("unit row {i} is treated in the first period")));
        }
        out.push(g);
    }
    Ok(out)
}

/// Double demeaning: subtract unit means and weighted period means, add back
/// the weighted grand mean. Annihilates additive unit and period effects.
///
/// Row means are plain averages over the T periods; period and grand means are
/// weighted across units by `weights`.
pub fn double_demean(matrix: &DMatrix<f64>, weights: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (n, t_len) = matrix.shape();
    if weights.len() != n {
        return Err(Error::validation("double_demean weight length mismatch"));
    }
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::validation("double_demean weights must be positive"));
    }
    let sw: f64 = weights.iter().sum();
    let mut row_mean = vec![0.0; n];
    for i in 0..n {
        row_mean[i] = matrix.row(i).sum() / t_len as f64;
    }
    let mut col_mean = vec![0.0; t_len];
    for t in 0..t_len {
        let mut acc = 0.0;
        for i in 0..n {
            acc += weights[i] * matrix[(i, t)];
        }
        col_mean[t] = acc / sw;
    }
    let grand: f64 = (0..n).map(|i| weights[i] * row_mean[i]).sum::<f64>() / sw;
    let mut out = DMatrix::zeros(n, t_len);
    for i in 0..n {
        for t in 0..t_len {
            out[(i, t)] = matrix[(i, t)] - row_mean[i] - col_mean[t] + grand;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// long CSV ingestion
// ---------------------------------------------------------------------------

/// Load and fully validate a long CSV; any validation error rejects the file.
pub fn load_long_csv(path: &Path, schema: &ColumnSchema, opts: &LoadOptions) -> Result<PanelDataset> {
    let (dataset, report) = ingest(path, schema, opts)?;
    match dataset {
        Some(d) if report.ok() => Ok(d),
        _ => {
            let mut msg = format!("{} validation error(s) in {}:", report.errors.len(), path.display());
            for e in report.errors.iter().take(5) {
                let _ = write!(msg, "\n  [{}] {} ({})", e.code, e.message, e.location);
            }
            if report.errors.len() > 5 {
                let _ = write!(msg, "\n  ... and {} more", report.errors.len() - 5);
            }
            Err(Error::Validation(msg))
        }
    }
}

/// Validate a long CSV and report all findings without failing on content
/// problems (I/O failures still error).
pub fn validate_long_csv(
    path: &Path,
    schema: &ColumnSchema,
    opts: &LoadOptions,
) -> Result<ValidationReport> {
    let (_, report) = ingest(path, schema, opts)?;
    Ok(report)
}

fn ingest(
    path: &Path,
    schema: &ColumnSchema,
    opts: &LoadOptions,
) -> Result<(Option<PanelDataset>, ValidationReport)> {
    let mut report = ValidationReport::default();
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;

    // ---- resolve columns -------------------------------------------------
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);

    match (&schema.treat, &schema.group) {
        (Some(_), Some(_)) => report.errors.push(Issue::new(
            "schema_conflict",
            "schema maps both a treatment column and a group column; use exactly one",
            "schema",
        )),
        (None, None) => report.errors.push(Issue::new(
            "schema_missing",
            "schema must map either a 0/1 treatment column or a group column",
            "schema",
        )),
        _ => {}
    }

    let mut need: Vec<(&str, &str)> = vec![(schema.unit.as_str(), "unit"), (schema.time.as_str(), "time")];
    if let Some(c) = &schema.outcome {
        need.push((c.as_str(), "outcome"));
    }
    if let Some(c) = &schema.treat {
        need.push((c.as_str(), "treat"));
    }
    if let Some(c) = &schema.group {
        need.push((c.as_str(), "group"));
    }
    if let Some(c) = &schema.weight {
        need.push((c.as_str(), "weight"));
    }
    for c in schema.tv.iter().chain(schema.ti.iter()) {
        need.push((c.as_str(), "covariate"));
    }
    let mut col_of: BTreeMap<String, usize> = BTreeMap::new();
    for (name, role) in &need {
        match find(name) {
            Some(i) => {
                col_of.insert((*name).to_string(), i);
            }
            None => report.errors.push(Issue::new(
                "missing_column",
                format!("{role} column '{name}' not found in header"),
                "header",
            )),
        }
    }
    if !report.errors.is_empty() {
        return Ok((None, report));
    }

    // ---- parse rows -------------------------------------------------------
    struct RawRow {
        line: u64,
        values: Vec<f64>, // outcome?, tv.., ti.., treat?/group?, weight?
    }
    let numeric_cols: Vec<String> = {
        let mut v = Vec::new();
        if let Some(c) = &schema.outcome {
            v.push(c.clone());
        }
        v.extend(schema.tv.iter().cloned());
        v.extend(schema.ti.iter().cloned());
        if let Some(c) = &schema.treat {
            v.push(c.clone());
        }
        if let Some(c) = &schema.group {
            v.push(c.clone());
        }
        if let Some(c) = &schema.weight {
            v.push(c.clone());
        }
        v
    };

    let mut cells: BTreeMap<(String, i64), RawRow> = BTreeMap::new();
    let mut unit_order: Vec<String> = Vec::new();
    let mut times: Vec<i64> = Vec::new();
    let unit_col = col_of[&schema.unit];
    let time_col = col_of[&schema.time];

    for (rec_idx, rec) in rdr.records().enumerate() {
        let line = rec_idx as u64 + 2; // 1-based, after the header line
        let rec = rec?;
        let unit = match rec.get(unit_col) {
            Some(u) if !u.trim().is_empty() => u.trim().to_string(),
            _ => {
                report.errors.push(Issue::new("missing_cell", "empty unit id", format!("line {line}")));
                continue;
            }
        };
        let time: i64 = match rec.get(time_col).map(str::trim).and_then(|s| s.parse().ok()) {
            Some(t) => t,
            None => {
                report.errors.push(Issue::new(
                    "non_numeric",
                    format!("time column '{}' is not an integer", schema.time),
                    format!("line {line}"),
                ));
                continue;
            }
        };
        let mut values = Vec::with_capacity(numeric_cols.len());
        let mut bad = false;
        for name in &numeric_cols {
            let idx = col_of[name];
            match rec.get(idx).map(str::trim).and_then(|s| s.parse::<f64>().ok()) {
                Some(v) if v.is_finite() => values.push(v),
                _ => {
                    report.errors.push(Issue::new(
                        "non_numeric",
                        format!("column '{name}' has a non-numeric cell"),
                        format!("line {line}"),
                    ));
                    bad = true;
                    break;
                }
            }
        }
        if bad {
            continue;
        }
        if !unit_order.contains(&unit) {
            unit_order.push(unit.clone());
        }
        if !times.contains(&time) {
            times.push(time);
        }
        if cells.insert((unit.clone(), time), RawRow { line, values }).is_some() {
            report.errors.push(Issue::new(
                "duplicate_cell",
                format!("unit '{unit}' appears twice in period {time}"),
                format!("line {line}"),
            ));
        }
    }

    if unit_order.is_empty() || times.is_empty() {
        report.errors.push(Issue::new("empty", "no usable rows in the file", path.display().to_string()));
        return Ok((None, report));
    }
    times.sort_unstable();
    for w in times.windows(2) {
        if w[1] != w[0] + 1 {
            report.errors.push(Issue::new(
                "periods_not_consecutive",
                format!("period labels must be consecutive integers; gap between {} and {}", w[0], w[1]),
                "file",
            ));
        }
    }
    if times.len() < 2 {
        report.errors.push(Issue::new("too_few_periods", "a panel needs at least two periods", "file"));
    }

    // ---- balance ----------------------------------------------------------
    for u in &unit_order {
        for t in &times {
            if !cells.contains_key(&(u.clone(), *t)) {
                report.errors.push(Issue::new(
                    "unbalanced_panel",
                    format!("unbalanced panel: unit '{u}' lacks period {t}"),
                    format!("unit {u}"),
                ));
            }
        }
    }
    if !report.errors.is_empty() {
        report.n_units = unit_order.len();
        report.n_periods = times.len();
        return Ok((None, report));
    }

    // ---- assemble matrices -------------------------------------------------
    let n = unit_order.len();
    let t_len = times.len();
    let k = schema.tv.len();
    let l = schema.ti.len();
    let mut outcome = schema.outcome.as_ref().map(|_| DMatrix::zeros(n, t_len));
    let mut tvm: Vec<DMatrix<f64>> = (0..k).map(|_| DMatrix::zeros(n, t_len)).collect();
    let mut ti = DMatrix::zeros(n, l);
    let mut weight = DVector::from_element(n, 1.0);
    let mut treat_mat = schema.treat.as_ref().map(|_| DMatrix::zeros(n, t_len));
    let mut group_col: Vec<Option<f64>> = vec![None; n];

    // value layout inside RawRow.values
    let o_off = 0usize;
    let tv_off = o_off + usize::from(schema.outcome.is_some());
    let ti_off = tv_off + k;
    let tg_off = ti_off + l;
    let w_off = tg_off + usize::from(schema.treat.is_some() || schema.group.is_some());

    for (i, u) in unit_order.iter().enumerate() {
        for (ti_idx, t) in times.iter().enumerate() {
            let row = &cells[&(u.clone(), *t)];
            if let Some(y) = outcome.as_mut() {
                y[(i, ti_idx)] = row.values[o_off];
            }
            for j in 0..k {
                tvm[j][(i, ti_idx)] = row.values[tv_off + j];
            }
            for j in 0..l {
                let v = row.values[ti_off + j];
                if ti_idx == 0 {
                    ti[(i, j)] = v;
                } else if ti[(i, j)] != v {
                    report.errors.push(Issue::new(
                        "ti_varies",
                        format!(
                            "time-invariant column '{}' varies within unit '{u}' ({} vs {})",
                            schema.ti[j],
                            ti[(i, j)],
                            v
                        ),
                        format!("line {}", row.line),
                    ));
                }
            }
            if let Some(tm) = treat_mat.as_mut() {
                tm[(i, ti_idx)] = row.values[tg_off];
            }
            if schema.group.is_some() {
                let v = row.values[tg_off];
                match group_col[i] {
                    None => group_col[i] = Some(v),
                    Some(prev) if prev != v => report.errors.push(Issue::new(
                        "group_varies",
                        format!("group column changes within unit '{u}'"),
                        format!("line {}", row.line),
                    )),
                    _ => {}
                }
            }
            if schema.weight.is_some() {
                let v = row.values[w_off];
                if ti_idx == 0 {
                    weight[i] = v;
                } else if weight[i] != v {
                    report.errors.push(Issue::new(
                        "weight_varies",
                        format!("sampling weight changes within unit '{u}' (weights are per-unit)"),
                        format!("line {}", row.line),
                    ));
                }
            }
        }
        if !(weight[i] > 0.0) {
            report.errors.push(Issue::new(
                "nonpositive_weight",
                format!("unit '{u}' has nonpositive sampling weight {}", weight[i]),
                format!("unit {u}"),
            ));
        }
    }

    // ---- groups -------------------------------------------------------------
    let mut group_idx: Vec<usize> = Vec::new();
    if let Some(tm) = &treat_mat {
        // derive per unit so messages carry unit ids; first-period adopters
        // become index 0 and flow into the shared reject-or-drop logic below
        for (i, u) in unit_order.iter().enumerate() {
            let row = DMatrix::from_fn(1, t_len, |_, t| tm[(i, t)]);
            match derive_groups(&row) {
                Ok(g) => group_idx.push(g[0]),
                Err(e) if e.to_string().contains("first period") => group_idx.push(0),
                Err(e) => {
                    group_idx.push(t_len);
                    report.errors.push(Issue::new(
                        "treatment_pattern",
                        format!("unit '{u}': {e}"),
                        format!("unit {u}"),
                    ));
                }
            }
        }
    } else {
        let first = times[0];
        let last = times[t_len - 1];
        for (i, u) in unit_order.iter().enumerate() {
            let v = group_col[i].unwrap_or(0.0);
            if v.fract() != 0.0 {
                report.errors.push(Issue::new(
                    "group_out_of_range",
                    format!("unit '{u}' has non-integer group value {v}"),
                    format!("unit {u}"),
                ));
                group_idx.push(t_len);
                continue;
            }
            let g = v as i64;
            if g == 0 || g > last {
                group_idx.push(t_len); // never treated
            } else if g <= first {
                group_idx.push(0); // flagged below as treated-in-first-period
            } else {
                group_idx.push((g - first) as usize);
            }
        }
    }

    // first-period adopters: reject or drop
    let always: Vec<usize> = group_idx
        .iter()
        .enumerate()
        .filter(|(_, g)| **g == 0)
        .map(|(i, _)| i)
        .collect();
    let mut keep: Vec<usize> = (0..n).collect();
    if !always.is_empty() {
        if opts.drop_always_treated {
            keep.retain(|i| group_idx[*i] != 0);
            report.warnings.push(Issue::new(
                "always_treated_dropped",
                format!("dropped {} unit(s) already treated in the first period", always.len()),
                "file",
            ));
            if keep.is_empty() {
                report.errors.push(Issue::new("empty", "all units were treated in the first period", "file"));
            }
        } else {
            for i in &always {
                report.errors.push(Issue::new(
                    "treated_in_first_period",
                    format!(
                        "unit '{}' is treated in the first period; rerun with drop_always_treated to drop such units",
                        unit_order[*i]
                    ),
                    format!("unit {}", unit_order[*i]),
                ));
            }
        }
    }

    report.n_units = keep.len();
    report.n_periods = t_len;

    if !report.ok() {
        return Ok((None, report));
    }

    // summaries + warnings
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in &keep {
        *sizes.entry(group_idx[i]).or_insert(0) += 1;
    }
    for (g, c) in &sizes {
        let label = if *g == t_len { "never".to_string() } else { times[*g].to_string() };
        report.group_sizes.push((label, *c));
    }
    if !sizes.contains_key(&t_len) {
        report.warnings.push(Issue::new(
            "no_never_treated",
            "no never-treated units; estimators that need a never-treated comparison group will fail",
            "file",
        ));
    }
    for (g, c) in &sizes {
        if *g < t_len && *c < 5 {
            report.warnings.push(Issue::new(
                "small_group",
                format!("adoption group {} has only {c} unit(s)", times[*g]),
                "file",
            ));
        }
    }

    let select = |m: DMatrix<f64>| -> DMatrix<f64> {
        if keep.len() == m.nrows() {
            m
        } else {
            let mut out = DMatrix::zeros(keep.len(), m.ncols());
            for (r, &i) in keep.iter().enumerate() {
                out.set_row(r, &m.row(i));
            }
            out
        }
    };

    let dataset = PanelDataset::new(
        keep.iter().map(|&i| unit_order[i].clone()).collect(),
        times,
        outcome.take().map(select),
        keep.iter().map(|&i| group_idx[i]).collect(),
        tvm.into_iter().map(select).collect(),
        schema.tv.clone(),
        select(ti),
        schema.ti.clone(),
        DVector::from_iterator(keep.len(), keep.iter().map(|&i| weight[i])),
    )?;
    Ok((Some(dataset), report))
}
