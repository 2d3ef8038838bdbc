//! Exact finite-population test beds.
//!
//! A [`DiscreteDgp`] describes a population over finitely many covariate
//! cells: each cell carries a covariate history, group-assignment
//! probabilities, an untreated mean-outcome path, and treatment effects.
//! Because the support is finite, every population quantity — true ATTs, the
//! probability limit of the fixed-effects coefficient, and its bias
//! decompositions — is a finite probability-weighted sum that can be computed
//! exactly and compared against estimator output. Gaussian noise enters only
//! through [`simulate_sample`]; population quantities ignore it.
//!
//! Conditional expectations are computed by cell aggregation: conditioning on
//! covariate values means summing masses within strata that share those
//! values bit-for-bit. This is the whole reason the covariates are restricted
//! to finite support here.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::linear_projection;
use crate::panel::PanelDataset;
use crate::twfe::{
    fit_fd_twfe, fit_fe_twfe, mp_implicit_weights, never_treated_projection, FeOptions,
};

/// One covariate cell of a discrete population.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpCell {
    /// Time-varying covariate histories: one vector of length `t_len` per
    /// covariate, in `tv_names` order.
    #[serde(default)]
    pub x: Vec<Vec<f64>>,
    /// Time-invariant covariate values, in `ti_names` order.
    #[serde(default)]
    pub z: Vec<f64>,
    /// Marginal probability of the cell.
    pub prob: f64,
    /// P(G = g | cell), keyed by adoption period label ("2", "3", ...) or
    /// "never". Missing keys mean probability zero.
    pub group_probs: BTreeMap<String, f64>,
    /// Mean untreated outcome path E[Y_t(0) | cell], length `t_len`.
    pub m0: Vec<f64>,
    /// Treatment effects per adoption group: tau[g][t] is the mean effect at
    /// period index t for units adopting at g. Entries before adoption must
    /// be zero; a missing group means zero effects throughout.
    #[serde(default)]
    pub tau: BTreeMap<String, Vec<f64>>,
}

/// A discrete-population data generating process.
///
/// Periods are labeled 1..=t_len. Groups are labeled by adoption period
/// ("2".."T") plus "never"; nobody may adopt in period 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteDgp {
    pub name: String,
    pub t_len: usize,
    #[serde(default)]
    pub tv_names: Vec<String>,
    #[serde(default)]
    pub ti_names: Vec<String>,
    /// SD of the iid Gaussian noise added around mean paths when sampling.
    pub noise_sd: f64,
    pub cells: Vec<DgpCell>,
    /// Additive shifts to a *group's* untreated mean path, keyed like
    /// `group_probs`. All zero (or absent) keeps untreated paths equal across
    /// groups given the cell — the parallel-trends-compliant case. The
    /// never-treated path is the baseline and cannot be shifted.
    #[serde(default)]
    pub group_trend: BTreeMap<String, Vec<f64>>,
}

/// Parse a group key: adoption period label 2..=t_len, or "never" mapping to
/// the 0-based sentinel `t_len`.
fn parse_group_key(key: &str, t_len: usize) -> Result<usize> {
    if key == "never" {
        return Ok(t_len);
    }
    let label: usize = key
        .parse()
        .map_err(|_| Error::validation(format!("group key '{key}' is not a period label or 'never'")))?;
    if label < 2 || label > t_len {
        return Err(Error::validation(format!(
            "group key '{key}' must be an adoption period in 2..={t_len}"
        )));
    }
    Ok(label - 1)
}

fn group_key(idx: usize, t_len: usize) -> String {
    if idx >= t_len {
        "never".to_string()
    } else {
        (idx + 1).to_string()
    }
}

impl DiscreteDgp {
    pub fn from_json(text: &str) -> Result<Self> {
        let dgp: DiscreteDgp = serde_json::from_str(text)?;
        dgp.validate()?;
        Ok(dgp)
    }

    pub fn k(&self) -> usize {
        self.tv_names.len()
    }

    pub fn l(&self) -> usize {
        self.ti_names.len()
    }

    fn validate(&self) -> Result<()> {
        if self.t_len < 2 {
            return Err(Error::validation("a population needs at least two periods"));
        }
        if self.cells.is_empty() {
            return Err(Error::validation("population has no cells"));
        }
        if !self.noise_sd.is_finite() || self.noise_sd < 0.0 {
            return Err(Error::validation("noise_sd must be a nonnegative number"));
        }
        let (k, l, t_len) = (self.k(), self.l(), self.t_len);
        let mut total = 0.0;
        let mut group_mass: BTreeMap<usize, f64> = BTreeMap::new();
        for (c, cell) in self.cells.iter().enumerate() {
            if cell.x.len() != k {
                return Err(Error::validation(format!(
                    "cell {c}: {} covariate histories listed, {} names declared",
                    cell.x.len(),
                    k
                )));
            }
            for (j, path) in cell.x.iter().enumerate() {
                if path.len() != t_len || path.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation(format!(
                        "cell {c}: covariate '{}' needs {t_len} finite values",
                        self.tv_names[j]
                    )));
                }
            }
            if cell.z.len() != l || cell.z.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "cell {c}: needs {l} finite time-invariant values"
                )));
            }
            if cell.m0.len() != t_len || cell.m0.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "cell {c}: m0 needs {t_len} finite values"
                )));
            }
            if !cell.prob.is_finite() || cell.prob < 0.0 {
                return Err(Error::validation(format!("cell {c}: negative or non-finite probability")));
            }
            total += cell.prob;
            let mut cell_group_total = 0.0;
            for (key, p) in &cell.group_probs {
                let g = parse_group_key(key, t_len)?;
                if !p.is_finite() || *p < 0.0 || *p > 1.0 {
                    return Err(Error::validation(format!(
                        "cell {c}: P(G={key}) = {p} is outside [0, 1]"
                    )));
                }
                cell_group_total += p;
                if cell.prob * p > 0.0 {
                    *group_mass.entry(g).or_insert(0.0) += cell.prob * p;
                }
            }
            if (cell_group_total - 1.0).abs() > 1e-12 {
                return Err(Error::validation(format!(
                    "cell {c}: group probabilities sum to {cell_group_total}, not 1"
                )));
            }
            for (key, path) in &cell.tau {
                let g = parse_group_key(key, t_len)?;
                if g >= t_len {
                    return Err(Error::validation(format!(
                        "cell {c}: treatment effects listed for the never-treated group"
                    )));
                }
                if path.len() != t_len || path.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation(format!(
                        "cell {c}: tau['{key}'] needs {t_len} finite values"
                    )));
                }
                if path[..g].iter().any(|v| *v != 0.0) {
                    return Err(Error::validation(format!(
                        "cell {c}: tau['{key}'] is nonzero before adoption; effects cannot anticipate treatment"
                    )));
                }
            }
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::validation(format!("cell probabilities sum to {total}, not 1")));
        }
        for (key, path) in &self.group_trend {
            let g = parse_group_key(key, t_len)?;
            if g >= t_len {
                return Err(Error::validation(
                    "the never-treated path is the baseline; shift treated groups instead",
                ));
            }
            if path.len() != t_len || path.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "group_trend['{key}'] needs {t_len} finite values"
                )));
            }
        }
        match group_mass.get(&t_len) {
            Some(m) if *m > 0.0 => {}
            _ => {
                return Err(Error::validation(
                    "population has no never-treated mass; every test bed needs an untreated arm",
                ))
            }
        }
        if group_mass.keys().all(|g| *g >= t_len) {
            return Err(Error::validation("population has no treated mass"));
        }
        Ok(())
    }
}

/// One (cell, group) stratum of the enumerated population.
#[derive(Debug, Clone, Serialize)]
pub struct PopulationRow {
    pub cell: usize,
    /// 0-based adoption index; `t_len` for never-treated.
    pub group_idx: usize,
    pub mass: f64,
    /// Mean observed outcome path (untreated path + group shift + effects).
    pub y: Vec<f64>,
    /// Mean untreated path including the group shift.
    pub y0: Vec<f64>,
}

/// The fully enumerated population: one row per (cell, group) with positive
/// mass. Every population quantity downstream is a weighted sum over rows.
#[derive(Debug, Clone)]
pub struct PopulationTable {
    pub t_len: usize,
    pub tv_names: Vec<String>,
    pub ti_names: Vec<String>,
    pub cells: Vec<DgpCell>,
    pub rows: Vec<PopulationRow>,
}

impl PopulationTable {
    pub fn total_mass(&self) -> f64 {
        self.rows.iter().map(|r| r.mass).sum()
    }

    pub fn group_mass(&self, group_idx: usize) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.group_idx == group_idx)
            .map(|r| r.mass)
            .sum()
    }

    /// 0-based adoption indices of treated groups, ascending.
    pub fn treated_groups(&self) -> Vec<usize> {
        let mut gs: Vec<usize> = self
            .rows
            .iter()
            .map(|r| r.group_idx)
            .filter(|g| *g < self.t_len)
            .collect();
        gs.sort_unstable();
        gs.dedup();
        gs
    }
}

/// Expand a DGP into its exact (cell, group) table.
pub fn enumerate_population(dgp: &DiscreteDgp) -> Result<PopulationTable> {
    dgp.validate()?;
    let t_len = dgp.t_len;
    let zeros = vec![0.0; t_len];
    let mut rows = Vec::new();
    for (c, cell) in dgp.cells.iter().enumerate() {
        for (key, p) in &cell.group_probs {
            let mass = cell.prob * p;
            if mass == 0.0 {
                continue;
            }
            let g = parse_group_key(key, t_len)?;
            let shift = if g < t_len {
                dgp.group_trend.get(key).unwrap_or(&zeros)
            } else {
                &zeros
            };
            let tau = cell.tau.get(key).unwrap_or(&zeros);
            let y0: Vec<f64> = (0..t_len).map(|t| cell.m0[t] + shift[t]).collect();
            let y: Vec<f64> = (0..t_len)
                .map(|t| y0[t] + if g < t_len && t >= g { tau[t] } else { 0.0 })
                .collect();
            rows.push(PopulationRow { cell: c, group_idx: g, mass, y, y0 });
        }
    }
    Ok(PopulationTable {
        t_len,
        tv_names: dgp.tv_names.clone(),
        ti_names: dgp.ti_names.clone(),
        cells: dgp.cells.clone(),
        rows,
    })
}

/// View the enumerated table as a panel dataset: one pseudo-unit per
/// (cell, group) row, weighted by its probability mass. Estimators run on
/// this dataset compute exact population quantities.
pub fn as_panel_dataset(table: &PopulationTable) -> Result<PanelDataset> {
    let t_len = table.t_len;
    let n = table.rows.len();
    let k = table.tv_names.len();
    let l = table.ti_names.len();
    let mut outcome = DMatrix::zeros(n, t_len);
    let mut tv: Vec<DMatrix<f64>> = (0..k).map(|_| DMatrix::zeros(n, t_len)).collect();
    let mut ti = DMatrix::zeros(n, l);
    let mut weight = DVector::zeros(n);
    let mut ids = Vec::with_capacity(n);
    let mut group_idx = Vec::with_capacity(n);
    for (i, row) in table.rows.iter().enumerate() {
        let cell = &table.cells[row.cell];
        ids.push(format!("cell{}_g{}", row.cell, group_key(row.group_idx, t_len)));
        group_idx.push(row.group_idx);
        weight[i] = row.mass;
        for t in 0..t_len {
            outcome[(i, t)] = row.y[t];
            for j in 0..k {
                tv[j][(i, t)] = cell.x[j][t];
            }
        }
        for j in 0..l {
            ti[(i, j)] = cell.z[j];
        }
    }
    PanelDataset::new(
        ids,
        (1..=t_len as i64).collect(),
        Some(outcome),
        group_idx,
        tv,
        table.tv_names.clone(),
        ti,
        table.ti_names.clone(),
        weight,
    )
}

// ---------------------------------------------------------------------------
// true effects
// ---------------------------------------------------------------------------

/// Mean effect for one covariate cell at one (group, period).
#[derive(Debug, Clone, Serialize)]
pub struct ConditionalAtt {
    pub cell: usize,
    pub group: i64,
    pub period: i64,
    pub value: f64,
}

/// Closed-form treatment effects of a DGP.
#[derive(Debug, Clone, Serialize)]
pub struct TruthAtt {
    /// Headline effect; equals `att_overall`.
    pub att: f64,
    /// ATT(g, t) for every treated group and post period, as
    /// (group label, period label, value).
    pub att_gt: Vec<(i64, i64, f64)>,
    /// Post-period effects averaged with group-share weights.
    pub att_overall: f64,
    pub conditional: Vec<ConditionalAtt>,
}

/// Exact probability-weighted treatment effects.
pub fn truth_att(dgp: &DiscreteDgp) -> Result<TruthAtt> {
    let table = enumerate_population(dgp)?;
    let t_len = table.t_len;
    let groups = table.treated_groups();
    let zeros = vec![0.0; t_len];

    let mut att_gt = Vec::new();
    let mut conditional = Vec::new();
    for &g in &groups {
        let key = group_key(g, t_len);
        let pg = table.group_mass(g);
        for t in g..t_len {
            let mut acc = 0.0;
            for row in table.rows.iter().filter(|r| r.group_idx == g) {
                let tau = table.cells[row.cell].tau.get(&key).unwrap_or(&zeros);
                acc += row.mass * tau[t];
                conditional.push(ConditionalAtt {
                    cell: row.cell,
                    group: (g + 1) as i64,
                    period: (t + 1) as i64,
                    value: tau[t],
                });
            }
            att_gt.push(((g + 1) as i64, (t + 1) as i64, acc / pg));
        }
    }
    conditional.sort_by(|a, b| (a.group, a.period, a.cell).cmp(&(b.group, b.period, b.cell)));
    conditional.dedup_by(|a, b| (a.cell, a.group, a.period) == (b.cell, b.group, b.period));

    let ever: f64 = groups.iter().map(|&g| table.group_mass(g)).sum();
    let mut att_overall = 0.0;
    for &g in &groups {
        let share = table.group_mass(g) / ever;
        let per_period = share / (t_len - g) as f64;
        for (label_g, _, v) in att_gt.iter().filter(|(lg, _, _)| *lg == (g + 1) as i64) {
            debug_assert_eq!(*label_g, (g + 1) as i64);
            att_overall += per_period * v;
        }
    }
    Ok(TruthAtt { att: att_overall, att_gt, att_overall, conditional })
}

// ---------------------------------------------------------------------------
// population regression coefficient
// ---------------------------------------------------------------------------

/// Probability limit of the fixed-effects treatment coefficient, computed by
/// running the estimator on the enumerated table with mass weights.
///
/// `two_period` selects the first-difference regression (table must have
/// exactly two periods); otherwise the pooled double-demeaned regression.
pub fn population_alpha(table: &PopulationTable, two_period: bool) -> Result<f64> {
    let ds = as_panel_dataset(table)?;
    if two_period {
        if table.t_len != 2 {
            return Err(Error::validation(
                "two-period coefficient requested on a table with more than two periods",
            ));
        }
        let view = ds.two_period_view(2)?;
        Ok(fit_fd_twfe(&view)?.alpha)
    } else {
        Ok(fit_fe_twfe(&ds, &FeOptions::default())?.alpha)
    }
}

// ---------------------------------------------------------------------------
// strata helpers
// ---------------------------------------------------------------------------

/// Conditioning by exact value match: masses and mass-weighted sums keyed by
/// the bit patterns of the conditioning values.
struct Strata {
    map: BTreeMap<Vec<u64>, (f64, f64)>,
}

fn stratum_key(values: impl Iterator<Item = f64>) -> Vec<u64> {
    // normalize -0.0 so it lands in the same stratum as 0.0
    values.map(|v| (v + 0.0).to_bits()).collect()
}

impl Strata {
    fn new() -> Self {
        Strata { map: BTreeMap::new() }
    }

    fn add(&mut self, key: Vec<u64>, mass: f64, value: f64) {
        let e = self.map.entry(key).or_insert((0.0, 0.0));
        e.0 += mass;
        e.1 += mass * value;
    }

    fn cond_mean(&self, key: &[u64], what: &str) -> Result<f64> {
        match self.map.get(key) {
            Some((mass, sum)) if *mass > 0.0 => Ok(sum / mass),
            _ => Err(Error::computation(format!(
                "no untreated mass shares the conditioning stratum for {what}; \
                 the conditional trend is undefined (overlap violation in the population)"
            ))),
        }
    }
}

fn cell_delta(cell: &DgpCell, t: usize, base: usize) -> Vec<f64> {
    cell.x.iter().map(|path| path[t] - path[base]).collect()
}

fn key_full(cell: &DgpCell) -> Vec<u64> {
    stratum_key(
        cell.x
            .iter()
            .flat_map(|path| path.iter().copied())
            .chain(cell.z.iter().copied()),
    )
}

fn key_history(cell: &DgpCell) -> Vec<u64> {
    stratum_key(cell.x.iter().flat_map(|path| path.iter().copied()))
}

fn key_pair(cell: &DgpCell, t: usize, base: usize) -> Vec<u64> {
    stratum_key(
        cell.x
            .iter()
            .map(|path| path[t])
            .chain(cell.x.iter().map(|path| path[base])),
    )
}

fn key_delta(cell: &DgpCell, t: usize, base: usize) -> Vec<u64> {
    stratum_key(cell_delta(cell, t, base).into_iter())
}

// ---------------------------------------------------------------------------
// two-period decomposition
// ---------------------------------------------------------------------------

/// Regression weight on one treated cell.
#[derive(Debug, Clone, Serialize)]
pub struct CellWeight {
    pub cell: usize,
    /// Share of treated mass in the cell.
    pub treated_share: f64,
    /// Implicit regression weight w; mean one over the treated distribution.
    pub weight: f64,
}

/// The two-period regression coefficient split into a weighted average of
/// conditional effects plus three bias channels.
#[derive(Debug, Clone, Serialize)]
pub struct AlphaDecomposition {
    pub alpha: f64,
    /// Weighted average of cell-level treated/untreated trend contrasts —
    /// the conditional ATTs whenever untreated trends are group-invariant.
    pub weighted_catt: f64,
    /// Bias from dropping time-invariant covariates out of the comparison.
    pub ti_covariate_bias: f64,
    /// Bias from comparing on covariate changes instead of levels.
    pub level_bias: f64,
    /// Bias from the gap between the untreated conditional mean and its
    /// linear projection on covariate changes.
    pub nonlinearity_bias: f64,
    pub cell_weights: Vec<CellWeight>,
    /// alpha minus the sum of the four components; certified ≤ 1e-10.
    pub closure_gap: f64,
}

impl AlphaDecomposition {
    /// Combined bias from losing levels and time-invariant covariates.
    pub fn hidden_linearity_bias(&self) -> f64 {
        self.ti_covariate_bias + self.level_bias
    }
}

/// Decompose the two-period population coefficient exactly.
///
/// The table must be two-group: a single treated group adopting in period 2
/// plus never-treated mass. Every treated cell's covariate strata must carry
/// untreated mass.
pub fn alpha_decomposition(table: &PopulationTable) -> Result<AlphaDecomposition> {
    if table.t_len != 2 {
        return Err(Error::validation("the trend-bias split over two periods needs a two-period table"));
    }
    let groups = table.treated_groups();
    if groups != vec![1] {
        return Err(Error::validation(
            "the two-period decomposition needs exactly one treated group adopting in period 2",
        ));
    }
    let k = table.tv_names.len();

    // pooled linear propensity L(D | ΔX)
    let n = table.rows.len();
    let mut design = DMatrix::zeros(n, k);
    let mut response = DVector::zeros(n);
    let mut masses = DVector::zeros(n);
    for (i, row) in table.rows.iter().enumerate() {
        let d = cell_delta(&table.cells[row.cell], 1, 0);
        for j in 0..k {
            design[(i, j)] = d[j];
        }
        response[i] = if row.group_idx == 1 { 1.0 } else { 0.0 };
        masses[i] = row.mass;
    }
    let labels: Vec<String> = table.tv_names.iter().map(|s| format!("d_{s}")).collect();
    let lp = linear_projection(&design, &response, &masses, &labels, true)?;
    let lhat = lp.predict(&design);

    // untreated strata of ΔY and the untreated linear trend projection
    let mut s_full = Strata::new();
    let mut s_levels = Strata::new();
    let mut s_delta = Strata::new();
    let never: Vec<(usize, &PopulationRow)> = table
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.group_idx == 2)
        .collect();
    let mut n_design = DMatrix::zeros(never.len(), k);
    let mut n_resp = DVector::zeros(never.len());
    let mut n_mass = DVector::zeros(never.len());
    for (pos, (_, row)) in never.iter().enumerate() {
        let cell = &table.cells[row.cell];
        let dy = row.y[1] - row.y[0];
        s_full.add(key_full(cell), row.mass, dy);
        s_levels.add(key_pair(cell, 1, 0), row.mass, dy);
        s_delta.add(key_delta(cell, 1, 0), row.mass, dy);
        for (j, v) in cell_delta(cell, 1, 0).iter().enumerate() {
            n_design[(pos, j)] = *v;
        }
        n_resp[pos] = dy;
        n_mass[pos] = row.mass;
    }
    let l0 = linear_projection(&n_design, &n_resp, &n_mass, &labels, true)?;

    // treated side: weights and the four components
    let treated: Vec<(usize, &PopulationRow)> = table
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.group_idx == 1)
        .collect();
    let treated_mass: f64 = treated.iter().map(|(_, r)| r.mass).sum();
    let mean_one_minus_l: f64 = treated
        .iter()
        .map(|(i, r)| r.mass * (1.0 - lhat[*i]))
        .sum::<f64>()
        / treated_mass;
    if mean_one_minus_l == 0.0 {
        return Err(Error::computation(
            "treated units have average linear propensity one; the coefficient denominator is zero",
        ));
    }

    let mut weighted_catt = 0.0;
    let mut term_ti = 0.0;
    let mut term_level = 0.0;
    let mut term_nonlin = 0.0;
    let mut cell_weights = Vec::with_capacity(treated.len());
    for (i, row) in &treated {
        let cell = &table.cells[row.cell];
        let what = format!("cell {}", row.cell);
        let share = row.mass / treated_mass;
        let w = (1.0 - lhat[*i]) / mean_one_minus_l;
        let dy_treated = row.y[1] - row.y[0];
        let cond_full = s_full.cond_mean(&key_full(cell), &what)?;
        let cond_levels = s_levels.cond_mean(&key_pair(cell, 1, 0), &what)?;
        let cond_delta = s_delta.cond_mean(&key_delta(cell, 1, 0), &what)?;
        let delta = cell_delta(cell, 1, 0);
        let mut proj = l0.coefficients[0];
        for j in 0..k {
            proj += l0.coefficients[j + 1] * delta[j];
        }
        weighted_catt += share * w * (dy_treated - cond_full);
        term_ti += share * w * (cond_full - cond_levels);
        term_level += share * w * (cond_levels - cond_delta);
        term_nonlin += share * w * (cond_delta - proj);
        cell_weights.push(CellWeight { cell: row.cell, treated_share: share, weight: w });
    }

    let alpha = population_alpha(table, true)?;
    let closure_gap = alpha - (weighted_catt + term_ti + term_level + term_nonlin);
    if closure_gap.abs() > 1e-10 {
        return Err(Error::computation(format!(
            "two-period decomposition failed to close: gap {closure_gap:.3e} exceeds 1e-10"
        )));
    }
    Ok(AlphaDecomposition {
        alpha,
        weighted_catt,
        ti_covariate_bias: term_ti,
        level_bias: term_level,
        nonlinearity_bias: term_nonlin,
        cell_weights,
        closure_gap,
    })
}

// ---------------------------------------------------------------------------
// per-pair trend-bias decomposition (staggered)
// ---------------------------------------------------------------------------

/// The five channels through which the fitted common trend misses the true
/// untreated trend for one covariate cell at one (group, period) pair.
#[derive(Debug, Clone, Serialize)]
pub struct CellTrendBias {
    pub cell: usize,
    /// Conditioning loses the time-invariant covariates.
    pub drop_ti: f64,
    /// Conditioning loses covariate periods other than t and the base.
    pub extra_period: f64,
    /// Conditioning on the covariate change instead of the two levels.
    pub level_vs_delta: f64,
    /// Conditional mean vs. the pair-specific linear projection.
    pub nonlinearity: f64,
    /// Pair-specific projection vs. the common fixed-effects trend model.
    pub slope_drift: f64,
    /// Total gap; equals the sum of the five channels (certified ≤ 1e-10).
    pub trend_gap: f64,
}

/// Trend-bias decomposition for one (group, period) pair, cell by cell.
#[derive(Debug, Clone, Serialize)]
pub struct TrendBiasDecomposition {
    /// Adoption period label of the group.
    pub group: i64,
    /// Calendar period label the pair compares against the base period.
    pub period: i64,
    pub base_period: i64,
    pub cells: Vec<CellTrendBias>,
    /// Cell terms averaged over the group's covariate distribution.
    pub average: CellTrendBias,
    /// Common-trend period effects λ_t from the untreated subpopulation.
    pub lambda: Vec<f64>,
    /// Common-trend covariate slopes Λ from the untreated subpopulation.
    pub capital_lambda: Vec<f64>,
    /// Intercept of the pair-specific untreated projection.
    pub pair_intercept: f64,
    /// Slopes of the pair-specific untreated projection.
    pub pair_slope: Vec<f64>,
}

/// Split the untreated-trend misfit ξ for pair (group, period) into its five
/// channels, exactly, for every cell with mass in the group.
pub fn trend_bias_decomposition(
    table: &PopulationTable,
    group: i64,
    period: i64,
) -> Result<TrendBiasDecomposition> {
    let t_len = table.t_len;
    let g = group as usize;
    if !(2..=t_len).contains(&g) {
        return Err(Error::validation(format!("group {group} is not an adoption period of this table")));
    }
    let g_idx = g - 1;
    let base_idx = g_idx - 1;
    let t = period as usize;
    if !(1..=t_len).contains(&t) {
        return Err(Error::validation(format!("period {period} is outside the panel")));
    }
    let t_idx = t - 1;
    if t_idx == base_idx {
        return Err(Error::validation(format!(
            "period {period} is group {group}'s own base period; the pair carries no trend"
        )));
    }
    if table.group_mass(g_idx) <= 0.0 {
        return Err(Error::validation(format!("no mass adopts in period {group}")));
    }
    let k = table.tv_names.len();

    // common trend model and the untreated strata of Y_t − Y_base
    let ds = as_panel_dataset(table)?;
    let trend = never_treated_projection(&ds)?;
    let never: Vec<&PopulationRow> =
        table.rows.iter().filter(|r| r.group_idx == t_len).collect();
    let mut s_full = Strata::new();
    let mut s_hist = Strata::new();
    let mut s_pair = Strata::new();
    let mut s_delta = Strata::new();
    let mut n_design = DMatrix::zeros(never.len(), k);
    let mut n_resp = DVector::zeros(never.len());
    let mut n_mass = DVector::zeros(never.len());
    for (pos, row) in never.iter().enumerate() {
        let cell = &table.cells[row.cell];
        let v = row.y[t_idx] - row.y[base_idx];
        s_full.add(key_full(cell), row.mass, v);
        s_hist.add(key_history(cell), row.mass, v);
        s_pair.add(key_pair(cell, t_idx, base_idx), row.mass, v);
        s_delta.add(key_delta(cell, t_idx, base_idx), row.mass, v);
        for (j, d) in cell_delta(cell, t_idx, base_idx).iter().enumerate() {
            n_design[(pos, j)] = *d;
        }
        n_resp[pos] = v;
        n_mass[pos] = row.mass;
    }
    let labels: Vec<String> = table.tv_names.iter().map(|s| format!("d_{s}")).collect();
    let pair_fit = linear_projection(&n_design, &n_resp, &n_mass, &labels, true)?;
    let pair_intercept = pair_fit.coefficients[0];
    let pair_slope: Vec<f64> = pair_fit.coefficients.iter().skip(1).copied().collect();

    let group_rows: Vec<&PopulationRow> =
        table.rows.iter().filter(|r| r.group_idx == g_idx).collect();
    let group_mass: f64 = group_rows.iter().map(|r| r.mass).sum();
    let mut cells = Vec::with_capacity(group_rows.len());
    let mut average = CellTrendBias {
        cell: usize::MAX,
        drop_ti: 0.0,
        extra_period: 0.0,
        level_vs_delta: 0.0,
        nonlinearity: 0.0,
        slope_drift: 0.0,
        trend_gap: 0.0,
    };
    for row in &group_rows {
        let cell = &table.cells[row.cell];
        let what = format!("cell {} at pair ({group}, {period})", row.cell);
        let cond_full = s_full.cond_mean(&key_full(cell), &what)?;
        let cond_hist = s_hist.cond_mean(&key_history(cell), &what)?;
        let cond_pair = s_pair.cond_mean(&key_pair(cell, t_idx, base_idx), &what)?;
        let cond_delta = s_delta.cond_mean(&key_delta(cell, t_idx, base_idx), &what)?;
        let delta = cell_delta(cell, t_idx, base_idx);
        let pair_pred =
            pair_intercept + delta.iter().zip(&pair_slope).map(|(a, b)| a * b).sum::<f64>();
        let common_pred = (trend.lambda[t_idx] - trend.lambda[base_idx])
            + delta
                .iter()
                .zip(&trend.capital_lambda)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        let b = CellTrendBias {
            cell: row.cell,
            drop_ti: cond_full - cond_hist,
            extra_period: cond_hist - cond_pair,
            level_vs_delta: cond_pair - cond_delta,
            nonlinearity: cond_delta - pair_pred,
            slope_drift: pair_pred - common_pred,
            trend_gap: cond_full - common_pred,
        };
        let sum = b.drop_ti + b.extra_period + b.level_vs_delta + b.nonlinearity + b.slope_drift;
        if (sum - b.trend_gap).abs() > 1e-10 {
            return Err(Error::computation(format!(
                "trend-bias channels for cell {} do not add up to the total gap (off by {:.3e})",
                row.cell,
                sum - b.trend_gap
            )));
        }
        let share = row.mass / group_mass;
        average.drop_ti += share * b.drop_ti;
        average.extra_period += share * b.extra_period;
        average.level_vs_delta += share * b.level_vs_delta;
        average.nonlinearity += share * b.nonlinearity;
        average.slope_drift += share * b.slope_drift;
        average.trend_gap += share * b.trend_gap;
        cells.push(b);
    }

    Ok(TrendBiasDecomposition {
        group,
        period,
        base_period: (base_idx + 1) as i64,
        cells,
        average,
        lambda: trend.lambda,
        capital_lambda: trend.capital_lambda,
        pair_intercept,
        pair_slope,
    })
}

// ---------------------------------------------------------------------------
// staggered coefficient identity
// ---------------------------------------------------------------------------

/// One (group, period) term of the staggered coefficient identity.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityCell {
    pub group: i64,
    pub period: i64,
    pub post: bool,
    /// E[w | G = g] for this pair.
    pub weight: f64,
    /// Weighted treated-vs-untreated trend contrast. Post pairs: the
    /// effect channel; pre pairs: a parallel-trends violation channel.
    pub contrast_term: f64,
    /// Weighted trend-model misfit ξ routed into the coefficient.
    pub gap_term: f64,
}

/// The pooled fixed-effects coefficient reassembled from exact population
/// pieces: effect terms, pre-period violation terms, and trend-misfit terms.
#[derive(Debug, Clone, Serialize)]
pub struct StaggeredAlphaIdentity {
    pub alpha: f64,
    /// Sum of post-period contrast terms (weighted effects).
    pub post_effect: f64,
    /// Sum of post-period trend-misfit terms.
    pub post_gap: f64,
    /// Sum of pre-period contrast terms; zero when untreated paths are
    /// group-invariant given the cell.
    pub pre_violation: f64,
    /// Sum of pre-period trend-misfit terms.
    pub pre_gap: f64,
    pub cells: Vec<IdentityCell>,
    /// alpha minus the sum of all terms (certified ≤ 1e-8).
    pub closure_gap: f64,
}

/// Reassemble the population fixed-effects coefficient from per-(group,
/// period) effect, violation, and trend-misfit terms.
///
/// The identity is exact for any enumerable population, including ones whose
/// untreated paths differ across groups; compliance shows up as
/// `pre_violation == 0`.
pub fn staggered_alpha_identity(table: &PopulationTable) -> Result<StaggeredAlphaIdentity> {
    let t_len = table.t_len;
    let ds = as_panel_dataset(table)?;
    let report = mp_implicit_weights(&ds, &FeOptions::default())?;
    let trend = never_treated_projection(&ds)?;
    let denom = report.denominator * t_len as f64;

    let never: Vec<&PopulationRow> =
        table.rows.iter().filter(|r| r.group_idx == t_len).collect();

    let mut cells = Vec::new();
    let mut post_effect = 0.0;
    let mut post_gap = 0.0;
    let mut pre_violation = 0.0;
    let mut pre_gap = 0.0;
    for &g in &table.treated_groups() {
        let base_idx = g - 1;
        for t in 0..t_len {
            // untreated strata of Y_t − Y_base on the full covariate cell
            let mut s_full = Strata::new();
            for row in &never {
                s_full.add(
                    key_full(&table.cells[row.cell]),
                    row.mass,
                    row.y[t] - row.y[base_idx],
                );
            }
            let mut weight = 0.0;
            let mut contrast_term = 0.0;
            let mut gap_term = 0.0;
            for (i, row) in table.rows.iter().enumerate() {
                if row.group_idx != g {
                    continue;
                }
                let cell = &table.cells[row.cell];
                let what = format!("cell {} at pair ({}, {})", row.cell, g + 1, t + 1);
                let cond_full = s_full.cond_mean(&key_full(cell), &what)?;
                let delta = cell_delta(cell, t, base_idx);
                let common_pred = (trend.lambda[t] - trend.lambda[base_idx])
                    + delta
                        .iter()
                        .zip(&trend.capital_lambda)
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                let w = row.mass * report.residual[(i, t)] / denom;
                weight += w;
                contrast_term += w * ((row.y[t] - row.y[base_idx]) - cond_full);
                gap_term += w * (cond_full - common_pred);
            }
            let post = t >= g;
            if post {
                post_effect += contrast_term;
                post_gap += gap_term;
            } else {
                pre_violation += contrast_term;
                pre_gap += gap_term;
            }
            cells.push(IdentityCell {
                group: (g + 1) as i64,
                period: (t + 1) as i64,
                post,
                weight,
                contrast_term,
                gap_term,
            });
        }
    }
    let alpha = report.alpha;
    let closure_gap = alpha - (post_effect + post_gap + pre_violation + pre_gap);
    if closure_gap.abs() > 1e-8 {
        return Err(Error::computation(format!(
            "staggered coefficient identity failed to close: gap {closure_gap:.3e} exceeds 1e-8"
        )));
    }
    Ok(StaggeredAlphaIdentity {
        alpha,
        post_effect,
        post_gap,
        pre_violation,
        pre_gap,
        cells,
        closure_gap,
    })
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

/// Draw an iid sample of `n` units: cell, then group, then Gaussian noise
/// around the mean outcome path. Deterministic per seed.
pub fn simulate_sample(dgp: &DiscreteDgp, n: usize, seed: u64) -> Result<PanelDataset> {
    if n == 0 {
        return Err(Error::validation("cannot simulate an empty sample"));
    }
    dgp.validate()?;
    let t_len = dgp.t_len;
    let k = dgp.k();
    let l = dgp.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = if dgp.noise_sd > 0.0 {
        Some(Normal::new(0.0, dgp.noise_sd).map_err(|e| Error::computation(e.to_string()))?)
    } else {
        None
    };

    // per-cell group keys in a fixed order for reproducible inverse sampling
    let cell_groups: Vec<Vec<(&String, f64, usize)>> = dgp
        .cells
        .iter()
        .map(|cell| {
            cell.group_probs
                .iter()
                .map(|(key, p)| (key, *p, parse_group_key(key, t_len).expect("validated")))
                .collect()
        })
        .collect();
    let zeros = vec![0.0; t_len];

    let width = n.to_string().len();
    let mut ids = Vec::with_capacity(n);
    let mut group_idx = Vec::with_capacity(n);
    let mut outcome = DMatrix::zeros(n, t_len);
    let mut tv: Vec<DMatrix<f64>> = (0..k).map(|_| DMatrix::zeros(n, t_len)).collect();
    let mut ti = DMatrix::zeros(n, l);
    for i in 0..n {
        // inverse-CDF draw of the cell, then the group within the cell
        let mut u: f64 = rng.gen();
        let mut c = dgp.cells.len() - 1;
        for (idx, cell) in dgp.cells.iter().enumerate() {
            if u < cell.prob {
                c = idx;
                break;
            }
            u -= cell.prob;
        }
        let cell = &dgp.cells[c];
        let mut v: f64 = rng.gen();
        let mut g = cell_groups[c].last().expect("validated nonempty").2;
        let mut g_key = cell_groups[c].last().expect("validated nonempty").0;
        for (key, p, idx) in &cell_groups[c] {
            if v < *p {
                g = *idx;
                g_key = key;
                break;
            }
            v -= p;
        }
        let shift = if g < t_len {
            dgp.group_trend.get(g_key.as_str()).unwrap_or(&zeros)
        } else {
            &zeros
        };
        let tau = cell.tau.get(g_key.as_str()).unwrap_or(&zeros);
        ids.push(format!("u{:0width$}", i + 1));
        group_idx.push(g);
        for t in 0..t_len {
            let mut y = cell.m0[t] + shift[t];
            if g < t_len && t >= g {
                y += tau[t];
            }
            if let Some(dist) = &noise {
                y += dist.sample(&mut rng);
            }
            outcome[(i, t)] = y;
            for j in 0..k {
                tv[j][(i, t)] = cell.x[j][t];
            }
        }
        for j in 0..l {
            ti[(i, j)] = cell.z[j];
        }
    }
    PanelDataset::new(
        ids,
        (1..=t_len as i64).collect(),
        Some(outcome),
        group_idx,
        tv,
        dgp.tv_names.clone(),
        ti,
        dgp.ti_names.clone(),
        DVector::from_element(n, 1.0),
    )
}

// ---------------------------------------------------------------------------
// built-in populations
// ---------------------------------------------------------------------------

/// Names of the populations shipped with the crate.
pub const BUILTIN_FIXTURES: [&str; 8] = [
    "flat",
    "assumption4_ok",
    "hidden_linearity_level",
    "hidden_linearity_z",
    "mb2_only",
    "mb5_only",
    "pretrend_violation",
    "staggered_3g",
];

/// Load one of the built-in populations by name.
///
/// The same files ship under `fixtures/` for use outside the library.
pub fn builtin_fixture(name: &str) -> Result<DiscreteDgp> {
    let text = match name {
        "flat" => include_str!("../fixtures/flat.json"),
        "assumption4_ok" => include_str!("../fixtures/assumption4_ok.json"),
        "hidden_linearity_level" => include_str!("../fixtures/hidden_linearity_level.json"),
        "hidden_linearity_z" => include_str!("../fixtures/hidden_linearity_z.json"),
        "mb2_only" => include_str!("../fixtures/mb2_only.json"),
        "mb5_only" => include_str!("../fixtures/mb5_only.json"),
        "pretrend_violation" => include_str!("../fixtures/pretrend_violation.json"),
        "staggered_3g" => include_str!("../fixtures/staggered_3g.json"),
        other => {
            return Err(Error::validation(format!(
                "unknown population '{other}'; built-ins are {}",
                BUILTIN_FIXTURES.join(", ")
            )))
        }
    };
    DiscreteDgp::from_json(text)
}
