//! Doubly robust (AIPW), inverse-propensity, and regression-adjustment
//! estimation of group-time treatment effects, plus the implicit weights the
//! AIPW estimator places on comparison units.
//!
//! Each ATT(g,t) compares outcome paths Y_t − Y_{base} between adoption group
//! g and a comparison group, with nuisance models over a reduced covariate
//! design (differences, base levels, averages, or the full history). The
//! weight report rewrites the estimate as a pure weighting estimator whose
//! comparison weights balance every design column against the treated group
//! exactly in sample.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::WeightProfile;
use crate::error::{Error, Result};
use crate::numcore::{linear_projection, logit_fit, solve_spd_pivoted};
use crate::panel::{PanelDataset, TwoPeriodView};

/// Which functionals of the covariate history enter the nuisance designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovMode {
    /// No covariates at all; both nuisances are intercept-only.
    InterceptOnly,
    /// X_t − X_base per time-varying covariate.
    DeltaOnly,
    /// X_base per time-varying covariate.
    BaseLevel,
    /// Differences and base levels side by side.
    DeltaPlusBase,
    /// Per-covariate mean over all panel periods.
    Average,
    /// Every period of every time-varying covariate.
    FullHistory,
}

/// Covariate design specification for the nuisance models.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateSpec {
    pub mode: CovMode,
    /// Include time-invariant covariates Z.
    pub include_ti: bool,
    /// Pairwise products of assembled columns, referenced by label.
    pub interactions: Vec<(String, String)>,
    /// Optional different mode for the propensity model (outcome model keeps
    /// `mode`).
    pub propensity_mode: Option<CovMode>,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        // differences plus base levels, Z included — robust against trends
        // that act on levels, not only on changes
        CovariateSpec {
            mode: CovMode::DeltaPlusBase,
            include_ti: true,
            interactions: Vec::new(),
            propensity_mode: None,
        }
    }
}

impl CovariateSpec {
    pub fn with_mode(mode: CovMode) -> Self {
        CovariateSpec { mode, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonGroup {
    NeverTreated,
    NotYetTreated,
}

/// Estimation options shared by the group-time estimators.
#[derive(Debug, Clone)]
pub struct DrOptions {
    pub comparison: ComparisonGroup,
    /// Anticipation δ: the base period becomes g − 1 − δ.
    pub anticipation: usize,
    /// Drop units with fitted propensity outside [1e-3, 1 − 1e-3] and refit.
    pub trim: bool,
    /// Minimum treated-group size for propensity fitting; 0 picks
    /// max(design columns + 2, 5). Below it AIPW/IPW fall back to RA.
    pub min_group_size: usize,
    /// Optional ridge penalty passed to the logit fit.
    pub ridge: f64,
}

impl Default for DrOptions {
    fn default() -> Self {
        DrOptions {
            comparison: ComparisonGroup::NeverTreated,
            anticipation: 0,
            trim: false,
            min_group_size: 0,
            ridge: 0.0,
        }
    }
}

/// One estimated ATT(g,t) cell.
#[derive(Debug, Clone, Serialize)]
pub struct GroupTimeResult {
    /// Adoption period label.
    pub group: i64,
    /// Outcome period label.
    pub period: i64,
    pub att: f64,
    /// Filled by the bootstrap; None until then.
    pub se: Option<f64>,
    /// Estimator that actually produced the number (fallbacks change it).
    pub estimator: String,
    pub comparison: String,
    pub base_period: i64,
    pub n_treated: usize,
    pub n_comparison: usize,
    /// Largest fitted propensity among the units used (None for RA).
    pub max_fitted_p: Option<f64>,
    pub trim_count: usize,
    pub warnings: Vec<String>,
}

/// The AIPW estimate rewritten as a weighting estimator.
///
/// Treated units carry weight one. Each comparison unit's weight is the
/// normalized odds w̃⁰ plus a projection correction: the coefficients that
/// project the treated design mean (and the odds themselves) on the design
/// over comparison units. By construction the weighted comparison mean of
/// every design column — intercept included — equals the treated mean.
#[derive(Debug, Clone, Serialize)]
pub struct AipwWeightReport {
    pub treated: WeightProfile,
    pub comparison: WeightProfile,
    /// Normalized odds component w̃⁰ per comparison unit.
    pub w_tilde0: Vec<f64>,
    /// Correction term from projecting the treated design mean.
    pub treated_projection: Vec<f64>,
    /// Correction term from projecting the odds on the design.
    pub odds_projection: Vec<f64>,
    /// Ê[ϑ⁰·col | comparison] − Ê[col | treated] per design column
    /// (first entry is the intercept, i.e. the mean-one normalization).
    pub balance_gap: Vec<f64>,
    pub design_labels: Vec<String>,
    /// The estimate reproduced from the weights:
    /// Ê[ΔY|treated] − Ê[ϑ⁰·ΔY|comparison].
    pub estimate_from_weights: f64,
    pub negative_count: usize,
}

// ---------------------------------------------------------------------------
// design assembly
// ---------------------------------------------------------------------------

/// Covariate levels per period for the rows entering one estimation.
struct CovFrame {
    /// levels[p] is rows × k: covariate values at period index p.
    levels: Vec<DMatrix<f64>>,
    z: DMatrix<f64>,
    tv_names: Vec<String>,
    ti_names: Vec<String>,
    t_idx: usize,
    base_idx: usize,
}

impl CovFrame {
    fn from_dataset(data: &PanelDataset, rows: &[usize], t_idx: usize, base_idx: usize) -> Self {
        let k = data.k();
        let t_len = data.t_len();
        let levels = (0..t_len)
            .map(|p| DMatrix::from_fn(rows.len(), k, |r, j| data.tv(j)[(rows[r], p)]))
            .collect();
        let z = DMatrix::from_fn(rows.len(), data.l(), |r, j| data.ti()[(rows[r], j)]);
        CovFrame {
            levels,
            z,
            tv_names: data.tv_names().to_vec(),
            ti_names: data.ti_names().to_vec(),
            t_idx,
            base_idx,
        }
    }

    fn from_view(view: &TwoPeriodView) -> Self {
        CovFrame {
            levels: vec![view.x_pre.clone(), view.x_post.clone()],
            z: view.z.clone(),
            tv_names: view.tv_names.clone(),
            ti_names: view.ti_names.clone(),
            t_idx: 1,
            base_idx: 0,
        }
    }

    /// Assemble the design for one mode; deterministic column order.
    fn design(&self, mode: CovMode, include_ti: bool, interactions: &[(String, String)]) -> Result<(DMatrix<f64>, Vec<String>)> {
        let n = self.z.nrows();
        let k = self.tv_names.len();
        let t_len = self.levels.len();
        if mode == CovMode::InterceptOnly {
            // nothing to assemble; interactions have no columns to refer to
            return Ok((DMatrix::zeros(n, 0), Vec::new()));
        }
        let mut cols: Vec<(String, DVector<f64>)> = Vec::new();
        let col_of = |m: &DMatrix<f64>, j: usize| DVector::from_fn(n, |r, _| m[(r, j)]);
        match mode {
            CovMode::InterceptOnly => {}
            CovMode::DeltaOnly => {
                for j in 0..k {
                    let d = col_of(&self.levels[self.t_idx], j) - col_of(&self.levels[self.base_idx], j);
                    cols.push((format!("d_{}", self.tv_names[j]), d));
                }
            }
            CovMode::BaseLevel => {
                for j in 0..k {
                    cols.push((format!("{}_base", self.tv_names[j]), col_of(&self.levels[self.base_idx], j)));
                }
            }
            CovMode::DeltaPlusBase => {
                for j in 0..k {
                    let d = col_of(&self.levels[self.t_idx], j) - col_of(&self.levels[self.base_idx], j);
                    cols.push((format!("d_{}", self.tv_names[j]), d));
                }
                for j in 0..k {
                    cols.push((format!("{}_base", self.tv_names[j]), col_of(&self.levels[self.base_idx], j)));
                }
            }
            CovMode::Average => {
                for j in 0..k {
                    let mut acc = DVector::zeros(n);
                    for p in 0..t_len {
                        acc += col_of(&self.levels[p], j);
                    }
                    cols.push((format!("{}_avg", self.tv_names[j]), acc / t_len as f64));
                }
            }
            CovMode::FullHistory => {
                for j in 0..k {
                    for p in 0..t_len {
                        cols.push((format!("{}@{p}", self.tv_names[j]), col_of(&self.levels[p], j)));
                    }
                }
            }
        }
        if include_ti {
            for j in 0..self.ti_names.len() {
                cols.push((self.ti_names[j].clone(), col_of(&self.z, j)));
            }
        }
        for (a, b) in interactions {
            let find = |label: &str| cols.iter().position(|(l, _)| l == label);
            match (find(a), find(b)) {
                (Some(ia), Some(ib)) => {
                    let prod = cols[ia].1.component_mul(&cols[ib].1);
                    cols.push((format!("{a}:{b}"), prod));
                }
                _ => {
                    return Err(Error::validation(format!(
                        "interaction ({a}, {b}) references a column not in the assembled design"
                    )))
                }
            }
        }
        let labels: Vec<String> = cols.iter().map(|(l, _)| l.clone()).collect();
        let mut m = DMatrix::zeros(n, cols.len());
        for (j, (_, c)) in cols.iter().enumerate() {
            m.set_column(j, c);
        }
        Ok((m, labels))
    }
}

/// Assemble the nuisance design for one (g, t) cell over the full dataset.
///
/// Mostly useful for inspection; the estimators assemble designs over their
/// own row subsets internally.
pub fn build_design(
    data: &PanelDataset,
    spec: &CovariateSpec,
    g: i64,
    t: i64,
    base: i64,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let t_idx = data
        .period_index(t)
        .ok_or_else(|| Error::validation(format!("period {t} not in panel")))?;
    let base_idx = data
        .period_index(base)
        .ok_or_else(|| Error::validation(format!("period {base} not in panel")))?;
    let g_idx = data
        .period_index(g)
        .ok_or_else(|| Error::validation(format!("group {g} not in panel")))?;
    if base_idx >= g_idx {
        return Err(Error::validation(format!(
            "base period {base} must precede group {g}"
        )));
    }
    let rows: Vec<usize> = (0..data.n()).collect();
    let frame = CovFrame::from_dataset(data, &rows, t_idx, base_idx);
    frame.design(spec.mode, spec.include_ti, &spec.interactions)
}

// ---------------------------------------------------------------------------
// estimation core
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flavor {
    Aipw,
    Ipw,
    Ra,
}

impl Flavor {
    fn tag(self) -> &'static str {
        match self {
            Flavor::Aipw => "aipw",
            Flavor::Ipw => "ipw",
            Flavor::Ra => "ra",
        }
    }
}

/// Everything one estimation run needs, independent of where rows came from.
struct Parts {
    dy: DVector<f64>,
    treat: Vec<bool>,
    weight: DVector<f64>,
    ids: Vec<String>,
    w_out: DMatrix<f64>,
    labels_out: Vec<String>,
    w_prop: DMatrix<f64>,
    labels_prop: Vec<String>,
}

struct CoreOutput {
    att: f64,
    estimator: Flavor,
    n_treated: usize,
    n_comparison: usize,
    max_fitted_p: Option<f64>,
    trim_count: usize,
    warnings: Vec<String>,
    report: Option<AipwWeightReport>,
}

fn estimate_core(parts: &Parts, flavor: Flavor, opts: &DrOptions, want_report: bool) -> Result<CoreOutput> {
    let n = parts.dy.len();
    let mut keep: Vec<usize> = (0..n).collect();
    let mut warnings = Vec::new();

    let treated_rows = |keep: &[usize]| -> Vec<usize> {
        keep.iter().copied().filter(|&i| parts.treat[i]).collect()
    };
    let comparison_rows = |keep: &[usize]| -> Vec<usize> {
        keep.iter().copied().filter(|&i| !parts.treat[i]).collect()
    };

    // minimum treated size for propensity fitting; fall back to RA below it
    let k_design = parts.w_prop.ncols().max(parts.w_out.ncols());
    let min_size = if opts.min_group_size > 0 {
        opts.min_group_size
    } else {
        (k_design + 2).max(5)
    };
    let mut flavor = flavor;
    if flavor != Flavor::Ra && treated_rows(&keep).len() < min_size {
        warnings.push(format!(
            "treated group has {} unit(s), below the propensity minimum {}; fell back to regression adjustment",
            treated_rows(&keep).len(),
            min_size
        ));
        flavor = Flavor::Ra;
    }

    // propensity model (and trimming) first, so the outcome model is fitted
    // on the rows that survive
    let mut pscores: Option<DVector<f64>> = None;
    let mut max_fitted_p = None;
    let mut trim_count = 0usize;
    if flavor != Flavor::Ra {
        let fit_p = |rows: &[usize]| -> Result<(DVector<f64>, bool)> {
            let design = DMatrix::from_fn(rows.len(), parts.w_prop.ncols(), |r, j| {
                parts.w_prop[(rows[r], j)]
            });
            let labels01 = DVector::from_fn(rows.len(), |r, _| if parts.treat[rows[r]] { 1.0 } else { 0.0 });
            let w = DVector::from_fn(rows.len(), |r, _| parts.weight[rows[r]]);
            let model = logit_fit(&design, &labels01, &w, &parts.labels_prop, opts.ridge)?;
            Ok((model.predict_proba(&design), model.converged))
        };
        let (p0, conv0) = fit_p(&keep)?;
        if !conv0 {
            warnings.push("propensity fit hit the iteration cap; scores may be imprecise".to_string());
        }
        let max_p = p0.iter().copied().fold(0.0f64, f64::max);
        if opts.trim {
            let mut kept = Vec::with_capacity(keep.len());
            for (r, &i) in keep.iter().enumerate() {
                let p = p0[r];
                if p > 1.0 - 1e-3 || p < 1e-3 {
                    trim_count += 1;
                } else {
                    kept.push(i);
                }
            }
            if trim_count > 0 {
                keep = kept;
                if treated_rows(&keep).is_empty() || comparison_rows(&keep).is_empty() {
                    return Err(Error::computation(
                        "propensity trimming removed an entire group; no overlap in this cell",
                    ));
                }
                let (p1, conv1) = fit_p(&keep)?;
                if !conv1 {
                    warnings.push("post-trim propensity fit hit the iteration cap".to_string());
                }
                let max_p1 = p1.iter().copied().fold(0.0f64, f64::max);
                if max_p1 >= 1.0 - 1e-6 {
                    return Err(Error::computation(format!(
                        "overlap failure persists after trimming (max fitted propensity {max_p1:.8})"
                    )));
                }
                max_fitted_p = Some(max_p1);
                pscores = Some(p1);
            } else {
                max_fitted_p = Some(max_p);
                pscores = Some(p0);
            }
        } else {
            if max_p >= 1.0 - 1e-6 {
                return Err(Error::computation(format!(
                    "overlap failure: a fitted propensity reaches {max_p:.8}; \
                     enable trimming or change the propensity design"
                )));
            }
            max_fitted_p = Some(max_p);
            pscores = Some(p0);
        }
    }

    let t_rows = treated_rows(&keep);
    let c_rows = comparison_rows(&keep);
    if t_rows.is_empty() || c_rows.is_empty() {
        return Err(Error::validation("a side of the comparison is empty"));
    }

    // outcome model over comparison rows
    let w_out_kept = DMatrix::from_fn(c_rows.len(), parts.w_out.ncols(), |r, j| {
        parts.w_out[(c_rows[r], j)]
    });
    let dy_c = DVector::from_fn(c_rows.len(), |r, _| parts.dy[c_rows[r]]);
    let wt_c = DVector::from_fn(c_rows.len(), |r, _| parts.weight[c_rows[r]]);
    let m_hat = linear_projection(&w_out_kept, &dy_c, &wt_c, &parts.labels_out, true)?;

    // residuals for all kept rows
    let w_out_all = DMatrix::from_fn(keep.len(), parts.w_out.ncols(), |r, j| {
        parts.w_out[(keep[r], j)]
    });
    let fitted_all = m_hat.predict(&w_out_all);
    let resid: Vec<f64> = keep
        .iter()
        .enumerate()
        .map(|(r, &i)| parts.dy[i] - fitted_all[r])
        .collect();
    let mut pos = vec![usize::MAX; n];
    for (r, &i) in keep.iter().enumerate() {
        pos[i] = r;
    }
    let pos_of = |i: usize| pos[i];

    // treated term: weighted mean of residuals over treated rows
    let treated_term = {
        let mut num = 0.0;
        let mut den = 0.0;
        for &i in &t_rows {
            num += parts.weight[i] * resid[pos_of(i)];
            den += parts.weight[i];
        }
        num / den
    };

    // comparison term: odds-weighted mean over comparison rows (AIPW/IPW)
    let odds: Option<Vec<f64>> = pscores.as_ref().map(|p| {
        keep.iter()
            .enumerate()
            .map(|(r, _)| p[r] / (1.0 - p[r]))
            .collect()
    });
    let comparison_term = match flavor {
        Flavor::Ra => 0.0,
        _ => {
            let odds = odds.as_ref().unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for &i in &c_rows {
                let r = pos_of(i);
                num += parts.weight[i] * odds[r] * resid[r];
                den += parts.weight[i] * odds[r];
            }
            num / den
        }
    };
    let att = treated_term - comparison_term;
    if !att.is_finite() {
        return Err(Error::computation("estimate is not finite"));
    }

    let report = if want_report {
        Some(build_weight_report(parts, &pos, &t_rows, &c_rows, odds.as_deref())?)
    } else {
        None
    };

    Ok(CoreOutput {
        att,
        estimator: flavor,
        n_treated: t_rows.len(),
        n_comparison: c_rows.len(),
        max_fitted_p,
        trim_count,
        warnings,
        report,
    })
}

/// Turn the AIPW estimate into explicit comparison-unit weights.
///
/// With design mean S = Ê[W̃W̃'|comparison] (W̃ = design plus intercept),
/// the weight on comparison unit i is
///   ϑ⁰_i = w̃⁰_i + γ̃'W̃_i − γ̂'W̃_i
/// where γ̃ solves S γ̃ = Ê[W̃|treated] and γ̂ solves S γ̂ = Ê[w̃⁰·W̃|comparison].
/// Then Ê[ϑ⁰·W̃|comparison] = Ê[W̃|treated] exactly, and the weighted contrast
/// of raw outcome paths reproduces the AIPW estimate.
fn build_weight_report(
    parts: &Parts,
    pos: &[usize],
    t_rows: &[usize],
    c_rows: &[usize],
    odds: Option<&[f64]>,
) -> Result<AipwWeightReport> {
    let p = parts.w_out.ncols() + 1; // intercept first
    let pos_of = |i: usize| pos[i];
    let wtilde = |i: usize, j: usize| -> f64 {
        if j == 0 {
            1.0
        } else {
            parts.w_out[(i, j - 1)]
        }
    };

    // normalized odds over comparison rows (RA: identically one)
    let sum_wc: f64 = c_rows.iter().map(|&i| parts.weight[i]).sum();
    let mut w_tilde0 = vec![1.0; c_rows.len()];
    if let Some(odds) = odds {
        let mean_odds: f64 = c_rows
            .iter()
            .map(|&i| parts.weight[i] * odds[pos_of(i)])
            .sum::<f64>()
            / sum_wc;
        for (r, &i) in c_rows.iter().enumerate() {
            w_tilde0[r] = odds[pos_of(i)] / mean_odds;
        }
    }

    // S, treated mean, odds-weighted mean
    let mut s = DMatrix::zeros(p, p);
    for &i in c_rows {
        let wi = parts.weight[i] / sum_wc;
        for a in 0..p {
            for b in 0..p {
                s[(a, b)] += wi * wtilde(i, a) * wtilde(i, b);
            }
        }
    }
    let sum_wt: f64 = t_rows.iter().map(|&i| parts.weight[i]).sum();
    let mut mean_treated = DVector::zeros(p);
    for &i in t_rows {
        for a in 0..p {
            mean_treated[a] += parts.weight[i] / sum_wt * wtilde(i, a);
        }
    }
    let mut mean_odds_w = DVector::zeros(p);
    for (r, &i) in c_rows.iter().enumerate() {
        for a in 0..p {
            mean_odds_w[a] += parts.weight[i] / sum_wc * w_tilde0[r] * wtilde(i, a);
        }
    }
    let mut labels = vec!["(intercept)".to_string()];
    labels.extend(parts.labels_out.iter().cloned());
    let gamma_t = solve_spd_pivoted(&s, &mean_treated, &labels)?;
    let gamma_o = solve_spd_pivoted(&s, &mean_odds_w, &labels)?;

    let mut theta0 = Vec::with_capacity(c_rows.len());
    let mut treated_projection = Vec::with_capacity(c_rows.len());
    let mut odds_projection = Vec::with_capacity(c_rows.len());
    for (r, &i) in c_rows.iter().enumerate() {
        let mut a_term = 0.0;
        let mut b_term = 0.0;
        for a in 0..p {
            a_term += gamma_t[a] * wtilde(i, a);
            b_term += gamma_o[a] * wtilde(i, a);
        }
        treated_projection.push(a_term);
        odds_projection.push(b_term);
        theta0.push(w_tilde0[r] + a_term - b_term);
    }

    // balancing gap per design coordinate
    let mut balance_gap = vec![0.0; p];
    for a in 0..p {
        let mut lhs = 0.0;
        for (r, &i) in c_rows.iter().enumerate() {
            lhs += parts.weight[i] / sum_wc * theta0[r] * wtilde(i, a);
        }
        let mut rhs = 0.0;
        for &i in t_rows {
            rhs += parts.weight[i] / sum_wt * wtilde(i, a);
        }
        balance_gap[a] = lhs - rhs;
    }

    // reproduce the estimate from the weights on raw outcome paths
    let treated_mean_dy = {
        let mut v = 0.0;
        for &i in t_rows {
            v += parts.weight[i] / sum_wt * parts.dy[i];
        }
        v
    };
    let comp_weighted_dy = {
        let mut v = 0.0;
        for (r, &i) in c_rows.iter().enumerate() {
            v += parts.weight[i] / sum_wc * theta0[r] * parts.dy[i];
        }
        v
    };
    let estimate_from_weights = treated_mean_dy - comp_weighted_dy;

    let treated = WeightProfile::new(
        "treated",
        t_rows.to_vec(),
        t_rows.iter().map(|&i| parts.ids[i].clone()).collect(),
        vec![1.0; t_rows.len()],
        t_rows.iter().map(|&i| parts.weight[i]).collect(),
    )?;
    let comparison = WeightProfile::new(
        "comparison",
        c_rows.to_vec(),
        c_rows.iter().map(|&i| parts.ids[i].clone()).collect(),
        theta0.clone(),
        c_rows.iter().map(|&i| parts.weight[i]).collect(),
    )?;
    let negative_count = theta0.iter().filter(|v| **v < 0.0).count();
    Ok(AipwWeightReport {
        treated,
        comparison,
        w_tilde0,
        treated_projection,
        odds_projection,
        balance_gap,
        design_labels: labels,
        estimate_from_weights,
        negative_count,
    })
}

// ---------------------------------------------------------------------------
// public estimators
// ---------------------------------------------------------------------------

struct GtFrame {
    rows: Vec<usize>,
    treat: Vec<bool>,
    t_idx: usize,
    base_idx: usize,
    base_label: i64,
}

fn gt_frame(data: &PanelDataset, g: i64, t: i64, opts: &DrOptions) -> Result<GtFrame> {
    let g_idx = data
        .period_index(g)
        .ok_or_else(|| Error::validation(format!("group {g} is not a period of this panel")))?;
    let t_idx = data
        .period_index(t)
        .ok_or_else(|| Error::validation(format!("period {t} is not in this panel")))?;
    if g_idx == 0 {
        return Err(Error::validation("adoption in the first period is not estimable"));
    }
    let base_idx = g_idx
        .checked_sub(1 + opts.anticipation)
        .ok_or_else(|| {
            Error::validation(format!(
                "anticipation {} pushes the base period before the start of the panel",
                opts.anticipation
            ))
        })?;
    let mut rows = Vec::new();
    let mut treat = Vec::new();
    for i in 0..data.n() {
        let gi = data.group_idx(i);
        if gi == g_idx {
            rows.push(i);
            treat.push(true);
        } else {
            let in_comparison = match opts.comparison {
                ComparisonGroup::NeverTreated => data.is_never_treated(i),
                ComparisonGroup::NotYetTreated => gi > t_idx.max(g_idx),
            };
            if in_comparison {
                rows.push(i);
                treat.push(false);
            }
        }
    }
    if !treat.iter().any(|t| *t) {
        return Err(Error::validation(format!("no units adopt at period {g}")));
    }
    if !treat.iter().any(|t| !*t) {
        return Err(Error::validation(format!(
            "comparison group is empty for cell (group {g}, period {t})"
        )));
    }
    Ok(GtFrame { rows, treat, t_idx, base_idx, base_label: data.periods()[base_idx] })
}

fn parts_from_dataset(
    data: &PanelDataset,
    frame: &GtFrame,
    spec: &CovariateSpec,
) -> Result<Parts> {
    let y = data.outcome()?;
    let cov = CovFrame::from_dataset(data, &frame.rows, frame.t_idx, frame.base_idx);
    let (w_out, labels_out) = cov.design(spec.mode, spec.include_ti, &spec.interactions)?;
    let prop_mode = spec.propensity_mode.unwrap_or(spec.mode);
    let (w_prop, labels_prop) = cov.design(prop_mode, spec.include_ti, &spec.interactions)?;
    Ok(Parts {
        dy: DVector::from_fn(frame.rows.len(), |r, _| {
            let i = frame.rows[r];
            y[(i, frame.t_idx)] - y[(i, frame.base_idx)]
        }),
        treat: frame.treat.clone(),
        weight: DVector::from_fn(frame.rows.len(), |r, _| data.weight()[frame.rows[r]]),
        ids: frame.rows.iter().map(|&i| data.unit_ids()[i].clone()).collect(),
        w_out,
        labels_out,
        w_prop,
        labels_prop,
    })
}

fn run_gt(
    data: &PanelDataset,
    spec: &CovariateSpec,
    g: i64,
    t: i64,
    opts: &DrOptions,
    flavor: Flavor,
    want_report: bool,
) -> Result<(GroupTimeResult, Option<AipwWeightReport>)> {
    let frame = gt_frame(data, g, t, opts)?;
    let mut spec = spec.clone();
    if flavor == Flavor::Ipw {
        // outcome model collapses to a weighted comparison constant
        spec.propensity_mode = Some(spec.propensity_mode.unwrap_or(spec.mode));
        spec.mode = CovMode::InterceptOnly;
    }
    let parts = parts_from_dataset(data, &frame, &spec)?;
    let out = estimate_core(&parts, flavor, opts, want_report)?;
    let comparison = match opts.comparison {
        ComparisonGroup::NeverTreated => "never_treated",
        ComparisonGroup::NotYetTreated => "not_yet_treated",
    };
    Ok((
        GroupTimeResult {
            group: g,
            period: t,
            att: out.att,
            se: None,
            estimator: out.estimator.tag().to_string(),
            comparison: comparison.to_string(),
            base_period: frame.base_label,
            n_treated: out.n_treated,
            n_comparison: out.n_comparison,
            max_fitted_p: out.max_fitted_p,
            trim_count: out.trim_count,
            warnings: out.warnings,
        },
        out.report,
    ))
}

/// AIPW estimate of ATT(g,t): treated mean of outcome-model residuals minus
/// the odds-weighted comparison mean.
pub fn att_gt_aipw(
    data: &PanelDataset,
    spec: &CovariateSpec,
    g: i64,
    t: i64,
    opts: &DrOptions,
) -> Result<GroupTimeResult> {
    run_gt(data, spec, g, t, opts, Flavor::Aipw, false).map(|(r, _)| r)
}

/// AIPW with the implicit-weight report alongside.
pub fn att_gt_aipw_weights(
    data: &PanelDataset,
    spec: &CovariateSpec,
    g: i64,
    t: i64,
    opts: &DrOptions,
) -> Result<(GroupTimeResult, AipwWeightReport)> {
    let (r, rep) = run_gt(data, spec, g, t, opts, Flavor::Aipw, true)?;
    Ok((r, rep.expect("report requested")))
}

/// IPW with the implicit-weight report alongside (raw normalized odds plus
/// the projection correction that makes the reproduction exact).
pub fn att_gt_ipw_weights(
    data: &PanelDataset,
    spec: &CovariateSpec,
    g: i64,
    t: i64,
    opts: &DrOptions,
) -> Result<(GroupTimeResult, AipwWeightReport)> {
    let (r, rep) = run_gt(data, spec, g, t, opts, Flavor::Ipw, true)?;
    Ok((r, rep.expect("report requested")))
}

/// RA with the implicit-weight report alongside; the comparison weights are
/// pure projection corrections (the raw odds are identically one).
pub fn att_gt_ra_weights(
    data: &PanelDataset,
    spec: &CovariateSpec,
    g: i64,
    t: i64,
    opts: &DrOptions,
) -> Result<(GroupTimeResult, AipwWeightReport)> {
    let (r, rep) = run_gt(data, spec, g, t, opts, Flavor::Ra, true)?;
    Ok((r, rep.expect("report requested")))
}

/// Regression adjustment: treated mean of residuals from the comparison-fit
/// outcome model; no propensity model.
pub fn att_gt_ra(
    data: &PanelDataset,
    spec: &CovariateSpec,
    g: i64,
    t: i64,
    opts: &DrOptions,
) -> Result<GroupTimeResult> {
    run_gt(data, spec, g, t, opts, Flavor::Ra, false).map(|(r, _)| r)
}

/// Inverse propensity weighting: the outcome model is intercept-only, so the
/// estimate is the treated/odds-weighted-comparison contrast of outcome paths.
pub fn att_gt_ipw(
    data: &PanelDataset,
    spec: &CovariateSpec,
    g: i64,
    t: i64,
    opts: &DrOptions,
) -> Result<GroupTimeResult> {
    run_gt(data, spec, g, t, opts, Flavor::Ipw, false).map(|(r, _)| r)
}

/// Two-period AIPW on a first-difference view, with the weight report.
pub fn two_period_aipw(
    view: &TwoPeriodView,
    spec: &CovariateSpec,
) -> Result<(f64, AipwWeightReport)> {
    two_period_aipw_opts(view, spec, &DrOptions::default())
}

/// Two-period AIPW with explicit options (trimming, ridge, minimum sizes).
pub fn two_period_aipw_opts(
    view: &TwoPeriodView,
    spec: &CovariateSpec,
    opts: &DrOptions,
) -> Result<(f64, AipwWeightReport)> {
    let cov = CovFrame::from_view(view);
    let (w_out, labels_out) = cov.design(spec.mode, spec.include_ti, &spec.interactions)?;
    let prop_mode = spec.propensity_mode.unwrap_or(spec.mode);
    let (w_prop, labels_prop) = cov.design(prop_mode, spec.include_ti, &spec.interactions)?;
    let parts = Parts {
        dy: view.dy.clone(),
        treat: view.treat.iter().map(|d| *d == 1.0).collect(),
        weight: view.weight.clone(),
        ids: (0..view.n()).map(|i| format!("row{i}")).collect(),
        w_out,
        labels_out,
        w_prop,
        labels_prop,
    };
    let out = estimate_core(&parts, Flavor::Aipw, opts, true)?;
    Ok((out.att, out.report.expect("report requested")))
}

// ---------------------------------------------------------------------------
// aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AggregateValue {
    pub label: String,
    pub estimate: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellWeight {
    pub group: i64,
    pub period: i64,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateResult {
    pub kind: String,
    pub values: Vec<AggregateValue>,
    pub weights: Vec<CellWeight>,
}

/// Share of each adoption group among ever-treated units (sampling-weighted).
pub fn group_shares_among_treated(data: &PanelDataset) -> Vec<(usize, f64)> {
    let mut total = 0.0;
    let mut per: Vec<(usize, f64)> = data.treated_groups().iter().map(|&g| (g, 0.0)).collect();
    for i in 0..data.n() {
        let gi = data.group_idx(i);
        if gi < data.t_len() {
            total += data.weight()[i];
            if let Some(e) = per.iter_mut().find(|(g, _)| *g == gi) {
                e.1 += data.weight()[i];
            }
        }
    }
    per.iter_mut().for_each(|(_, s)| *s /= total);
    per
}

/// Post-period aggregation weights w(g,t) = p̄_g / (#post periods of g);
/// nonnegative, sum to one over all post cells.
pub fn overall_cell_weights(data: &PanelDataset) -> Vec<CellWeight> {
    let t_len = data.t_len();
    let shares = group_shares_among_treated(data);
    let mut out = Vec::new();
    for (g, share) in shares {
        let n_post = (t_len - g) as f64;
        for t in g..t_len {
            out.push(CellWeight {
                group: data.periods()[g],
                period: data.periods()[t],
                weight: share / n_post,
            });
        }
    }
    out
}

/// Overall ATT: the w(g,t)-weighted average of post-period ATT(g,t).
pub fn aggregate_overall(results: &[GroupTimeResult], data: &PanelDataset) -> Result<AggregateResult> {
    let weights = overall_cell_weights(data);
    let mut missing = Vec::new();
    let mut acc = 0.0;
    for cw in &weights {
        match results
            .iter()
            .find(|r| r.group == cw.group && r.period == cw.period)
        {
            Some(r) => acc += cw.weight * r.att,
            None => missing.push(format!("({}, {})", cw.group, cw.period)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::validation(format!(
            "overall aggregation is missing cells: {}",
            missing.join(", ")
        )));
    }
    Ok(AggregateResult {
        kind: "overall".to_string(),
        values: vec![AggregateValue { label: "overall".to_string(), estimate: acc, se: None }],
        weights,
    })
}

/// Event-study aggregation: per event time e = t − g, the p̄_g-weighted
/// average of ATT(g,t) over groups observed at e.
pub fn aggregate_event_study(
    results: &[GroupTimeResult],
    data: &PanelDataset,
) -> Result<AggregateResult> {
    let shares = group_shares_among_treated(data);
    let share_of = |g_label: i64| -> Option<f64> {
        shares.iter().find_map(|(g, s)| {
            if data.periods()[*g] == g_label {
                Some(*s)
            } else {
                None
            }
        })
    };
    let mut es: Vec<i64> = results.iter().map(|r| r.period - r.group).collect();
    es.sort_unstable();
    es.dedup();
    let mut values = Vec::new();
    let mut weights = Vec::new();
    for e in es {
        let cells: Vec<&GroupTimeResult> =
            results.iter().filter(|r| r.period - r.group == e).collect();
        let mut tot = 0.0;
        for r in &cells {
            tot += share_of(r.group).ok_or_else(|| {
                Error::validation(format!("group {} not present in the dataset", r.group))
            })?;
        }
        if tot <= 0.0 {
            return Err(Error::computation(format!("event time {e} has zero group mass")));
        }
        let mut acc = 0.0;
        for r in &cells {
            let w = share_of(r.group).unwrap() / tot;
            acc += w * r.att;
            weights.push(CellWeight { group: r.group, period: r.period, weight: w });
        }
        values.push(AggregateValue { label: e.to_string(), estimate: acc, se: None });
    }
    Ok(AggregateResult { kind: "event_study".to_string(), values, weights })
}

// ---------------------------------------------------------------------------
// bootstrap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapSummary {
    /// One SE per coordinate of the estimator closure's output.
    pub se: Vec<f64>,
    pub reps: usize,
    pub failed: usize,
}

/// Cluster bootstrap over units: resample unit rows with replacement,
/// re-run the estimator, report the SD across replicates per coordinate.
/// Deterministic per (seed, rep); failed replicates (empty groups and the
/// like) are dropped and counted.
pub fn bootstrap_se<F>(
    data: &PanelDataset,
    reps: usize,
    seed: u64,
    estimator: F,
) -> Result<BootstrapSummary>
where
    F: Fn(&PanelDataset) -> Result<Vec<f64>> + Sync,
{
    if reps < 2 {
        return Err(Error::validation("bootstrap needs at least 2 replicates"));
    }
    let n = data.n();
    let draws: Vec<Option<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64 + 1);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            data.select_units(&idx)
                .ok()
                .and_then(|d| estimator(&d).ok())
        })
        .collect();
    let ok: Vec<&Vec<f64>> = draws.iter().flatten().collect();
    let failed = reps - ok.len();
    if failed * 2 > reps {
        return Err(Error::computation(format!(
            "bootstrap unstable for this configuration: {failed} of {reps} replicates failed"
        )));
    }
    let dim = ok[0].len();
    if ok.iter().any(|v| v.len() != dim) {
        return Err(Error::computation("estimator returned inconsistent dimensions across replicates"));
    }
    let m = ok.len() as f64;
    let mut se = Vec::with_capacity(dim);
    for j in 0..dim {
        let mean: f64 = ok.iter().map(|v| v[j]).sum::<f64>() / m;
        let var: f64 = ok.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (m - 1.0);
        se.push(var.sqrt());
    }
    Ok(BootstrapSummary { se, reps, failed })
}
