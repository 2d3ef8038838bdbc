//! Two-way fixed effects estimators and their implicit unit weights.
//!
//! The two-period estimator regresses first-differenced outcomes on the
//! treatment indicator and differenced covariates. Partialling the treatment
//! on the covariates exposes the estimator as a weighted contrast of outcome
//! changes, with weights driven by a *linear* propensity fit — the source of
//! the hidden extrapolation this crate diagnoses.
//!
//! The staggered estimator double-demeans everything, regresses pooled, and
//! decomposes the coefficient into per-(group, period) contributions whose
//! weights sum to +1 over post periods and -1 over pre periods.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::balance::WeightProfile;
use crate::error::{Error, Result};
use crate::numcore::{linear_projection, LinearProjection};
use crate::panel::{double_demean, PanelDataset, TwoPeriodView};

// ---------------------------------------------------------------------------
// two-period
// ---------------------------------------------------------------------------

/// Fitted first-difference regression ΔY ~ 1 + D + ΔX.
#[derive(Debug, Clone)]
pub struct TwfeFit {
    /// Coefficient on the treatment indicator.
    pub alpha: f64,
    /// Coefficients on the differenced covariates, in `tv_names` order.
    pub beta: Vec<f64>,
    pub intercept: f64,
    /// Linear projection of D on (1, ΔX) — the implicit linear propensity.
    pub linear_propensity: LinearProjection,
    pub n: usize,
    pub n_treated: usize,
}

/// Weighted least squares helper over view rows: mean of v under weights w.
fn wmean(v: impl Iterator<Item = f64>, w: impl Iterator<Item = f64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in v.zip(w) {
        num += a * b;
        den += b;
    }
    num / den
}

/// Fit ΔY on (1, D, ΔX) by weighted least squares.
pub fn fit_fd_twfe(view: &TwoPeriodView) -> Result<TwfeFit> {
    let n = view.n();
    let k = view.k();
    let n_treated = view.n_treated();
    if n_treated == 0 || n_treated == n {
        return Err(Error::validation(
            "first-difference regression needs both treated and untreated units",
        ));
    }
    let mut design = DMatrix::zeros(n, k + 1);
    for i in 0..n {
        design[(i, 0)] = view.treat[i];
        for j in 0..k {
            design[(i, j + 1)] = view.dx[(i, j)];
        }
    }
    let mut labels = vec!["treat".to_string()];
    labels.extend(view.tv_names.iter().map(|s| format!("d_{s}")));
    let fit = linear_projection(&design, &view.dy, &view.weight, &labels, true)?;
    let alpha = fit.coefficients[1];
    let beta = (0..k).map(|j| fit.coefficients[j + 2]).collect();
    let linear_propensity = linear_propensity_fit(view)?;
    Ok(TwfeFit {
        alpha,
        beta,
        intercept: fit.coefficients[0],
        linear_propensity,
        n,
        n_treated,
    })
}

/// Linear projection of the treatment indicator on (1, ΔX).
pub fn linear_propensity_fit(view: &TwoPeriodView) -> Result<LinearProjection> {
    let labels: Vec<String> = view.tv_names.iter().map(|s| format!("d_{s}")).collect();
    linear_projection(&view.dx, &view.treat, &view.weight, &labels, true)
}

/// The treatment coefficient computed the long way round: residualize D on
/// (1, ΔX), then take Ê[(D−L̂)ΔY] / Ê[(D−L̂)²]. Agrees with `fit_fd_twfe`
/// to rounding error.
pub fn fwl_alpha(view: &TwoPeriodView) -> Result<f64> {
    let lp = linear_propensity_fit(view)?;
    let resid = &lp.residuals;
    let num = wmean(
        (0..view.n()).map(|i| resid[i] * view.dy[i]),
        view.weight.iter().copied(),
    );
    let den = wmean(
        (0..view.n()).map(|i| resid[i] * resid[i]),
        view.weight.iter().copied(),
    );
    if den <= 0.0 {
        return Err(Error::computation(
            "treatment indicator is perfectly explained by the covariate changes",
        ));
    }
    Ok(num / den)
}

/// The two-period estimator rewritten as a weighted treated/comparison
/// contrast of outcome changes.
#[derive(Debug, Clone)]
pub struct TwfeWeightReport {
    pub alpha: f64,
    /// Ê[(D − L̂)²], the partialled denominator.
    pub denominator: f64,
    /// Fitted linear propensity per unit (can leave [0, 1]).
    pub lhat: DVector<f64>,
    /// Weights on treated units: (1 − L̂)/Ê[1 − L̂ | D=1]; weighted mean one.
    pub treated: WeightProfile,
    /// Weights on untreated units: L̂/Ê[L̂ | D=0]; weighted mean one.
    pub comparison: WeightProfile,
}

impl TwfeWeightReport {
    /// Reconstruct alpha from the weights:
    /// Ê[w·ΔY | treated] − Ê[w·ΔY | comparison].
    pub fn alpha_from_weights(&self, view: &TwoPeriodView) -> f64 {
        let side = |p: &WeightProfile| {
            wmean(
                p.idx.iter().zip(&p.implicit).map(|(&i, w)| w * view.dy[i]),
                p.sampling.iter().copied(),
            )
        };
        side(&self.treated) - side(&self.comparison)
    }
}

/// Extract the implicit unit weights of the two-period estimator.
///
/// Treated weights are proportional to 1 − L̂, comparison weights to L̂,
/// each normalized to weighted mean one within its side. Units whose linear
/// propensity leaves [0, 1] get negative weight — the report makes that
/// visible instead of letting the regression average it away.
pub fn two_period_implicit_weights(view: &TwoPeriodView) -> Result<TwfeWeightReport> {
    let n = view.n();
    let lp = linear_propensity_fit(view)?;
    let lhat = DVector::from_fn(n, |i, _| view.treat[i] - lp.residuals[i]);

    let denominator = wmean(
        (0..n).map(|i| lp.residuals[i] * lp.residuals[i]),
        view.weight.iter().copied(),
    );
    if denominator <= 0.0 {
        return Err(Error::computation(
            "treatment indicator is perfectly explained by the covariate changes",
        ));
    }

    let t_idx: Vec<usize> = (0..n).filter(|&i| view.treat[i] == 1.0).collect();
    let c_idx: Vec<usize> = (0..n).filter(|&i| view.treat[i] == 0.0).collect();
    if t_idx.is_empty() || c_idx.is_empty() {
        return Err(Error::validation("need both treated and untreated units"));
    }

    let mean_t = wmean(
        t_idx.iter().map(|&i| 1.0 - lhat[i]),
        t_idx.iter().map(|&i| view.weight[i]),
    );
    let mean_c = wmean(
        c_idx.iter().map(|&i| lhat[i]),
        c_idx.iter().map(|&i| view.weight[i]),
    );
    if mean_t == 0.0 || mean_c == 0.0 {
        return Err(Error::computation(
            "degenerate linear propensity: a side has zero average leverage",
        ));
    }

    let ids = |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| format!("row{i}")).collect() };
    let treated = WeightProfile::new(
        "twfe treated",
        t_idx.clone(),
        ids(&t_idx),
        t_idx.iter().map(|&i| (1.0 - lhat[i]) / mean_t).collect(),
        t_idx.iter().map(|&i| view.weight[i]).collect(),
    )?;
    let comparison = WeightProfile::new(
        "twfe comparison",
        c_idx.clone(),
        ids(&c_idx),
        c_idx.iter().map(|&i| lhat[i] / mean_c).collect(),
        c_idx.iter().map(|&i| view.weight[i]).collect(),
    )?;

    let alpha = fwl_alpha(view)?;
    Ok(TwfeWeightReport { alpha, denominator, lhat, treated, comparison })
}

// ---------------------------------------------------------------------------
// staggered / multi-period
// ---------------------------------------------------------------------------

/// Options for the staggered fixed-effects fit.
#[derive(Debug, Clone, Default)]
pub struct FeOptions {
    /// Name of a time-invariant column holding integer region codes; when
    /// set, period effects become region-by-period effects (demeaning within
    /// region-period cells instead of period columns).
    pub region_by_period: Option<String>,
}

/// Pooled two-way (or region-by-period) fixed-effects fit.
#[derive(Debug, Clone)]
pub struct FeTwfeFit {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub beta_labels: Vec<String>,
    pub n: usize,
    pub t_len: usize,
}

fn region_codes(data: &PanelDataset, column: &str) -> Result<Vec<usize>> {
    let j = data
        .ti_names()
        .iter()
        .position(|n| n == column)
        .ok_or_else(|| {
            Error::validation(format!(
                "region column '{column}' is not a time-invariant covariate of this panel"
            ))
        })?;
    let mut codes = Vec::with_capacity(data.n());
    let mut distinct: Vec<i64> = Vec::new();
    for i in 0..data.n() {
        let v = data.ti()[(i, j)];
        if v.fract() != 0.0 || !v.is_finite() {
            return Err(Error::validation(format!(
                "region column '{column}' must hold integer codes; unit '{}' has {v}",
                data.unit_ids()[i]
            )));
        }
        let code = v as i64;
        let pos = match distinct.iter().position(|c| *c == code) {
            Some(p) => p,
            None => {
                distinct.push(code);
                distinct.len() - 1
            }
        };
        codes.push(pos);
    }
    Ok(codes)
}

/// Demean within units and within region-period cells (weighted), adding the
/// weighted region mean back. With a single region this is ordinary double
/// demeaning. Annihilates a_i + b_{region(i), t}.
pub fn double_demean_by_region(
    matrix: &DMatrix<f64>,
    weights: &DVector<f64>,
    region: &[usize],
) -> Result<DMatrix<f64>> {
    let (n, t_len) = matrix.shape();
    if region.len() != n || weights.len() != n {
        return Err(Error::validation("region/weight length mismatch"));
    }
    let n_regions = region.iter().copied().max().map_or(0, |m| m + 1);
    let mut sw = vec![0.0; n_regions];
    for i in 0..n {
        sw[region[i]] += weights[i];
    }
    let mut row_mean = vec![0.0; n];
    for i in 0..n {
        row_mean[i] = matrix.row(i).sum() / t_len as f64;
    }
    // weighted cell means per (region, t) and weighted region means of row means
    let mut cell = vec![vec![0.0; t_len]; n_regions];
    let mut rmean = vec![0.0; n_regions];
    for i in 0..n {
        let r = region[i];
        for t in 0..t_len {
            cell[r][t] += weights[i] * matrix[(i, t)];
        }
        rmean[r] += weights[i] * row_mean[i];
    }
    for r in 0..n_regions {
        if sw[r] <= 0.0 {
            return Err(Error::computation("empty region cell"));
        }
        for t in 0..t_len {
            cell[r][t] /= sw[r];
        }
        rmean[r] /= sw[r];
    }
    let mut out = DMatrix::zeros(n, t_len);
    for i in 0..n {
        let r = region[i];
        for t in 0..t_len {
            out[(i, t)] = matrix[(i, t)] - row_mean[i] - cell[r][t] + rmean[r];
        }
    }
    Ok(out)
}

fn demean_matrix(
    matrix: &DMatrix<f64>,
    data: &PanelDataset,
    region: Option<&[usize]>,
) -> Result<DMatrix<f64>> {
    match region {
        Some(codes) => double_demean_by_region(matrix, data.weight(), codes),
        None => double_demean(matrix, data.weight()),
    }
}

fn treatment_matrix(data: &PanelDataset) -> DMatrix<f64> {
    DMatrix::from_fn(data.n(), data.t_len(), |i, t| data.d(i, t))
}

struct DemeanedPanel {
    d: DMatrix<f64>,
    x: Vec<DMatrix<f64>>,
    y: DMatrix<f64>,
}

fn demeaned_panel(data: &PanelDataset, opts: &FeOptions) -> Result<DemeanedPanel> {
    let codes = match &opts.region_by_period {
        Some(col) => Some(region_codes(data, col)?),
        None => None,
    };
    let region = codes.as_deref();
    let d = demean_matrix(&treatment_matrix(data), data, region)?;
    let x = (0..data.k())
        .map(|j| demean_matrix(data.tv(j), data, region))
        .collect::<Result<Vec<_>>>()?;
    let y = demean_matrix(data.outcome()?, data, region)?;
    Ok(DemeanedPanel { d, x, y })
}

/// Stack an n×T panel matrix columnwise into the pooled regression layout.
fn stack_rows(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = parts[0].nrows();
    let t_len = parts[0].ncols();
    let mut out = DMatrix::zeros(n * t_len, parts.len());
    for (j, m) in parts.iter().enumerate() {
        for i in 0..n {
            for t in 0..t_len {
                out[(i * t_len + t, j)] = m[(i, t)];
            }
        }
    }
    out
}

fn stacked_weights(data: &PanelDataset) -> DVector<f64> {
    let t_len = data.t_len();
    DVector::from_fn(data.n() * t_len, |r, _| data.weight()[r / t_len])
}

/// Pooled fixed-effects regression of the outcome on treatment and
/// time-varying covariates (all double-demeaned, no intercept).
pub fn fit_fe_twfe(data: &PanelDataset, opts: &FeOptions) -> Result<FeTwfeFit> {
    if data.treated_groups().is_empty() {
        return Err(Error::validation("no treated units; nothing to estimate"));
    }
    let dm = demeaned_panel(data, opts)?;
    let mut parts: Vec<&DMatrix<f64>> = vec![&dm.d];
    parts.extend(dm.x.iter());
    let design = stack_rows(&parts);
    let response = DVector::from_column_slice(stack_rows(&[&dm.y]).as_slice());
    let weights = stacked_weights(data);
    let mut labels = vec!["treat".to_string()];
    labels.extend(data.tv_names().iter().map(|s| format!("dd_{s}")));
    let fit = linear_projection(&design, &response, &weights, &labels, false)?;
    Ok(FeTwfeFit {
        alpha: fit.coefficients[0],
        beta: fit.coefficients.iter().skip(1).copied().collect(),
        beta_labels: labels[1..].to_vec(),
        n: data.n(),
        t_len: data.t_len(),
    })
}

/// Contribution of one (adoption group, period) cell to the pooled
/// fixed-effects coefficient.
#[derive(Debug, Clone, Serialize)]
pub struct MpCell {
    /// Adoption period label of the group.
    pub group: i64,
    /// Calendar period label.
    pub period: i64,
    /// Whether the cell is post-adoption (period ≥ group).
    pub post: bool,
    /// Aggregation weight w̄(g,t); post weights sum to 1, pre to −1.
    pub weight: f64,
    /// Treated-side contribution π̂_g·Ê[R_t(Y_t − Y_{g−1}) | G=g]/Den.
    pub treated_term: f64,
    /// Comparison-side contribution routed through the never-treated units.
    pub comparison_term: f64,
    /// Set when Ê[R_t | never] was too close to zero to divide by; the
    /// cell's comparison piece then lives in the remainder.
    pub comparison_skipped: bool,
    /// Net contribution of the cell to alpha.
    pub contribution: f64,
}

/// The pooled fixed-effects coefficient decomposed over (group, period)
/// cells with explicit weights and per-unit weight profiles.
#[derive(Debug, Clone)]
pub struct MpWeightReport {
    pub alpha: f64,
    /// Alpha after subtracting every pre-period contribution — what the
    /// estimate would be if all pre-trend terms were exactly zero.
    pub alpha_pre_zeroed: f64,
    /// Ê[R·D], the pooled partialled denominator.
    pub denominator: f64,
    /// alpha minus the sum of cell contributions; nonzero when comparison
    /// terms were skipped or covariate specification error leaks in.
    pub remainder: f64,
    pub cells: Vec<MpCell>,
    /// Coefficients of the pooled projection of demeaned treatment on
    /// demeaned covariates.
    pub gamma: Vec<f64>,
    /// Partialled treatment residual R_it (n × T); rows sum to zero, weighted
    /// columns sum to zero.
    pub residual: DMatrix<f64>,
    pub warnings: Vec<String>,
}

impl MpWeightReport {
    pub fn post_weight_sum(&self) -> f64 {
        self.cells.iter().filter(|c| c.post).map(|c| c.weight).sum()
    }

    pub fn pre_weight_sum(&self) -> f64 {
        self.cells.iter().filter(|c| !c.post).map(|c| c.weight).sum()
    }

    /// Per-unit weight profiles for one cell: treated side scales R_it within
    /// the adoption group, comparison side within the never-treated units.
    pub fn cell_profiles(
        &self,
        data: &PanelDataset,
        group: i64,
        period: i64,
    ) -> Result<(WeightProfile, WeightProfile)> {
        let t = data
            .period_index(period)
            .ok_or_else(|| Error::validation(format!("period {period} not in panel")))?;
        let g_idx = data
            .period_index(group)
            .ok_or_else(|| Error::validation(format!("group {group} not in panel")))?;
        let t_idx: Vec<usize> = (0..data.n()).filter(|&i| data.group_idx(i) == g_idx).collect();
        let c_idx: Vec<usize> = (0..data.n()).filter(|&i| data.is_never_treated(i)).collect();
        if t_idx.is_empty() || c_idx.is_empty() {
            return Err(Error::validation("cell has no treated or no never-treated units"));
        }
        let side = |idx: &[usize], label: String| -> Result<WeightProfile> {
            let mean_r = wmean(
                idx.iter().map(|&i| self.residual[(i, t)]),
                idx.iter().map(|&i| data.weight()[i]),
            );
            if mean_r == 0.0 {
                return Err(Error::computation(format!(
                    "cell ({group},{period}): average partialled treatment is zero on side '{label}'"
                )));
            }
            WeightProfile::new(
                label,
                idx.to_vec(),
                idx.iter().map(|&i| data.unit_ids()[i].clone()).collect(),
                idx.iter().map(|&i| self.residual[(i, t)] / mean_r).collect(),
                idx.iter().map(|&i| data.weight()[i]).collect(),
            )
        };
        Ok((
            side(&t_idx, format!("g{group} t{period} treated"))?,
            side(&c_idx, format!("g{group} t{period} comparison"))?,
        ))
    }
}

/// Decompose the pooled fixed-effects coefficient into (group, period)
/// contributions against the never-treated units.
///
/// Needs at least one never-treated unit. The identity
/// `alpha = Σ cells (treated_term − comparison_term) + remainder`
/// holds by construction; weight sums over post (+1) and pre (−1) cells hold
/// exactly in any sample.
pub fn mp_implicit_weights(data: &PanelDataset, opts: &FeOptions) -> Result<MpWeightReport> {
    let n = data.n();
    let t_len = data.t_len();
    let groups = data.treated_groups();
    if groups.is_empty() {
        return Err(Error::validation("no treated units; nothing to decompose"));
    }
    if data.never_treated_count() == 0 {
        return Err(Error::validation(
            "the weight decomposition compares against never-treated units, but there are none",
        ));
    }
    let dm = demeaned_panel(data, opts)?;
    let y = data.outcome()?;
    let w = data.weight();
    let sum_w: f64 = w.iter().sum();

    // Γ: pooled projection of demeaned treatment on demeaned covariates
    let (residual, gamma) = if data.k() == 0 {
        (dm.d.clone(), Vec::new())
    } else {
        let parts: Vec<&DMatrix<f64>> = dm.x.iter().collect();
        let design = stack_rows(&parts);
        let response = DVector::from_column_slice(stack_rows(&[&dm.d]).as_slice());
        let weights = stacked_weights(data);
        let labels: Vec<String> = data.tv_names().iter().map(|s| format!("dd_{s}")).collect();
        let fit = linear_projection(&design, &response, &weights, &labels, false)?;
        let mut r = DMatrix::zeros(n, t_len);
        for i in 0..n {
            for t in 0..t_len {
                r[(i, t)] = fit.residuals[i * t_len + t];
            }
        }
        (r, fit.coefficients.as_slice().to_vec())
    };

    // pooled expectation: weighted over units, uniform over periods
    let pooled = |f: &dyn Fn(usize, usize) -> f64| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for t in 0..t_len {
                acc += w[i] * f(i, t);
            }
        }
        acc / (sum_w * t_len as f64)
    };
    let denominator = pooled(&|i, t| residual[(i, t)] * data.d(i, t));
    if denominator <= 0.0 {
        return Err(Error::computation(
            "pooled partialled denominator is not positive; treatment is collinear with covariates",
        ));
    }
    let alpha = pooled(&|i, t| residual[(i, t)] * y[(i, t)]) / denominator;

    // group shares and side means
    let never_idx: Vec<usize> = (0..n).filter(|&i| data.is_never_treated(i)).collect();
    let side_mean = |idx: &[usize], f: &dyn Fn(usize) -> f64| -> f64 {
        wmean(idx.iter().map(|&i| f(i)), idx.iter().map(|&i| w[i]))
    };

    // guard scale for near-zero comparison denominators
    let never_r_scale = (0..t_len)
        .map(|t| side_mean(&never_idx, &|i| residual[(i, t)]).abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);

    let mut warnings = Vec::new();
    let mut cells = Vec::with_capacity(groups.len() * t_len);
    let mut contribution_sum = 0.0;
    let mut pre_sum = 0.0;
    for &g in &groups {
        let g_idx: Vec<usize> = (0..n).filter(|&i| data.group_idx(i) == g).collect();
        let pi_g: f64 = g_idx.iter().map(|&i| w[i]).sum::<f64>() / sum_w;
        for t in 0..t_len {
            let mean_r_g = side_mean(&g_idx, &|i| residual[(i, t)]);
            let weight = pi_g * mean_r_g / (denominator * t_len as f64);
            // treated side in cancellation form: no division by mean_r_g
            let treated_term = pi_g
                * side_mean(&g_idx, &|i| residual[(i, t)] * (y[(i, t)] - y[(i, g - 1)]))
                / (denominator * t_len as f64);
            let mean_r_nt = side_mean(&never_idx, &|i| residual[(i, t)]);
            let (comparison_term, skipped) = if mean_r_nt.abs() < 1e-9 * never_r_scale {
                (0.0, true)
            } else {
                let contrast =
                    side_mean(&never_idx, &|i| residual[(i, t)] * (y[(i, t)] - y[(i, g - 1)]))
                        / mean_r_nt;
                (weight * contrast, false)
            };
            if skipped {
                warnings.push(format!(
                    "cell (group {}, period {}): comparison weights are degenerate \
                     (average partialled treatment ≈ 0 among never-treated); its comparison \
                     term was folded into the remainder",
                    data.periods()[g],
                    data.periods()[t]
                ));
            }
            let contribution = treated_term - comparison_term;
            contribution_sum += contribution;
            let post = t >= g;
            if !post {
                pre_sum += contribution;
            }
            cells.push(MpCell {
                group: data.periods()[g],
                period: data.periods()[t],
                post,
                weight,
                treated_term,
                comparison_term,
                comparison_skipped: skipped,
                contribution,
            });
        }
    }
    let remainder = alpha - contribution_sum;
    if remainder.abs() > 0.05 * alpha.abs().max(1e-12) {
        warnings.push(format!(
            "decomposition remainder {:.6} exceeds 5% of alpha {:.6}; the never-treated \
             trend projection does not absorb the comparison terms well",
            remainder, alpha
        ));
    }
    Ok(MpWeightReport {
        alpha,
        alpha_pre_zeroed: alpha - pre_sum,
        denominator,
        remainder,
        cells,
        gamma,
        residual,
        warnings,
    })
}

/// Within-never-treated trend model: period effects λ_t plus covariate slopes
/// Λ₀, fitted by a double-demeaned regression over never-treated units only.
#[derive(Debug, Clone, Serialize)]
pub struct NeverTrendModel {
    /// One period effect per panel period.
    pub lambda: Vec<f64>,
    /// One slope per time-varying covariate.
    pub capital_lambda: Vec<f64>,
    pub covariate_labels: Vec<String>,
}

/// Fit the never-treated trend model. The slopes come from a pooled
/// regression of double-demeaned outcomes on double-demeaned covariates
/// *within the never-treated subsample*; the period effects are then the
/// weighted never-treated means of Y_t − X_t'Λ₀.
pub fn never_treated_projection(data: &PanelDataset) -> Result<NeverTrendModel> {
    let never_idx: Vec<usize> = (0..data.n()).filter(|&i| data.is_never_treated(i)).collect();
    if never_idx.is_empty() {
        return Err(Error::validation("no never-treated units to fit a trend model on"));
    }
    let sub = data.select_units(&never_idx)?;
    let y = sub.outcome()?;
    let t_len = sub.t_len();
    let k = sub.k();
    let capital_lambda: Vec<f64> = if k == 0 {
        Vec::new()
    } else {
        let xs = (0..k)
            .map(|j| double_demean(sub.tv(j), sub.weight()))
            .collect::<Result<Vec<_>>>()?;
        let ydd = double_demean(y, sub.weight())?;
        let parts: Vec<&DMatrix<f64>> = xs.iter().collect();
        let design = stack_rows(&parts);
        let response = DVector::from_column_slice(stack_rows(&[&ydd]).as_slice());
        let weights = stacked_weights(&sub);
        let labels: Vec<String> = sub.tv_names().iter().map(|s| format!("dd_{s}")).collect();
        let fit = linear_projection(&design, &response, &weights, &labels, false)?;
        fit.coefficients.as_slice().to_vec()
    };
    let mut lambda = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let adj = |i: usize| -> f64 {
            let mut v = y[(i, t)];
            for j in 0..k {
                v -= sub.tv(j)[(i, t)] * capital_lambda[j];
            }
            v
        };
        lambda.push(wmean(
            (0..sub.n()).map(adj),
            sub.weight().iter().copied(),
        ));
    }
    Ok(NeverTrendModel {
        lambda,
        capital_lambda,
        covariate_labels: data.tv_names().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The 4-unit example: (D, ΔY, ΔX) = (1,3,1), (1,2,0), (0,1,1), (0,0,0).
    fn four_unit_view() -> TwoPeriodView {
        TwoPeriodView::new(
            DVector::from_column_slice(&[1.0, 1.0, 0.0, 0.0]),
            DVector::from_column_slice(&[3.0, 2.0, 1.0, 0.0]),
            DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 1.0, 0.0]),
            DMatrix::zeros(4, 1),
            DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 1.0, 0.0]),
            DMatrix::zeros(4, 0),
            DVector::from_element(4, 1.0),
            vec!["x".to_string()],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn four_unit_example_has_alpha_two_beta_one() {
        let fit = fit_fd_twfe(&four_unit_view()).unwrap();
        assert!((fit.alpha - 2.0).abs() < 1e-10);
        assert!((fit.beta[0] - 1.0).abs() < 1e-10);
        assert!(fit.intercept.abs() < 1e-10);
    }

    #[test]
    fn four_unit_linear_propensity_is_flat_half() {
        let report = two_period_implicit_weights(&four_unit_view()).unwrap();
        for i in 0..4 {
            assert!((report.lhat[i] - 0.5).abs() < 1e-12);
        }
        // flat propensity -> unit weights all one
        for w in report.treated.implicit.iter().chain(&report.comparison.implicit) {
            assert!((w - 1.0).abs() < 1e-12);
        }
        assert!((report.alpha - 2.0).abs() < 1e-10);
    }

    #[test]
    fn fwl_matches_joint_regression() {
        // unbalanced covariate so the propensity is not flat
        let view = TwoPeriodView::new(
            DVector::from_column_slice(&[1.0, 1.0, 1.0, 0.0, 0.0]),
            DVector::from_column_slice(&[3.0, 2.5, 2.0, 1.0, 0.4]),
            DMatrix::from_column_slice(5, 1, &[1.0, 0.5, 0.2, 0.9, 0.1]),
            DMatrix::zeros(5, 1),
            DMatrix::from_column_slice(5, 1, &[1.0, 0.5, 0.2, 0.9, 0.1]),
            DMatrix::zeros(5, 0),
            DVector::from_column_slice(&[1.0, 2.0, 1.0, 1.5, 1.0]),
            vec!["x".to_string()],
            vec![],
        )
        .unwrap();
        let fit = fit_fd_twfe(&view).unwrap();
        let alpha = fwl_alpha(&view).unwrap();
        assert!((fit.alpha - alpha).abs() < 1e-10, "{} vs {}", fit.alpha, alpha);
    }

    #[test]
    fn implicit_weights_average_one_and_reproduce_alpha() {
        let view = TwoPeriodView::new(
            DVector::from_column_slice(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]),
            DVector::from_column_slice(&[3.0, 2.5, 2.0, 1.0, 0.4, -0.2]),
            DMatrix::from_column_slice(6, 1, &[1.0, 0.5, 0.2, 0.9, 0.1, -0.4]),
            DMatrix::zeros(6, 1),
            DMatrix::from_column_slice(6, 1, &[1.0, 0.5, 0.2, 0.9, 0.1, -0.4]),
            DMatrix::zeros(6, 0),
            DVector::from_column_slice(&[1.0, 2.0, 1.0, 1.5, 1.0, 0.5]),
            vec!["x".to_string()],
            vec![],
        )
        .unwrap();
        let report = two_period_implicit_weights(&view).unwrap();
        let mean_of = |p: &WeightProfile| {
            wmean(p.implicit.iter().copied(), p.sampling.iter().copied())
        };
        assert!((mean_of(&report.treated) - 1.0).abs() < 1e-12);
        assert!((mean_of(&report.comparison) - 1.0).abs() < 1e-12);
        let rebuilt = report.alpha_from_weights(&view);
        assert!((rebuilt - report.alpha).abs() < 1e-10);
    }

    fn tiny_staggered() -> PanelDataset {
        // 3 periods; unit a adopts at period 2, unit b never
        PanelDataset::new(
            vec!["a".into(), "b".into()],
            vec![1, 2, 3],
            Some(DMatrix::from_row_slice(2, 3, &[1.0, 3.0, 4.0, 0.5, 0.7, 0.9])),
            vec![1, 3],
            vec![],
            vec![],
            DMatrix::zeros(2, 0),
            vec![],
            DVector::from_element(2, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn demeaned_treatment_matches_hand_values() {
        let data = tiny_staggered();
        let dd = double_demean(&treatment_matrix(&data), data.weight()).unwrap();
        // adoption at index 1 of 3 with equal shares: (-1/3, 1/6, 1/6)
        assert!((dd[(0, 0)] + 1.0 / 3.0).abs() < 1e-12);
        assert!((dd[(0, 1)] - 1.0 / 6.0).abs() < 1e-12);
        assert!((dd[(0, 2)] - 1.0 / 6.0).abs() < 1e-12);
        assert!((dd[(1, 0)] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mp_weight_sums_are_exact() {
        let data = tiny_staggered();
        let report = mp_implicit_weights(&data, &FeOptions::default()).unwrap();
        assert!((report.post_weight_sum() - 1.0).abs() < 1e-12);
        assert!((report.pre_weight_sum() + 1.0).abs() < 1e-12);
        // no covariates, clean design: decomposition closes
        assert!(report.remainder.abs() < 1e-12, "remainder {}", report.remainder);
        // alpha equals the fe regression coefficient
        let fit = fit_fe_twfe(&data, &FeOptions::default()).unwrap();
        assert!((report.alpha - fit.alpha).abs() < 1e-12);
    }

    #[test]
    fn mp_alpha_matches_canonical_did_without_covariates() {
        // 2x2: alpha must be the difference-in-differences of means
        let data = PanelDataset::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![1, 2],
            Some(DMatrix::from_row_slice(4, 2, &[
                1.0, 4.0, // treated: +3
                2.0, 4.5, // treated: +2.5
                0.0, 1.0, // never: +1
                1.0, 1.5, // never: +0.5
            ])),
            vec![1, 1, 2, 2],
            vec![],
            vec![],
            DMatrix::zeros(4, 0),
            vec![],
            DVector::from_element(4, 1.0),
        )
        .unwrap();
        let fit = fit_fe_twfe(&data, &FeOptions::default()).unwrap();
        // (3 + 2.5)/2 - (1 + 0.5)/2 = 2.75 - 0.75 = 2
        assert!((fit.alpha - 2.0).abs() < 1e-12);
    }

    #[test]
    fn region_demeaning_kills_region_period_effects() {
        // outcome = unit effect + region-by-period effect; coefficient on a
        // region-trending covariate must vanish after region demeaning
        let n = 6;
        let t_len = 3;
        let region_col = DMatrix::from_column_slice(n, 1, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = [[0.5, 1.0, 2.0], [0.1, -0.3, 0.4]];
        let a = [0.3, -0.2, 0.8, 1.1, 0.0, -0.5];
        let y = DMatrix::from_fn(n, t_len, |i, t| a[i] + b[i / 3][t]);
        let data = PanelDataset::new(
            (0..n).map(|i| format!("u{i}")).collect(),
            vec![1, 2, 3],
            Some(y),
            vec![2, 3, 3, 2, 3, 3],
            vec![],
            vec![],
            region_col,
            vec!["region".into()],
            DVector::from_element(n, 1.0),
        )
        .unwrap();
        let fit = fit_fe_twfe(
            &data,
            &FeOptions { region_by_period: Some("region".into()) },
        )
        .unwrap();
        // outcome is pure fixed effects -> alpha exactly zero
        assert!(fit.alpha.abs() < 1e-10, "alpha {}", fit.alpha);
    }

    #[test]
    fn residual_orthogonality_in_staggered_panels() {
        // with a covariate: R rows sum to zero, weighted columns sum to zero,
        // pooled R·X inner product is zero
        let n = 8;
        let t_len = 4;
        let mut seed = 77u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64) / (u32::MAX as f64) - 0.5
        };
        let x = DMatrix::from_fn(n, t_len, |_, _| next());
        let y = DMatrix::from_fn(n, t_len, |_, _| next());
        let groups = vec![1, 2, 3, 4, 4, 4, 2, 4];
        let w = DVector::from_fn(n, |i, _| 0.5 + (i as f64) * 0.25);
        let data = PanelDataset::new(
            (0..n).map(|i| format!("u{i}")).collect(),
            vec![2000, 2001, 2002, 2003],
            Some(y),
            groups,
            vec![x.clone()],
            vec!["x".into()],
            DMatrix::zeros(n, 0),
            vec![],
            w.clone(),
        )
        .unwrap();
        let report = mp_implicit_weights(&data, &FeOptions::default()).unwrap();
        for i in 0..n {
            assert!(report.residual.row(i).sum().abs() < 1e-10);
        }
        for t in 0..t_len {
            let col: f64 = (0..n).map(|i| w[i] * report.residual[(i, t)]).sum();
            assert!(col.abs() < 1e-10);
        }
        let mut rx = 0.0;
        for i in 0..n {
            for t in 0..t_len {
                rx += w[i] * report.residual[(i, t)] * x[(i, t)];
            }
        }
        // pooled orthogonality to the raw covariate (demeaning is absorbed)
        assert!(rx.abs() < 1e-9, "rx {}", rx);
        assert!((report.post_weight_sum() - 1.0).abs() < 1e-10);
        assert!((report.pre_weight_sum() + 1.0).abs() < 1e-10);
    }

    #[test]
    fn never_trend_model_recovers_linear_trend() {
        // never-treated outcomes follow lambda_t + 2*x exactly
        let n = 5;
        let t_len = 3;
        let lambda = [0.5, 1.5, 3.5];
        let x = DMatrix::from_fn(n, t_len, |i, t| (i as f64) * 0.3 + (t as f64) * 0.7 + ((i * 7 + t * 3) % 5) as f64 * 0.11);
        let y = DMatrix::from_fn(n, t_len, |i, t| lambda[t] + 2.0 * x[(i, t)]);
        let data = PanelDataset::new(
            (0..n).map(|i| format!("u{i}")).collect(),
            vec![1, 2, 3],
            Some(y),
            vec![3, 3, 3, 3, 3], // all never treated (sentinel = t_len)
            vec![x],
            vec!["x".into()],
            DMatrix::zeros(n, 0),
            vec![],
            DVector::from_element(n, 1.0),
        )
        .unwrap();
        let model = never_treated_projection(&data).unwrap();
        assert!((model.capital_lambda[0] - 2.0).abs() < 1e-9);
        for t in 0..t_len {
            assert!((model.lambda[t] - lambda[t]).abs() < 1e-9);
        }
    }
}
