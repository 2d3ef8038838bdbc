//! Covariate balance diagnostics for implicit estimator weights.
//!
//! Every estimator in this crate can surface the weights it implicitly puts
//! on units. This module turns those weights into balance tables
//! (standardized differences before/after weighting), effective sample
//! sizes, negative-weight summaries, and a deterministic love-plot SVG.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numcore::{kish_ess, weighted_mean, weighted_variance};
use crate::panel::TwoPeriodView;

/// Per-unit weights one estimator assigns to one comparison side.
///
/// `idx` points into the rows of whatever data object the profile was built
/// from; `implicit` is the estimator's weight (mean one within the side for
/// the estimators here, possibly negative), `sampling` the user-supplied
/// sampling weight.
#[derive(Debug, Clone, Serialize)]
pub struct WeightProfile {
    pub label: String,
    pub idx: Vec<usize>,
    pub unit_ids: Vec<String>,
    pub implicit: Vec<f64>,
    pub sampling: Vec<f64>,
}

impl WeightProfile {
    pub fn new(
        label: impl Into<String>,
        idx: Vec<usize>,
        unit_ids: Vec<String>,
        implicit: Vec<f64>,
        sampling: Vec<f64>,
    ) -> Result<Self> {
        let n = idx.len();
        if unit_ids.len() != n || implicit.len() != n || sampling.len() != n {
            return Err(Error::validation("weight profile parts have different lengths"));
        }
        if n == 0 {
            return Err(Error::validation("weight profile cannot be empty"));
        }
        Ok(WeightProfile { label: label.into(), idx, unit_ids, implicit, sampling })
    }

    /// Combined weight actually applied to each unit: implicit × sampling.
    pub fn effective(&self) -> Vec<f64> {
        self.implicit
            .iter()
            .zip(&self.sampling)
            .map(|(a, b)| a * b)
            .collect()
    }

    /// Kish effective sample size of the combined weights.
    pub fn ess(&self) -> f64 {
        kish_ess(&self.effective()).unwrap_or(0.0)
    }

    pub fn negative_summary(&self) -> NegativeWeightSummary {
        let eff = self.effective();
        let total_abs: f64 = eff.iter().map(|w| w.abs()).sum();
        let mut count = 0usize;
        let mut neg_mass = 0.0;
        let mut min_weight = f64::INFINITY;
        let mut min_unit = None;
        for (i, w) in eff.iter().enumerate() {
            if *w < min_weight {
                min_weight = *w;
                min_unit = Some(self.unit_ids[i].clone());
            }
            if *w < 0.0 {
                count += 1;
                neg_mass += w.abs();
            }
        }
        NegativeWeightSummary {
            count,
            negative_mass: neg_mass,
            negative_share: if total_abs > 0.0 { neg_mass / total_abs } else { 0.0 },
            min_weight,
            min_weight_unit: min_unit,
        }
    }
}

/// How much of a weight profile is negative, and where the worst case sits.
#[derive(Debug, Clone, Serialize)]
pub struct NegativeWeightSummary {
    pub count: usize,
    /// Sum of |w| over negative combined weights.
    pub negative_mass: f64,
    /// negative_mass / total absolute mass.
    pub negative_share: f64,
    pub min_weight: f64,
    pub min_weight_unit: Option<String>,
}

/// Balance of one column between the two weighted sides.
#[derive(Debug, Clone, Serialize)]
pub struct BalanceRow {
    pub column: String,
    pub treated_mean_raw: f64,
    pub comparison_mean_raw: f64,
    pub treated_mean_weighted: f64,
    pub comparison_mean_weighted: f64,
    /// Raw (sampling-weight-only) group variances. Both standardized
    /// differences divide by sqrt of their average, so the denominator never
    /// depends on the implicit weights and rows stay comparable across
    /// estimators.
    pub treated_var_raw: f64,
    pub comparison_var_raw: f64,
    /// Standardized difference using sampling weights only.
    pub std_diff_raw: f64,
    /// Standardized difference after applying implicit weights; shares the
    /// raw denominator so the two numbers are on one scale.
    pub std_diff_weighted: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
    pub treated_label: String,
    pub comparison_label: String,
    pub treated_ess: f64,
    pub comparison_ess: f64,
    pub treated_negative: NegativeWeightSummary,
    pub comparison_negative: NegativeWeightSummary,
}

impl BalanceReport {
    pub fn max_abs_weighted(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.std_diff_weighted.abs())
            .fold(0.0, f64::max)
    }
}

fn side_moments(
    cols: &DMatrix<f64>,
    j: usize,
    profile: &WeightProfile,
) -> Result<(f64, f64, f64)> {
    // (raw mean, weighted mean, raw variance) of column j on this side
    let vals: Vec<f64> = profile.idx.iter().map(|&i| cols[(i, j)]).collect();
    let raw_mean = weighted_mean(&vals, &profile.sampling);
    let raw_var = weighted_variance(&vals, &profile.sampling);
    let eff = profile.effective();
    let sum_eff: f64 = eff.iter().sum();
    if sum_eff.abs() < 1e-300 {
        return Err(Error::computation(format!(
            "combined weights on side '{}' sum to zero; weighted means are undefined",
            profile.label
        )));
    }
    let w_mean = vals.iter().zip(&eff).map(|(v, w)| v * w).sum::<f64>() / sum_eff;
    Ok((raw_mean, w_mean, raw_var))
}

/// Balance table over the columns of `cols` for a treated/comparison pair of
/// weight profiles (profiles index rows of `cols`).
pub fn balance_report(
    cols: &DMatrix<f64>,
    names: &[String],
    treated: &WeightProfile,
    comparison: &WeightProfile,
) -> Result<BalanceReport> {
    if names.len() != cols.ncols() {
        return Err(Error::validation("balance column name count mismatch"));
    }
    for p in [treated, comparison] {
        if p.idx.iter().any(|&i| i >= cols.nrows()) {
            return Err(Error::validation("weight profile index out of range"));
        }
    }
    let mut rows = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let (t_raw, t_w, t_var) = side_moments(cols, j, treated)?;
        let (c_raw, c_w, c_var) = side_moments(cols, j, comparison)?;
        let denom = ((t_var + c_var) / 2.0).sqrt();
        let sd = |a: f64, b: f64| -> Result<f64> {
            if a == b {
                return Ok(0.0);
            }
            if denom == 0.0 {
                return Err(Error::computation(format!(
                    "column '{name}' has no variation but unequal means; standardized difference undefined"
                )));
            }
            Ok((a - b) / denom)
        };
        rows.push(BalanceRow {
            column: name.clone(),
            treated_mean_raw: t_raw,
            comparison_mean_raw: c_raw,
            treated_mean_weighted: t_w,
            comparison_mean_weighted: c_w,
            treated_var_raw: t_var,
            comparison_var_raw: c_var,
            std_diff_raw: sd(t_raw, c_raw)?,
            std_diff_weighted: sd(t_w, c_w)?,
        });
    }
    Ok(BalanceReport {
        rows,
        treated_label: treated.label.clone(),
        comparison_label: comparison.label.clone(),
        treated_ess: treated.ess(),
        comparison_ess: comparison.ess(),
        treated_negative: treated.negative_summary(),
        comparison_negative: comparison.negative_summary(),
    })
}

/// Pool several per-cell balance reports into one table.
///
/// Group means and raw variances are averaged across cells with the supplied
/// weights (normalized to sum one) *before* differencing, so the aggregate
/// standardized difference is the difference of pooled means over a pooled
/// denominator — the average-post-period convention. All reports must list
/// the same columns in the same order.
///
/// ESS values are weight-averaged and negative-weight counts summed across
/// cells (a unit appearing in several cells is counted once per cell); both
/// are summaries of the per-cell reports, not recomputed from scratch.
pub fn aggregate_balance(weights: &[f64], reports: &[BalanceReport]) -> Result<BalanceReport> {
    if weights.len() != reports.len() || reports.is_empty() {
        return Err(Error::validation(
            "aggregate_balance needs one weight per report and at least one report",
        ));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::validation("aggregation weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::validation("aggregation weights sum to zero"));
    }
    let columns: Vec<String> = reports[0].rows.iter().map(|r| r.column.clone()).collect();
    for rep in reports.iter().skip(1) {
        let cols: Vec<&str> = rep.rows.iter().map(|r| r.column.as_str()).collect();
        if cols != columns.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::validation(
                "balance reports list different columns; cannot aggregate",
            ));
        }
    }

    let mut rows = Vec::with_capacity(columns.len());
    for (j, name) in columns.iter().enumerate() {
        let mut t_raw = 0.0;
        let mut c_raw = 0.0;
        let mut t_w = 0.0;
        let mut c_w = 0.0;
        let mut t_var = 0.0;
        let mut c_var = 0.0;
        for (wt, rep) in weights.iter().zip(reports) {
            let share = wt / total;
            let r = &rep.rows[j];
            t_raw += share * r.treated_mean_raw;
            c_raw += share * r.comparison_mean_raw;
            t_w += share * r.treated_mean_weighted;
            c_w += share * r.comparison_mean_weighted;
            t_var += share * r.treated_var_raw;
            c_var += share * r.comparison_var_raw;
        }
        let denom = ((t_var + c_var) / 2.0).sqrt();
        let sd = |a: f64, b: f64| -> Result<f64> {
            if a == b {
                return Ok(0.0);
            }
            if denom == 0.0 {
                return Err(Error::computation(format!(
                    "aggregated column '{name}' has no variation but unequal means"
                )));
            }
            Ok((a - b) / denom)
        };
        rows.push(BalanceRow {
            column: name.clone(),
            treated_mean_raw: t_raw,
            comparison_mean_raw: c_raw,
            treated_mean_weighted: t_w,
            comparison_mean_weighted: c_w,
            treated_var_raw: t_var,
            comparison_var_raw: c_var,
            std_diff_raw: sd(t_raw, c_raw)?,
            std_diff_weighted: sd(t_w, c_w)?,
        });
    }

    let wavg = |get: &dyn Fn(&BalanceReport) -> f64| -> f64 {
        weights
            .iter()
            .zip(reports)
            .map(|(wt, rep)| wt / total * get(rep))
            .sum()
    };
    let pool_negative = |get: &dyn Fn(&BalanceReport) -> &NegativeWeightSummary| -> NegativeWeightSummary {
        let mut count = 0usize;
        let mut mass = 0.0;
        let mut share = 0.0;
        let mut min_weight = f64::INFINITY;
        let mut min_unit = None;
        for (wt, rep) in weights.iter().zip(reports) {
            let s = get(rep);
            count += s.count;
            mass += s.negative_mass;
            share += wt / total * s.negative_share;
            if s.min_weight < min_weight {
                min_weight = s.min_weight;
                min_unit = s.min_weight_unit.clone();
            }
        }
        NegativeWeightSummary {
            count,
            negative_mass: mass,
            negative_share: share,
            min_weight,
            min_weight_unit: min_unit,
        }
    };

    Ok(BalanceReport {
        rows,
        treated_label: reports[0].treated_label.clone(),
        comparison_label: reports[0].comparison_label.clone(),
        treated_ess: wavg(&|r| r.treated_ess),
        comparison_ess: wavg(&|r| r.comparison_ess),
        treated_negative: pool_negative(&|r| &r.treated_negative),
        comparison_negative: pool_negative(&|r| &r.comparison_negative),
    })
}

/// Column matrix of the standard two-period balance functionals: the change
/// in each time-varying covariate, its level in each period, and the
/// time-invariant covariates. Rows line up with the view's units.
pub fn two_period_functionals(view: &TwoPeriodView) -> (DMatrix<f64>, Vec<String>) {
    let n = view.n();
    let k = view.tv_names.len();
    let l = view.ti_names.len();
    let mut cols = DMatrix::zeros(n, 3 * k + l);
    let mut names = Vec::with_capacity(3 * k + l);
    for j in 0..k {
        cols.set_column(j, &view.dx.column(j));
        names.push(format!("d_{}", view.tv_names[j]));
    }
    for j in 0..k {
        cols.set_column(k + j, &view.x_pre.column(j));
        names.push(format!("{}_base", view.tv_names[j]));
    }
    for j in 0..k {
        cols.set_column(2 * k + j, &view.x_post.column(j));
        names.push(format!("{}_post", view.tv_names[j]));
    }
    for j in 0..l {
        cols.set_column(3 * k + j, &view.z.column(j));
        names.push(view.ti_names[j].clone());
    }
    (cols, names)
}

// ---------------------------------------------------------------------------
// love plot
// ---------------------------------------------------------------------------

const PLOT_WIDTH: f64 = 640.0;
const ROW_HEIGHT: f64 = 26.0;
const MARGIN_LEFT: f64 = 150.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 48.0;
const MARGIN_BOTTOM: f64 = 34.0;

fn fmt(v: f64) -> String {
    // fixed precision keeps the SVG byte-identical across runs
    format!("{v:.3}")
}

/// Love plot of standardized differences, raw (open circle) vs weighted
/// (filled circle), with guide lines at ±0.1 and ±0.3.
///
/// Pure function of the report: identical inputs give byte-identical SVG.
pub fn love_plot_svg(report: &BalanceReport, title: &str) -> String {
    let n = report.rows.len();
    let height = MARGIN_TOP + ROW_HEIGHT * n as f64 + MARGIN_BOTTOM;
    let span = report
        .rows
        .iter()
        .flat_map(|r| [r.std_diff_raw.abs(), r.std_diff_weighted.abs()])
        .fold(0.35f64, f64::max)
        * 1.1;
    let plot_w = PLOT_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let x_of = |v: f64| MARGIN_LEFT + (v + span) / (2.0 * span) * plot_w;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_WIDTH}\" height=\"{height}\" \
         viewBox=\"0 0 {PLOT_WIDTH} {height}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        PLOT_WIDTH / 2.0,
        xml_escape(title)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"36\" text-anchor=\"middle\" fill=\"#555\">standardized difference \
         (open = raw, filled = weighted)</text>\n",
        PLOT_WIDTH / 2.0
    ));

    // guides at 0, ±0.1, ±0.3
    for (v, dash, color) in [
        (0.0f64, "", "#888888"),
        (0.1, "4 3", "#bbbbbb"),
        (-0.1, "4 3", "#bbbbbb"),
        (0.3, "6 3", "#d09090"),
        (-0.3, "6 3", "#d09090"),
    ] {
        if v.abs() <= span {
            let x = fmt(x_of(v));
            let dash_attr = if dash.is_empty() {
                String::new()
            } else {
                format!(" stroke-dasharray=\"{dash}\"")
            };
            s.push_str(&format!(
                "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"{color}\"{dash_attr}/>\n",
                fmt(MARGIN_TOP - 6.0),
                fmt(height - MARGIN_BOTTOM + 6.0),
            ));
            s.push_str(&format!(
                "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\" fill=\"#555\">{}</text>\n",
                fmt(height - MARGIN_BOTTOM + 20.0),
                fmt(v)
            ));
        }
    }

    for (i, row) in report.rows.iter().enumerate() {
        let y = MARGIN_TOP + ROW_HEIGHT * (i as f64 + 0.5);
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" dominant-baseline=\"middle\">{}</text>\n",
            fmt(MARGIN_LEFT - 10.0),
            fmt(y),
            xml_escape(&row.column)
        ));
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\"/>\n",
            fmt(x_of(-span)),
            fmt(y),
            fmt(x_of(span)),
            fmt(y)
        ));
        s.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"5\" fill=\"none\" stroke=\"#3366aa\" stroke-width=\"1.5\"/>\n",
            fmt(x_of(row.std_diff_raw.clamp(-span, span))),
            fmt(y)
        ));
        s.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"#aa3333\"/>\n",
            fmt(x_of(row.std_diff_weighted.clamp(-span, span))),
            fmt(y)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_profiles() -> (DMatrix<f64>, WeightProfile, WeightProfile) {
        // col 0 imbalanced raw; implicit weights rebalance it on the
        // comparison side
        let cols = DMatrix::from_row_slice(4, 1, &[2.0, 2.0, 1.0, 3.0]);
        let treated = WeightProfile::new(
            "treated",
            vec![0, 1],
            vec!["a".into(), "b".into()],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        let comparison = WeightProfile::new(
            "comparison",
            vec![2, 3],
            vec!["c".into(), "d".into()],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        (cols, treated, comparison)
    }

    #[test]
    fn raw_and_weighted_diffs_share_a_denominator() {
        let (cols, treated, comparison) = toy_profiles();
        let report = balance_report(&cols, &["x".to_string()], &treated, &comparison).unwrap();
        let row = &report.rows[0];
        // treated mean 2, comparison mean 2 -> raw diff zero
        assert!((row.std_diff_raw - 0.0).abs() < 1e-15);
        assert!((row.treated_mean_raw - 2.0).abs() < 1e-15);
        assert!((row.comparison_mean_raw - 2.0).abs() < 1e-15);
    }

    #[test]
    fn implicit_weights_move_the_weighted_mean() {
        let (cols, treated, mut comparison) = toy_profiles();
        comparison.implicit = vec![3.0, 1.0]; // pulls comparison mean toward 1
        let report = balance_report(&cols, &["x".to_string()], &treated, &comparison).unwrap();
        let row = &report.rows[0];
        assert!((row.comparison_mean_weighted - 1.5).abs() < 1e-15);
        assert!(row.std_diff_weighted > 0.0);
        assert_eq!(row.std_diff_raw, 0.0);
    }

    #[test]
    fn negative_summary_counts_mass() {
        let p = WeightProfile::new(
            "side",
            vec![0, 1, 2],
            vec!["a".into(), "b".into(), "c".into()],
            vec![1.5, -0.5, 2.0],
            vec![1.0, 2.0, 1.0],
        )
        .unwrap();
        let s = p.negative_summary();
        assert_eq!(s.count, 1);
        assert!((s.negative_mass - 1.0).abs() < 1e-15);
        assert!((s.negative_share - 1.0 / 4.5).abs() < 1e-15);
        assert!((s.min_weight + 1.0).abs() < 1e-15);
        assert_eq!(s.min_weight_unit.as_deref(), Some("b"));
    }

    #[test]
    fn ess_matches_kish_formula() {
        let p = WeightProfile::new(
            "side",
            vec![0, 1, 2],
            vec!["a".into(), "b".into(), "c".into()],
            vec![1.0, 1.0, 2.0],
            vec![1.0, 1.0, 1.0],
        )
        .unwrap();
        assert!((p.ess() - 16.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn love_plot_is_deterministic_and_wellformed() {
        let (cols, treated, comparison) = toy_profiles();
        let report = balance_report(&cols, &["x".to_string()], &treated, &comparison).unwrap();
        let a = love_plot_svg(&report, "toy");
        let b = love_plot_svg(&report, "toy");
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
        assert!(a.contains("0.300")); // guide line label
        assert!(a.matches("<circle").count() == 2 * report.rows.len());
    }

    #[test]
    fn degenerate_column_with_equal_means_is_zero() {
        let cols = DMatrix::from_row_slice(4, 1, &[1.0, 1.0, 1.0, 1.0]);
        let (_, treated, comparison) = toy_profiles();
        let report = balance_report(&cols, &["c".to_string()], &treated, &comparison).unwrap();
        assert_eq!(report.rows[0].std_diff_raw, 0.0);
        assert_eq!(report.rows[0].std_diff_weighted, 0.0);
    }

    #[test]
    fn aggregation_pools_means_before_differencing() {
        // two cells whose weighted diffs cancel: +1 and -1 around a shared
        // variance of 1, aggregated 50/50 -> pooled std diff 0 even though
        // each cell alone is badly imbalanced
        let cell = |t_w: f64, c_w: f64| BalanceReport {
            rows: vec![BalanceRow {
                column: "x".into(),
                treated_mean_raw: 1.0,
                comparison_mean_raw: 1.0,
                treated_mean_weighted: t_w,
                comparison_mean_weighted: c_w,
                treated_var_raw: 1.0,
                comparison_var_raw: 1.0,
                std_diff_raw: 0.0,
                std_diff_weighted: t_w - c_w,
            }],
            treated_label: "treated".into(),
            comparison_label: "comparison".into(),
            treated_ess: 10.0,
            comparison_ess: 20.0,
            treated_negative: NegativeWeightSummary {
                count: 1,
                negative_mass: 0.5,
                negative_share: 0.05,
                min_weight: -0.5,
                min_weight_unit: Some("u".into()),
            },
            comparison_negative: NegativeWeightSummary {
                count: 0,
                negative_mass: 0.0,
                negative_share: 0.0,
                min_weight: 0.1,
                min_weight_unit: Some("v".into()),
            },
        };
        let reports = vec![cell(2.0, 1.0), cell(1.0, 2.0)];
        let agg = aggregate_balance(&[0.5, 0.5], &reports).unwrap();
        assert!((agg.rows[0].std_diff_weighted).abs() < 1e-15);
        assert!((agg.rows[0].treated_mean_weighted - 1.5).abs() < 1e-15);
        assert_eq!(agg.treated_negative.count, 2);
        assert!((agg.treated_ess - 10.0).abs() < 1e-15);
        // aggregating a single report reproduces it
        let one = aggregate_balance(&[3.0], &reports[..1]).unwrap();
        assert_eq!(one.rows[0].std_diff_weighted, reports[0].rows[0].std_diff_weighted);
    }

    #[test]
    fn aggregation_rejects_mismatched_columns() {
        let (cols, treated, comparison) = toy_profiles();
        let a = balance_report(&cols, &["x".to_string()], &treated, &comparison).unwrap();
        let b = balance_report(&cols, &["other".to_string()], &treated, &comparison).unwrap();
        let err = aggregate_balance(&[0.5, 0.5], &[a, b]).unwrap_err();
        assert!(err.to_string().contains("different columns"));
    }

    #[test]
    fn two_period_functional_columns_line_up() {
        use nalgebra::DVector;
        let view = TwoPeriodView::new(
            DVector::from_column_slice(&[1.0, 0.0]),
            DVector::from_column_slice(&[2.0, 1.0]),
            DMatrix::from_column_slice(2, 1, &[0.5, -0.5]),
            DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            DMatrix::from_column_slice(2, 1, &[1.5, 1.5]),
            DMatrix::from_column_slice(2, 1, &[7.0, 9.0]),
            DVector::from_element(2, 1.0),
            vec!["x".into()],
            vec!["z".into()],
        )
        .unwrap();
        let (cols, names) = two_period_functionals(&view);
        assert_eq!(names, vec!["d_x", "x_base", "x_post", "z"]);
        assert_eq!(cols[(0, 0)], 0.5);
        assert_eq!(cols[(1, 1)], 2.0);
        assert_eq!(cols[(0, 2)], 1.5);
        assert_eq!(cols[(1, 3)], 9.0);
    }
}
