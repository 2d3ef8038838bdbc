//! Acceptance gate. One test per shipped guarantee; each prints a
//! `[cNN] PASS — …` line with the quantities it measured (visible with
//! `--nocapture`, and cargo's own per-test line doubles as the pass/fail
//! record). The tolerances here are part of the library's contract:
//! loosening one is an interface change, not a test fix.
//!
//! c01–c05 run over randomized suites with fixed seeds, so failures
//! reproduce exactly. c06–c11 check the discrete-population oracle and the
//! Monte Carlo behaviour of the estimators on the shipped fixtures. c12 is
//! an optional reproduction against an external state-policy panel and
//! skips (with a message) unless the environment points at the data.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use paneldid::balance::{balance_report, two_period_functionals};
use paneldid::drdid::{
    aggregate_overall, att_gt_aipw, att_gt_aipw_weights, att_gt_ipw, att_gt_ra,
    att_gt_ra_weights, overall_cell_weights, two_period_aipw, CovMode, CovariateSpec, DrOptions,
};
use paneldid::numcore::linear_projection;
use paneldid::oracle::{
    alpha_decomposition, builtin_fixture, enumerate_population, population_alpha,
    simulate_sample, staggered_alpha_identity, trend_bias_decomposition, truth_att,
    BUILTIN_FIXTURES,
};
use paneldid::panel::{ColumnSchema, LoadOptions, PanelDataset, TwoPeriodView};
use paneldid::twfe::{
    fit_fd_twfe, fit_fe_twfe, fwl_alpha, mp_implicit_weights, two_period_implicit_weights,
    FeOptions,
};

// ---------------------------------------------------------------------------
// randomized suites
// ---------------------------------------------------------------------------

/// One random two-period dataset, available both as a first-difference view
/// and as a proper panel (periods 1, 2; adoption in 2 vs. never).
struct TwoPeriodSample {
    view: TwoPeriodView,
    data: PanelDataset,
    k: usize,
}

/// Draw n ∈ [20, 500], k ∈ [0, 4], at least 8 units per arm, positive
/// sampling weights, covariate changes that genuinely shift with treatment
/// (so the implicit propensity is nondegenerate), and an outcome change with
/// a mildly nonlinear dependence on the covariates.
fn random_two_period(rng: &mut ChaCha8Rng) -> TwoPeriodSample {
    let n: usize = rng.gen_range(20..=500);
    let k: usize = rng.gen_range(0..=4);
    let m: usize = rng.gen_range(8..=(n - 8).min(3 * n / 4).max(8));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut treat = vec![0.0f64; n];
    for &i in order.iter().take(m) {
        treat[i] = 1.0;
    }

    let x_pre = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut dx = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            let shift = if treat[i] == 1.0 { 0.4 } else { 0.0 };
            dx[(i, j)] = shift + 0.2 * x_pre[(i, j)] + 0.8 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let x_post = &x_pre + &dx;
    let weight = DVector::from_fn(n, |_, _| rng.gen_range(0.5..2.0));
    let dy = DVector::from_fn(n, |i, _| {
        let mut v = 0.3 * treat[i] + 0.7 * rng.sample::<f64, _>(StandardNormal);
        for j in 0..k {
            v += 0.5 * dx[(i, j)] - 0.3 * x_pre[(i, j)] + 0.2 * x_pre[(i, j)].tanh();
        }
        v
    });

    let tv_names: Vec<String> = (0..k).map(|j| format!("x{j}")).collect();
    let treat_v = DVector::from_vec(treat.clone());
    let view = TwoPeriodView::new(
        treat_v,
        dy.clone(),
        dx.clone(),
        x_pre.clone(),
        x_post.clone(),
        DMatrix::zeros(n, 0),
        weight.clone(),
        tv_names.clone(),
        vec![],
    )
    .expect("random view is well formed");

    // the same rows as a two-period panel: Y_1 arbitrary, Y_2 = Y_1 + ΔY
    let y1 = DVector::from_fn(n, |i, _| 1.0 + 0.4 * treat[i] + rng.sample::<f64, _>(StandardNormal));
    let mut outcome = DMatrix::zeros(n, 2);
    let mut x = DMatrix::zeros(n, 2); // per-covariate matrices built below
    let mut tv = Vec::with_capacity(k);
    for j in 0..k {
        for i in 0..n {
            x[(i, 0)] = x_pre[(i, j)];
            x[(i, 1)] = x_post[(i, j)];
        }
        tv.push(x.clone());
    }
    for i in 0..n {
        outcome[(i, 0)] = y1[i];
        outcome[(i, 1)] = y1[i] + dy[i];
    }
    let group_idx: Vec<usize> = (0..n).map(|i| if treat[i] == 1.0 { 1 } else { 2 }).collect();
    let data = PanelDataset::new(
        (0..n).map(|i| format!("u{i}")).collect(),
        vec![1, 2],
        Some(outcome),
        group_idx,
        tv,
        tv_names,
        DMatrix::zeros(n, 0),
        vec![],
        weight,
    )
    .expect("random panel is well formed");

    TwoPeriodSample { view, data, k }
}

fn suite(seed: u64, count: usize) -> Vec<TwoPeriodSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_two_period(&mut rng)).collect()
}

const SUITE_SEED: u64 = 20_260_816;

fn wmean(values: impl Iterator<Item = f64>, weights: impl Iterator<Item = f64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (v, w) in values.zip(weights) {
        num += v * w;
        den += w;
    }
    num / den
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// c01 — projection identities of the first-difference regression
// ---------------------------------------------------------------------------

/// Three exact finite-sample identities, checked on 50 random datasets:
/// (i) within each arm, the implicit linear propensity L̂(ΔX) is orthogonal
/// to the within-arm projection residual of ΔY, so Ê[L̂·Ŷ_d | D=d] equals
/// Ê[L̂·ΔY | D=d]; (ii) the partialled denominator Ê[(D−L̂)²] equals
/// Ê[1−L̂ | D=1]·π̂; (iii) the regression coefficient equals the
/// w(ΔX)-weighted treated contrast of the two within-arm projections.
#[test]
fn c01_projection_identities() {
    let samples = suite(SUITE_SEED, 50);
    let start = Instant::now();
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for s in &samples {
        let fit = fit_fd_twfe(&s.view).expect("first-difference fit");
        let lhat = &fit.linear_propensity.fitted;
        let n = s.view.n();
        let labels: Vec<String> = s.view.tv_names.clone();

        let side_rows = |d: f64| -> Vec<usize> {
            (0..n).filter(|&i| s.view.treat[i] == d).collect()
        };
        let side_proj = |rows: &[usize]| {
            let design = DMatrix::from_fn(rows.len(), s.k, |r, j| s.view.dx[(rows[r], j)]);
            let resp = DVector::from_fn(rows.len(), |r, _| s.view.dy[rows[r]]);
            let w = DVector::from_fn(rows.len(), |r, _| s.view.weight[rows[r]]);
            linear_projection(&design, &resp, &w, &labels, true).expect("within-arm projection")
        };

        // (i) projection orthogonality within each treatment arm
        for d in [0.0, 1.0] {
            let rows = side_rows(d);
            let proj = side_proj(&rows);
            let lhs = wmean(
                rows.iter().enumerate().map(|(r, &i)| lhat[i] * proj.fitted[r]),
                rows.iter().map(|&i| s.view.weight[i]),
            );
            let rhs = wmean(
                rows.iter().map(|&i| lhat[i] * s.view.dy[i]),
                rows.iter().map(|&i| s.view.weight[i]),
            );
            worst.0 = worst.0.max((lhs - rhs).abs());
        }

        // (ii) the partialled denominator in closed form
        let den = wmean(
            (0..n).map(|i| (s.view.treat[i] - lhat[i]).powi(2)),
            (0..n).map(|i| s.view.weight[i]),
        );
        let pi = wmean((0..n).map(|i| s.view.treat[i]), (0..n).map(|i| s.view.weight[i]));
        let treated = side_rows(1.0);
        let one_minus_l = wmean(
            treated.iter().map(|&i| 1.0 - lhat[i]),
            treated.iter().map(|&i| s.view.weight[i]),
        );
        worst.1 = worst.1.max((den - one_minus_l * pi).abs());

        // (iii) alpha as a weighted contrast of within-arm projections
        let comparison = side_rows(0.0);
        let proj1 = side_proj(&treated);
        let proj0 = side_proj(&comparison);
        let dx_treated = DMatrix::from_fn(treated.len(), s.k, |r, j| s.view.dx[(treated[r], j)]);
        let pred0 = proj0.predict(&dx_treated);
        let alpha_from_contrast = wmean(
            treated
                .iter()
                .enumerate()
                .map(|(r, &i)| (1.0 - lhat[i]) / one_minus_l * (proj1.fitted[r] - pred0[r])),
            treated.iter().map(|&i| s.view.weight[i]),
        );
        worst.2 = worst.2.max((fit.alpha - alpha_from_contrast).abs());
    }
    let elapsed = start.elapsed();
    assert!(worst.0 < 1e-10, "orthogonality identity drift {:.2e}", worst.0);
    assert!(worst.1 < 1e-10, "denominator identity drift {:.2e}", worst.1);
    assert!(worst.2 < 1e-8, "contrast identity drift {:.2e}", worst.2);
    assert!(elapsed.as_secs_f64() < 5.0, "identity suite took {elapsed:?}, budget 5s");
    println!(
        "[c01] PASS — 50 datasets; worst gaps {:.1e} / {:.1e} / {:.1e}; {:.2?}",
        worst.0, worst.1, worst.2, elapsed
    );
}

// ---------------------------------------------------------------------------
// c02 — partialling-out equivalence
// ---------------------------------------------------------------------------

/// The treatment coefficient of the joint regression equals the coefficient
/// from regressing ΔY on the partialled treatment, to 1e-8 relative, on the
/// same 50-dataset suite.
#[test]
fn c02_partialling_equivalence() {
    let samples = suite(SUITE_SEED, 50);
    let mut worst = 0.0f64;
    for s in &samples {
        let fit = fit_fd_twfe(&s.view).expect("first-difference fit");
        let alpha2 = fwl_alpha(&s.view).expect("partialled coefficient");
        let rel = (fit.alpha - alpha2).abs() / fit.alpha.abs().max(1.0);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-8, "partialling equivalence drift {worst:.2e}");
    println!("[c02] PASS — 50 datasets; worst relative gap {worst:.1e}");
}

// ---------------------------------------------------------------------------
// c03 — implicit regression weights: normalization and what they balance
// ---------------------------------------------------------------------------

/// Treated implicit weights have sampling-weighted mean one (1e-10), and the
/// weighted standardized difference of every ΔX column is below 1e-6 — the
/// regression balances exactly the covariate *changes* it controls for.
#[test]
fn c03_regression_weight_normalization_and_balance() {
    let samples = suite(SUITE_SEED, 50);
    let mut worst_mean = 0.0f64;
    let mut worst_sd = 0.0f64;
    for s in &samples {
        let rep = two_period_implicit_weights(&s.view).expect("weight extraction");
        let mean_t = wmean(
            rep.treated.implicit.iter().copied(),
            rep.treated.sampling.iter().copied(),
        );
        worst_mean = worst_mean.max((mean_t - 1.0).abs());
        if s.k > 0 {
            let names: Vec<String> = s.view.tv_names.iter().map(|n| format!("d_{n}")).collect();
            let report = balance_report(&s.view.dx, &names, &rep.treated, &rep.comparison)
                .expect("balance over covariate changes");
            for row in &report.rows {
                worst_sd = worst_sd.max(row.std_diff_weighted.abs());
            }
        }
    }
    assert!(worst_mean < 1e-10, "treated weight mean drift {worst_mean:.2e}");
    assert!(worst_sd < 1e-6, "ΔX standardized difference {worst_sd:.2e} under regression weights");
    println!(
        "[c03] PASS — 50 datasets; worst mean-one drift {:.1e}, worst ΔX std-diff {:.1e}",
        worst_mean, worst_sd
    );
}

// ---------------------------------------------------------------------------
// c04 — doubly robust weights balance every design column
// ---------------------------------------------------------------------------

/// For every fit in the suite, the comparison-side weighted mean of each
/// design column (intercept included) matches the treated mean to 1e-6 —
/// the defining property of the doubly robust implicit weights.
#[test]
fn c04_doubly_robust_weight_balance() {
    let samples = suite(SUITE_SEED, 50);
    let opts = DrOptions::default();
    let spec = CovariateSpec::default();
    let mut worst = 0.0f64;
    let mut clean = 0usize;
    for s in &samples {
        let (res, rep) =
            att_gt_aipw_weights(&s.data, &spec, 2, 2, &opts).expect("doubly robust fit");
        if res.warnings.is_empty() {
            clean += 1;
        }
        for gap in &rep.balance_gap {
            worst = worst.max(gap.abs());
        }
    }
    assert!(worst < 1e-6, "balance gap {worst:.2e}");
    assert!(clean >= 40, "only {clean}/50 fits were warning-free; the suite is degenerate");
    println!("[c04] PASS — 50 fits ({clean} warning-free); worst balance gap {worst:.1e}");
}

// ---------------------------------------------------------------------------
// c05 — staggered weight sums
// ---------------------------------------------------------------------------

/// On 20 random staggered panels (T ∈ [3,6], up to four adoption groups),
/// the pooled fixed-effects cell weights sum to +1 over post cells and −1
/// over pre cells, to 1e-8.
#[test]
fn c05_staggered_weight_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(SUITE_SEED + 5);
    let mut worst_post = 0.0f64;
    let mut worst_pre = 0.0f64;
    for _ in 0..20 {
        let t_len: usize = rng.gen_range(3..=6);
        let n: usize = rng.gen_range(60..=200);
        let k: usize = rng.gen_range(0..=2);
        let l: usize = rng.gen_range(0..=1);
        let n_groups: usize = rng.gen_range(1..=4.min(t_len - 1));
        let mut adoption: Vec<usize> = (1..t_len).collect(); // 0-based period index
        adoption.shuffle(&mut rng);
        adoption.truncate(n_groups);

        // at least 5 never-treated and 3 units per adoption group
        let mut group_idx = vec![t_len; n];
        let mut pool: Vec<usize> = (0..n).collect();
        pool.shuffle(&mut rng);
        let mut cursor = 0;
        for &g in &adoption {
            let size = rng.gen_range(3..=(n / (n_groups + 1)).max(3));
            for _ in 0..size {
                if cursor + 5 < n {
                    group_idx[pool[cursor]] = g;
                    cursor += 1;
                }
            }
        }

        let tv: Vec<DMatrix<f64>> = (0..k)
            .map(|_| DMatrix::from_fn(n, t_len, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let ti = DMatrix::from_fn(n, l, |_, _| rng.sample::<f64, _>(StandardNormal));
        let outcome = DMatrix::from_fn(n, t_len, |i, t| {
            0.2 * t as f64
                + if group_idx[i] < t_len && t >= group_idx[i] { 0.5 } else { 0.0 }
                + rng.sample::<f64, _>(StandardNormal)
        });
        let weight = DVector::from_fn(n, |_, _| rng.gen_range(0.5..2.0));
        let data = PanelDataset::new(
            (0..n).map(|i| format!("u{i}")).collect(),
            (1..=t_len as i64).collect(),
            Some(outcome),
            group_idx,
            tv,
            (0..k).map(|j| format!("x{j}")).collect(),
            ti,
            (0..l).map(|j| format!("z{j}")).collect(),
            weight,
        )
        .expect("random staggered panel");

        let rep = mp_implicit_weights(&data, &FeOptions::default()).expect("weight extraction");
        worst_post = worst_post.max((rep.post_weight_sum() - 1.0).abs());
        worst_pre = worst_pre.max((rep.pre_weight_sum() + 1.0).abs());
    }
    assert!(worst_post < 1e-8, "post weight sum drift {worst_post:.2e}");
    assert!(worst_pre < 1e-8, "pre weight sum drift {worst_pre:.2e}");
    println!(
        "[c05] PASS — 20 panels; worst |Σpost−1| {:.1e}, worst |Σpre+1| {:.1e}",
        worst_post, worst_pre
    );
}

// ---------------------------------------------------------------------------
// c06 — oracle decomposition closure on every shipped fixture
// ---------------------------------------------------------------------------

/// Every built-in population satisfies the exact decompositions: the
/// two-period coefficient splits into effect + three bias channels (1e-10),
/// the staggered coefficient reassembles from effect, violation, and
/// trend-misfit terms (1e-8) with each trend gap equal to the sum of its
/// five channels, and the `oracle-check` subcommand confirms all of it in
/// under 30 seconds.
#[test]
fn c06_oracle_closure() {
    let mut checked_two_period = 0usize;
    let mut checked_pairs = 0usize;
    for name in BUILTIN_FIXTURES {
        let dgp = builtin_fixture(name).expect("built-in population");
        let table = enumerate_population(&dgp).expect("enumeration");

        let identity = staggered_alpha_identity(&table).expect("coefficient identity");
        assert!(
            identity.closure_gap.abs() < 1e-8,
            "{name}: identity closure gap {:.2e}",
            identity.closure_gap
        );

        if dgp.t_len == 2 {
            let dec = alpha_decomposition(&table).expect("two-period decomposition");
            assert!(
                dec.closure_gap.abs() < 1e-10,
                "{name}: two-period closure gap {:.2e}",
                dec.closure_gap
            );
            checked_two_period += 1;
        } else {
            for g in table.treated_groups() {
                let g_label = (g + 1) as i64;
                let base = g_label - 1;
                for t in 1..=dgp.t_len as i64 {
                    if t == base {
                        continue;
                    }
                    let dec = trend_bias_decomposition(&table, g_label, t)
                        .expect("trend-bias decomposition");
                    for cell in dec.cells.iter().chain(std::iter::once(&dec.average)) {
                        let sum = cell.drop_ti
                            + cell.extra_period
                            + cell.level_vs_delta
                            + cell.nonlinearity
                            + cell.slope_drift;
                        assert!(
                            (sum - cell.trend_gap).abs() < 1e-8,
                            "{name} (g={g_label}, t={t}): channel sum off by {:.2e}",
                            (sum - cell.trend_gap).abs()
                        );
                    }
                    checked_pairs += 1;
                }
            }
        }
    }

    // the shipped command-line front end re-runs the same closures
    let start = Instant::now();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_paneldid"))
        .arg("oracle-check")
        .output()
        .expect("oracle-check runs");
    let elapsed = start.elapsed();
    assert!(
        out.status.success(),
        "oracle-check failed:\n{}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert!(elapsed.as_secs_f64() < 30.0, "oracle-check took {elapsed:?}, budget 30s");
    println!(
        "[c06] PASS — {} fixtures ({} two-period, {} trend pairs); oracle-check in {:.2?}",
        BUILTIN_FIXTURES.len(),
        checked_two_period,
        checked_pairs,
        elapsed
    );
}

// ---------------------------------------------------------------------------
// c07 — what the coefficient estimates when trends are covariate-linear
// ---------------------------------------------------------------------------

/// On `assumption4_ok` (untreated trend linear in ΔX, nondegenerate implicit
/// weights): with a constant conditional effect the population coefficient
/// equals the ATT to 1e-10; after making the effect vary across cells it
/// equals the weight-averaged conditional effects, mass·w·CATT, to 1e-10 —
/// the bias channels stay zero, only the weighting changes the answer.
#[test]
fn c07_effect_aggregation_under_linear_trends() {
    let dgp = builtin_fixture("assumption4_ok").expect("built-in population");
    let truth = truth_att(&dgp).expect("closed-form effects");
    let table = enumerate_population(&dgp).expect("enumeration");
    let dec = alpha_decomposition(&table).expect("two-period decomposition");
    let const_gap = (dec.alpha - truth.att).abs();
    assert!(const_gap < 1e-10, "constant-effect coefficient gap {const_gap:.2e}");

    // same population, cell-varying effects
    let mut hetero = dgp.clone();
    for (c, cell) in hetero.cells.iter_mut().enumerate() {
        cell.tau.insert("2".to_string(), vec![0.0, 0.2 + 0.15 * c as f64]);
    }
    let truth2 = truth_att(&hetero).expect("closed-form effects");
    let table2 = enumerate_population(&hetero).expect("enumeration");
    let dec2 = alpha_decomposition(&table2).expect("two-period decomposition");
    let catt_of = |cell: usize| -> f64 {
        truth2
            .conditional
            .iter()
            .find(|c| c.cell == cell)
            .map(|c| c.value)
            .expect("conditional effect for cell")
    };
    let weighted: f64 = dec2
        .cell_weights
        .iter()
        .map(|cw| cw.treated_share * cw.weight * catt_of(cw.cell))
        .sum();
    let hetero_gap = (dec2.alpha - weighted).abs();
    assert!(hetero_gap < 1e-10, "heterogeneous-effect aggregation gap {hetero_gap:.2e}");
    println!(
        "[c07] PASS — constant effect: |α−ATT| {:.1e}; heterogeneous: |α−Σ mass·w·CATT| {:.1e}",
        const_gap, hetero_gap
    );
}

// ---------------------------------------------------------------------------
// c08 — the bias is real and the level-aware estimator removes it
// ---------------------------------------------------------------------------

/// On `hidden_linearity_level` (untreated trend rides on the base-period
/// level of x): the population coefficient is off by at least 0.2 by
/// construction, while doubly robust estimation on base-period levels
/// recovers the ATT within 3 Monte Carlo SEs (n=2000, 500 reps). The
/// regression's implicit weights leave the level standardized difference
/// above 0.3; the doubly robust weights push it below 0.05.
#[test]
fn c08_hidden_linearity_demonstration() {
    let dgp = builtin_fixture("hidden_linearity_level").expect("built-in population");
    let truth = truth_att(&dgp).expect("closed-form effects");
    let table = enumerate_population(&dgp).expect("enumeration");
    let alpha = population_alpha(&table, true).expect("population coefficient");
    let pop_gap = (alpha - truth.att).abs();
    assert!(pop_gap >= 0.2, "population coefficient gap {pop_gap:.3} is too small");

    let reps = 500usize;
    let n = 2000usize;
    let spec = CovariateSpec::with_mode(CovMode::BaseLevel);
    let mut estimates = Vec::with_capacity(reps);
    let mut twfe_sd = Vec::with_capacity(reps);
    let mut aipw_sd = Vec::with_capacity(reps);
    for r in 0..reps {
        let data = simulate_sample(&dgp, n, 41_000 + r as u64).expect("simulated panel");
        let view = data.two_period_view(2).expect("two-period view");
        let (cols, names) = two_period_functionals(&view);
        let level_col = names
            .iter()
            .position(|nm| nm == "x_base")
            .expect("level column present");

        let (est, arep) = two_period_aipw(&view, &spec).expect("doubly robust fit");
        estimates.push(est);
        let ab = balance_report(&cols, &names, &arep.treated, &arep.comparison)
            .expect("balance under doubly robust weights");
        aipw_sd.push(ab.rows[level_col].std_diff_weighted.abs());

        let trep = two_period_implicit_weights(&view).expect("regression weights");
        let tb = balance_report(&cols, &names, &trep.treated, &trep.comparison)
            .expect("balance under regression weights");
        twfe_sd.push(tb.rows[level_col].std_diff_weighted.abs());
    }
    let (mean_est, sd_est) = mean_sd(&estimates);
    let mc_se = sd_est / (reps as f64).sqrt();
    let bias = (mean_est - truth.att).abs();
    assert!(
        bias < 3.0 * mc_se,
        "level-aware estimator bias {bias:.4} exceeds 3 MC SEs ({:.4})",
        3.0 * mc_se
    );
    let (mean_twfe_sd, _) = mean_sd(&twfe_sd);
    let (mean_aipw_sd, _) = mean_sd(&aipw_sd);
    assert!(mean_twfe_sd > 0.3, "regression level imbalance {mean_twfe_sd:.3} not > 0.3");
    assert!(mean_aipw_sd < 0.05, "doubly robust level imbalance {mean_aipw_sd:.3} not < 0.05");
    println!(
        "[c08] PASS — population |α−ATT| {:.3}; MC bias {:.4} (3·SE {:.4}); level std-diff: regression {:.3} vs doubly robust {:.4}",
        pop_gap, bias, 3.0 * mc_se, mean_twfe_sd, mean_aipw_sd
    );
}

// ---------------------------------------------------------------------------
// c09 — double robustness, both directions
// ---------------------------------------------------------------------------

/// Monte Carlo at n=2000, 500 reps on `hidden_linearity_level`, where the
/// base-period level is the correct conditioning set and covariate changes
/// are an honest misspecification: AIPW stays within 3 MC SEs of the truth
/// when either nuisance model is right, while regression adjustment on the
/// wrong outcome model is biased by more than 3 MC SEs. Budget: 5 minutes.
#[test]
fn c09_double_robustness() {
    let dgp = builtin_fixture("hidden_linearity_level").expect("built-in population");
    let truth = truth_att(&dgp).expect("closed-form effects");
    let opts = DrOptions::default();
    let mk = |outcome: CovMode, propensity: CovMode| CovariateSpec {
        mode: outcome,
        include_ti: false,
        interactions: vec![],
        propensity_mode: Some(propensity),
    };
    let spec_right_wrong = mk(CovMode::BaseLevel, CovMode::DeltaOnly);
    let spec_wrong_right = mk(CovMode::DeltaOnly, CovMode::BaseLevel);
    let spec_ra_wrong = CovariateSpec {
        include_ti: false,
        ..CovariateSpec::with_mode(CovMode::DeltaOnly)
    };

    let reps = 500usize;
    let n = 2000usize;
    let start = Instant::now();
    let mut a = Vec::with_capacity(reps);
    let mut b = Vec::with_capacity(reps);
    let mut c = Vec::with_capacity(reps);
    for r in 0..reps {
        let data = simulate_sample(&dgp, n, 52_000 + r as u64).expect("simulated panel");
        a.push(att_gt_aipw(&data, &spec_right_wrong, 2, 2, &opts).expect("fit").att);
        b.push(att_gt_aipw(&data, &spec_wrong_right, 2, 2, &opts).expect("fit").att);
        c.push(att_gt_ra(&data, &spec_ra_wrong, 2, 2, &opts).expect("fit").att);
    }
    let elapsed = start.elapsed();
    let check = |xs: &[f64]| -> (f64, f64) {
        let (mean, sd) = mean_sd(xs);
        ((mean - truth.att).abs(), 3.0 * sd / (xs.len() as f64).sqrt())
    };
    let (bias_a, lim_a) = check(&a);
    let (bias_b, lim_b) = check(&b);
    let (bias_c, lim_c) = check(&c);
    assert!(bias_a < lim_a, "right outcome / wrong propensity: bias {bias_a:.4} ≥ {lim_a:.4}");
    assert!(bias_b < lim_b, "wrong outcome / right propensity: bias {bias_b:.4} ≥ {lim_b:.4}");
    assert!(bias_c > lim_c, "wrong-outcome regression adjustment: bias {bias_c:.4} not > {lim_c:.4}");
    assert!(elapsed.as_secs_f64() < 300.0, "double-robustness suite took {elapsed:?}, budget 5min");
    println!(
        "[c09] PASS — biases: AIPW {bias_a:.4} / {bias_b:.4} (limits {lim_a:.4} / {lim_b:.4}), RA {bias_c:.4} (> {lim_c:.4}); {elapsed:.2?}"
    );
}

// ---------------------------------------------------------------------------
// c10 — estimator reductions
// ---------------------------------------------------------------------------

/// With an intercept-only propensity model the doubly robust estimator
/// collapses to regression adjustment; with an intercept-only outcome model
/// it collapses to inverse propensity weighting. Both hold to 1e-12 across
/// the full 50-dataset random suite.
#[test]
fn c10_estimator_reductions() {
    let samples = suite(SUITE_SEED, 50);
    let opts = DrOptions::default();
    let mut worst_ra = 0.0f64;
    let mut worst_ipw = 0.0f64;
    for s in &samples {
        let spec_out = CovariateSpec {
            include_ti: false,
            ..CovariateSpec::with_mode(CovMode::DeltaPlusBase)
        };
        let spec_aipw_flat_prop = CovariateSpec {
            propensity_mode: Some(CovMode::InterceptOnly),
            ..spec_out.clone()
        };
        let ra = att_gt_ra(&s.data, &spec_out, 2, 2, &opts).expect("regression adjustment");
        let aipw_ra = att_gt_aipw(&s.data, &spec_aipw_flat_prop, 2, 2, &opts).expect("fit");
        worst_ra = worst_ra.max((ra.att - aipw_ra.att).abs());

        // identical spec for both arms so any small-group fallback matches
        let spec_flat_out = CovariateSpec {
            mode: CovMode::InterceptOnly,
            include_ti: false,
            interactions: vec![],
            propensity_mode: Some(CovMode::DeltaPlusBase),
        };
        let ipw = att_gt_ipw(&s.data, &spec_flat_out, 2, 2, &opts).expect("propensity weighting");
        let aipw_ipw = att_gt_aipw(&s.data, &spec_flat_out, 2, 2, &opts).expect("fit");
        worst_ipw = worst_ipw.max((ipw.att - aipw_ipw.att).abs());
    }
    assert!(worst_ra < 1e-12, "reduction to regression adjustment drifts {worst_ra:.2e}");
    assert!(worst_ipw < 1e-12, "reduction to propensity weighting drifts {worst_ipw:.2e}");
    println!("[c10] PASS — 50 datasets; reduction gaps {worst_ra:.1e} (RA), {worst_ipw:.1e} (IPW)");
}

// ---------------------------------------------------------------------------
// c11 — pre-treatment contribution of the pooled coefficient
// ---------------------------------------------------------------------------

/// On `pretrend_violation` the pre-treatment cells contribute a nonzero
/// share of the coefficient (beyond 3 MC SEs), and zeroing them moves the
/// estimate in exactly the direction the population identity predicts. On
/// compliant populations whose pre-treatment pairs carry no trend misfit the
/// same contribution converges to zero.
///
/// (`staggered_3g` is deliberately absent from the compliant list: its
/// untreated paths satisfy parallel trends given the cell, but its pre-pair
/// trend misfit is nonzero, so the sample pre contribution converges to that
/// small misfit mass rather than to zero. c06 covers its closure.)
#[test]
fn c11_pretrend_contribution() {
    let reps = 500usize;
    let n = 2000usize;
    let run = |name: &str, seed0: u64| -> (f64, f64, f64) {
        let dgp = builtin_fixture(name).expect("built-in population");
        let table = enumerate_population(&dgp).expect("enumeration");
        let oracle = staggered_alpha_identity(&table).expect("coefficient identity");
        let mut pre = Vec::with_capacity(reps);
        for r in 0..reps {
            let data = simulate_sample(&dgp, n, seed0 + r as u64).expect("simulated panel");
            let rep = mp_implicit_weights(&data, &FeOptions::default()).expect("weights");
            pre.push(rep.alpha - rep.alpha_pre_zeroed);
        }
        let (mean, sd) = mean_sd(&pre);
        (mean, 3.0 * sd / (reps as f64).sqrt(), oracle.pre_violation)
    };

    let (mean_v, lim_v, oracle_v) = run("pretrend_violation", 63_000);
    assert!(mean_v.abs() > lim_v, "violating population: pre contribution {mean_v:.4} within noise ({lim_v:.4})");
    assert!(
        mean_v.signum() == oracle_v.signum(),
        "pre contribution {mean_v:.4} disagrees with the population prediction {oracle_v:.4}"
    );
    // zeroing subtracts the contribution: with a positive violation the
    // adjusted estimate must come out lower, and vice versa
    assert!(
        (mean_v > 0.0 && oracle_v > 0.0) || (mean_v < 0.0 && oracle_v < 0.0),
        "zeroing moved the estimate against the predicted direction"
    );

    let mut compliant_report = Vec::new();
    for (name, seed0) in [("mb2_only", 64_000u64), ("mb5_only", 65_000u64)] {
        let (mean_c, lim_c, oracle_c) = run(name, seed0);
        assert!(
            oracle_c.abs() < 1e-10,
            "{name} is supposed to be compliant; population violation {oracle_c:.2e}"
        );
        assert!(
            mean_c.abs() <= lim_c,
            "{name}: pre contribution {mean_c:.4} exceeds noise ({lim_c:.4})"
        );
        compliant_report.push(format!("{name} {mean_c:+.4}±{:.4}", lim_c / 3.0));
    }
    println!(
        "[c11] PASS — violation {mean_v:+.4} (3·SE {lim_v:.4}, prediction {oracle_v:+.3}); compliant: {}",
        compliant_report.join(", ")
    );
}

// ---------------------------------------------------------------------------
// c12 — optional reproduction on the castle-doctrine state panel
// ---------------------------------------------------------------------------

/// Reproduces published point estimates on the (not shipped) castle-doctrine
/// state panel. Activated by environment variables; skips with a message
/// otherwise.
///
/// Two-period extract (years relabeled 1, 2; log homicides; log population
/// as the time-varying covariate; region dummies as time-invariant columns):
///   CASTLE_TWO_PERIOD_CSV + CASTLE_TWO_PERIOD_SCHEMA
/// Full panel (log homicide rate; eleven covariates; integer `region` code
/// for region-by-period effects; population sampling weights):
///   CASTLE_PANEL_CSV + CASTLE_PANEL_SCHEMA
///   (CASTLE_REGION_COLUMN overrides the region column name)
#[test]
fn c12_external_panel_reproduction() {
    let two_csv = std::env::var("CASTLE_TWO_PERIOD_CSV").ok();
    let two_schema = std::env::var("CASTLE_TWO_PERIOD_SCHEMA").ok();
    let mp_csv = std::env::var("CASTLE_PANEL_CSV").ok();
    let mp_schema = std::env::var("CASTLE_PANEL_SCHEMA").ok();
    if two_csv.is_none() && mp_csv.is_none() {
        println!(
            "[c12] SKIP — castle-doctrine panel not supplied; set CASTLE_TWO_PERIOD_CSV/\
             CASTLE_TWO_PERIOD_SCHEMA and/or CASTLE_PANEL_CSV/CASTLE_PANEL_SCHEMA to run it"
        );
        return;
    }

    let load = |csv: &str, schema: &str| -> PanelDataset {
        let text = std::fs::read_to_string(schema).expect("schema file");
        let schema: ColumnSchema = serde_json::from_str(&text).expect("schema JSON");
        paneldid::panel::load_long_csv(
            std::path::Path::new(csv),
            &schema,
            &LoadOptions::default(),
        )
        .expect("panel loads")
    };
    let mut lines = Vec::new();

    if let (Some(csv), Some(schema)) = (two_csv.as_deref(), two_schema.as_deref()) {
        let data = load(csv, schema);
        let view = data.two_period_view(2).expect("two-period view");
        let fit = fit_fd_twfe(&view).expect("first-difference fit");
        assert!(
            (fit.alpha - 0.115).abs() <= 0.002,
            "two-period regression coefficient {:.4} vs published 0.115",
            fit.alpha
        );
        let (est, _) = two_period_aipw(&view, &CovariateSpec::default()).expect("doubly robust fit");
        assert!(
            (est - 0.157).abs() <= 0.002,
            "two-period doubly robust estimate {est:.4} vs published 0.157"
        );
        lines.push(format!("two-period α {:.3}, AIPW {:.3}", fit.alpha, est));
    } else {
        lines.push("two-period extract not supplied".to_string());
    }

    if let (Some(csv), Some(schema)) = (mp_csv.as_deref(), mp_schema.as_deref()) {
        let data = load(csv, schema);
        let region = std::env::var("CASTLE_REGION_COLUMN").unwrap_or_else(|_| "region".to_string());
        let fe_opts = FeOptions { region_by_period: Some(region) };
        let fit = fit_fe_twfe(&data, &fe_opts).expect("pooled fixed-effects fit");
        assert!(
            (fit.alpha - 0.0672).abs() <= 0.002,
            "pooled coefficient {:.4} vs published 0.0672",
            fit.alpha
        );
        let mp = mp_implicit_weights(&data, &fe_opts).expect("weight extraction");
        assert!(
            (mp.alpha_pre_zeroed - 0.088).abs() <= 0.002,
            "pre-zeroed coefficient {:.4} vs published 0.088",
            mp.alpha_pre_zeroed
        );

        let opts = DrOptions::default();
        let cell_shares = overall_cell_weights(&data);
        for (mode, want_att, want_ess) in [
            (CovMode::DeltaOnly, 0.106, 63.1),
            (CovMode::BaseLevel, 0.019, 26.7),
            (CovMode::DeltaPlusBase, 0.078, 9.9),
        ] {
            let spec = CovariateSpec::with_mode(mode);
            let mut results = Vec::new();
            let mut ess_num = 0.0;
            let mut ess_den = 0.0;
            for cw in &cell_shares {
                let (res, rep) = att_gt_ra_weights(&data, &spec, cw.group, cw.period, &opts)
                    .expect("regression adjustment fit");
                ess_num += cw.weight * rep.comparison.ess();
                ess_den += cw.weight;
                results.push(res);
            }
            let agg = aggregate_overall(&results, &data).expect("overall aggregate");
            let est = agg.values[0].estimate;
            let ess = ess_num / ess_den;
            assert!(
                (est - want_att).abs() <= 0.002,
                "{mode:?}: overall estimate {est:.4} vs published {want_att}"
            );
            assert!(
                (ess - want_ess).abs() <= 0.5,
                "{mode:?}: comparison effective sample size {ess:.1} vs published {want_ess}"
            );
        }
        lines.push(format!("full panel α {:.4}, pre-zeroed {:.4}", fit.alpha, mp.alpha_pre_zeroed));
    } else {
        lines.push("full panel not supplied".to_string());
    }
    println!("[c12] PASS — {}", lines.join("; "));
}
