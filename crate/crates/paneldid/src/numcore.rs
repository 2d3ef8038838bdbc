//! Deterministic numeric kernels shared by every estimator: weighted linear
//! projection, logistic regression via iteratively reweighted least squares,
//! standardized differences, and Kish effective sample size.
//!
//! The linear solver works on the weighted normal equations with a pivoted
//! (rank-revealing) Cholesky factorization so that rank deficiency is detected
//! reliably and the offending columns can be named in the error message.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot tolerance for rank detection (applied after the normal
/// matrix is equilibrated to unit diagonal).
const PIVOT_RTOL: f64 = 1e-10;

/// IRLS stops when the largest weighted score component falls below this.
const LOGIT_SCORE_TOL: f64 = 1e-8;
const LOGIT_MAX_ITER: usize = 100;
/// Coefficient sup-norm beyond which we declare quasi-complete separation.
const LOGIT_DIVERGENCE_NORM: f64 = 1e3;

// ---------------------------------------------------------------------------
// weighted means and variances
// ---------------------------------------------------------------------------

/// Weighted mean with denominator Σw.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    let sw: f64 = weights.iter().sum();
    values
        .iter()
        .zip(weights)
        .map(|(v, w)| v * w)
        .sum::<f64>()
        / sw
}

/// Weighted variance with denominator Σw (population convention; no
/// small-sample correction, so the balance denominator is reproducible).
pub fn weighted_variance(values: &[f64], weights: &[f64]) -> f64 {
    let m = weighted_mean(values, weights);
    let sw: f64 = weights.iter().sum();
    values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (v - m) * (v - m))
        .sum::<f64>()
        / sw
}

// ---------------------------------------------------------------------------
// rank-revealing weighted least squares
// ---------------------------------------------------------------------------

/// Result of a weighted linear projection.
///
/// `coefficients` holds the intercept first when one was requested, followed
/// by one slope per design column in the original order.
#[derive(Debug, Clone)]
pub struct LinearProjection {
    pub coefficients: DVector<f64>,
    pub labels: Vec<String>,
    pub intercept: bool,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
}

impl LinearProjection {
    /// Evaluate the fitted linear function on new rows. `design` must have the
    /// same columns (in the same order) as the design used for fitting,
    /// excluding the intercept column which is handled internally.
    pub fn predict(&self, design: &DMatrix<f64>) -> DVector<f64> {
        let p = if self.intercept {
            self.coefficients.len() - 1
        } else {
            self.coefficients.len()
        };
        assert_eq!(
            design.ncols(),
            p,
            "predict called with {} columns, model has {}",
            design.ncols(),
            p
        );
        let mut out = DVector::zeros(design.nrows());
        for i in 0..design.nrows() {
            let mut v = if self.intercept { self.coefficients[0] } else { 0.0 };
            let off = if self.intercept { 1 } else { 0 };
            for j in 0..p {
                v += self.coefficients[off + j] * design[(i, j)];
            }
            out[i] = v;
        }
        out
    }

    /// Slope for a named column (or the intercept via `"(intercept)"`).
    pub fn coef(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.coefficients[i])
    }
}

/// Solve the symmetric positive semi-definite system `a x = b` with diagonal
/// pivoting; `labels` names the columns for the rank-deficiency error.
///
/// The matrix is first equilibrated to unit diagonal so the pivot tolerance is
/// scale-free. Returns the solution in the original column order.
pub fn solve_spd_pivoted(a: &DMatrix<f64>, b: &DVector<f64>, labels: &[String]) -> Result<DVector<f64>> {
    let p = a.nrows();
    if p == 0 {
        return Ok(DVector::zeros(0));
    }

    // Columns with (near-)zero diagonal are degenerate before any pivoting.
    let mut scale = DVector::zeros(p);
    let dmax = a.diagonal().amax();
    for j in 0..p {
        let d = a[(j, j)];
        if !(d > dmax * f64::EPSILON) {
            return Err(Error::computation(format!(
                "design column '{}' has no variation under the given weights",
                labels[j]
            )));
        }
        scale[j] = d.sqrt();
    }

    // Equilibrated copy: m = D^{-1/2} A D^{-1/2}, unit diagonal.
    let mut m = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            m[(i, j)] = a[(i, j)] / (scale[i] * scale[j]);
        }
    }

    let mut l = DMatrix::<f64>::zeros(p, p);
    let mut perm: Vec<usize> = (0..p).collect();
    let mut rank = p;
    for j in 0..p {
        // largest remaining diagonal entry becomes the next pivot
        let mut q = j;
        let mut dbest = m[(j, j)];
        for i in (j + 1)..p {
            if m[(i, i)] > dbest {
                dbest = m[(i, i)];
                q = i;
            }
        }
        if dbest <= PIVOT_RTOL {
            rank = j;
            break;
        }
        if q != j {
            m.swap_rows(j, q);
            m.swap_columns(j, q);
            l.swap_rows(j, q);
            perm.swap(j, q);
        }
        let d = m[(j, j)].sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..p {
            l[(i, j)] = m[(i, j)] / d;
        }
        for i in (j + 1)..p {
            for k in (j + 1)..=i {
                let v = m[(i, k)] - l[(i, j)] * l[(k, j)];
                m[(i, k)] = v;
                m[(k, i)] = v;
            }
        }
    }

    if rank < p {
        let cols: Vec<&str> = perm[rank..].iter().map(|&i| labels[i].as_str()).collect();
        return Err(Error::computation(format!(
            "rank-deficient design: column(s) [{}] are collinear with the preceding columns",
            cols.join(", ")
        )));
    }

    // Solve L L' z = P (D^{-1/2} b), then x = D^{-1/2} P' z.
    let mut pb = DVector::zeros(p);
    for i in 0..p {
        pb[i] = b[perm[i]] / scale[perm[i]];
    }
    // forward substitution
    let mut z = DVector::zeros(p);
    for i in 0..p {
        let mut s = pb[i];
        for k in 0..i {
            s -= l[(i, k)] * z[k];
        }
        z[i] = s / l[(i, i)];
    }
    // back substitution
    let mut y = DVector::zeros(p);
    for i in (0..p).rev() {
        let mut s = z[i];
        for k in (i + 1)..p {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = DVector::zeros(p);
    for i in 0..p {
        x[perm[i]] = y[i] / scale[perm[i]];
    }
    Ok(x)
}

/// Weighted linear projection of `response` on `design` (plus an intercept
/// when `intercept` is set), solving the weighted normal equations.
///
/// # Arguments
/// * `design` - n×p matrix, one column per regressor (no intercept column).
/// * `response` - n response values.
/// * `weights` - n nonnegative weights; rows with zero weight are inert.
/// * `labels` - p column names used in diagnostics and errors.
/// * `intercept` - prepend a constant regressor.
///
/// Errors if the weighted cross-product matrix is rank deficient; the message
/// names the collinear columns.
pub fn linear_projection(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    weights: &DVector<f64>,
    labels: &[String],
    intercept: bool,
) -> Result<LinearProjection> {
    let n = design.nrows();
    let p = design.ncols();
    if response.len() != n || weights.len() != n {
        return Err(Error::validation(format!(
            "linear projection dimension mismatch: design {}x{}, response {}, weights {}",
            n,
            p,
            response.len(),
            weights.len()
        )));
    }
    if labels.len() != p {
        return Err(Error::validation(format!(
            "expected {} column labels, got {}",
            p,
            labels.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::validation("weights must be finite and nonnegative".to_string()));
    }
    let sw: f64 = weights.iter().sum();
    if !(sw > 0.0) {
        return Err(Error::validation("all projection weights are zero".to_string()));
    }
    let q = p + usize::from(intercept);
    if q == 0 {
        return Err(Error::validation(
            "projection needs at least one regressor or an intercept".to_string(),
        ));
    }

    let mut full_labels = Vec::with_capacity(q);
    if intercept {
        full_labels.push("(intercept)".to_string());
    }
    full_labels.extend(labels.iter().cloned());

    // accumulate the weighted normal equations without materializing X'
    let mut a = DMatrix::<f64>::zeros(q, q);
    let mut b = DVector::<f64>::zeros(q);
    let mut row = vec![0.0; q];
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        if intercept {
            row[0] = 1.0;
        }
        let off = usize::from(intercept);
        for j in 0..p {
            row[off + j] = design[(i, j)];
        }
        for r in 0..q {
            b[r] += w * row[r] * response[i];
            for c in r..q {
                a[(r, c)] += w * row[r] * row[c];
            }
        }
    }
    for r in 0..q {
        for c in 0..r {
            a[(r, c)] = a[(c, r)];
        }
    }

    let coefficients = solve_spd_pivoted(&a, &b, &full_labels)?;
    let proj = LinearProjection {
        coefficients,
        labels: full_labels,
        intercept,
        fitted: DVector::zeros(0),
        residuals: DVector::zeros(0),
    };
    let fitted = proj.predict(design);
    let residuals = response - &fitted;
    Ok(LinearProjection { fitted, residuals, ..proj })
}

// ---------------------------------------------------------------------------
// logistic regression (IRLS)
// ---------------------------------------------------------------------------

/// Fitted logit model. The intercept is always included and stored first.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub coefficients: DVector<f64>,
    pub labels: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
    pub max_score: f64,
    pub ridge: f64,
}

impl PropensityModel {
    /// Fitted probabilities for new rows (same columns as the fitting design,
    /// intercept handled internally). Strictly inside (0,1).
    pub fn predict_proba(&self, design: &DMatrix<f64>) -> DVector<f64> {
        let p = self.coefficients.len() - 1;
        assert_eq!(design.ncols(), p, "predict_proba column mismatch");
        let mut out = DVector::zeros(design.nrows());
        for i in 0..design.nrows() {
            let mut eta = self.coefficients[0];
            for j in 0..p {
                eta += self.coefficients[j + 1] * design[(i, j)];
            }
            out[i] = sigmoid(eta);
        }
        out
    }
}

fn sigmoid(eta: f64) -> f64 {
    // clamp so downstream odds ratios stay finite
    let p = 1.0 / (1.0 + (-eta).exp());
    p.clamp(1e-12, 1.0 - 1e-12)
}

fn weighted_log_likelihood(y: &DVector<f64>, p: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let mut ll = 0.0;
    for i in 0..y.len() {
        ll += w[i] * (y[i] * p[i].ln() + (1.0 - y[i]) * (1.0 - p[i]).ln());
    }
    ll
}

/// Maximum-likelihood logit fit by iteratively reweighted least squares.
///
/// The intercept is always included. Stops when the largest component of the
/// weighted score vector drops below 1e-8, or after 100 iterations (the model
/// is then returned with `converged = false`). An optional ridge penalty
/// (excluded from the intercept) is the fallback for separated data.
///
/// # Arguments
/// * `design` - n×p covariate matrix (no intercept column).
/// * `labels01` - n responses, each exactly 0.0 or 1.0.
/// * `weights` - n nonnegative weights.
/// * `col_labels` - p column names for diagnostics.
/// * `ridge` - L2 penalty on the slope coefficients (0 = plain MLE).
pub fn logit_fit(
    design: &DMatrix<f64>,
    labels01: &DVector<f64>,
    weights: &DVector<f64>,
    col_labels: &[String],
    ridge: f64,
) -> Result<PropensityModel> {
    let n = design.nrows();
    let p = design.ncols();
    if labels01.len() != n || weights.len() != n {
        return Err(Error::validation("logit dimension mismatch".to_string()));
    }
    if labels01.iter().any(|y| *y != 0.0 && *y != 1.0) {
        return Err(Error::validation("logit labels must be exactly 0 or 1".to_string()));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::validation("logit weights must be finite and nonnegative".to_string()));
    }
    let w1: f64 = labels01
        .iter()
        .zip(weights.iter())
        .filter(|(y, _)| **y == 1.0)
        .map(|(_, w)| *w)
        .sum();
    let w0: f64 = labels01
        .iter()
        .zip(weights.iter())
        .filter(|(y, _)| **y == 0.0)
        .map(|(_, w)| *w)
        .sum();
    if !(w1 > 0.0) || !(w0 > 0.0) {
        return Err(Error::validation(
            "logit needs positive total weight in both label classes".to_string(),
        ));
    }
    if ridge < 0.0 {
        return Err(Error::validation("ridge penalty must be nonnegative".to_string()));
    }

    let q = p + 1;
    let mut full_labels = Vec::with_capacity(q);
    full_labels.push("(intercept)".to_string());
    full_labels.extend(col_labels.iter().cloned());

    let mut beta = DVector::<f64>::zeros(q);
    let mut iterations = 0;
    let mut max_score = f64::INFINITY;
    let mut converged = false;

    // helper closures keep the IRLS loop readable
    let eta_of = |beta: &DVector<f64>| -> DVector<f64> {
        let mut eta = DVector::zeros(n);
        for i in 0..n {
            let mut v = beta[0];
            for j in 0..p {
                v += beta[j + 1] * design[(i, j)];
            }
            eta[i] = v;
        }
        eta
    };

    let mut prob = eta_of(&beta).map(sigmoid);
    let mut ll = weighted_log_likelihood(labels01, &prob, weights);

    for it in 1..=LOGIT_MAX_ITER {
        iterations = it;

        // weighted score  X'(w ⊙ (y - p)), ridge term included
        let mut score = DVector::<f64>::zeros(q);
        for i in 0..n {
            let r = weights[i] * (labels01[i] - prob[i]);
            score[0] += r;
            for j in 0..p {
                score[j + 1] += r * design[(i, j)];
            }
        }
        if ridge > 0.0 {
            for j in 1..q {
                score[j] -= ridge * beta[j];
            }
        }
        max_score = score.amax();
        if max_score <= LOGIT_SCORE_TOL {
            converged = true;
            break;
        }

        // Fisher information X' diag(w p (1-p)) X + ridge
        let mut info = DMatrix::<f64>::zeros(q, q);
        let mut row = vec![0.0; q];
        for i in 0..n {
            let s = (weights[i] * prob[i] * (1.0 - prob[i])).max(1e-12);
            row[0] = 1.0;
            for j in 0..p {
                row[j + 1] = design[(i, j)];
            }
            for r in 0..q {
                for c in r..q {
                    info[(r, c)] += s * row[r] * row[c];
                }
            }
        }
        for r in 0..q {
            for c in 0..r {
                info[(r, c)] = info[(c, r)];
            }
        }
        if ridge > 0.0 {
            for j in 1..q {
                info[(j, j)] += ridge;
            }
        }

        let mut delta = solve_spd_pivoted(&info, &score, &full_labels)?;

        // step-halving keeps IRLS from overshooting on hard data
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..25 {
            let cand = &beta + &delta * step;
            let cand_prob = eta_of(&cand).map(sigmoid);
            let mut cand_ll = weighted_log_likelihood(labels01, &cand_prob, weights);
            if ridge > 0.0 {
                for j in 1..q {
                    cand_ll -= 0.5 * ridge * cand[j] * cand[j];
                }
            }
            let ref_ll = if ridge > 0.0 {
                let mut v = ll;
                for j in 1..q {
                    v -= 0.5 * ridge * beta[j] * beta[j];
                }
                v
            } else {
                ll
            };
            if cand_ll >= ref_ll - 1e-12 {
                beta = cand;
                prob = cand_prob;
                ll = weighted_log_likelihood(labels01, &prob, weights);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // cannot improve: treat the current point as the optimum
            break;
        }
        delta.fill(0.0);

        if beta.amax() > LOGIT_DIVERGENCE_NORM {
            return Err(Error::computation(
                "logit coefficients diverged (quasi-complete separation); \
                 consider trimming extreme units or a ridge penalty"
                    .to_string(),
            ));
        }
    }

    if !converged {
        // final score check (the loop may have exited via break-on-no-improvement)
        let mut score = DVector::<f64>::zeros(q);
        for i in 0..n {
            let r = weights[i] * (labels01[i] - prob[i]);
            score[0] += r;
            for j in 0..p {
                score[j + 1] += r * design[(i, j)];
            }
        }
        if ridge > 0.0 {
            for j in 1..q {
                score[j] -= ridge * beta[j];
            }
        }
        max_score = score.amax();
        converged = max_score <= LOGIT_SCORE_TOL;
    }

    Ok(PropensityModel {
        coefficients: beta,
        labels: full_labels,
        converged,
        iterations,
        max_score,
        ridge,
    })
}

// ---------------------------------------------------------------------------
// balance scalars
// ---------------------------------------------------------------------------

/// Standardized difference (mean_a − mean_b) / sqrt((var_a + var_b)/2).
///
/// Equal means give exactly 0 even when both variances vanish; unequal means
/// over a degenerate (zero pooled variance) covariate are an error because no
/// finite standardization exists.
pub fn std_diff(mean_a: f64, var_a: f64, mean_b: f64, var_b: f64) -> Result<f64> {
    if var_a < 0.0 || var_b < 0.0 {
        return Err(Error::validation("variances must be nonnegative".to_string()));
    }
    if mean_a == mean_b {
        return Ok(0.0);
    }
    let pooled = ((var_a + var_b) / 2.0).sqrt();
    if pooled == 0.0 {
        return Err(Error::computation(
            "degenerate covariate: group means differ but pooled standard deviation is zero"
                .to_string(),
        ));
    }
    Ok((mean_a - mean_b) / pooled)
}

/// Kish effective sample size (Σw)²/Σw².
pub fn kish_ess(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::validation("effective sample size of an empty weight vector".to_string()));
    }
    let sum: f64 = weights.iter().sum();
    let sumsq: f64 = weights.iter().map(|w| w * w).sum();
    if sumsq == 0.0 {
        return Err(Error::validation("all weights are zero".to_string()));
    }
    Ok(sum * sum / sumsq)
}
