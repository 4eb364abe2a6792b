//! The three average-treatment-effect estimators: difference-in-means
//! t-test, linear mixed-effects regression with a class random intercept,
//! and the leave-one-out potential-outcomes (LOOP) estimator.
//!
//! Conventions, fixed here and surfaced in the report:
//! - Confidence intervals are estimate ± z·SE at the configured level.
//! - p-values: Student t with classical df for the t-test, normal
//!   approximation for regression and LOOP.
//! - LOOP variance: the plug-in (1/N²)·Σ (Y_i − m̂_i)²/(p_i(1−p_i)),
//!   conservative under heterogeneous effects.
//! - For the distal outcome, the proximal score joins the covariate set.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::data_model::{CovariateKind, StudentRecord, TrialDataset};
use crate::error::{Error, Result};
use crate::forest::derive_seed;
use crate::imputation::{fit_imputer, FeatureKind, ImputerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    TTest,
    Regression,
    Loop,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::TTest => "t-test",
            EstimatorKind::Regression => "reg",
            EstimatorKind::Loop => "loop",
        }
    }
}

/// Which outcome column an estimator targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Proximal,
    Distal,
}

impl Outcome {
    pub fn label(self) -> &'static str {
        match self {
            Outcome::Proximal => "proximal",
            Outcome::Distal => "distal",
        }
    }
}

/// Point estimate with its uncertainty summary.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateResult {
    pub estimator: EstimatorKind,
    pub outcome: Outcome,
    pub estimate: f64,
    pub std_error: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_treated: usize,
    pub n_control: usize,
}

/// Shared estimator options.
#[derive(Debug, Clone, Copy)]
pub struct EstimateOptions {
    /// Two-sided confidence level, e.g. 0.95.
    pub level: f64,
    /// Welch instead of pooled variance for the t-test.
    pub welch: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            level: 0.95,
            welch: false,
        }
    }
}

fn z_quantile(level: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    normal.inverse_cdf(0.5 + level / 2.0)
}

fn normal_p_two_sided(z: f64) -> f64 {
    if !z.is_finite() {
        return f64::MIN_POSITIVE;
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(f64::MIN_POSITIVE, 1.0)
}

fn t_p_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return f64::MIN_POSITIVE;
    }
    if df <= 0.0 {
        return 1.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).unwrap();
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(f64::MIN_POSITIVE, 1.0)
}

/// One analysis row after outcome selection: outcome value, covariate
/// vector (median-imputed, with the proximal score appended for the distal
/// model), and the originating record.
pub struct AnalysisRows<'a> {
    pub records: Vec<&'a StudentRecord>,
    pub y: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub kinds: Vec<FeatureKind>,
    pub names: Vec<String>,
    pub excluded_missing_outcome: usize,
}

/// Selects the outcome, drops records missing it, median-imputes missing
/// covariate cells, and (for the distal outcome) appends the proximal
/// score as an extra covariate.
pub fn analysis_rows<'a>(dataset: &'a TrialDataset, outcome: Outcome) -> Result<AnalysisRows<'a>> {
    let mut records = Vec::new();
    let mut y = Vec::new();
    let mut excluded = 0usize;
    for r in &dataset.records {
        let value = match outcome {
            Outcome::Proximal => {
                if r.proximal_outcome.is_nan() {
                    None
                } else {
                    Some(r.proximal_outcome)
                }
            }
            Outcome::Distal => r.distal_outcome,
        };
        match value {
            Some(v) => {
                records.push(r);
                y.push(v);
            }
            None => excluded += 1,
        }
    }
    if records.is_empty() {
        return Err(Error::domain(format!(
            "no records with a {} outcome",
            outcome.label()
        )));
    }

    let q = dataset.covariate_names.len();
    let mut names = dataset.covariate_names.clone();
    let mut kinds: Vec<FeatureKind> = dataset
        .covariate_kinds
        .iter()
        .map(|k| match k {
            CovariateKind::Numeric => FeatureKind::Numeric,
            CovariateKind::Categorical => FeatureKind::Categorical,
        })
        .collect();

    // Column medians over the included records (for imputation).
    let mut medians = vec![0.0f64; q];
    for j in 0..q {
        let mut col: Vec<f64> = records
            .iter()
            .map(|r| r.covariates[j])
            .filter(|v| !v.is_nan())
            .collect();
        if !col.is_empty() {
            col.sort_by(|a, b| a.total_cmp(b));
            medians[j] = if col.len() % 2 == 1 {
                col[col.len() / 2]
            } else {
                (col[col.len() / 2 - 1] + col[col.len() / 2]) / 2.0
            };
        }
    }

    let mut x: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            (0..q)
                .map(|j| {
                    let v = r.covariates[j];
                    if v.is_nan() {
                        medians[j]
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();

    if outcome == Outcome::Distal {
        names.push("proximal_outcome".to_string());
        kinds.push(FeatureKind::Numeric);
        for (row, r) in x.iter_mut().zip(&records) {
            row.push(r.proximal_outcome);
        }
    }

    Ok(AnalysisRows {
        records,
        y,
        x,
        kinds,
        names,
        excluded_missing_outcome: excluded,
    })
}

/// Difference in arm means with a two-sample t-test (pooled variance by
/// default, Welch behind the option).
pub fn difference_in_means(
    dataset: &TrialDataset,
    outcome: Outcome,
    opts: &EstimateOptions,
) -> Result<EstimateResult> {
    let rows = analysis_rows(dataset, outcome)?;
    let treated: Vec<f64> = rows
        .records
        .iter()
        .zip(&rows.y)
        .filter(|(r, _)| r.arm == 1)
        .map(|(_, y)| *y)
        .collect();
    let control: Vec<f64> = rows
        .records
        .iter()
        .zip(&rows.y)
        .filter(|(r, _)| r.arm == 0)
        .map(|(_, y)| *y)
        .collect();
    if treated.is_empty() || control.is_empty() {
        return Err(Error::domain(format!(
            "an arm is empty after excluding records without a {} outcome",
            outcome.label()
        )));
    }
    let (n1, n0) = (treated.len() as f64, control.len() as f64);
    let mean1 = treated.iter().sum::<f64>() / n1;
    let mean0 = control.iter().sum::<f64>() / n0;
    let estimate = mean1 - mean0;
    let var1 = treated.iter().map(|v| (v - mean1).powi(2)).sum::<f64>() / (n1 - 1.0).max(1.0);
    let var0 = control.iter().map(|v| (v - mean0).powi(2)).sum::<f64>() / (n0 - 1.0).max(1.0);

    let (se, df) = if opts.welch {
        let se2 = var1 / n1 + var0 / n0;
        let df = se2 * se2
            / ((var1 / n1).powi(2) / (n1 - 1.0) + (var0 / n0).powi(2) / (n0 - 1.0));
        (se2.sqrt(), df)
    } else {
        let pooled = ((n1 - 1.0) * var1 + (n0 - 1.0) * var0) / (n1 + n0 - 2.0);
        ((pooled * (1.0 / n1 + 1.0 / n0)).sqrt(), n1 + n0 - 2.0)
    };

    let p_value = if se == 0.0 {
        if estimate == 0.0 {
            1.0
        } else {
            f64::MIN_POSITIVE
        }
    } else {
        t_p_two_sided(estimate / se, df)
    };
    let z = z_quantile(opts.level);
    Ok(EstimateResult {
        estimator: EstimatorKind::TTest,
        outcome,
        estimate,
        std_error: se,
        p_value,
        ci_low: estimate - z * se,
        ci_high: estimate + z * se,
        n_treated: treated.len(),
        n_control: control.len(),
    })
}

/// Fitted mixed model: Y_ij = τT_ij + X_ij'β + u_j + ε_ij with a class
/// random intercept, estimated by REML with the variance ratio
/// λ = σ_u²/σ² profiled out and optimized by one-dimensional search.
#[derive(Debug, Clone, Serialize)]
pub struct MixedModelFit {
    /// Design column names, starting with "(intercept)" and "treatment".
    pub fixed_effect_names: Vec<String>,
    pub fixed_effects: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub sigma_u2: f64,
    pub sigma2: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    /// Columns removed to restore full rank (with the reason).
    pub dropped_columns: Vec<String>,
    pub n_clusters: usize,
    pub n_obs: usize,
}

struct RemlProfile {
    criterion: f64,
    beta: DVector<f64>,
    cov_unscaled: DMatrix<f64>,
    sigma2: f64,
    log_lik: f64,
}

/// Per-cluster sufficient statistics for the random-intercept model.
struct ClusterStats {
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    xt1: DVector<f64>,
    yt1: f64,
    n: usize,
}

fn profile_reml(clusters: &[ClusterStats], n: usize, p: usize, lambda: f64) -> Option<RemlProfile> {
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    let mut yy = 0.0;
    let mut log_det_v = 0.0;
    for c in clusters {
        let w = lambda / (1.0 + lambda * c.n as f64);
        a += &c.xtx - (&c.xt1 * c.xt1.transpose()) * w;
        b += &c.xty - &c.xt1 * (c.yt1 * w);
        yy += c.yty - w * c.yt1 * c.yt1;
        log_det_v += (1.0 + lambda * c.n as f64).ln();
    }
    let chol = Cholesky::new(a.clone())?;
    let beta = chol.solve(&b);
    let rss = (yy - b.dot(&beta)).max(1e-12);
    let log_det_a: f64 = chol
        .l()
        .diagonal()
        .iter()
        .map(|d| 2.0 * d.ln())
        .sum();
    let np = (n - p) as f64;
    let sigma2 = rss / np;
    let criterion = np * rss.ln() + log_det_v + log_det_a;
    let log_lik = -0.5
        * (np * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0) + log_det_v + log_det_a);
    Some(RemlProfile {
        criterion,
        beta,
        cov_unscaled: chol.inverse(),
        sigma2,
        log_lik,
    })
}

/// Fits the random-intercept model by REML. Covariates are taken by name
/// from the dataset (categorical columns are excluded from the linear
/// design and reported in `dropped_columns`); collinear columns are
/// dropped greedily.
pub fn fit_mixed_model(
    dataset: &TrialDataset,
    outcome: Outcome,
    covariates: &[String],
) -> Result<MixedModelFit> {
    let rows = analysis_rows(dataset, outcome)?;
    let n = rows.records.len();

    // Cluster index per record, sorted by cluster id for determinism.
    let mut cluster_ids: Vec<&str> = rows.records.iter().map(|r| r.cluster_id.as_str()).collect();
    cluster_ids.sort_unstable();
    cluster_ids.dedup();
    if cluster_ids.len() < 2 {
        return Err(Error::domain(
            "mixed model requires at least 2 clusters",
        ));
    }

    // Assemble candidate design columns: intercept, treatment, covariates.
    let mut names = vec!["(intercept)".to_string(), "treatment".to_string()];
    let mut columns: Vec<Vec<f64>> = vec![
        vec![1.0; n],
        rows.records.iter().map(|r| r.arm as f64).collect(),
    ];
    let mut dropped = Vec::new();
    for want in covariates {
        let Some(j) = rows.names.iter().position(|n| n == want) else {
            dropped.push(format!("{want} (not in dataset)"));
            continue;
        };
        if rows.kinds[j] == FeatureKind::Categorical {
            dropped.push(format!("{want} (categorical, excluded from linear design)"));
            continue;
        }
        names.push(want.clone());
        columns.push(rows.x.iter().map(|r| r[j]).collect());
    }

    // Greedy full-rank subset: keep a column only if its residual after
    // projecting on the kept columns is non-negligible.
    let mut kept_names = Vec::new();
    let mut kept: Vec<DVector<f64>> = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for (name, col) in names.iter().zip(columns.iter()) {
        let v = DVector::from_column_slice(col);
        let mut resid = v.clone();
        for b in &basis {
            let coef = b.dot(&resid);
            resid -= b * coef;
        }
        let scale = v.norm().max(1.0);
        if resid.norm() / scale < 1e-8 {
            if name != "(intercept)" && name != "treatment" {
                dropped.push(format!("{name} (collinear)"));
                continue;
            }
            if name == "treatment" {
                return Err(Error::domain(
                    "treatment indicator is collinear with the design",
                ));
            }
        }
        basis.push(resid.clone() / resid.norm());
        kept_names.push(name.clone());
        kept.push(v);
    }
    let p = kept.len();
    if n <= p + 1 {
        return Err(Error::domain(format!(
            "mixed model needs more observations ({n}) than design columns ({p})"
        )));
    }

    // Per-cluster sufficient statistics.
    let mut clusters: Vec<ClusterStats> = cluster_ids
        .iter()
        .map(|_| ClusterStats {
            xtx: DMatrix::zeros(p, p),
            xty: DVector::zeros(p),
            yty: 0.0,
            xt1: DVector::zeros(p),
            yt1: 0.0,
            n: 0,
        })
        .collect();
    for (i, r) in rows.records.iter().enumerate() {
        let j = cluster_ids.binary_search(&r.cluster_id.as_str()).unwrap();
        let xi = DVector::from_iterator(p, kept.iter().map(|c| c[i]));
        let c = &mut clusters[j];
        c.xtx += &xi * xi.transpose();
        c.xty += &xi * rows.y[i];
        c.yty += rows.y[i] * rows.y[i];
        c.xt1 += &xi;
        c.yt1 += rows.y[i];
        c.n += 1;
    }

    // Optimize λ: compare λ = 0 with a golden-section search over
    // log10 λ ∈ [-8, 8].
    let eval = |lambda: f64| profile_reml(&clusters, n, p, lambda);
    let mut converged = true;
    let mut best_lambda = 0.0;
    let mut best = eval(0.0);
    let (mut lo, mut hi) = (-8.0f64, 8.0f64);
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut x1, mut x2) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
    let (mut f1, mut f2) = (
        eval(10f64.powf(x1)).map(|r| r.criterion),
        eval(10f64.powf(x2)).map(|r| r.criterion),
    );
    for _ in 0..80 {
        match (f1, f2) {
            (Some(a), Some(b)) => {
                if a < b {
                    hi = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = hi - phi * (hi - lo);
                    f1 = eval(10f64.powf(x1)).map(|r| r.criterion);
                } else {
                    lo = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = lo + phi * (hi - lo);
                    f2 = eval(10f64.powf(x2)).map(|r| r.criterion);
                }
            }
            _ => {
                converged = false;
                break;
            }
        }
    }
    let lambda_star = 10f64.powf((lo + hi) / 2.0);
    if let Some(candidate) = eval(lambda_star) {
        let better = match &best {
            Some(b) => candidate.criterion < b.criterion,
            None => true,
        };
        if better {
            best = Some(candidate);
            best_lambda = lambda_star;
        }
    }
    let Some(profile) = best else {
        return Err(Error::domain(
            "REML profile could not be evaluated (singular design)",
        ));
    };
    if !profile.criterion.is_finite() {
        converged = false;
    }

    let sigma2 = profile.sigma2;
    let sigma_u2 = best_lambda * sigma2;
    let cov = &profile.cov_unscaled * sigma2;
    let std_errors: Vec<f64> = (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();

    Ok(MixedModelFit {
        fixed_effect_names: kept_names,
        fixed_effects: profile.beta.iter().copied().collect(),
        std_errors,
        sigma_u2,
        sigma2,
        log_likelihood: profile.log_lik,
        converged,
        dropped_columns: dropped,
        n_clusters: cluster_ids.len(),
        n_obs: n,
    })
}

/// Wraps [`fit_mixed_model`], reporting the treatment coefficient as an
/// [`EstimateResult`] with a normal-approximation p-value.
pub fn regression_estimate(
    dataset: &TrialDataset,
    outcome: Outcome,
    covariates: &[String],
    opts: &EstimateOptions,
) -> Result<EstimateResult> {
    let fit = fit_mixed_model(dataset, outcome, covariates)?;
    let idx = fit
        .fixed_effect_names
        .iter()
        .position(|n| n == "treatment")
        .ok_or_else(|| Error::domain("treatment column missing from the fit"))?;
    let estimate = fit.fixed_effects[idx];
    let se = fit.std_errors[idx];
    let p_value = if se == 0.0 {
        if estimate == 0.0 {
            1.0
        } else {
            f64::MIN_POSITIVE
        }
    } else {
        normal_p_two_sided(estimate / se)
    };
    let z = z_quantile(opts.level);
    let rows = analysis_rows(dataset, outcome)?;
    let n_treated = rows.records.iter().filter(|r| r.arm == 1).count();
    Ok(EstimateResult {
        estimator: EstimatorKind::Regression,
        outcome,
        estimate,
        std_error: se,
        p_value,
        ci_low: estimate - z * se,
        ci_high: estimate + z * se,
        n_treated,
        n_control: rows.records.len() - n_treated,
    })
}

/// Per-unit leave-one-out imputation: both potential outcomes are imputed
/// even when one is observed, so the blend stays independent of the unit's
/// own assignment.
#[derive(Debug, Clone)]
pub struct LoopImputation {
    pub t_hat: f64,
    pub c_hat: f64,
    /// m̂_i = (1−p_i)·t̂_i + p_i·ĉ_i.
    pub m_hat: f64,
    /// τ̂_i = (Y_i − m̂_i)·U_i.
    pub tau_hat: f64,
}

/// Runs the leave-one-out imputations. For each unit the imputer trains on
/// the other N−1 units with a seed derived from (seed, i), so results are
/// independent of thread count and of the held-out unit's own data.
pub fn loop_imputations(
    dataset: &TrialDataset,
    outcome: Outcome,
    imputer: &ImputerSpec,
    seed: u64,
) -> Result<Vec<LoopImputation>> {
    let rows = analysis_rows(dataset, outcome)?;
    let n = rows.records.len();
    if n < 3 {
        return Err(Error::domain("LOOP requires at least 3 records"));
    }
    for r in &rows.records {
        if !(r.assigned_prob > 0.0 && r.assigned_prob < 1.0) {
            return Err(Error::domain(format!(
                "assigned_prob {} outside (0,1) for student {}",
                r.assigned_prob, r.student_id
            )));
        }
    }
    let treated: Vec<bool> = rows.records.iter().map(|r| r.arm == 1).collect();
    if !treated.contains(&true) || !treated.contains(&false) {
        return Err(Error::domain("LOOP requires both arms nonempty"));
    }

    let out: Vec<LoopImputation> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut train_x = Vec::with_capacity(n - 1);
            let mut train_y = Vec::with_capacity(n - 1);
            let mut train_t = Vec::with_capacity(n - 1);
            for j in 0..n {
                if j != i {
                    train_x.push(rows.x[j].clone());
                    train_y.push(rows.y[j]);
                    train_t.push(treated[j]);
                }
            }
            let fit = fit_imputer(
                imputer,
                &train_x,
                &rows.kinds,
                &train_y,
                &train_t,
                derive_seed(seed, i as u64),
            );
            let t_hat = fit.predict_t(&rows.x[i]);
            let c_hat = fit.predict_c(&rows.x[i]);
            let p = rows.records[i].assigned_prob;
            let m_hat = (1.0 - p) * t_hat + p * c_hat;
            let u = if treated[i] { 1.0 / p } else { -1.0 / (1.0 - p) };
            let tau_hat = (rows.y[i] - m_hat) * u;
            LoopImputation {
                t_hat,
                c_hat,
                m_hat,
                tau_hat,
            }
        })
        .collect();
    Ok(out)
}

/// LOOP estimate: mean of the per-unit τ̂_i, with the plug-in variance and
/// a normal-approximation interval.
pub fn loop_estimate(
    dataset: &TrialDataset,
    outcome: Outcome,
    imputer: &ImputerSpec,
    seed: u64,
    opts: &EstimateOptions,
) -> Result<EstimateResult> {
    let imputations = loop_imputations(dataset, outcome, imputer, seed)?;
    let rows = analysis_rows(dataset, outcome)?;
    let n = imputations.len();
    let estimate = imputations.iter().map(|l| l.tau_hat).sum::<f64>() / n as f64;
    let var = imputations
        .iter()
        .zip(&rows.records)
        .zip(&rows.y)
        .map(|((l, r), y)| {
            let p = r.assigned_prob;
            (y - l.m_hat).powi(2) / (p * (1.0 - p))
        })
        .sum::<f64>()
        / (n as f64 * n as f64);
    let se = var.sqrt();
    let p_value = if se == 0.0 {
        if estimate == 0.0 {
            1.0
        } else {
            f64::MIN_POSITIVE
        }
    } else {
        normal_p_two_sided(estimate / se)
    };
    let z = z_quantile(opts.level);
    let n_treated = rows.records.iter().filter(|r| r.arm == 1).count();
    Ok(EstimateResult {
        estimator: EstimatorKind::Loop,
        outcome,
        estimate,
        std_error: se,
        p_value,
        ci_low: estimate - z * se,
        ci_high: estimate + z * se,
        n_treated,
        n_control: rows.records.len() - n_treated,
    })
}
