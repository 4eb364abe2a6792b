//! Covariate balance checking via a classification permutation test and
//! the two-stage feature-selection filter.
//!
//! The permutation test trains the in-repo random forest to predict the
//! arm label from covariates and compares its out-of-bag accuracy against
//! the accuracy distribution under label permutation. Missing covariate
//! cells are median-imputed with a missingness-indicator column appended,
//! so imbalanced missingness patterns are themselves visible to the
//! classifier.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;

use crate::data_model::{CovariateKind, TrialDataset};
use crate::error::{Error, Result};
use crate::forest::{derive_seed, forest_train, FeatureKind, ForestParams};

/// Result of the classification permutation test.
#[derive(Debug, Clone, Serialize)]
pub struct BalanceResult {
    /// Out-of-bag accuracy of the arm classifier on the real labels.
    pub observed_statistic: f64,
    pub permutation_statistics: Vec<f64>,
    /// Add-one p-value: (1 + #{perm ≥ observed}) / (1 + n_permutations).
    pub p_value: f64,
    pub n_permutations: usize,
}

/// Result of the near-zero-variance + correlation filter.
#[derive(Debug, Clone, Serialize)]
pub struct FeatureSelectionResult {
    pub kept: Vec<String>,
    pub dropped_near_zero_variance: Vec<String>,
    /// (dropped column, partner whose correlation triggered the removal).
    pub dropped_high_correlation: Vec<(String, String)>,
}

impl FeatureSelectionResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["covariate", "status", "partner"])?;
        for name in &self.kept {
            wtr.write_record([name, "kept", ""])?;
        }
        for name in &self.dropped_near_zero_variance {
            wtr.write_record([name, "dropped_near_zero_variance", ""])?;
        }
        for (name, partner) in &self.dropped_high_correlation {
            wtr.write_record([name, "dropped_high_correlation", partner])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Covariate matrix for the balance classifier: medians fill missing
/// cells, and each column with any missing value gets a 0/1 indicator
/// column appended.
fn balance_matrix(dataset: &TrialDataset) -> (Vec<Vec<f64>>, Vec<FeatureKind>) {
    let n = dataset.records.len();
    let q = dataset.covariate_names.len();
    let mut matrix: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut kinds = Vec::new();
    for j in 0..q {
        let mut col: Vec<f64> = dataset
            .records
            .iter()
            .map(|r| r.covariates[j])
            .collect();
        let mut present: Vec<f64> = col.iter().copied().filter(|v| !v.is_nan()).collect();
        let has_missing = present.len() < n;
        let median = if present.is_empty() {
            0.0
        } else {
            present.sort_by(|a, b| a.total_cmp(b));
            if present.len() % 2 == 1 {
                present[present.len() / 2]
            } else {
                (present[present.len() / 2 - 1] + present[present.len() / 2]) / 2.0
            }
        };
        for v in col.iter_mut() {
            if v.is_nan() {
                *v = median;
            }
        }
        for (row, v) in matrix.iter_mut().zip(&col) {
            row.push(*v);
        }
        kinds.push(match dataset.covariate_kinds[j] {
            CovariateKind::Numeric => FeatureKind::Numeric,
            CovariateKind::Categorical => FeatureKind::Categorical,
        });
        if has_missing {
            for (row, r) in matrix.iter_mut().zip(&dataset.records) {
                row.push(if r.covariates[j].is_nan() { 1.0 } else { 0.0 });
            }
            kinds.push(FeatureKind::Numeric);
        }
    }
    (matrix, kinds)
}

/// Out-of-bag accuracy of a forest trained to predict 0/1 labels.
/// Rows that were in every bootstrap fall back to the label mean.
fn oob_accuracy(
    matrix: &[Vec<f64>],
    kinds: &[FeatureKind],
    labels: &[f64],
    params: &ForestParams,
    seed: u64,
) -> f64 {
    let forest = forest_train(matrix, kinds, labels, params, seed);
    let preds = forest.oob_predictions(matrix);
    let label_mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let mut correct = 0usize;
    for (pred, label) in preds.iter().zip(labels) {
        let p = pred.unwrap_or(label_mean);
        let class = if p >= 0.5 { 1.0 } else { 0.0 };
        if class == *label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Forest hyperparameters used by the balance check.
#[derive(Debug, Clone)]
pub struct CptOptions {
    pub n_trees: usize,
    pub min_leaf: usize,
}

impl Default for CptOptions {
    fn default() -> Self {
        CptOptions {
            n_trees: 100,
            min_leaf: 5,
        }
    }
}

/// Classification permutation test of covariate balance.
///
/// Deterministic given (dataset, n_permutations, seed); permutation
/// replicates run in parallel with per-replicate derived seeds.
pub fn classification_permutation_test(
    dataset: &TrialDataset,
    n_permutations: usize,
    seed: u64,
    options: &CptOptions,
) -> Result<BalanceResult> {
    if n_permutations < 99 {
        return Err(Error::domain("need at least 99 permutations"));
    }
    if dataset.n_treated() < 2 || dataset.n_control() < 2 {
        return Err(Error::domain("need at least 2 records per arm"));
    }
    let (matrix, kinds) = balance_matrix(dataset);
    let labels: Vec<f64> = dataset.records.iter().map(|r| r.arm as f64).collect();
    let mut params = ForestParams::default_for(kinds.len());
    params.n_trees = options.n_trees.max(1);
    params.min_leaf = options.min_leaf.max(1);
    // Classification-style default: mtry ~ sqrt(q).
    params.mtry = ((kinds.len() as f64).sqrt().ceil() as usize).max(1);

    let observed = oob_accuracy(&matrix, &kinds, &labels, &params, derive_seed(seed, 0));
    let permutation_statistics: Vec<f64> = (1..=n_permutations)
        .into_par_iter()
        .map(|b| {
            let rep_seed = derive_seed(seed, b as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
            let mut permuted = labels.clone();
            permuted.shuffle(&mut rng);
            oob_accuracy(&matrix, &kinds, &permuted, &params, derive_seed(rep_seed, 1))
        })
        .collect();
    let exceed = permutation_statistics
        .iter()
        .filter(|&&s| s >= observed)
        .count();
    Ok(BalanceResult {
        observed_statistic: observed,
        p_value: (1 + exceed) as f64 / (1 + n_permutations) as f64,
        permutation_statistics,
        n_permutations,
    })
}

/// Sample variance over non-missing cells.
fn column_variance(values: &[f64]) -> f64 {
    let present: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if present.len() < 2 {
        return 0.0;
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (present.len() - 1) as f64
}

/// Pearson correlation over pairwise-complete observations. None when
/// fewer than 2 complete pairs exist or a side is constant.
pub fn pairwise_correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| !x.is_nan() && !y.is_nan())
        .map(|(x, y)| (*x, *y))
        .collect();
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Two-stage filter: drop near-zero-variance columns (raw-column variance
/// below the threshold), then greedily break |r| > threshold pairs by
/// removing the member with the larger mean absolute correlation to the
/// other remaining columns. Ties break toward keeping the earlier column.
pub fn select_features(
    dataset: &TrialDataset,
    variance_threshold: f64,
    correlation_threshold: f64,
) -> Result<FeatureSelectionResult> {
    if !(0.0..1.0).contains(&variance_threshold) {
        return Err(Error::domain("variance threshold must be in [0,1)"));
    }
    if !(correlation_threshold > 0.0 && correlation_threshold <= 1.0) {
        return Err(Error::domain("correlation threshold must be in (0,1]"));
    }
    let q = dataset.covariate_names.len();
    let column = |j: usize| -> Vec<f64> {
        dataset.records.iter().map(|r| r.covariates[j]).collect()
    };

    let mut dropped_nzv = Vec::new();
    let mut kept_idx: Vec<usize> = Vec::new();
    for j in 0..q {
        // Categorical columns skip the variance screen; level codes are
        // not on a meaningful scale.
        if dataset.covariate_kinds[j] == CovariateKind::Numeric
            && column_variance(&column(j)) < variance_threshold
        {
            dropped_nzv.push(dataset.covariate_names[j].clone());
        } else {
            kept_idx.push(j);
        }
    }

    let columns: Vec<Vec<f64>> = (0..q).map(column).collect();
    let mut dropped_corr: Vec<(String, String)> = Vec::new();
    loop {
        // Highest-|r| offending pair among the kept numeric columns.
        let mut worst: Option<(f64, usize, usize)> = None;
        for (ai, &a) in kept_idx.iter().enumerate() {
            if dataset.covariate_kinds[a] != CovariateKind::Numeric {
                continue;
            }
            for &b in &kept_idx[ai + 1..] {
                if dataset.covariate_kinds[b] != CovariateKind::Numeric {
                    continue;
                }
                let Some(r) = pairwise_correlation(&columns[a], &columns[b]) else {
                    continue; // pair skipped: fewer than 2 complete rows
                };
                let r = r.abs();
                if r > correlation_threshold
                    && worst.is_none_or(|(w, _, _)| r > w)
                {
                    worst = Some((r, a, b));
                }
            }
        }
        let Some((_, a, b)) = worst else { break };
        let mean_abs = |target: usize| -> f64 {
            let mut sum = 0.0;
            let mut count = 0usize;
            for &other in &kept_idx {
                if other == target
                    || dataset.covariate_kinds[other] != CovariateKind::Numeric
                {
                    continue;
                }
                if let Some(r) = pairwise_correlation(&columns[target], &columns[other]) {
                    sum += r.abs();
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        };
        // Drop the member with the larger mean |r|; on a tie, the later
        // column goes.
        let drop = if mean_abs(a) > mean_abs(b) { a } else { b };
        let partner = if drop == a { b } else { a };
        dropped_corr.push((
            dataset.covariate_names[drop].clone(),
            dataset.covariate_names[partner].clone(),
        ));
        kept_idx.retain(|&j| j != drop);
    }

    Ok(FeatureSelectionResult {
        kept: kept_idx
            .iter()
            .map(|&j| dataset.covariate_names[j].clone())
            .collect(),
        dropped_near_zero_variance: dropped_nzv,
        dropped_high_correlation: dropped_corr,
    })
}
