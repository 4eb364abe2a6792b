//! Pluggable potential-outcome imputers: leave-one-out mean, linear least
//! squares, and the in-repo regression forest.
//!
//! An imputer is trained on a set of records (the N-1 remaining units
//! inside the leave-one-out loop, or the full arm inside the balance
//! check) and exposes `predict_t` / `predict_c`. When an arm is absent or
//! has fewer than two rows, that arm's predictor falls back to the overall
//! training mean; the fallback is recorded on the fitted model.

use nalgebra::{DMatrix, DVector};

use crate::forest::{forest_train, Forest, ForestParams};
pub use crate::forest::FeatureKind;

/// Which family of predictor to train for each potential outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImputerKind {
    Mean,
    Linear,
    Forest,
}

impl ImputerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(ImputerKind::Mean),
            "linear" => Some(ImputerKind::Linear),
            "forest" => Some(ImputerKind::Forest),
            _ => None,
        }
    }
}

/// Imputer configuration. Forest parameters are ignored by the mean and
/// linear kinds. `mtry = None` means the regression default ceil(q/3).
#[derive(Debug, Clone)]
pub struct ImputerSpec {
    pub kind: ImputerKind,
    pub n_trees: usize,
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
}

impl ImputerSpec {
    pub fn new(kind: ImputerKind) -> Self {
        ImputerSpec {
            kind,
            n_trees: 100,
            mtry: None,
            min_leaf: 5,
            max_depth: None,
        }
    }

    pub fn forest_params(&self, n_features: usize) -> ForestParams {
        let mut p = ForestParams::default_for(n_features.max(1));
        p.n_trees = self.n_trees.max(1);
        if let Some(m) = self.mtry {
            p.mtry = m.clamp(1, n_features.max(1));
        }
        p.min_leaf = self.min_leaf.max(1);
        p.max_depth = self.max_depth;
        p
    }
}

#[derive(Debug, Clone)]
enum Model {
    Constant(f64),
    /// Coefficients [intercept, b_1, ..., b_q].
    Linear(Vec<f64>),
    Forest(Forest),
}

impl Model {
    fn predict(&self, row: &[f64]) -> f64 {
        match self {
            Model::Constant(c) => *c,
            Model::Linear(coef) => {
                let mut y = coef[0];
                for (b, x) in coef[1..].iter().zip(row) {
                    y += b * x;
                }
                y
            }
            Model::Forest(f) => f.predict(row),
        }
    }
}

/// A trained pair of potential-outcome predictors. Prediction is a pure
/// function of the fitted state and the covariate row.
#[derive(Debug, Clone)]
pub struct FittedImputer {
    t_model: Model,
    c_model: Model,
    /// True when the corresponding arm fell back to the overall mean.
    pub fallback_t: bool,
    pub fallback_c: bool,
}

impl FittedImputer {
    pub fn predict_t(&self, row: &[f64]) -> f64 {
        self.t_model.predict(row)
    }

    pub fn predict_c(&self, row: &[f64]) -> f64 {
        self.c_model.predict(row)
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Least squares with intercept via SVD (minimum-norm under rank
/// deficiency, so duplicated columns are harmless).
fn fit_linear(rows: &[&[f64]], y: &[f64]) -> Vec<f64> {
    let n = rows.len();
    let q = rows[0].len();
    let mut design = DMatrix::zeros(n, q + 1);
    for (i, row) in rows.iter().enumerate() {
        design[(i, 0)] = 1.0;
        for (j, v) in row.iter().enumerate() {
            design[(i, j + 1)] = *v;
        }
    }
    let rhs = DVector::from_column_slice(y);
    let svd = design.svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-10)
        .unwrap_or_else(|_| DVector::zeros(q + 1));
    sol.iter().copied().collect()
}

/// Trains one predictor per arm on the supplied training units, which must
/// exclude the held-out unit when used inside the leave-one-out loop. The
/// held-out unit is simply never passed in, which is what keeps its
/// imputation independent of its own assignment and outcome.
pub fn fit_imputer(
    spec: &ImputerSpec,
    rows: &[Vec<f64>],
    kinds: &[FeatureKind],
    outcomes: &[f64],
    treated: &[bool],
    seed: u64,
) -> FittedImputer {
    assert!(!rows.is_empty(), "imputer requires a nonempty training set");
    assert_eq!(rows.len(), outcomes.len());
    assert_eq!(rows.len(), treated.len());

    let overall = mean(outcomes);
    let fit_arm = |want_treated: bool, arm_seed: u64| -> (Model, bool) {
        let idx: Vec<usize> = (0..rows.len())
            .filter(|&i| treated[i] == want_treated)
            .collect();
        let arm_y: Vec<f64> = idx.iter().map(|&i| outcomes[i]).collect();
        match spec.kind {
            ImputerKind::Mean => {
                if arm_y.is_empty() {
                    (Model::Constant(overall), true)
                } else {
                    (Model::Constant(mean(&arm_y)), false)
                }
            }
            ImputerKind::Linear => {
                if arm_y.len() < 2 {
                    (Model::Constant(overall), true)
                } else {
                    let arm_rows: Vec<&[f64]> =
                        idx.iter().map(|&i| rows[i].as_slice()).collect();
                    (Model::Linear(fit_linear(&arm_rows, &arm_y)), false)
                }
            }
            ImputerKind::Forest => {
                if arm_y.len() < 2 {
                    (Model::Constant(overall), true)
                } else {
                    let arm_rows: Vec<Vec<f64>> =
                        idx.iter().map(|&i| rows[i].clone()).collect();
                    let params = spec.forest_params(kinds.len());
                    (
                        Model::Forest(forest_train(&arm_rows, kinds, &arm_y, &params, arm_seed)),
                        false,
                    )
                }
            }
        }
    };

    let (t_model, fallback_t) = fit_arm(true, crate::forest::derive_seed(seed, 1));
    let (c_model, fallback_c) = fit_arm(false, crate::forest::derive_seed(seed, 2));
    FittedImputer {
        t_model,
        c_model,
        fallback_t,
        fallback_c,
    }
}
