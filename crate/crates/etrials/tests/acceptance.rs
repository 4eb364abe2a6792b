//! Acceptance suite: one test per contract criterion, each printing a
//! single `criterion N: PASS/FAIL` line (visible with `--nocapture`).
//!
//! The statistical criteria use simulated trials with known ground truth;
//! the exact criteria use hand-built fixtures. Tolerances are pinned in
//! the constants next to each test.

use std::process::Command;
use std::sync::OnceLock;

use etrials::cleaning::{
    attrition_rate, drop_best_so_far, restrict_to_help_requesters, summarize_conditions,
    AttritionOutcome,
};
use etrials::covariates::{classification_permutation_test, CptOptions};
use etrials::data_model::{
    ContinuousScore, CovariateKind, ProblemLogRow, Provenance, StudentRecord, TrialDataset,
};
use etrials::estimators::{
    difference_in_means, fit_mixed_model, loop_estimate, loop_imputations, regression_estimate,
    EstimateOptions, Outcome,
};
use etrials::imputation::{ImputerKind, ImputerSpec};
use etrials::simulation::{generate, rerandomize, OutcomeKind, SimConfig, SyntheticTrial};

const OPTS: EstimateOptions = EstimateOptions {
    level: 0.95,
    welch: false,
};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn verdict(criterion: &str, ok: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
}

/// Generates a trial whose arms both have at least `min_arm` units,
/// bumping the seed until the Bernoulli draw cooperates.
fn generate_with_arms(config: &SimConfig, seed: u64, min_arm: usize) -> SyntheticTrial {
    let mut s = seed;
    loop {
        let trial = generate(config, s).unwrap();
        if trial.dataset.n_treated() >= min_arm && trial.dataset.n_control() >= min_arm {
            return trial;
        }
        s = s.wrapping_add(0x9e37_79b9);
    }
}

// ---------------------------------------------------------------------
// Criterion 1: LOOP with the mean imputer reproduces the t-test estimate.
// ---------------------------------------------------------------------
#[test]
fn criterion_1_loop_mean_imputer_equals_t_test() {
    const TOL: f64 = 1e-12;
    let mut worst: f64 = 0.0;
    for k in 0..50u64 {
        let n = 10 + (k as usize * 577) % 191; // spread over [10, 200]
        let config = SimConfig {
            n,
            q: 3,
            outcome: OutcomeKind::Linear,
            tau: 0.4,
            ..SimConfig::default()
        };
        let trial = generate_with_arms(&config, 1000 + k, 2);
        let spec = ImputerSpec::new(ImputerKind::Mean);
        let loop_est = loop_estimate(&trial.dataset, Outcome::Proximal, &spec, k, &OPTS).unwrap();
        let ttest = difference_in_means(&trial.dataset, Outcome::Proximal, &OPTS).unwrap();
        worst = worst.max((loop_est.estimate - ttest.estimate).abs());
    }
    let ok = worst <= TOL;
    verdict("1", ok, &format!("max |Δ| = {worst:.2e} over 50 fixtures (tol {TOL:.0e})"));
    assert!(ok);
}

// ---------------------------------------------------------------------
// Criteria 2 and 3 share one Monte Carlo run: 500 rerandomizations of a
// fixed nonlinear-outcome trial with strongly predictive covariates.
// ---------------------------------------------------------------------
const MC_REPS: usize = 500;
const MC_N: usize = 200;
const MC_TAU: f64 = 0.3;

fn forest_spec() -> ImputerSpec {
    let mut spec = ImputerSpec::new(ImputerKind::Forest);
    spec.n_trees = 20;
    spec.min_leaf = 10;
    spec
}

struct McEstimates {
    loop_hat: Vec<f64>,
    ttest_hat: Vec<f64>,
}

fn rerandomization_run(base: &SyntheticTrial, seed_base: u64) -> McEstimates {
    let spec = forest_spec();
    let mut loop_hat = Vec::with_capacity(MC_REPS);
    let mut ttest_hat = Vec::with_capacity(MC_REPS);
    let mut r = 0u64;
    while loop_hat.len() < MC_REPS {
        let trial = rerandomize(base, seed_base + r);
        r += 1;
        if trial.dataset.n_treated() < 2 || trial.dataset.n_control() < 2 {
            continue;
        }
        let le = loop_estimate(&trial.dataset, Outcome::Proximal, &spec, seed_base + r, &OPTS)
            .unwrap();
        let tt = difference_in_means(&trial.dataset, Outcome::Proximal, &OPTS).unwrap();
        loop_hat.push(le.estimate);
        ttest_hat.push(tt.estimate);
    }
    McEstimates {
        loop_hat,
        ttest_hat,
    }
}

fn predictive_run() -> &'static McEstimates {
    static RUN: OnceLock<McEstimates> = OnceLock::new();
    RUN.get_or_init(|| {
        let base = generate(
            &SimConfig {
                n: MC_N,
                q: 4,
                tau: MC_TAU,
                outcome: OutcomeKind::Nonlinear,
                noise_sd: 0.5,
                ..SimConfig::default()
            },
            42,
        )
        .unwrap();
        rerandomization_run(&base, 10_000)
    })
}

#[test]
fn criterion_2_loop_and_t_test_are_unbiased() {
    let run = predictive_run();
    let loop_mean = mean(&run.loop_hat);
    let ttest_mean = mean(&run.ttest_hat);
    let loop_bound = 3.0 * sample_sd(&run.loop_hat) / (MC_REPS as f64).sqrt();
    let ttest_bound = 3.0 * sample_sd(&run.ttest_hat) / (MC_REPS as f64).sqrt();
    let ok = (loop_mean - MC_TAU).abs() <= loop_bound && (ttest_mean - MC_TAU).abs() <= ttest_bound;
    verdict(
        "2",
        ok,
        &format!(
            "mean τ̂: LOOP {loop_mean:.4} (±{loop_bound:.4}), t-test {ttest_mean:.4} \
             (±{ttest_bound:.4}), truth {MC_TAU}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_3_variance_reduction_without_degradation() {
    let run = predictive_run();
    let predictive_ratio = sample_sd(&run.loop_hat) / sample_sd(&run.ttest_hat);

    // Same design but the covariates carry no signal at all.
    let base = generate(
        &SimConfig {
            n: MC_N,
            q: 4,
            tau: MC_TAU,
            outcome: OutcomeKind::Constant,
            noise_sd: 1.0,
            ..SimConfig::default()
        },
        43,
    )
    .unwrap();
    let noise = rerandomization_run(&base, 20_000);
    let noise_ratio = sample_sd(&noise.loop_hat) / sample_sd(&noise.ttest_hat);

    let ok = predictive_ratio <= 0.8 && noise_ratio <= 1.1;
    verdict(
        "3",
        ok,
        &format!(
            "SD(LOOP)/SD(t-test): predictive covariates {predictive_ratio:.3} (≤ 0.8), \
             pure-noise covariates {noise_ratio:.3} (≤ 1.1)"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------
// Criterion 4: nominal 95% CIs from all three estimators actually cover.
// ---------------------------------------------------------------------
#[test]
fn criterion_4_confidence_interval_coverage() {
    const REPS: usize = 500;
    const TAU: f64 = 0.3;
    let config = SimConfig {
        n: 100,
        q: 3,
        n_clusters: 10,
        cluster_sd: 0.3,
        tau: TAU,
        outcome: OutcomeKind::Linear,
        noise_sd: 1.0,
        ..SimConfig::default()
    };
    let spec = ImputerSpec::new(ImputerKind::Linear);
    let mut covered = [0usize; 3];
    for rep in 0..REPS as u64 {
        let trial = generate_with_arms(&config, 40_000 + rep, 3);
        let names = trial.dataset.covariate_names.clone();
        let results = [
            difference_in_means(&trial.dataset, Outcome::Proximal, &OPTS).unwrap(),
            regression_estimate(&trial.dataset, Outcome::Proximal, &names, &OPTS).unwrap(),
            loop_estimate(&trial.dataset, Outcome::Proximal, &spec, rep, &OPTS).unwrap(),
        ];
        for (slot, r) in covered.iter_mut().zip(&results) {
            if r.ci_low <= TAU && TAU <= r.ci_high {
                *slot += 1;
            }
        }
    }
    let rates: Vec<f64> = covered.iter().map(|&c| c as f64 / REPS as f64).collect();
    let ok = rates.iter().all(|&r| (0.93..=0.98).contains(&r));
    verdict(
        "4",
        ok,
        &format!(
            "coverage over {REPS} replicates: t-test {:.3}, reg {:.3}, LOOP {:.3} (target 0.93–0.98)",
            rates[0], rates[1], rates[2]
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------
// Criterion 5: mixed-model correctness against the OLS closed form and a
// known-variance-components design.
// ---------------------------------------------------------------------
#[test]
fn criterion_5_mixed_model_matches_oracles() {
    // Part 1: zero cluster variance. Pick a seeded dataset on which REML
    // lands at σ̂_u² = 0, where the fit must equal plain OLS.
    let config = SimConfig {
        n: 150,
        q: 2,
        n_clusters: 6,
        cluster_sd: 0.0,
        tau: 0.4,
        outcome: OutcomeKind::Linear,
        noise_sd: 1.0,
        ..SimConfig::default()
    };
    let mut ols_gap = f64::NAN;
    for seed in 0..50u64 {
        let trial = generate_with_arms(&config, 60_000 + seed, 3);
        let names = trial.dataset.covariate_names.clone();
        let fit = fit_mixed_model(&trial.dataset, Outcome::Proximal, &names).unwrap();
        if fit.sigma_u2 > 0.0 {
            continue;
        }
        // OLS closed form on the same design: intercept, treatment, covariates.
        let n = trial.dataset.records.len();
        let p = 2 + names.len();
        let mut x = nalgebra::DMatrix::zeros(n, p);
        let mut y = nalgebra::DVector::zeros(n);
        for (i, r) in trial.dataset.records.iter().enumerate() {
            x[(i, 0)] = 1.0;
            x[(i, 1)] = r.arm as f64;
            for (j, v) in r.covariates.iter().enumerate() {
                x[(i, 2 + j)] = *v;
            }
            y[i] = r.proximal_outcome;
        }
        let beta = (x.transpose() * &x)
            .try_inverse()
            .unwrap()
            * x.transpose()
            * y;
        let tau_idx = fit
            .fixed_effect_names
            .iter()
            .position(|n| n == "treatment")
            .unwrap();
        ols_gap = (fit.fixed_effects[tau_idx] - beta[1]).abs();
        break;
    }
    let part1 = ols_gap <= 1e-6;

    // Part 2: 40 clusters × 25 units, σ_u² = 0.5, σ² = 1.
    const REPS: usize = 200;
    const TAU: f64 = 0.4;
    let config = SimConfig {
        n: 1000,
        q: 2,
        n_clusters: 40,
        cluster_sd: 0.5f64.sqrt(),
        tau: TAU,
        outcome: OutcomeKind::Linear,
        noise_sd: 1.0,
        ..SimConfig::default()
    };
    let mut tau_hats = Vec::with_capacity(REPS);
    let mut sigma_u2_hats = Vec::with_capacity(REPS);
    for rep in 0..REPS as u64 {
        let trial = generate_with_arms(&config, 70_000 + rep, 3);
        let names = trial.dataset.covariate_names.clone();
        let fit = fit_mixed_model(&trial.dataset, Outcome::Proximal, &names).unwrap();
        let tau_idx = fit
            .fixed_effect_names
            .iter()
            .position(|n| n == "treatment")
            .unwrap();
        tau_hats.push(fit.fixed_effects[tau_idx]);
        sigma_u2_hats.push(fit.sigma_u2);
    }
    let tau_gap = (mean(&tau_hats) - TAU).abs();
    let var_gap = (mean(&sigma_u2_hats) - 0.5).abs();
    let part2 = tau_gap <= 0.02 && var_gap <= 0.1;

    let ok = part1 && part2;
    verdict(
        "5",
        ok,
        &format!(
            "OLS gap {ols_gap:.2e} (≤ 1e-6); mean τ̂ off by {tau_gap:.4} (≤ 0.02), \
             mean σ̂_u² off by {var_gap:.4} (≤ 0.1)"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------
// Criterion 6: permutation-test calibration under the null, exact add-one
// p-value under a perfect leak.
// ---------------------------------------------------------------------
#[test]
fn criterion_6_permutation_test_calibration() {
    const RUNS: usize = 200;
    const B: usize = 99;
    let cpt = CptOptions {
        n_trees: 50,
        min_leaf: 5,
    };
    let config = SimConfig {
        n: 60,
        q: 4,
        outcome: OutcomeKind::Constant,
        ..SimConfig::default()
    };
    let mut p_values = Vec::with_capacity(RUNS);
    for run in 0..RUNS as u64 {
        let trial = generate_with_arms(&config, 80_000 + run, 2);
        let result = classification_permutation_test(&trial.dataset, B, run, &cpt).unwrap();
        p_values.push(result.p_value);
    }
    // Kolmogorov–Smirnov distance against Uniform(0,1), α = 0.01.
    p_values.sort_by(f64::total_cmp);
    let n = p_values.len() as f64;
    let mut d: f64 = 0.0;
    for (i, p) in p_values.iter().enumerate() {
        d = d.max((p - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - p).abs());
    }
    let ks_critical = 1.628 / n.sqrt();
    let uniform_ok = d <= ks_critical;

    // Perfect leak: one covariate equals the arm label.
    let trial = generate_with_arms(&config, 99_000, 2);
    let mut records = trial.dataset.records.clone();
    for r in &mut records {
        r.covariates.push(r.arm as f64);
    }
    let mut names = trial.dataset.covariate_names.clone();
    names.push("leak".into());
    let mut kinds = trial.dataset.covariate_kinds.clone();
    kinds.push(CovariateKind::Numeric);
    let leaky = TrialDataset::new(records, names, kinds, Provenance::default()).unwrap();
    let result = classification_permutation_test(&leaky, B, 7, &cpt).unwrap();
    let leak_ok = result.p_value == 1.0 / (B as f64 + 1.0);

    let ok = uniform_ok && leak_ok;
    verdict(
        "6",
        ok,
        &format!(
            "KS distance {d:.4} (critical {ks_critical:.4}); leak p-value {} (expected {})",
            result.p_value,
            1.0 / (B as f64 + 1.0)
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------
// Criterion 7: cleaning pipeline exactness on a hand-planted fixture.
// ---------------------------------------------------------------------
fn planted_problem_rows() -> Vec<ProblemLogRow> {
    // 691 students across 3 arms: 91 in the dropped arm (code 2), then 300
    // per remaining arm of which 200 never request a hint. Every retained
    // arm ends up with 100 students × 4 problems, half scored 1, half 0.
    let mut rows = Vec::new();
    let mut push = |student: String, arm: i64, hints: u64| {
        for k in 0..4u64 {
            let score = if k < 2 {
                ContinuousScore::Full
            } else {
                ContinuousScore::Zero
            };
            rows.push(ProblemLogRow {
                student_id: student.clone(),
                assignment_id: "a1".into(),
                problem_id: format!("p{k}"),
                parent_problem_id: None,
                condition: arm,
                // Hints only on a zero-scored problem, so the score cap holds.
                hint_count: if hints > 0 && k == 2 { hints } else { 0 },
                attempt_count: 1,
                time_on_task: 30.0,
                discrete_score: if k < 2 { 1 } else { 0 },
                continuous_score: score,
            });
        }
    };
    let mut id = 0usize;
    for _ in 0..91 {
        push(format!("s{id:04}"), 2, 1);
        id += 1;
    }
    for arm in [0i64, 1] {
        for j in 0..300usize {
            push(format!("s{id:04}"), arm, if j < 100 { 1 } else { 0 });
            id += 1;
        }
    }
    rows
}

#[test]
fn criterion_7_cleaning_pipeline_exactness() {
    let rows = planted_problem_rows();
    let students: std::collections::BTreeSet<&str> =
        rows.iter().map(|r| r.student_id.as_str()).collect();
    assert_eq!(students.len(), 691);

    let mut prov = Provenance::default();
    let rows = drop_best_so_far(rows, 2, &mut prov);
    let rows = restrict_to_help_requesters(rows, None, &mut prov);
    let counts_ok = prov.counts["problem_rows_removed_best_so_far"] == 91 * 4
        && prov.counts["students_removed_never_requested_help"] == 400;

    let summary = summarize_conditions(&rows);
    // Each arm: 400 rows, half 1 and half 0 → mean 1/2, sd √(100/399).
    let expected_sd = (100.0f64 / 399.0).sqrt();
    let summary_ok = summary.rows.len() == 2
        && summary.rows.iter().all(|r| {
            r.student_count == 100
                && (r.mean_continuous_score - 0.5).abs() < 5e-4
                && (r.sd_continuous_score - expected_sd).abs() < 5e-4
        });

    // Attrition: 5 missing distal outcomes out of 1000 records.
    let records: Vec<StudentRecord> = (0..1000)
        .map(|i| StudentRecord {
            student_id: format!("t{i:04}"),
            arm: (i % 2) as u8,
            assigned_prob: 0.5,
            proximal_outcome: 0.5,
            distal_outcome: if i < 5 { None } else { Some(0.5) },
            cluster_id: "c".into(),
            covariates: vec![],
        })
        .collect();
    let dataset = TrialDataset::new(records, vec![], vec![], Provenance::default()).unwrap();
    let rate = attrition_rate(&dataset, AttritionOutcome::DistalPost).unwrap();
    let attrition_ok = rate == 0.005;

    let ok = counts_ok && summary_ok && attrition_ok;
    verdict(
        "7",
        ok,
        &format!(
            "removal counts exact: {counts_ok}; summary to 3 decimals: {summary_ok}; \
             attrition 5/1000 = {rate}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------
// Criterion 8: the held-out unit's own data never reaches its imputation.
// ---------------------------------------------------------------------
#[test]
fn criterion_8_loop_imputation_ignores_the_held_out_unit() {
    let config = SimConfig {
        n: 50,
        q: 3,
        outcome: OutcomeKind::Nonlinear,
        noise_sd: 0.5,
        ..SimConfig::default()
    };
    let trial = generate_with_arms(&config, 123, 3);
    let spec = forest_spec();
    let base = loop_imputations(&trial.dataset, Outcome::Proximal, &spec, 9).unwrap();

    let mut flips_identical = true;
    for i in 0..trial.dataset.records.len() {
        let mut records = trial.dataset.records.clone();
        records[i].arm = 1 - records[i].arm;
        records[i].proximal_outcome = 1.0 - records[i].proximal_outcome;
        let flipped = TrialDataset::new(
            records,
            trial.dataset.covariate_names.clone(),
            trial.dataset.covariate_kinds.clone(),
            Provenance::default(),
        )
        .unwrap();
        let after = loop_imputations(&flipped, Outcome::Proximal, &spec, 9).unwrap();
        if base[i].m_hat.to_bits() != after[i].m_hat.to_bits() {
            flips_identical = false;
            break;
        }
    }
    verdict(
        "8",
        flips_identical,
        "m̂_i bit-identical after flipping (T_i, Y_i) for every i on a 50-unit fixture",
    );
    assert!(flips_identical);
}

// ---------------------------------------------------------------------
// Criterion 9: byte-identical report artifacts across thread counts.
// ---------------------------------------------------------------------
#[test]
fn criterion_9_reports_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("analysis.csv");
    let status = Command::new(env!("CARGO_BIN_EXE_etrials"))
        .args([
            "simulate",
            "--n",
            "60",
            "--seed",
            "5",
            "--out",
            csv_path.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let run = |threads: &str, out_dir: &std::path::Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_etrials"))
            .env("ETRIALS_THREADS", threads)
            .args([
                "report",
                csv_path.to_str().unwrap(),
                "--seed",
                "7",
                "--trees",
                "20",
                "--permutations",
                "99",
                "--out-dir",
                out_dir.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
    };
    let dir1 = dir.path().join("one");
    let dir4 = dir.path().join("four");
    run("1", &dir1);
    run("4", &dir4);

    let mut identical = true;
    for name in ["results.csv", "ci_plot.csv", "provenance.json"] {
        let a = std::fs::read(dir1.join(name)).unwrap();
        let b = std::fs::read(dir4.join(name)).unwrap();
        if a != b {
            identical = false;
        }
    }
    verdict(
        "9",
        identical,
        "results.csv, ci_plot.csv, provenance.json byte-identical at 1 vs 4 threads",
    );
    assert!(identical);
}
