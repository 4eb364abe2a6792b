//! End-to-end tests over the CSV fixtures and the command-line binary.

use std::path::{Path, PathBuf};
use std::process::Command;

use etrials::cleaning::{drop_best_so_far, restrict_to_help_requesters};
use etrials::data_model::{validate_tables, Provenance, TrialDataset};
use etrials::error::Error;
use etrials::ingestion::{build_analysis_table, load_tables};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn full_fixture_loads_all_eight_tables() {
    let tables = load_tables(&fixture("full"), None).unwrap();
    assert_eq!(tables.file_row_counts.len(), 8);
    assert_eq!(tables.problem_logs.len(), 14);
    assert_eq!(tables.assignment_logs.len(), 7);
    assert!(tables.action_logs.is_some());
    assert!(tables.prior_logs.is_some());
    assert!(tables.same_skill_prior_logs.is_some());
    assert!(tables.same_skill_post_logs.is_some());
    assert!(tables.assignment_settings.is_some());
    assert!(tables.redo_logs.is_some());
    let report = validate_tables(&tables);
    assert!(report.is_clean(), "unexpected violations: {report:?}");
}

#[test]
fn missing_optional_table_is_not_an_error() {
    let tables = load_tables(&fixture("orphan"), None).unwrap();
    assert!(tables.redo_logs.is_none());
    assert!(tables.prior_logs.is_none());
}

#[test]
fn missing_required_file_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    match load_tables(dir.path(), None) {
        Err(Error::MissingRequiredFile(name)) => assert_eq!(name, "problem_logs.csv"),
        other => panic!("expected MissingRequiredFile, got {other:?}"),
    }
}

#[test]
fn malformed_quote_names_the_line() {
    match load_tables(&fixture("malformed"), None) {
        Err(Error::Schema { file, line, .. }) => {
            assert_eq!(file, "problem_logs.csv");
            assert_eq!(line, 7);
        }
        other => panic!("expected Schema error, got {other:?}"),
    }
}

#[test]
fn orphan_foreign_keys_warn_but_keep_the_row() {
    let tables = load_tables(&fixture("orphan"), None).unwrap();
    let report = validate_tables(&tables);
    assert!(report.violations.is_empty());
    assert_eq!(report.orphan_warnings.len(), 1);
    assert!(report.orphan_warnings[0].message.contains("a9"));
    assert_eq!(tables.problem_logs.len(), 3);
}

#[test]
fn full_fixture_joins_into_the_expected_dataset() {
    let mut tables = load_tables(&fixture("full"), None).unwrap();
    let mut prov = Provenance::default();
    let rows = std::mem::take(&mut tables.problem_logs);
    let rows = drop_best_so_far(rows, 2, &mut prov);
    tables.problem_logs = rows;
    let dataset = etrials::ingestion::build_analysis_table_with(&tables, 1, 0, 0.5, prov).unwrap();

    assert_eq!(dataset.records.len(), 6);
    assert_eq!(dataset.n_treated(), 3);
    assert_eq!(dataset.n_control(), 3);

    let s1 = dataset
        .records
        .iter()
        .find(|r| r.student_id == "s1")
        .unwrap();
    assert!((s1.proximal_outcome - (1.0 + 0.67) / 2.0).abs() < 1e-12);
    assert_eq!(s1.distal_outcome, Some(0.9));
    assert_eq!(s1.cluster_id, "c1");
    // prior_logs covariates plus the same-skill prior score.
    assert_eq!(
        dataset.covariate_names,
        vec![
            "prior_completion",
            "prior_accuracy",
            "prior_hint_rate",
            "prior_avg_cont_score"
        ]
    );
    assert_eq!(s1.covariates, vec![0.9, 0.8, 0.1, 0.85]);

    // s3 has a missing prior_accuracy cell and s5 a missing distal score.
    let s3 = dataset
        .records
        .iter()
        .find(|r| r.student_id == "s3")
        .unwrap();
    assert!(s3.covariates[1].is_nan());
    let s5 = dataset
        .records
        .iter()
        .find(|r| r.student_id == "s5")
        .unwrap();
    assert_eq!(s5.distal_outcome, None);
}

#[test]
fn hint_filter_drops_the_never_hint_student() {
    let tables = load_tables(&fixture("full"), None).unwrap();
    let mut prov = Provenance::default();
    let rows = drop_best_so_far(tables.problem_logs.clone(), 2, &mut prov);
    let kept = restrict_to_help_requesters(rows, None, &mut prov);
    let students: std::collections::BTreeSet<&str> =
        kept.iter().map(|r| r.student_id.as_str()).collect();
    assert!(!students.contains("s6"));
    assert_eq!(students.len(), 5);
    assert_eq!(prov.counts["students_removed_never_requested_help"], 1);

    // s6 has no hint_count but no hint_request action either; with action
    // logs supplied the outcome is the same here.
    let mut prov2 = Provenance::default();
    let rows2 = drop_best_so_far(tables.problem_logs.clone(), 2, &mut prov2);
    let kept2 =
        restrict_to_help_requesters(rows2, tables.action_logs.as_deref(), &mut prov2);
    assert_eq!(kept, kept2);
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_etrials"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn cli_validate_reports_clean_fixture() {
    let dir = fixture("full");
    let out = run_cli(&["validate", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["violations"].as_array().unwrap().len(), 0);
}

#[test]
fn cli_exit_codes_follow_the_contract() {
    // Usage error: unknown subcommand.
    let out = run_cli(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(4));

    // Validation error: missing required file.
    let empty = tempfile::tempdir().unwrap();
    let out = run_cli(&["clean", empty.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "one-line error: {stderr}");

    // Estimation error: degenerate assignment probability.
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("analysis.csv");
    let out = run_cli(&[
        "simulate",
        "--n",
        "20",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let out = run_cli(&[
        "estimate",
        csv_path.to_str().unwrap(),
        "--p-assign",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn cli_simulate_then_estimate_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("analysis.csv");
    let out = run_cli(&[
        "simulate",
        "--n",
        "80",
        "--tau",
        "0.5",
        "--noise-sd",
        "0.2",
        "--seed",
        "11",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let dataset = TrialDataset::read_analysis_csv(std::fs::File::open(&csv_path).unwrap()).unwrap();
    assert_eq!(dataset.records.len(), 80);

    let out = run_cli(&[
        "estimate",
        csv_path.to_str().unwrap(),
        "--estimator",
        "t-test",
        "--json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let est = results[0]["estimate"].as_f64().unwrap();
    assert!((est - 0.5).abs() < 0.2, "estimate {est} far from 0.5");
}

#[test]
fn cli_config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("analysis.csv");
    assert!(run_cli(&["simulate", "--n", "30", "--out", csv_path.to_str().unwrap()])
        .status
        .success());

    let config = dir.path().join("flags.conf");
    std::fs::write(&config, "estimator=t-test\nlevel=0.9\n").unwrap();

    let out = run_cli(&[
        "estimate",
        csv_path.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(results.as_array().unwrap().len(), 1);
    assert_eq!(results[0]["estimator"], "t_test");

    // An explicit flag beats the config value.
    let out = run_cli(&[
        "estimate",
        csv_path.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--estimator",
        "reg",
        "--json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(results[0]["estimator"], "regression");
}

#[test]
fn analysis_table_emission_from_validate() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("analysis.csv");
    let full = fixture("full");
    let out = run_cli(&[
        "validate",
        full.to_str().unwrap(),
        "--emit-analysis-table",
        out_path.to_str().unwrap(),
        "--treatment-code",
        "1",
        "--control-code",
        "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dataset = TrialDataset::read_analysis_csv(std::fs::File::open(&out_path).unwrap()).unwrap();
    // s7 carries condition 2 which maps to neither arm code.
    assert_eq!(dataset.records.len(), 6);
}

#[test]
fn conflicting_assignment_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("problem_logs.csv"),
        "student_id,assignment_id,problem_id,parent_problem_id,condition,hint_count,attempt_count,time_on_task,discrete_score,continuous_score\n\
         s1,a1,p1,,1,0,1,10,1,1\n\
         s1,a2,p2,,0,0,1,10,1,1\n\
         s2,a1,p1,,0,0,1,10,1,1\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("assignment_logs.csv"),
        "student_id,assignment_id,class_id,teacher_id,total_time,total_attempts,total_hints,assignment_discrete_score\n\
         s1,a1,c1,t1,10,1,0,1\n\
         s1,a2,c1,t1,10,1,0,1\n\
         s2,a1,c1,t1,10,1,0,1\n",
    )
    .unwrap();
    let tables = load_tables(dir.path(), None).unwrap();
    match build_analysis_table(&tables, 1, 0, 0.5) {
        Err(Error::ConflictingAssignment(student)) => assert_eq!(student, "s1"),
        other => panic!("expected ConflictingAssignment, got {other:?}"),
    }
}
