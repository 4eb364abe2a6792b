//! Typed schema for the eight E-TRIALS log tables and the derived
//! student-level analysis dataset.
//!
//! Canonical column names are fixed here (see the `columns` module);
//! ingestion accepts a header-mapping file for exports that renamed them.
//! Missing values are encoded as empty cells; alternative tokens such as
//! `NA` can be declared in the mapping file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};

/// Canonical header names for the eight tables and the analysis CSV.
pub mod columns {
    pub const PROBLEM_LOGS: &[&str] = &[
        "student_id",
        "assignment_id",
        "problem_id",
        "parent_problem_id",
        "condition",
        "hint_count",
        "attempt_count",
        "time_on_task",
        "discrete_score",
        "continuous_score",
    ];
    pub const ASSIGNMENT_LOGS: &[&str] = &[
        "student_id",
        "assignment_id",
        "class_id",
        "teacher_id",
        "total_time",
        "total_attempts",
        "total_hints",
        "assignment_discrete_score",
    ];
    pub const PRIOR_LOGS_FIXED: &[&str] = &["student_id", "class_id", "school_id"];
    pub const SAME_SKILL: &[&str] = &["student_id", "avg_continuous_score", "problem_count"];
    pub const ACTION_LOGS: &[&str] = &["student_id", "problem_id", "action_type", "timestamp"];
    pub const ASSIGNMENT_SETTINGS: &[&str] = &["assignment_id", "time_limit", "redo_enabled"];
}

/// ASSISTments continuous score: exactly one of {0, 0.33, 0.67, 1.0}.
///
/// Scores are parsed as strings against this enum rather than as free
/// floats; each hint requested costs 0.33 points, so a row with at least
/// one hint can score at most 0.67.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContinuousScore {
    Zero,
    OneThird,
    TwoThirds,
    Full,
}

impl ContinuousScore {
    /// Accepted spellings: "0", "0.33", "0.67", "1", "1.0".
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "0" => Some(ContinuousScore::Zero),
            "0.33" => Some(ContinuousScore::OneThird),
            "0.67" => Some(ContinuousScore::TwoThirds),
            "1" | "1.0" => Some(ContinuousScore::Full),
            _ => None,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            ContinuousScore::Zero => 0.0,
            ContinuousScore::OneThird => 0.33,
            ContinuousScore::TwoThirds => 0.67,
            ContinuousScore::Full => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ContinuousScore::Zero => "0",
            ContinuousScore::OneThird => "0.33",
            ContinuousScore::TwoThirds => "0.67",
            ContinuousScore::Full => "1.0",
        }
    }
}

impl fmt::Display for ContinuousScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One row of the Problem Logs table (problem-level scores and effort).
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemLogRow {
    pub student_id: String,
    pub assignment_id: String,
    pub problem_id: String,
    /// Present means this row is a sub-problem of the given parent.
    pub parent_problem_id: Option<String>,
    /// Integer arm code (0, 1, 2, ...).
    pub condition: i64,
    pub hint_count: u64,
    pub attempt_count: u64,
    pub time_on_task: f64,
    pub discrete_score: u8,
    pub continuous_score: ContinuousScore,
}

/// One row of the Assignment Logs table (assignment-level rollups).
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentLogRow {
    pub student_id: String,
    pub assignment_id: String,
    pub class_id: String,
    pub teacher_id: String,
    pub total_time: f64,
    pub total_attempts: u64,
    pub total_hints: u64,
    pub assignment_discrete_score: f64,
}

/// One row of the Prior Logs table: class/school context plus an open-ended
/// set of numeric covariate columns preserved by name.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorLogRow {
    pub student_id: String,
    pub class_id: String,
    pub school_id: Option<String>,
    /// Values aligned with the owning table's `covariate_names`; NaN = missing.
    pub covariates: Vec<f64>,
}

/// One row of a Same Skill (prior or post) table.
#[derive(Debug, Clone, PartialEq)]
pub struct SameSkillScoreRow {
    pub student_id: String,
    /// Missing exactly when `problem_count` is zero.
    pub avg_continuous_score: Option<f64>,
    pub problem_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionType {
    Start,
    Resume,
    Finish,
    HintRequest,
    AnswerSubmit,
    Other(String),
}

impl ActionType {
    pub fn parse(s: &str) -> Self {
        match s.trim() {
            "start" => ActionType::Start,
            "resume" => ActionType::Resume,
            "finish" => ActionType::Finish,
            "hint_request" => ActionType::HintRequest,
            "answer_submit" => ActionType::AnswerSubmit,
            other => ActionType::Other(other.to_string()),
        }
    }
}

/// One row of the Action Logs table (click-stream events).
#[derive(Debug, Clone, PartialEq)]
pub struct ActionLogRow {
    pub student_id: String,
    pub problem_id: String,
    pub action_type: ActionType,
    pub timestamp: i64,
}

/// One row of the Assignment Settings table.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentSettingsRow {
    pub assignment_id: String,
    pub time_limit: Option<f64>,
    pub redo_enabled: bool,
}

/// Whether a covariate column holds numeric values or integer-coded
/// categorical levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CovariateKind {
    Numeric,
    Categorical,
}

/// One student in the analysis dataset: arm, outcomes, cluster, covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentRecord {
    pub student_id: String,
    /// Binary treatment indicator.
    pub arm: u8,
    /// Assignment probability, strictly inside (0, 1).
    pub assigned_prob: f64,
    /// Mean continuous score over the student's experiment problems.
    pub proximal_outcome: f64,
    /// Average same-skill post score; None when no post problems exist.
    pub distal_outcome: Option<f64>,
    /// Class identifier, used as the random-intercept grouping.
    pub cluster_id: String,
    /// Covariate values aligned with `TrialDataset::covariate_names`;
    /// NaN encodes a missing cell.
    pub covariates: Vec<f64>,
}

/// Ledger of what the pipeline did to the data: rows/students dropped per
/// rule, plus free-form notes. Serialized into the provenance report.
#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct Provenance {
    pub counts: BTreeMap<String, u64>,
    pub notes: Vec<String>,
}

impl Provenance {
    pub fn add(&mut self, key: &str, n: u64) {
        *self.counts.entry(key.to_string()).or_insert(0) += n;
    }

    pub fn note(&mut self, msg: impl Into<String>) {
        self.notes.push(msg.into());
    }
}

/// Validated, joined student-level analysis table.
///
/// Immutable after construction; safe to share read-only across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    pub records: Vec<StudentRecord>,
    pub covariate_names: Vec<String>,
    pub covariate_kinds: Vec<CovariateKind>,
    pub provenance: Provenance,
}

impl TrialDataset {
    /// Builds a dataset, checking the structural invariants: no duplicate
    /// student ids, covariate vectors aligned with the name list, both
    /// arms nonempty, arms in {0,1}, assignment probabilities in (0,1).
    pub fn new(
        records: Vec<StudentRecord>,
        covariate_names: Vec<String>,
        covariate_kinds: Vec<CovariateKind>,
        provenance: Provenance,
    ) -> Result<Self> {
        if covariate_names.len() != covariate_kinds.len() {
            return Err(Error::domain("covariate names/kinds length mismatch"));
        }
        let mut seen = BTreeSet::new();
        let mut n_treated = 0usize;
        let mut n_control = 0usize;
        for r in &records {
            if !seen.insert(r.student_id.clone()) {
                return Err(Error::domain(format!(
                    "duplicate student_id {}",
                    r.student_id
                )));
            }
            if r.covariates.len() != covariate_names.len() {
                return Err(Error::domain(format!(
                    "student {} has {} covariates, expected {}",
                    r.student_id,
                    r.covariates.len(),
                    covariate_names.len()
                )));
            }
            match r.arm {
                0 => n_control += 1,
                1 => n_treated += 1,
                a => return Err(Error::domain(format!("arm {a} is not binary"))),
            }
            if !(r.assigned_prob > 0.0 && r.assigned_prob < 1.0) {
                return Err(Error::domain(format!(
                    "assigned_prob {} outside (0,1) for student {}",
                    r.assigned_prob, r.student_id
                )));
            }
        }
        if n_treated == 0 || n_control == 0 {
            return Err(Error::domain(
                "degenerate dataset: one arm is empty, the estimand is undefined",
            ));
        }
        Ok(TrialDataset {
            records,
            covariate_names,
            covariate_kinds,
            provenance,
        })
    }

    pub fn n_treated(&self) -> usize {
        self.records.iter().filter(|r| r.arm == 1).count()
    }

    pub fn n_control(&self) -> usize {
        self.records.iter().filter(|r| r.arm == 0).count()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    /// Writes the canonical analysis CSV. Categorical covariate columns
    /// carry a `:cat` suffix in the header so the kind round-trips.
    pub fn write_analysis_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec![
            "student_id".to_string(),
            "arm".to_string(),
            "assigned_prob".to_string(),
            "cluster_id".to_string(),
            "proximal_outcome".to_string(),
            "distal_outcome".to_string(),
        ];
        for (name, kind) in self.covariate_names.iter().zip(&self.covariate_kinds) {
            match kind {
                CovariateKind::Numeric => header.push(name.clone()),
                CovariateKind::Categorical => header.push(format!("{name}:cat")),
            }
        }
        wtr.write_record(&header)?;
        for r in &self.records {
            let mut rec = vec![
                r.student_id.clone(),
                r.arm.to_string(),
                fmt_f64(r.assigned_prob),
                r.cluster_id.clone(),
                fmt_f64(r.proximal_outcome),
                r.distal_outcome.map(fmt_f64).unwrap_or_default(),
            ];
            for v in &r.covariates {
                rec.push(if v.is_nan() {
                    String::new()
                } else {
                    fmt_f64(*v)
                });
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a canonical analysis CSV written by [`write_analysis_csv`].
    pub fn read_analysis_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let fixed = [
            "student_id",
            "arm",
            "assigned_prob",
            "cluster_id",
            "proximal_outcome",
            "distal_outcome",
        ];
        for (i, want) in fixed.iter().enumerate() {
            if headers.get(i) != Some(*want) {
                return Err(Error::Schema {
                    file: "analysis".into(),
                    line: 1,
                    column: want.to_string(),
                    message: format!("expected column {} at position {}", want, i),
                });
            }
        }
        let mut covariate_names = Vec::new();
        let mut covariate_kinds = Vec::new();
        for h in headers.iter().skip(fixed.len()) {
            if let Some(base) = h.strip_suffix(":cat") {
                covariate_names.push(base.to_string());
                covariate_kinds.push(CovariateKind::Categorical);
            } else {
                covariate_names.push(h.to_string());
                covariate_kinds.push(CovariateKind::Numeric);
            }
        }
        let mut records = Vec::new();
        for (idx, row) in rdr.records().enumerate() {
            let row = row?;
            let line = idx as u64 + 2;
            let field = |i: usize| row.get(i).unwrap_or("").trim();
            let parse_f = |i: usize, name: &str| -> Result<f64> {
                field(i).parse::<f64>().map_err(|_| Error::Schema {
                    file: "analysis".into(),
                    line,
                    column: name.to_string(),
                    message: format!("cannot parse '{}' as a number", field(i)),
                })
            };
            let arm: u8 = field(1).parse().map_err(|_| Error::Schema {
                file: "analysis".into(),
                line,
                column: "arm".into(),
                message: format!("cannot parse '{}' as an arm indicator", field(1)),
            })?;
            let distal = if field(5).is_empty() {
                None
            } else {
                Some(parse_f(5, "distal_outcome")?)
            };
            let mut covariates = Vec::with_capacity(covariate_names.len());
            for (k, name) in covariate_names.iter().enumerate() {
                let i = fixed.len() + k;
                if field(i).is_empty() {
                    covariates.push(f64::NAN);
                } else {
                    covariates.push(parse_f(i, name)?);
                }
            }
            records.push(StudentRecord {
                student_id: field(0).to_string(),
                arm,
                assigned_prob: parse_f(2, "assigned_prob")?,
                cluster_id: field(3).to_string(),
                proximal_outcome: parse_f(4, "proximal_outcome")?,
                distal_outcome: distal,
                covariates,
            });
        }
        TrialDataset::new(records, covariate_names, covariate_kinds, Provenance::default())
    }
}

/// Shortest round-trip decimal representation.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// One schema or invariant violation found while parsing or validating.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Violation {
    pub table: String,
    pub line: u64,
    pub message: String,
}

/// Output of [`validate_tables`]: per-table row counts, collected schema
/// violations, and orphan foreign keys. The tables themselves are not
/// modified.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub row_counts: BTreeMap<String, u64>,
    pub violations: Vec<Violation>,
    pub orphan_warnings: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.orphan_warnings.is_empty()
    }
}

/// Checks the parsed tables: re-asserts row invariants, cross-checks
/// problem rows against assignment rows (orphan foreign keys are warnings,
/// the rows stay), and flags redo rows for assignments without the redo
/// feature enabled. Pure: the same input always yields the same report.
pub fn validate_tables(tables: &crate::ingestion::LogTables) -> ValidationReport {
    let mut report = ValidationReport::default();
    report
        .violations
        .extend(tables.parse_violations.iter().cloned());

    let count =
        |n: usize| -> u64 { n as u64 };
    report
        .row_counts
        .insert("problem_logs".into(), count(tables.problem_logs.len()));
    report
        .row_counts
        .insert("assignment_logs".into(), count(tables.assignment_logs.len()));
    if let Some(t) = &tables.action_logs {
        report.row_counts.insert("action_logs".into(), count(t.len()));
    }
    if let Some(t) = &tables.prior_logs {
        report.row_counts.insert("prior_logs".into(), count(t.rows.len()));
    }
    if let Some(t) = &tables.same_skill_prior_logs {
        report
            .row_counts
            .insert("same_skill_prior_logs".into(), count(t.len()));
    }
    if let Some(t) = &tables.same_skill_post_logs {
        report
            .row_counts
            .insert("same_skill_post_logs".into(), count(t.len()));
    }
    if let Some(t) = &tables.assignment_settings {
        report
            .row_counts
            .insert("assignment_settings".into(), count(t.len()));
    }
    if let Some(t) = &tables.redo_logs {
        report.row_counts.insert("redo_logs".into(), count(t.len()));
    }

    // Row-level invariants on problem logs.
    for (i, row) in tables.problem_logs.iter().enumerate() {
        let line = i as u64 + 2;
        if row.hint_count >= 1 && row.continuous_score.value() > 0.67 {
            report.violations.push(Violation {
                table: "problem_logs".into(),
                line,
                message: format!(
                    "hint_count {} with continuous_score {} (hints cap the score at 0.67)",
                    row.hint_count, row.continuous_score
                ),
            });
        }
    }

    // Same-skill invariant: score missing exactly when problem_count is 0.
    for (name, table) in [
        ("same_skill_prior_logs", &tables.same_skill_prior_logs),
        ("same_skill_post_logs", &tables.same_skill_post_logs),
    ] {
        if let Some(rows) = table {
            for (i, row) in rows.iter().enumerate() {
                let line = i as u64 + 2;
                if row.avg_continuous_score.is_none() != (row.problem_count == 0) {
                    report.violations.push(Violation {
                        table: name.into(),
                        line,
                        message: format!(
                            "avg_continuous_score missing={} but problem_count={}",
                            row.avg_continuous_score.is_none(),
                            row.problem_count
                        ),
                    });
                }
            }
        }
    }

    // Orphan foreign keys: problem rows without a matching assignment row.
    let assignment_keys: BTreeSet<(&str, &str)> = tables
        .assignment_logs
        .iter()
        .map(|a| (a.student_id.as_str(), a.assignment_id.as_str()))
        .collect();
    for (i, row) in tables.problem_logs.iter().enumerate() {
        let line = i as u64 + 2;
        if !assignment_keys.contains(&(row.student_id.as_str(), row.assignment_id.as_str())) {
            report.orphan_warnings.push(Violation {
                table: "problem_logs".into(),
                line,
                message: format!(
                    "problem row for student {} references assignment {} absent from assignment_logs (row retained)",
                    row.student_id, row.assignment_id
                ),
            });
        }
    }

    // Redo rows are only expected when the assignment has redo enabled.
    if let (Some(redo), Some(settings)) = (&tables.redo_logs, &tables.assignment_settings) {
        let enabled: BTreeSet<&str> = settings
            .iter()
            .filter(|s| s.redo_enabled)
            .map(|s| s.assignment_id.as_str())
            .collect();
        for (i, row) in redo.iter().enumerate() {
            let line = i as u64 + 2;
            if !enabled.contains(row.assignment_id.as_str()) {
                report.orphan_warnings.push(Violation {
                    table: "redo_logs".into(),
                    line,
                    message: format!(
                        "redo row for assignment {} which does not have redo enabled",
                        row.assignment_id
                    ),
                });
            }
        }
    }

    report
}
