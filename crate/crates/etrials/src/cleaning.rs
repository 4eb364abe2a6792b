//! Filtering pipeline applied to the problem logs before the analysis
//! table is built: drop the platform's default best-so-far arm, keep only
//! students who requested help, flatten sub-problems, and report attrition
//! and per-arm summaries.
//!
//! Subsetting to help requesters is assignment-independent: the "Get Help"
//! button looks identical in every arm and precedes the condition reveal,
//! so students who never pressed it cannot have been influenced by their
//! assignment. Each filter is a pure, idempotent row filter and logs what
//! it removed into the provenance ledger.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::Serialize;

use crate::data_model::{ActionLogRow, ActionType, ProblemLogRow, Provenance, TrialDataset};
use crate::error::{Error, Result};

/// Removes every problem row whose condition equals the best-so-far code.
pub fn drop_best_so_far(
    rows: Vec<ProblemLogRow>,
    best_so_far_code: i64,
    provenance: &mut Provenance,
) -> Vec<ProblemLogRow> {
    let before = rows.len();
    let kept: Vec<ProblemLogRow> = rows
        .into_iter()
        .filter(|r| r.condition != best_so_far_code)
        .collect();
    let removed = before - kept.len();
    provenance.add("problem_rows_removed_best_so_far", removed as u64);
    if kept.is_empty() && removed > 0 {
        provenance.note("all problem rows carried the best-so-far code; table is now empty");
    }
    kept
}

/// Keeps exactly the students with at least one hint across their problem
/// rows. When action logs are supplied, a `hint_request` action also marks
/// a student as a help requester (union of the two signals).
pub fn restrict_to_help_requesters(
    rows: Vec<ProblemLogRow>,
    action_logs: Option<&[ActionLogRow]>,
    provenance: &mut Provenance,
) -> Vec<ProblemLogRow> {
    let mut requesters: BTreeSet<&str> = BTreeSet::new();
    let mut hint_totals: BTreeMap<&str, u64> = BTreeMap::new();
    for row in &rows {
        *hint_totals.entry(row.student_id.as_str()).or_insert(0) += row.hint_count;
    }
    for (student, total) in &hint_totals {
        if *total >= 1 {
            requesters.insert(student);
        }
    }
    if let Some(actions) = action_logs {
        for a in actions {
            if a.action_type == ActionType::HintRequest {
                requesters.insert(a.student_id.as_str());
            }
        }
    }
    let students_before = hint_totals.len();
    let requesters: BTreeSet<String> = requesters.iter().map(|s| s.to_string()).collect();
    let kept: Vec<ProblemLogRow> = rows
        .into_iter()
        .filter(|r| requesters.contains(&r.student_id))
        .collect();
    let kept_students: BTreeSet<&str> = kept.iter().map(|r| r.student_id.as_str()).collect();
    provenance.add(
        "students_removed_never_requested_help",
        (students_before - kept_students.len()) as u64,
    );
    kept
}

/// Retains sub-problem rows as independent problems, dropping the parent
/// linkage from the analysis view.
pub fn flatten_subproblems(
    rows: Vec<ProblemLogRow>,
    provenance: &mut Provenance,
) -> Vec<ProblemLogRow> {
    let mut n_sub = 0u64;
    let rows: Vec<ProblemLogRow> = rows
        .into_iter()
        .map(|mut r| {
            if r.parent_problem_id.take().is_some() {
                n_sub += 1;
            }
            r
        })
        .collect();
    provenance.add("subproblem_rows_flattened", n_sub);
    rows
}

/// Which score variable the attrition rate is computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttritionOutcome {
    /// Missing `prior_avg_cont_score` covariate cells.
    ProximalPrior,
    /// Missing distal (same-skill post) outcomes.
    DistalPost,
}

/// Fraction of records missing the chosen score variable. The denominator
/// is the student-level record count, which is recorded alongside the rate
/// in the report.
pub fn attrition_rate(dataset: &TrialDataset, outcome: AttritionOutcome) -> Result<f64> {
    if dataset.records.is_empty() {
        return Err(Error::domain("attrition rate undefined on an empty dataset"));
    }
    let missing = match outcome {
        AttritionOutcome::ProximalPrior => {
            let idx = dataset
                .covariate_index("prior_avg_cont_score")
                .ok_or_else(|| Error::domain("dataset has no prior_avg_cont_score covariate"))?;
            dataset
                .records
                .iter()
                .filter(|r| r.covariates[idx].is_nan())
                .count()
        }
        AttritionOutcome::DistalPost => dataset
            .records
            .iter()
            .filter(|r| r.distal_outcome.is_none())
            .count(),
    };
    Ok(missing as f64 / dataset.records.len() as f64)
}

/// One per-arm summary row.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ConditionSummary {
    pub condition: i64,
    pub student_count: u64,
    pub assignment_count: u64,
    pub mean_continuous_score: f64,
    pub sd_continuous_score: f64,
    pub avg_problems_assigned: f64,
}

/// Per-arm counts and score moments, in the layout of the experiment
/// summary tables.
#[derive(Debug, Clone, Serialize, Default, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<ConditionSummary>,
}

impl SummaryTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "condition",
            "student_count",
            "assignment_count",
            "mean",
            "sd",
            "avg_problems_assigned",
        ])?;
        for r in &self.rows {
            wtr.write_record([
                r.condition.to_string(),
                r.student_count.to_string(),
                r.assignment_count.to_string(),
                format!("{}", r.mean_continuous_score),
                format!("{}", r.sd_continuous_score),
                format!("{}", r.avg_problems_assigned),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Per-arm student count, assignment count, continuous-score mean and
/// sample (n-1) standard deviation, and average problems per student.
pub fn summarize_conditions(rows: &[ProblemLogRow]) -> SummaryTable {
    let mut by_condition: BTreeMap<i64, Vec<&ProblemLogRow>> = BTreeMap::new();
    for r in rows {
        by_condition.entry(r.condition).or_default().push(r);
    }
    let mut out = SummaryTable::default();
    for (condition, rows) in by_condition {
        let students: BTreeSet<&str> = rows.iter().map(|r| r.student_id.as_str()).collect();
        let assignments: BTreeSet<(&str, &str)> = rows
            .iter()
            .map(|r| (r.student_id.as_str(), r.assignment_id.as_str()))
            .collect();
        let scores: Vec<f64> = rows.iter().map(|r| r.continuous_score.value()).collect();
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let sd = if scores.len() > 1 {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        out.rows.push(ConditionSummary {
            condition,
            student_count: students.len() as u64,
            assignment_count: assignments.len() as u64,
            mean_continuous_score: mean,
            sd_continuous_score: sd,
            avg_problems_assigned: rows.len() as f64 / students.len() as f64,
        });
    }
    out
}
