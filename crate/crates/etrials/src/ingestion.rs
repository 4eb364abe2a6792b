//! CSV ingestion: parses the eight log files into typed tables and joins
//! them into the student-level analysis dataset.
//!
//! Only `problem_logs.csv` and `assignment_logs.csv` are required; the
//! other six tables are optional. Parsing is strict about structure
//! (missing required columns and malformed CSV are fatal) but lenient
//! about row values: rows violating a value invariant are excluded from
//! the typed table and collected as violations for [`validate_tables`].
//!
//! [`validate_tables`]: crate::data_model::validate_tables

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use crate::data_model::*;
use crate::error::{Error, Result};

/// Canonical file names inside an export directory.
pub const FILE_NAMES: &[&str] = &[
    "action_logs.csv",
    "problem_logs.csv",
    "assignment_logs.csv",
    "prior_logs.csv",
    "same_skill_prior_logs.csv",
    "same_skill_post_logs.csv",
    "assignment_settings.csv",
    "redo_logs.csv",
];

/// Header-mapping file: `canonical=actual` lines, one per renamed column,
/// plus an optional `missing=tok1,tok2` line declaring extra missing-value
/// tokens (the empty cell is always missing). Lines starting with `#` are
/// comments.
#[derive(Debug, Clone, Default)]
pub struct HeaderMapping {
    renames: BTreeMap<String, String>,
    missing_tokens: Vec<String>,
}

impl HeaderMapping {
    pub fn parse(text: &str) -> Result<Self> {
        let mut mapping = HeaderMapping::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Schema {
                file: "header mapping".into(),
                line: i as u64 + 1,
                column: String::new(),
                message: format!("expected key=value, got '{line}'"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if key == "missing" {
                mapping
                    .missing_tokens
                    .extend(value.split(',').map(|t| t.trim().to_string()));
            } else {
                mapping.renames.insert(key.to_string(), value.to_string());
            }
        }
        Ok(mapping)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Actual header under which a canonical column travels.
    fn actual<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.renames
            .get(canonical)
            .map(String::as_str)
            .unwrap_or(canonical)
    }

    fn is_missing(&self, cell: &str) -> bool {
        let cell = cell.trim();
        cell.is_empty() || self.missing_tokens.iter().any(|t| t == cell)
    }
}

/// The prior-logs table keeps its open-ended covariate columns by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriorTable {
    pub covariate_names: Vec<String>,
    pub rows: Vec<PriorLogRow>,
}

/// The eight raw tables as typed row lists. Tables other than problem and
/// assignment logs may be absent.
#[derive(Debug, Clone, Default)]
pub struct LogTables {
    pub action_logs: Option<Vec<ActionLogRow>>,
    pub problem_logs: Vec<ProblemLogRow>,
    pub assignment_logs: Vec<AssignmentLogRow>,
    pub prior_logs: Option<PriorTable>,
    pub same_skill_prior_logs: Option<Vec<SameSkillScoreRow>>,
    pub same_skill_post_logs: Option<Vec<SameSkillScoreRow>>,
    pub assignment_settings: Option<Vec<AssignmentSettingsRow>>,
    pub redo_logs: Option<Vec<ProblemLogRow>>,
    /// Value-invariant violations found during parsing; the offending rows
    /// are excluded from the typed tables above.
    pub parse_violations: Vec<Violation>,
    /// Per-file row counts as read from disk (before any exclusion).
    pub file_row_counts: BTreeMap<String, u64>,
}

struct TableReader<'a> {
    file: String,
    mapping: &'a HeaderMapping,
    headers: Vec<String>,
    records: Vec<csv::StringRecord>,
}

impl<'a> TableReader<'a> {
    fn open(path: &Path, file: &str, mapping: &'a HeaderMapping) -> Result<Self> {
        let f = File::open(path)?;
        let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(f);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| csv_error(file, e))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut records = Vec::new();
        for rec in rdr.records() {
            records.push(rec.map_err(|e| csv_error(file, e))?);
        }
        Ok(TableReader {
            file: file.to_string(),
            mapping,
            headers,
            records,
        })
    }

    fn column(&self, canonical: &str) -> Result<usize> {
        let actual = self.mapping.actual(canonical);
        self.headers
            .iter()
            .position(|h| h == actual)
            .ok_or_else(|| Error::Schema {
                file: self.file.clone(),
                line: 1,
                column: canonical.to_string(),
                message: format!("required column '{actual}' not found"),
            })
    }

    fn optional_column(&self, canonical: &str) -> Option<usize> {
        let actual = self.mapping.actual(canonical);
        self.headers.iter().position(|h| h == actual)
    }
}

fn csv_error(file: &str, e: csv::Error) -> Error {
    let line = match e.position() {
        Some(pos) => pos.line(),
        None => 0,
    };
    Error::Schema {
        file: file.to_string(),
        line,
        column: String::new(),
        message: e.to_string(),
    }
}

/// Per-row parse context; pushes violations instead of failing.
struct RowCtx<'a> {
    file: &'a str,
    line: u64,
    mapping: &'a HeaderMapping,
    violations: &'a mut Vec<Violation>,
    ok: bool,
}

impl RowCtx<'_> {
    fn cell<'r>(&self, rec: &'r csv::StringRecord, idx: usize) -> &'r str {
        rec.get(idx).unwrap_or("").trim()
    }

    fn violate(&mut self, column: &str, message: String) {
        self.violations.push(Violation {
            table: self.file.to_string(),
            line: self.line,
            message: format!("{column}: {message}"),
        });
        self.ok = false;
    }

    fn req_string(&mut self, rec: &csv::StringRecord, idx: usize, col: &str) -> String {
        let v = self.cell(rec, idx);
        if v.is_empty() {
            self.violate(col, "id must be non-empty".into());
        }
        v.to_string()
    }

    fn opt_string(&self, rec: &csv::StringRecord, idx: usize) -> Option<String> {
        let v = self.cell(rec, idx);
        if self.mapping.is_missing(v) {
            None
        } else {
            Some(v.to_string())
        }
    }

    fn u64_field(&mut self, rec: &csv::StringRecord, idx: usize, col: &str) -> u64 {
        let v = self.cell(rec, idx);
        match v.parse::<u64>() {
            Ok(n) => n,
            Err(_) => {
                self.violate(col, format!("'{v}' is not a nonnegative integer"));
                0
            }
        }
    }

    fn f64_field(&mut self, rec: &csv::StringRecord, idx: usize, col: &str) -> f64 {
        let v = self.cell(rec, idx);
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => x,
            _ => {
                self.violate(col, format!("'{v}' is not a finite number"));
                0.0
            }
        }
    }

    fn i64_field(&mut self, rec: &csv::StringRecord, idx: usize, col: &str) -> i64 {
        let v = self.cell(rec, idx);
        match v.parse::<i64>() {
            Ok(n) => n,
            Err(_) => {
                self.violate(col, format!("'{v}' is not an integer"));
                0
            }
        }
    }
}

fn parse_problem_table(
    rdr: &TableReader,
    violations: &mut Vec<Violation>,
) -> Result<Vec<ProblemLogRow>> {
    let c_student = rdr.column("student_id")?;
    let c_assignment = rdr.column("assignment_id")?;
    let c_problem = rdr.column("problem_id")?;
    let c_parent = rdr.optional_column("parent_problem_id");
    let c_condition = rdr.column("condition")?;
    let c_hints = rdr.column("hint_count")?;
    let c_attempts = rdr.column("attempt_count")?;
    let c_time = rdr.column("time_on_task")?;
    let c_discrete = rdr.column("discrete_score")?;
    let c_continuous = rdr.column("continuous_score")?;

    let mut rows = Vec::with_capacity(rdr.records.len());
    for (i, rec) in rdr.records.iter().enumerate() {
        let mut ctx = RowCtx {
            file: &rdr.file,
            line: i as u64 + 2,
            mapping: rdr.mapping,
            violations,
            ok: true,
        };
        let student_id = ctx.req_string(rec, c_student, "student_id");
        let assignment_id = ctx.req_string(rec, c_assignment, "assignment_id");
        let problem_id = ctx.req_string(rec, c_problem, "problem_id");
        let parent_problem_id = c_parent.and_then(|c| ctx.opt_string(rec, c));
        let condition = ctx.i64_field(rec, c_condition, "condition");
        let hint_count = ctx.u64_field(rec, c_hints, "hint_count");
        let attempt_count = ctx.u64_field(rec, c_attempts, "attempt_count");
        let time_on_task = ctx.f64_field(rec, c_time, "time_on_task");
        if time_on_task < 0.0 {
            ctx.violate("time_on_task", format!("{time_on_task} is negative"));
        }
        let discrete_raw = ctx.u64_field(rec, c_discrete, "discrete_score");
        if discrete_raw > 1 {
            ctx.violate("discrete_score", format!("{discrete_raw} is not in {{0,1}}"));
        }
        let cont_cell = ctx.cell(rec, c_continuous).to_string();
        let continuous_score = match ContinuousScore::parse(&cont_cell) {
            Some(s) => s,
            None => {
                ctx.violate(
                    "continuous_score",
                    format!("score '{cont_cell}' not in {{0,0.33,0.67,1.0}}"),
                );
                ContinuousScore::Zero
            }
        };
        if ctx.ok {
            rows.push(ProblemLogRow {
                student_id,
                assignment_id,
                problem_id,
                parent_problem_id,
                condition,
                hint_count,
                attempt_count,
                time_on_task,
                discrete_score: discrete_raw as u8,
                continuous_score,
            });
        }
    }
    Ok(rows)
}

fn parse_same_skill_table(
    rdr: &TableReader,
    violations: &mut Vec<Violation>,
) -> Result<Vec<SameSkillScoreRow>> {
    let c_student = rdr.column("student_id")?;
    let c_avg = rdr.column("avg_continuous_score")?;
    let c_count = rdr.column("problem_count")?;
    let mut rows = Vec::with_capacity(rdr.records.len());
    for (i, rec) in rdr.records.iter().enumerate() {
        let mut ctx = RowCtx {
            file: &rdr.file,
            line: i as u64 + 2,
            mapping: rdr.mapping,
            violations,
            ok: true,
        };
        let student_id = ctx.req_string(rec, c_student, "student_id");
        let problem_count = ctx.u64_field(rec, c_count, "problem_count");
        let avg_cell = ctx.cell(rec, c_avg);
        let avg_continuous_score = if rdr.mapping.is_missing(avg_cell) {
            None
        } else {
            let v = ctx.f64_field(rec, c_avg, "avg_continuous_score");
            if !(0.0..=1.0).contains(&v) {
                ctx.violate("avg_continuous_score", format!("{v} outside [0,1]"));
            }
            Some(v)
        };
        if ctx.ok {
            rows.push(SameSkillScoreRow {
                student_id,
                avg_continuous_score,
                problem_count,
            });
        }
    }
    Ok(rows)
}

/// Loads the export directory into typed tables. `problem_logs.csv` and
/// `assignment_logs.csv` are required; the rest are loaded when present.
pub fn load_tables(directory: &Path, mapping: Option<&HeaderMapping>) -> Result<LogTables> {
    let default_mapping = HeaderMapping::default();
    let mapping = mapping.unwrap_or(&default_mapping);
    let mut tables = LogTables::default();
    let mut violations = Vec::new();

    let path_of = |name: &str| directory.join(name);

    // problem_logs (required)
    {
        let name = "problem_logs.csv";
        let path = path_of(name);
        if !path.exists() {
            return Err(Error::MissingRequiredFile(name.to_string()));
        }
        let rdr = TableReader::open(&path, name, mapping)?;
        tables
            .file_row_counts
            .insert(name.into(), rdr.records.len() as u64);
        tables.problem_logs = parse_problem_table(&rdr, &mut violations)?;
    }

    // assignment_logs (required)
    {
        let name = "assignment_logs.csv";
        let path = path_of(name);
        if !path.exists() {
            return Err(Error::MissingRequiredFile(name.to_string()));
        }
        let rdr = TableReader::open(&path, name, mapping)?;
        tables
            .file_row_counts
            .insert(name.into(), rdr.records.len() as u64);
        let c_student = rdr.column("student_id")?;
        let c_assignment = rdr.column("assignment_id")?;
        let c_class = rdr.column("class_id")?;
        let c_teacher = rdr.column("teacher_id")?;
        let c_time = rdr.column("total_time")?;
        let c_attempts = rdr.column("total_attempts")?;
        let c_hints = rdr.column("total_hints")?;
        let c_score = rdr.column("assignment_discrete_score")?;
        for (i, rec) in rdr.records.iter().enumerate() {
            let mut ctx = RowCtx {
                file: "assignment_logs.csv",
                line: i as u64 + 2,
                mapping,
                violations: &mut violations,
                ok: true,
            };
            let student_id = ctx.req_string(rec, c_student, "student_id");
            let assignment_id = ctx.req_string(rec, c_assignment, "assignment_id");
            let class_id = ctx.req_string(rec, c_class, "class_id");
            let teacher_id = ctx.req_string(rec, c_teacher, "teacher_id");
            let total_time = ctx.f64_field(rec, c_time, "total_time");
            let total_attempts = ctx.u64_field(rec, c_attempts, "total_attempts");
            let total_hints = ctx.u64_field(rec, c_hints, "total_hints");
            let score = ctx.f64_field(rec, c_score, "assignment_discrete_score");
            if !(0.0..=1.0).contains(&score) {
                ctx.violate("assignment_discrete_score", format!("{score} outside [0,1]"));
            }
            if total_time < 0.0 {
                ctx.violate("total_time", format!("{total_time} is negative"));
            }
            if ctx.ok {
                tables.assignment_logs.push(AssignmentLogRow {
                    student_id,
                    assignment_id,
                    class_id,
                    teacher_id,
                    total_time,
                    total_attempts,
                    total_hints,
                    assignment_discrete_score: score,
                });
            }
        }
    }

    // action_logs (optional)
    let name = "action_logs.csv";
    if path_of(name).exists() {
        let rdr = TableReader::open(&path_of(name), name, mapping)?;
        tables
            .file_row_counts
            .insert(name.into(), rdr.records.len() as u64);
        let c_student = rdr.column("student_id")?;
        let c_problem = rdr.column("problem_id")?;
        let c_action = rdr.column("action_type")?;
        let c_ts = rdr.column("timestamp")?;
        let mut rows = Vec::new();
        for (i, rec) in rdr.records.iter().enumerate() {
            let mut ctx = RowCtx {
                file: name,
                line: i as u64 + 2,
                mapping,
                violations: &mut violations,
                ok: true,
            };
            let student_id = ctx.req_string(rec, c_student, "student_id");
            let problem_id = ctx.req_string(rec, c_problem, "problem_id");
            let action_type = ActionType::parse(ctx.cell(rec, c_action));
            let timestamp = ctx.i64_field(rec, c_ts, "timestamp");
            if timestamp <= 0 {
                ctx.violate("timestamp", format!("{timestamp} is not positive"));
            }
            if ctx.ok {
                rows.push(ActionLogRow {
                    student_id,
                    problem_id,
                    action_type,
                    timestamp,
                });
            }
        }
        tables.action_logs = Some(rows);
    }

    // prior_logs (optional, open-ended covariate columns)
    let name = "prior_logs.csv";
    if path_of(name).exists() {
        let rdr = TableReader::open(&path_of(name), name, mapping)?;
        tables
            .file_row_counts
            .insert(name.into(), rdr.records.len() as u64);
        let c_student = rdr.column("student_id")?;
        let c_class = rdr.column("class_id")?;
        let c_school = rdr.optional_column("school_id");
        let fixed: Vec<usize> = [Some(c_student), Some(c_class), c_school]
            .into_iter()
            .flatten()
            .collect();
        let mut covariate_names = Vec::new();
        let mut covariate_cols = Vec::new();
        for (idx, h) in rdr.headers.iter().enumerate() {
            if !fixed.contains(&idx) {
                covariate_names.push(h.clone());
                covariate_cols.push(idx);
            }
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records.iter().enumerate() {
            let mut ctx = RowCtx {
                file: name,
                line: i as u64 + 2,
                mapping,
                violations: &mut violations,
                ok: true,
            };
            let student_id = ctx.req_string(rec, c_student, "student_id");
            let class_id = ctx.req_string(rec, c_class, "class_id");
            let school_id = c_school.and_then(|c| ctx.opt_string(rec, c));
            let mut covariates = Vec::with_capacity(covariate_cols.len());
            for (&col, cname) in covariate_cols.iter().zip(&covariate_names) {
                let cell = ctx.cell(rec, col);
                if mapping.is_missing(cell) {
                    covariates.push(f64::NAN);
                } else {
                    match cell.parse::<f64>() {
                        Ok(v) if v.is_finite() => covariates.push(v),
                        _ => {
                            ctx.violate(cname, format!("'{cell}' is not a finite number"));
                            covariates.push(f64::NAN);
                        }
                    }
                }
            }
            if ctx.ok {
                rows.push(PriorLogRow {
                    student_id,
                    class_id,
                    school_id,
                    covariates,
                });
            }
        }
        tables.prior_logs = Some(PriorTable {
            covariate_names,
            rows,
        });
    }

    // same-skill prior/post (optional)
    for (name, slot) in [
        ("same_skill_prior_logs.csv", 0),
        ("same_skill_post_logs.csv", 1),
    ] {
        if path_of(name).exists() {
            let rdr = TableReader::open(&path_of(name), name, mapping)?;
            tables
                .file_row_counts
                .insert(name.into(), rdr.records.len() as u64);
            let rows = parse_same_skill_table(&rdr, &mut violations)?;
            if slot == 0 {
                tables.same_skill_prior_logs = Some(rows);
            } else {
                tables.same_skill_post_logs = Some(rows);
            }
        }
    }

    // assignment_settings (optional)
    let name = "assignment_settings.csv";
    if path_of(name).exists() {
        let rdr = TableReader::open(&path_of(name), name, mapping)?;
        tables
            .file_row_counts
            .insert(name.into(), rdr.records.len() as u64);
        let c_assignment = rdr.column("assignment_id")?;
        let c_limit = rdr.column("time_limit")?;
        let c_redo = rdr.column("redo_enabled")?;
        let mut rows = Vec::new();
        for (i, rec) in rdr.records.iter().enumerate() {
            let mut ctx = RowCtx {
                file: name,
                line: i as u64 + 2,
                mapping,
                violations: &mut violations,
                ok: true,
            };
            let assignment_id = ctx.req_string(rec, c_assignment, "assignment_id");
            let limit_cell = ctx.cell(rec, c_limit);
            let time_limit = if mapping.is_missing(limit_cell) {
                None
            } else {
                Some(ctx.f64_field(rec, c_limit, "time_limit"))
            };
            let redo_cell = ctx.cell(rec, c_redo).to_ascii_lowercase();
            let redo_enabled = match redo_cell.as_str() {
                "true" | "1" | "yes" => true,
                "false" | "0" | "no" => false,
                other => {
                    ctx.violate("redo_enabled", format!("'{other}' is not a boolean"));
                    false
                }
            };
            if ctx.ok {
                rows.push(AssignmentSettingsRow {
                    assignment_id,
                    time_limit,
                    redo_enabled,
                });
            }
        }
        tables.assignment_settings = Some(rows);
    }

    // redo_logs (optional, same shape as problem_logs)
    let name = "redo_logs.csv";
    if path_of(name).exists() {
        let rdr = TableReader::open(&path_of(name), name, mapping)?;
        tables
            .file_row_counts
            .insert(name.into(), rdr.records.len() as u64);
        tables.redo_logs = Some(parse_problem_table(&rdr, &mut violations)?);
    }

    tables.parse_violations = violations;
    Ok(tables)
}

/// Joins the cleaned tables into one [`StudentRecord`] per student.
///
/// The proximal outcome pools problems across all of a student's
/// experiment assignments; the distal outcome comes from the same-skill
/// post table and may be missing. Arm codes are mapped to {0,1} via the
/// two supplied codes; rows with other codes are ignored. `assigned_prob`
/// is a study-level scalar recorded in the provenance.
pub fn build_analysis_table(
    tables: &LogTables,
    treatment_arm_code: i64,
    control_arm_code: i64,
    assigned_prob: f64,
) -> Result<TrialDataset> {
    build_analysis_table_with(tables, treatment_arm_code, control_arm_code, assigned_prob, Provenance::default())
}

/// Same as [`build_analysis_table`] but chains an existing provenance
/// ledger (counts from the cleaning stage) into the dataset.
pub fn build_analysis_table_with(
    tables: &LogTables,
    treatment_arm_code: i64,
    control_arm_code: i64,
    assigned_prob: f64,
    mut provenance: Provenance,
) -> Result<TrialDataset> {
    if treatment_arm_code == control_arm_code {
        return Err(Error::domain("treatment and control arm codes must differ"));
    }
    if !(assigned_prob > 0.0 && assigned_prob < 1.0) {
        return Err(Error::domain(format!(
            "assigned_prob {assigned_prob} outside (0,1)"
        )));
    }

    // Deterministic join: everything keyed through sorted maps.
    let mut per_student: BTreeMap<&str, Vec<&ProblemLogRow>> = BTreeMap::new();
    for row in &tables.problem_logs {
        per_student.entry(&row.student_id).or_default().push(row);
    }

    let mut class_of: BTreeMap<&str, &str> = BTreeMap::new();
    for row in &tables.assignment_logs {
        // Students spanning several classes keep the lexicographically
        // smallest class id so the join is input-order independent.
        class_of
            .entry(&row.student_id)
            .and_modify(|c| {
                if row.class_id.as_str() < *c {
                    *c = &row.class_id;
                }
            })
            .or_insert(&row.class_id);
    }

    let empty_prior = PriorTable::default();
    let prior = tables.prior_logs.as_ref().unwrap_or(&empty_prior);
    let mut prior_of: BTreeMap<&str, &PriorLogRow> = BTreeMap::new();
    for row in &prior.rows {
        prior_of.entry(&row.student_id).or_insert(row);
    }

    let same_skill_map = |rows: &Option<Vec<SameSkillScoreRow>>| -> BTreeMap<String, Option<f64>> {
        rows.as_ref()
            .map(|rows| {
                rows.iter()
                    .map(|r| (r.student_id.clone(), r.avg_continuous_score))
                    .collect()
            })
            .unwrap_or_default()
    };
    let prior_score_of = same_skill_map(&tables.same_skill_prior_logs);
    let post_score_of = same_skill_map(&tables.same_skill_post_logs);

    let mut covariate_names = prior.covariate_names.clone();
    covariate_names.push("prior_avg_cont_score".to_string());
    let covariate_kinds = vec![CovariateKind::Numeric; covariate_names.len()];

    let mut records = Vec::new();
    let mut dropped_no_assignment = 0u64;
    let mut dropped_no_arm = 0u64;
    for (student, rows) in &per_student {
        let mut treated = false;
        let mut control = false;
        let mut score_sum = 0.0;
        let mut score_n = 0usize;
        for row in rows {
            if row.condition == treatment_arm_code {
                treated = true;
            } else if row.condition == control_arm_code {
                control = true;
            } else {
                continue;
            }
            score_sum += row.continuous_score.value();
            score_n += 1;
        }
        if treated && control {
            return Err(Error::ConflictingAssignment(student.to_string()));
        }
        if !treated && !control {
            dropped_no_arm += 1;
            continue;
        }
        let Some(class_id) = class_of.get(student) else {
            dropped_no_assignment += 1;
            continue;
        };
        let mut covariates: Vec<f64> = match prior_of.get(student) {
            Some(p) => p.covariates.clone(),
            None => vec![f64::NAN; prior.covariate_names.len()],
        };
        covariates.push(
            prior_score_of
                .get(*student)
                .copied()
                .flatten()
                .unwrap_or(f64::NAN),
        );
        records.push(StudentRecord {
            student_id: student.to_string(),
            arm: if treated { 1 } else { 0 },
            assigned_prob,
            proximal_outcome: score_sum / score_n as f64,
            distal_outcome: post_score_of.get(*student).copied().flatten(),
            cluster_id: class_id.to_string(),
            covariates,
        });
    }

    provenance.add("students_in_cleaned_problem_logs", per_student.len() as u64);
    provenance.add("students_dropped_missing_assignment_log", dropped_no_assignment);
    provenance.add("students_dropped_arm_code_not_mapped", dropped_no_arm);
    provenance.add("students_in_analysis_table", records.len() as u64);
    provenance.note(format!(
        "assigned_prob scalar {assigned_prob} applied to every student"
    ));
    provenance.note(
        "proximal outcome pools problems across all of a student's experiment assignments",
    );

    TrialDataset::new(records, covariate_names, covariate_kinds, provenance)
}
