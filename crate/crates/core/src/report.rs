//! JSON, table and Graphviz renderings of evaluation results.
//!
//! Emitters are pure: timestamps arrive as arguments, JSON keys are sorted
//! and floats use the shortest round-trip representation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::corpus::ChunkRef;
use crate::pipeline::{AdherenceStatus, NoteReport, Outcome, QueryMode};
use crate::scoring::{aggregate_specialty, SpecialtyRow};

pub const RUN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("note `{0}` did not complete; no adherence graph can be drawn")]
    NotDone(String),
    #[error("specialty rows do not match the note reports: {0}")]
    RowMismatch(String),
    #[error("note ids `{0}` and `{1}` map to the same file name")]
    FileNameClash(String, String),
    #[error("serializing report: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub embedder_id: String,
    pub query_mode: QueryMode,
    pub k: usize,
    pub llm_model: String,
    pub corpus_fingerprint: String,
    pub prompt_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRef {
    pub note_id: String,
    pub specialty: String,
    pub status: String,
    /// Paths relative to the run directory.
    pub json: String,
    pub dot: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub run_id: String,
    pub generated_at: String,
    pub config: ConfigSnapshot,
    pub notes: Vec<NoteRef>,
    pub failed_notes: usize,
    pub specialties: Vec<SpecialtyRow>,
}

impl RunReport {
    pub fn new(run_id: &str, generated_at: &str, config: ConfigSnapshot, reports: &[NoteReport]) -> Self {
        let notes = reports
            .iter()
            .map(|r| {
                let stem = file_stem(&r.note_id);
                NoteRef {
                    note_id: r.note_id.clone(),
                    specialty: r.specialty.clone(),
                    status: if r.is_done() { "done" } else { "failed" }.into(),
                    json: format!("notes/{stem}.json"),
                    dot: r.is_done().then(|| format!("notes/{stem}.dot")),
                }
            })
            .collect();
        Self {
            schema_version: RUN_SCHEMA_VERSION,
            run_id: run_id.into(),
            generated_at: generated_at.into(),
            config,
            notes,
            failed_notes: reports.iter().filter(|r| !r.is_done()).count(),
            specialties: aggregate_specialty(reports),
        }
    }

    /// Checks that the stored rows equal those re-derived from `reports`.
    pub fn verify_rows(&self, reports: &[NoteReport]) -> Result<(), ReportError> {
        let derived = aggregate_specialty(reports);
        if derived != self.specialties {
            return Err(ReportError::RowMismatch(format!(
                "stored {} rows, derived {} rows",
                self.specialties.len(),
                derived.len()
            )));
        }
        let ids: Vec<_> = reports.iter().map(|r| r.note_id.as_str()).collect();
        let refs: Vec<_> = self.notes.iter().map(|n| n.note_id.as_str()).collect();
        if ids != refs {
            return Err(ReportError::RowMismatch("note list differs".into()));
        }
        Ok(())
    }
}

/// File-name-safe form of a note id.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<_> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect::<Map<_, _>>())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn emit_json<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let mut text = serde_json::to_string_pretty(&sort_keys(serde_json::to_value(value)?))?;
    text.push('\n');
    Ok(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TableFormat {
    #[default]
    Csv,
    Text,
}

pub const TABLE_HEADER: [&str; 4] = ["Specialty", "Followed", "Not followed", "Score"];

fn table_cells(row: &SpecialtyRow) -> [String; 4] {
    [
        row.specialty.clone(),
        format!("{:.2}", row.mean_followed),
        format!("{:.2}", row.mean_not_followed),
        row.score.map_or_else(|| "n/a".to_string(), |s| format!("{s:.2}")),
    ]
}

/// The per-specialty table: a header plus one row per specialty.
pub fn emit_table(rows: &[SpecialtyRow], format: TableFormat) -> String {
    match format {
        TableFormat::Csv => {
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
            w.write_record(TABLE_HEADER).expect("in-memory write");
            for row in rows {
                w.write_record(table_cells(row)).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
        }
        TableFormat::Text => {
            let cells: Vec<[String; 4]> = rows.iter().map(table_cells).collect();
            let mut widths = TABLE_HEADER.map(|h| h.chars().count());
            for r in &cells {
                for (w, c) in widths.iter_mut().zip(r) {
                    *w = (*w).max(c.chars().count());
                }
            }
            let mut out = String::new();
            let header = TABLE_HEADER.map(String::from);
            for r in std::iter::once(&header).chain(&cells) {
                let line = format!(
                    "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}",
                    r[0],
                    r[1],
                    r[2],
                    r[3],
                    w0 = widths[0],
                    w1 = widths[1],
                    w2 = widths[2],
                    w3 = widths[3]
                );
                out.push_str(line.trim_end());
                out.push('\n');
            }
            out
        }
    }
}

fn dot_quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => {}
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

pub fn status_color(status: AdherenceStatus) -> &'static str {
    match status {
        AdherenceStatus::Followed => "green",
        AdherenceStatus::NotFollowed => "red",
        AdherenceStatus::MissingTreatment => "orange",
    }
}

/// Top-down adherence graph: note root, diagnosis nodes filled by status,
/// treatment nodes under each diagnosis, and one leaf per cited guideline
/// chunk labelled `source:doc_id#chunk`.
pub fn emit_dot(report: &NoteReport) -> Result<String, ReportError> {
    if !report.is_done() {
        return Err(ReportError::NotDone(report.note_id.clone()));
    }
    let judgments = report.judgments.as_deref().unwrap_or(&[]);
    let evidence = report.evidence.as_ref();
    let mut out = String::new();
    let _ = writeln!(out, "digraph {} {{", dot_quote(&format!("note {}", report.note_id)));
    out.push_str("  rankdir=TB;\n");
    out.push_str("  node [fontname=\"Helvetica\"];\n");
    let _ = writeln!(
        out,
        "  root [label={}, shape=box, style=bold];",
        dot_quote(&format!("{} ({})", report.note_id, report.specialty))
    );

    let mut leaves: Vec<&ChunkRef> = Vec::new();
    let mut edges = Vec::new();
    for (i, finding) in report.findings.iter().enumerate() {
        let status = judgments.get(i).map(|j| j.status);
        let (fill, status_name) = match status {
            Some(s) => (status_color(s), format!("{s:?}")),
            None => ("gray", "Unjudged".to_string()),
        };
        let _ = writeln!(
            out,
            "  dx{i} [label={}, shape=ellipse, style=filled, fillcolor={fill}];",
            dot_quote(&format!("{}\n{status_name}", finding.diagnosis))
        );
        edges.push(format!("  root -> dx{i};"));
        for (t, treatment) in finding.treatments.iter().enumerate() {
            let _ = writeln!(out, "  tx{i}_{t} [label={}, shape=box];", dot_quote(treatment));
            edges.push(format!("  dx{i} -> tx{i}_{t};"));
        }
        for cited in judgments.get(i).map(|j| j.cited_chunks.as_slice()).unwrap_or(&[]) {
            let leaf = match leaves.iter().position(|l| *l == cited) {
                Some(p) => p,
                None => {
                    leaves.push(cited);
                    leaves.len() - 1
                }
            };
            edges.push(format!("  dx{i} -> g{leaf} [style=dashed];"));
        }
    }
    for (g, chunk) in leaves.iter().enumerate() {
        let source = evidence
            .and_then(|e| e.source_of(chunk))
            .map_or_else(|| "unknown".to_string(), |s| s.to_string());
        let label = format!("{source}:{}#{}", chunk.doc_id, chunk.chunk_index);
        let _ = writeln!(out, "  g{g} [label={}, shape=note];", dot_quote(&label));
    }
    for e in edges {
        out.push_str(&e);
        out.push('\n');
    }
    out.push_str("}\n");
    Ok(out)
}

/// Writes `notes/<id>.json`, `notes/<id>.dot` (completed notes only),
/// `table.csv` and `run.json` under `dir`.
pub fn write_run_dir(dir: &Path, run: &RunReport, reports: &[NoteReport]) -> Result<Vec<PathBuf>, ReportError> {
    let mut stems: Vec<(String, &str)> = Vec::new();
    let mut seen = HashSet::new();
    for r in reports {
        let stem = file_stem(&r.note_id);
        if !seen.insert(stem.clone()) {
            let other = stems.iter().find(|(s, _)| *s == stem).map(|(_, id)| *id).unwrap_or("?");
            return Err(ReportError::FileNameClash(other.to_string(), r.note_id.clone()));
        }
        stems.push((stem, &r.note_id));
    }
    let notes_dir = dir.join("notes");
    std::fs::create_dir_all(&notes_dir)?;
    let mut written = Vec::new();
    let mut put = |path: PathBuf, text: String| -> Result<(), ReportError> {
        std::fs::write(&path, text)?;
        written.push(path);
        Ok(())
    };
    for (r, (stem, _)) in reports.iter().zip(&stems) {
        put(notes_dir.join(format!("{stem}.json")), emit_json(r)?)?;
        if r.is_done() {
            put(notes_dir.join(format!("{stem}.dot")), emit_dot(r)?)?;
        }
    }
    put(dir.join("table.csv"), emit_table(&run.specialties, TableFormat::Csv))?;
    put(dir.join("run.json"), emit_json(run)?)?;
    Ok(written)
}

/// Reads `run.json` and every note report it lists.
pub fn read_run_dir(dir: &Path) -> Result<(RunReport, Vec<NoteReport>), ReportError> {
    let run: RunReport = serde_json::from_str(&std::fs::read_to_string(dir.join("run.json"))?)?;
    let reports = run
        .notes
        .iter()
        .map(|n| -> Result<NoteReport, ReportError> {
            Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(&n.json))?)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((run, reports))
}

/// Short failure summary, one line per failed note.
pub fn failure_summary(reports: &[NoteReport]) -> Vec<String> {
    reports
        .iter()
        .filter_map(|r| match &r.outcome {
            Outcome::Failed { stage, error } => Some(format!("{}: failed at {stage}: {error}", r.note_id)),
            Outcome::Done => None,
        })
        .collect()
}
