//! The four-agent evaluation workflow.
//!
//! A note moves through `Pending → Extracting → Querying → Retrieving →
//! Scoring → Done`; any stage may instead move it to `Failed`, which is
//! terminal. Every note yields a [`NoteReport`], including partial artifacts
//! when a stage fails.

use std::collections::HashSet;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clock::Clock;
use crate::corpus::{tokenize, ChunkRef, ChunkStore, Source};
use crate::embedding::{EmbedError, Embedder};
use crate::llm::{complete, extract_json_block, ChatBackend, ChatMessage, LlmError, LlmRequest};
use crate::prompts::{render, Prompts};
use crate::scoring::NoteScore;
use crate::vectorstore::{IndexError, VectorIndex};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Notes outside this word range get a warning.
pub const EXPECTED_WORDS: (usize, usize) = (300, 1000);

pub mod tags {
    pub const EXTRACTOR: &str = "extractor";
    pub const QUERY: &str = "query";
    pub const SCORER: &str = "scorer";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicalNote {
    pub id: String,
    pub specialty: String,
    pub text: String,
}

impl MedicalNote {
    pub fn word_count(&self) -> usize {
        tokenize(&self.text).len()
    }

    pub fn length_warning(&self) -> Option<String> {
        let n = self.word_count();
        let (lo, hi) = EXPECTED_WORDS;
        (n < lo || n > hi).then(|| format!("note has {n} words, outside the expected {lo}-{hi}"))
    }
}

#[derive(Debug, Error)]
pub enum NoteLoadError {
    #[error("reading notes: {0}")]
    Io(#[from] std::io::Error),
    #[error("notes line {line}: {reason}")]
    Record { line: usize, reason: String },
    #[error("duplicate note id `{0}`")]
    DuplicateId(String),
}

/// Reads notes from JSONL `{"id", "specialty", "text"}` lines.
pub fn read_notes<R: BufRead>(reader: R) -> Result<Vec<MedicalNote>, NoteLoadError> {
    let mut notes = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let note: MedicalNote = serde_json::from_str(&line).map_err(|e| NoteLoadError::Record {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if note.id.trim().is_empty() || note.text.trim().is_empty() {
            return Err(NoteLoadError::Record {
                line: i + 1,
                reason: "empty id or text".into(),
            });
        }
        if !seen.insert(note.id.clone()) {
            return Err(NoteLoadError::DuplicateId(note.id));
        }
        notes.push(note);
    }
    Ok(notes)
}

pub fn load_notes(path: &Path) -> Result<Vec<MedicalNote>, NoteLoadError> {
    read_notes(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisFinding {
    pub diagnosis: String,
    pub treatments: Vec<String>,
    /// Verbatim quote from the note.
    pub note_evidence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    pub queries: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    /// Always exactly this many queries.
    Fixed(usize),
    /// One query per extracted diagnosis (at least one).
    PerDiagnosis,
}

impl QueryMode {
    pub fn target(&self, findings: &[DiagnosisFinding]) -> usize {
        match *self {
            QueryMode::Fixed(n) => n,
            QueryMode::PerDiagnosis => findings.len().max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceHit {
    pub chunk_ref: ChunkRef,
    pub source: Source,
    pub score: f64,
    pub rank: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEvidence {
    pub query: String,
    pub hits: Vec<EvidenceHit>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub per_query: Vec<QueryEvidence>,
}

impl EvidenceBundle {
    /// Hits with duplicate chunks removed, in first-seen order.
    pub fn flattened(&self) -> Vec<&EvidenceHit> {
        let mut seen = HashSet::new();
        self.per_query
            .iter()
            .flat_map(|q| &q.hits)
            .filter(|h| seen.insert(&h.chunk_ref))
            .collect()
    }

    pub fn contains(&self, r: &ChunkRef) -> bool {
        self.per_query.iter().flat_map(|q| &q.hits).any(|h| &h.chunk_ref == r)
    }

    pub fn source_of(&self, r: &ChunkRef) -> Option<&Source> {
        self.per_query
            .iter()
            .flat_map(|q| &q.hits)
            .find(|h| &h.chunk_ref == r)
            .map(|h| &h.source)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdherenceStatus {
    Followed,
    NotFollowed,
    MissingTreatment,
}

impl AdherenceStatus {
    /// Accepts the variant names with any case, spacing, `_` or `-`.
    pub fn parse(s: &str) -> Option<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, ' ' | '_' | '-'))
            .flat_map(char::to_lowercase)
            .collect();
        match key.as_str() {
            "followed" => Some(Self::Followed),
            "notfollowed" => Some(Self::NotFollowed),
            "missingtreatment" => Some(Self::MissingTreatment),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub diagnosis: String,
    pub status: AdherenceStatus,
    pub rationale: String,
    pub cited_chunks: Vec<ChunkRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Extracting,
    Querying,
    Retrieving,
    Scoring,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Extracting => "extracting",
            Stage::Querying => "querying",
            Stage::Retrieving => "retrieving",
            Stage::Scoring => "scoring",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "state")]
pub enum PipelineState {
    Pending,
    Extracting,
    Querying,
    Retrieving,
    Scoring,
    Done,
    Failed { stage: Stage, error: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("illegal pipeline transition {from:?} -> {to:?}")]
pub struct TransitionError {
    pub from: PipelineState,
    pub to: PipelineState,
}

impl PipelineState {
    fn ordinal(&self) -> Option<u8> {
        match self {
            PipelineState::Pending => Some(0),
            PipelineState::Extracting => Some(1),
            PipelineState::Querying => Some(2),
            PipelineState::Retrieving => Some(3),
            PipelineState::Scoring => Some(4),
            PipelineState::Done => Some(5),
            PipelineState::Failed { .. } => None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, PipelineState::Done | PipelineState::Failed { .. })
    }

    /// The stage a running state belongs to.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineState::Extracting => Some(Stage::Extracting),
            PipelineState::Querying => Some(Stage::Querying),
            PipelineState::Retrieving => Some(Stage::Retrieving),
            PipelineState::Scoring => Some(Stage::Scoring),
            _ => None,
        }
    }

    /// Only single forward steps are legal; `Failed` may follow any running
    /// stage and must name that stage.
    pub fn advance(&mut self, next: PipelineState) -> Result<(), TransitionError> {
        let ok = match (&self.ordinal(), &next) {
            (Some(_), PipelineState::Failed { stage, .. }) => self.stage() == Some(*stage),
            (Some(from), to) => to.ordinal() == Some(from + 1),
            (None, _) => false,
        };
        if !ok {
            return Err(TransitionError {
                from: self.clone(),
                to: next,
            });
        }
        *self = next;
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            PipelineState::Pending => "pending",
            PipelineState::Extracting => "extracting",
            PipelineState::Querying => "querying",
            PipelineState::Retrieving => "retrieving",
            PipelineState::Scoring => "scoring",
            PipelineState::Done => "done",
            PipelineState::Failed { .. } => "failed",
        }
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("structured output rejected after re-prompt: {0}")]
    StructuredOutput(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Outcome {
    Done,
    Failed { stage: Stage, error: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub extracting_ms: u64,
    pub querying_ms: u64,
    pub retrieving_ms: u64,
    pub scoring_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteReport {
    pub schema_version: u32,
    pub note_id: String,
    pub specialty: String,
    pub word_count: usize,
    pub outcome: Outcome,
    pub findings: Vec<DiagnosisFinding>,
    pub queries: Option<QuerySet>,
    pub evidence: Option<EvidenceBundle>,
    pub judgments: Option<Vec<Judgment>>,
    pub score: Option<NoteScore>,
    pub timings: StageTimings,
    pub state_trace: Vec<String>,
    pub warnings: Vec<String>,
}

impl NoteReport {
    pub fn is_done(&self) -> bool {
        self.outcome == Outcome::Done
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub query_mode: QueryMode,
    /// Hits retrieved per query.
    pub k: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            query_mode: QueryMode::Fixed(5),
            k: 4,
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

/// Everything a note evaluation reads. Shared read-only across workers.
#[derive(Clone, Copy)]
pub struct PipelineDeps<'a> {
    pub index: &'a VectorIndex,
    pub chunks: &'a ChunkStore,
    pub embedder: &'a dyn Embedder,
    pub llm: &'a dyn ChatBackend,
    pub prompts: &'a Prompts,
    pub config: &'a PipelineConfig,
    pub clock: &'a dyn Clock,
}

/// Structured-output parse result plus non-fatal warnings.
type Parsed<T> = Result<(T, Vec<String>), String>;

/// Asks for JSON, re-prompting once with the parse error on failure.
fn ask_structured<T>(
    llm: &dyn ChatBackend,
    prompts: &Prompts,
    cfg: &PipelineConfig,
    tag: &str,
    user_prompt: String,
    parse: impl Fn(&Value) -> Parsed<T>,
) -> Result<(T, Vec<String>), StageError> {
    let mut messages = vec![ChatMessage::system(prompts.system.trim()), ChatMessage::user(user_prompt)];
    let mut warnings = Vec::new();
    for attempt in 0..2 {
        let mut req = LlmRequest::new(tag, messages.clone());
        req.temperature = cfg.temperature;
        req.max_tokens = cfg.max_tokens;
        let text = complete(&req, llm)?;
        let parsed = extract_json_block(&text)
            .map_err(|e| e.to_string())
            .and_then(|v| parse(&v));
        match parsed {
            Ok((value, w)) => {
                warnings.extend(w);
                return Ok((value, warnings));
            }
            Err(e) if attempt == 0 => {
                log::warn!("{tag}: unusable structured output ({e}); re-prompting");
                warnings.push(format!("{tag}: re-prompted after unusable output: {e}"));
                messages.push(ChatMessage::assistant(text));
                messages.push(ChatMessage::user(format!(
                    "Your previous reply could not be used: {e}. Reply again with only the corrected JSON."
                )));
            }
            Err(e) => return Err(StageError::StructuredOutput(e)),
        }
    }
    unreachable!("loop returns on the second attempt")
}

/// The array under `key`, or the value itself when it is already an array.
fn array_field<'v>(v: &'v Value, key: &str) -> Result<&'v Vec<Value>, String> {
    match v {
        Value::Array(a) => Ok(a),
        Value::Object(o) => o
            .get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| format!("expected a JSON array or an object with a `{key}` array")),
        _ => Err("expected a JSON array".into()),
    }
}

fn str_field<'v>(item: &'v Value, key: &str, i: usize) -> Result<&'v str, String> {
    item.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| format!("item {i}: `{key}` must be a string"))
}

fn string_list(item: &Value, key: &str, i: usize) -> Result<Vec<String>, String> {
    match item.get(key) {
        Some(Value::Array(a)) => a
            .iter()
            .map(|t| {
                t.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| format!("item {i}: `{key}` must contain only strings"))
            })
            .collect(),
        _ => Err(format!("item {i}: `{key}` must be an array")),
    }
}

/// Trims, drops empties and removes case-insensitive duplicates, keeping the first.
fn dedup_ci(items: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty() && seen.insert(s.to_lowercase()))
        .collect()
}

fn same_diagnosis(a: &str, b: &str) -> bool {
    a.trim().to_lowercase() == b.trim().to_lowercase()
}

fn parse_findings(v: &Value, note: &MedicalNote) -> Parsed<Vec<DiagnosisFinding>> {
    let items = array_field(v, "findings")?;
    let mut findings: Vec<DiagnosisFinding> = Vec::new();
    let mut warnings = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let diagnosis = str_field(item, "diagnosis", i)?.trim().to_string();
        if diagnosis.is_empty() {
            return Err(format!("item {i}: empty diagnosis"));
        }
        let treatments = dedup_ci(string_list(item, "treatments", i)?);
        let evidence = str_field(item, "evidence", i)?.trim().to_string();
        if evidence.is_empty() || !note.text.contains(&evidence) {
            let w = format!("dropped finding `{diagnosis}`: evidence quote not found in note");
            log::warn!("note {}: {w}", note.id);
            warnings.push(w);
            continue;
        }
        if let Some(existing) = findings.iter_mut().find(|f| same_diagnosis(&f.diagnosis, &diagnosis)) {
            warnings.push(format!("merged duplicate finding `{diagnosis}`"));
            let merged = existing.treatments.drain(..).chain(treatments);
            existing.treatments = dedup_ci(merged);
            continue;
        }
        findings.push(DiagnosisFinding {
            diagnosis,
            treatments,
            note_evidence: evidence,
        });
    }
    Ok((findings, warnings))
}

fn render_findings(findings: &[DiagnosisFinding]) -> String {
    if findings.is_empty() {
        return "(none)".into();
    }
    findings
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let tx = if f.treatments.is_empty() {
                "no treatment documented".to_string()
            } else {
                f.treatments.join("; ")
            };
            format!("{}. {} (treatments: {})", i + 1, f.diagnosis, tx)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Diagnoses and treatments documented in the note. Findings whose evidence
/// quote does not occur verbatim in the note are dropped with a warning.
pub fn run_extractor(
    note: &MedicalNote,
    llm: &dyn ChatBackend,
    prompts: &Prompts,
    cfg: &PipelineConfig,
) -> Result<(Vec<DiagnosisFinding>, Vec<String>), StageError> {
    let prompt = render(&prompts.extractor, &[("note", &note.text), ("specialty", &note.specialty)]);
    ask_structured(llm, prompts, cfg, tags::EXTRACTOR, prompt, |v| parse_findings(v, note))
}

/// Deterministic filler queries, in the order they are tried.
fn padding_candidates<'a>(note: &MedicalNote, findings: &'a [DiagnosisFinding]) -> impl Iterator<Item = String> + 'a {
    let specialty = note.specialty.trim().to_string();
    let primary = findings.iter().map(|f| format!("guidelines for {}", f.diagnosis));
    let general = std::iter::once(format!("clinical guidelines {specialty}"));
    let secondary = findings.iter().map(|f| format!("treatment guidelines for {}", f.diagnosis));
    let numbered = (2..).map(move |i| format!("clinical guidelines {specialty} part {i}"));
    primary.chain(general).chain(secondary).chain(numbered)
}

/// Brings `queries` to exactly `target`: truncates in order, or pads with
/// `guidelines for {diagnosis}` per finding, then `clinical guidelines
/// {specialty}`, then further deterministic fillers.
pub fn fit_queries(
    queries: Vec<String>,
    target: usize,
    note: &MedicalNote,
    findings: &[DiagnosisFinding],
) -> (QuerySet, Vec<String>) {
    let mut warnings = Vec::new();
    let mut out = dedup_ci(queries);
    if out.len() > target {
        warnings.push(format!("truncated {} queries to {target}", out.len()));
        out.truncate(target);
    } else if out.len() < target {
        warnings.push(format!("padded {} queries to {target}", out.len()));
        let mut seen: HashSet<String> = out.iter().map(|q| q.to_lowercase()).collect();
        for candidate in padding_candidates(note, findings) {
            if out.len() == target {
                break;
            }
            if seen.insert(candidate.to_lowercase()) {
                out.push(candidate);
            }
        }
    }
    (QuerySet { queries: out }, warnings)
}

fn parse_queries(v: &Value) -> Result<Vec<String>, String> {
    array_field(v, "queries")?
        .iter()
        .enumerate()
        .map(|(i, q)| {
            q.as_str()
                .map(str::to_string)
                .ok_or_else(|| format!("query {i} is not a string"))
        })
        .collect()
}

pub fn run_query_agent(
    note: &MedicalNote,
    findings: &[DiagnosisFinding],
    llm: &dyn ChatBackend,
    prompts: &Prompts,
    cfg: &PipelineConfig,
) -> Result<(QuerySet, Vec<String>), StageError> {
    let target = cfg.query_mode.target(findings);
    let prompt = render(
        &prompts.query,
        &[
            ("note", &note.text),
            ("specialty", &note.specialty),
            ("findings", &render_findings(findings)),
            ("n_queries", &target.to_string()),
        ],
    );
    let (raw, mut warnings) = ask_structured(llm, prompts, cfg, tags::QUERY, prompt, |v| {
        parse_queries(v).map(|q| (q, Vec::new()))
    })?;
    let (set, w) = fit_queries(raw, target, note, findings);
    warnings.extend(w);
    Ok((set, warnings))
}

/// Embeds each query and pulls its top `k` chunks.
pub fn run_retriever(
    queries: &QuerySet,
    index: &VectorIndex,
    chunks: &ChunkStore,
    embedder: &dyn Embedder,
    k: usize,
) -> Result<EvidenceBundle, StageError> {
    let meta = index.metadata();
    if meta.embedder_id != embedder.identity() || index.dim() != embedder.dim() {
        return Err(StageError::Config(format!(
            "index was built by `{}` (dim {}), but the configured embedder is `{}` (dim {})",
            meta.embedder_id,
            index.dim(),
            embedder.identity(),
            embedder.dim()
        )));
    }
    if index.is_empty() {
        return Ok(EvidenceBundle {
            per_query: queries
                .queries
                .iter()
                .map(|q| QueryEvidence {
                    query: q.clone(),
                    hits: Vec::new(),
                })
                .collect(),
        });
    }
    let vectors = embedder.embed_texts(&queries.queries)?;
    let mut per_query = Vec::with_capacity(vectors.len());
    for (query, vector) in queries.queries.iter().zip(&vectors) {
        let hits = index
            .search_top_k(vector, k)?
            .into_iter()
            .map(|h| {
                let chunk = chunks.get(&h.chunk_ref).ok_or_else(|| {
                    StageError::Config(format!("index entry {} is missing from the chunk store", h.chunk_ref))
                })?;
                Ok(EvidenceHit {
                    source: chunk.source.clone(),
                    text: chunk.text.clone(),
                    chunk_ref: h.chunk_ref,
                    score: h.score,
                    rank: h.rank,
                })
            })
            .collect::<Result<Vec<_>, StageError>>()?;
        per_query.push(QueryEvidence {
            query: query.clone(),
            hits,
        });
    }
    Ok(EvidenceBundle { per_query })
}

fn render_evidence(evidence: &EvidenceBundle) -> String {
    let hits = evidence.flattened();
    if hits.is_empty() {
        return "(no guideline excerpts were retrieved)".into();
    }
    hits.iter()
        .map(|h| format!("[{}] ({}) {}", h.chunk_ref, h.source, h.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn parse_judgments(v: &Value, judged: &[&DiagnosisFinding], evidence: &EvidenceBundle) -> Parsed<Vec<Judgment>> {
    let items = array_field(v, "judgments")?;
    let mut warnings = Vec::new();
    let mut used = vec![false; items.len()];
    let mut out = Vec::with_capacity(judged.len());
    for finding in judged {
        let pos = items
            .iter()
            .enumerate()
            .position(|(i, item)| {
                !used[i]
                    && item
                        .get("diagnosis")
                        .and_then(Value::as_str)
                        .is_some_and(|d| same_diagnosis(d, &finding.diagnosis))
            })
            .ok_or_else(|| format!("no judgment for diagnosis `{}`", finding.diagnosis))?;
        used[pos] = true;
        let item = &items[pos];
        let raw_status = str_field(item, "status", pos)?;
        let status = match AdherenceStatus::parse(raw_status) {
            Some(s @ (AdherenceStatus::Followed | AdherenceStatus::NotFollowed)) => s,
            Some(AdherenceStatus::MissingTreatment) => {
                return Err(format!(
                    "`{}` has documented treatments and cannot be MissingTreatment",
                    finding.diagnosis
                ))
            }
            None => return Err(format!("unknown status `{raw_status}` for `{}`", finding.diagnosis)),
        };
        let rationale = item.get("rationale").and_then(Value::as_str).unwrap_or("").trim().to_string();
        let raw_refs = match item.get("cited_chunks") {
            None | Some(Value::Null) => Vec::new(),
            Some(_) => string_list(item, "cited_chunks", pos)?,
        };
        let mut cited: Vec<ChunkRef> = Vec::new();
        for r in raw_refs {
            match r.parse::<ChunkRef>() {
                Ok(c) if evidence.contains(&c) => {
                    if !cited.contains(&c) {
                        cited.push(c);
                    }
                }
                _ => warnings.push(format!(
                    "stripped citation `{r}` for `{}`: not among retrieved chunks",
                    finding.diagnosis
                )),
            }
        }
        if cited.is_empty() {
            return Err(format!(
                "judgment for `{}` cites no retrieved guideline chunk",
                finding.diagnosis
            ));
        }
        out.push(Judgment {
            diagnosis: finding.diagnosis.clone(),
            status,
            rationale,
            cited_chunks: cited,
        });
    }
    for (i, item) in items.iter().enumerate() {
        if !used[i] {
            let d = item.get("diagnosis").and_then(Value::as_str).unwrap_or("?");
            warnings.push(format!("ignored judgment for `{d}`"));
        }
    }
    Ok((out, warnings))
}

/// One judgment per finding, in finding order.
///
/// Findings without treatments are judged MissingTreatment here and never
/// sent to the model. When no finding has treatments the model is not
/// called at all.
pub fn run_scorer(
    note: &MedicalNote,
    findings: &[DiagnosisFinding],
    evidence: &EvidenceBundle,
    llm: &dyn ChatBackend,
    prompts: &Prompts,
    cfg: &PipelineConfig,
) -> Result<(Vec<Judgment>, Vec<String>), StageError> {
    let judged: Vec<&DiagnosisFinding> = findings.iter().filter(|f| !f.treatments.is_empty()).collect();
    let (mut model_judgments, warnings) = if judged.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let owned: Vec<DiagnosisFinding> = judged.iter().map(|f| (*f).clone()).collect();
        let prompt = render(
            &prompts.scorer,
            &[
                ("note", &note.text),
                ("specialty", &note.specialty),
                ("findings", &render_findings(&owned)),
                ("evidence", &render_evidence(evidence)),
            ],
        );
        ask_structured(llm, prompts, cfg, tags::SCORER, prompt, |v| parse_judgments(v, &judged, evidence))?
    };
    model_judgments.reverse();
    let judgments = findings
        .iter()
        .map(|f| {
            if f.treatments.is_empty() {
                Judgment {
                    diagnosis: f.diagnosis.clone(),
                    status: AdherenceStatus::MissingTreatment,
                    rationale: "No treatment is documented for this diagnosis.".into(),
                    cited_chunks: Vec::new(),
                }
            } else {
                model_judgments.pop().expect("one model judgment per treated finding")
            }
        })
        .collect();
    Ok((judgments, warnings))
}

fn elapsed_ms(clock: &dyn Clock, start: chrono::DateTime<chrono::Utc>) -> u64 {
    (clock.now() - start).num_milliseconds().max(0) as u64
}

struct Run<'n> {
    state: PipelineState,
    report: NoteReport,
    note: &'n MedicalNote,
}

impl<'n> Run<'n> {
    fn enter(&mut self, next: PipelineState) {
        self.state.advance(next).expect("pipeline drives states forward");
        self.report.state_trace.push(self.state.name().to_string());
    }

    fn fail(mut self, stage: Stage, err: StageError) -> NoteReport {
        log::warn!("note {} failed at {stage}: {err}", self.note.id);
        let error = err.to_string();
        self.enter(PipelineState::Failed {
            stage,
            error: error.clone(),
        });
        self.report.outcome = Outcome::Failed { stage, error };
        self.report
    }
}

/// Runs all four stages over one note.
pub fn evaluate_note(note: &MedicalNote, deps: &PipelineDeps<'_>) -> NoteReport {
    let mut run = Run {
        state: PipelineState::Pending,
        note,
        report: NoteReport {
            schema_version: REPORT_SCHEMA_VERSION,
            note_id: note.id.clone(),
            specialty: note.specialty.clone(),
            word_count: note.word_count(),
            outcome: Outcome::Done,
            findings: Vec::new(),
            queries: None,
            evidence: None,
            judgments: None,
            score: None,
            timings: StageTimings::default(),
            state_trace: vec![PipelineState::Pending.name().to_string()],
            warnings: note.length_warning().into_iter().collect(),
        },
    };
    let clock = deps.clock;

    run.enter(PipelineState::Extracting);
    let t = clock.now();
    let findings = run_extractor(note, deps.llm, deps.prompts, deps.config);
    run.report.timings.extracting_ms = elapsed_ms(clock, t);
    match findings {
        Ok((f, w)) => {
            run.report.findings = f;
            run.report.warnings.extend(w);
        }
        Err(e) => return run.fail(Stage::Extracting, e),
    }

    run.enter(PipelineState::Querying);
    let t = clock.now();
    let queries = run_query_agent(note, &run.report.findings, deps.llm, deps.prompts, deps.config);
    run.report.timings.querying_ms = elapsed_ms(clock, t);
    match queries {
        Ok((q, w)) => {
            run.report.queries = Some(q);
            run.report.warnings.extend(w);
        }
        Err(e) => return run.fail(Stage::Querying, e),
    }

    run.enter(PipelineState::Retrieving);
    let t = clock.now();
    let queries = run.report.queries.as_ref().expect("set above");
    let evidence = run_retriever(queries, deps.index, deps.chunks, deps.embedder, deps.config.k);
    run.report.timings.retrieving_ms = elapsed_ms(clock, t);
    match evidence {
        Ok(b) => run.report.evidence = Some(b),
        Err(e) => return run.fail(Stage::Retrieving, e),
    }

    run.enter(PipelineState::Scoring);
    let t = clock.now();
    let evidence = run.report.evidence.as_ref().expect("set above");
    let judged = run_scorer(note, &run.report.findings, evidence, deps.llm, deps.prompts, deps.config);
    run.report.timings.scoring_ms = elapsed_ms(clock, t);
    match judged {
        Ok((j, w)) => {
            run.report.score = Some(NoteScore::from_judgments(&j));
            run.report.judgments = Some(j);
            run.report.warnings.extend(w);
        }
        Err(e) => return run.fail(Stage::Scoring, e),
    }

    run.enter(PipelineState::Done);
    run.report
}

/// Evaluates notes with up to `workers` threads, preserving input order.
/// Sequential backends (the mock) require `workers == 1`.
pub fn evaluate_batch(
    notes: &[MedicalNote],
    deps: &PipelineDeps<'_>,
    workers: usize,
) -> Result<Vec<NoteReport>, StageError> {
    if workers == 0 {
        return Err(StageError::Config("workers must be at least 1".into()));
    }
    if workers > 1 && deps.llm.is_sequential() {
        return Err(StageError::Config(format!(
            "the mock LLM backend is sequential; workers must be 1 (got {workers})"
        )));
    }
    let mut ids = HashSet::new();
    if let Some(dup) = notes.iter().find(|n| !ids.insert(n.id.as_str())) {
        return Err(StageError::Config(format!("duplicate note id `{}`", dup.id)));
    }
    Ok(crate::par::map_with_workers(notes, workers, |n| evaluate_note(n, deps)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FixedClock;
    use crate::corpus::{Chunk, Span};
    use crate::embedding::HashEmbedder;
    use crate::llm::MockBackend;
    use crate::vectorstore::{IndexEntry, IndexMetadata};
    use serde_json::json;

    fn note() -> MedicalNote {
        MedicalNote {
            id: "n1".into(),
            specialty: "Cardiology".into(),
            text: "Patient with hypertension; we started lisinopril 10 mg. Also cough noted.".into(),
        }
    }

    fn finding(dx: &str, tx: &[&str]) -> DiagnosisFinding {
        DiagnosisFinding {
            diagnosis: dx.into(),
            treatments: tx.iter().map(|s| s.to_string()).collect(),
            note_evidence: "x".into(),
        }
    }

    struct World {
        index: VectorIndex,
        chunks: ChunkStore,
        embedder: HashEmbedder,
        prompts: Prompts,
        config: PipelineConfig,
        clock: FixedClock,
    }

    fn world() -> World {
        let embedder = HashEmbedder::new(64, 64).unwrap();
        let texts = [
            ("who-12", "hypertension first line ace inhibitor lisinopril"),
            ("cdc-1", "cough evaluation guidance"),
            ("nice-3", "asthma inhaled corticosteroid"),
        ];
        let chunks: Vec<Chunk> = texts
            .iter()
            .map(|(id, t)| Chunk {
                doc_id: id.to_string(),
                chunk_index: 0,
                source: Source::parse(id.split('-').next().unwrap()),
                token_span: Span { start: 0, end: 5 },
                text: t.to_string(),
            })
            .collect();
        let entries = chunks.iter().map(|c| IndexEntry {
            chunk_ref: c.chunk_ref(),
            vector: embedder.embed_one(&c.text).unwrap(),
        });
        let meta = IndexMetadata {
            corpus_fingerprint: "fp".into(),
            embedder_id: embedder.identity(),
            built_at: None,
        };
        World {
            index: VectorIndex::build(64, meta, entries).unwrap(),
            chunks: ChunkStore::new(chunks),
            embedder,
            prompts: Prompts::default(),
            config: PipelineConfig {
                k: 2,
                ..PipelineConfig::default()
            },
            clock: FixedClock::from_unix(0),
        }
    }

    impl World {
        fn deps<'a>(&'a self, llm: &'a dyn ChatBackend) -> PipelineDeps<'a> {
            PipelineDeps {
                index: &self.index,
                chunks: &self.chunks,
                embedder: &self.embedder,
                llm,
                prompts: &self.prompts,
                config: &self.config,
                clock: &self.clock,
            }
        }
    }

    #[test]
    fn state_machine_moves_forward_only() {
        let mut s = PipelineState::Pending;
        assert!(s.advance(PipelineState::Querying).is_err());
        s.advance(PipelineState::Extracting).unwrap();
        assert!(s
            .advance(PipelineState::Failed {
                stage: Stage::Scoring,
                error: "x".into()
            })
            .is_err());
        s.advance(PipelineState::Failed {
            stage: Stage::Extracting,
            error: "x".into(),
        })
        .unwrap();
        assert!(s.is_terminal());
        assert!(s.advance(PipelineState::Querying).is_err());
        let mut p = PipelineState::Pending;
        assert!(p
            .advance(PipelineState::Failed {
                stage: Stage::Extracting,
                error: "x".into()
            })
            .is_err());
    }

    #[test]
    fn extractor_parses_findings() {
        let w = world();
        let mock = MockBackend::from_pairs([(
            "extractor",
            r#"[{"diagnosis":"hypertension","treatments":["lisinopril"],"evidence":"started lisinopril"}]"#,
        )]);
        let (f, warnings) = run_extractor(&note(), &mock, &w.prompts, &w.config).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].diagnosis, "hypertension");
        assert_eq!(f[0].treatments, vec!["lisinopril"]);
        assert!(warnings.is_empty());
    }

    #[test]
    fn extractor_empty_and_unverifiable() {
        let w = world();
        let mock = MockBackend::from_pairs([("extractor", "[]")]);
        assert!(run_extractor(&note(), &mock, &w.prompts, &w.config).unwrap().0.is_empty());

        let mock = MockBackend::from_pairs([(
            "extractor",
            r#"[{"diagnosis":"diabetes","treatments":["metformin"],"evidence":"on metformin"}]"#,
        )]);
        let (f, warnings) = run_extractor(&note(), &mock, &w.prompts, &w.config).unwrap();
        assert!(f.is_empty());
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("evidence quote not found"));
    }

    #[test]
    fn extractor_dedups_treatments_and_findings() {
        let w = world();
        let mock = MockBackend::from_pairs([(
            "extractor",
            r#"{"findings":[
                {"diagnosis":"Hypertension","treatments":["Lisinopril","lisinopril "," "],"evidence":"hypertension"},
                {"diagnosis":"hypertension","treatments":["diet"],"evidence":"hypertension"}]}"#,
        )]);
        let (f, _) = run_extractor(&note(), &mock, &w.prompts, &w.config).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].treatments, vec!["Lisinopril", "diet"]);
    }

    #[test]
    fn extractor_reprompts_once_then_fails() {
        let w = world();
        let ok = r#"[{"diagnosis":"hypertension","treatments":[],"evidence":"hypertension"}]"#;
        let mock = MockBackend::from_pairs([("extractor", "I think it is hypertension."), ("extractor", ok)]);
        let (f, warnings) = run_extractor(&note(), &mock, &w.prompts, &w.config).unwrap();
        assert_eq!(f.len(), 1);
        assert!(warnings[0].contains("re-prompted"));

        let mock = MockBackend::from_pairs([("extractor", "nope"), ("extractor", "[{\"diagnosis\": 3}]")]);
        assert!(matches!(
            run_extractor(&note(), &mock, &w.prompts, &w.config),
            Err(StageError::StructuredOutput(_))
        ));
    }

    #[test]
    fn query_agent_verbatim() {
        let w = world();
        let mock = MockBackend::from_pairs([("query", r#"{"queries":["a","b","c","d","e"]}"#)]);
        let (q, warnings) = run_query_agent(&note(), &[], &mock, &w.prompts, &w.config).unwrap();
        assert_eq!(q.queries, vec!["a", "b", "c", "d", "e"]);
        assert!(warnings.is_empty());
    }

    #[test]
    fn query_agent_pads_and_truncates() {
        let w = world();
        let findings = [finding("hypertension", &["lisinopril"])];
        let mock = MockBackend::from_pairs([("query", r#"["q1","q2","q3"]"#)]);
        let (q, _) = run_query_agent(&note(), &findings, &mock, &w.prompts, &w.config).unwrap();
        assert_eq!(
            q.queries,
            vec!["q1", "q2", "q3", "guidelines for hypertension", "clinical guidelines Cardiology"]
        );

        let mock = MockBackend::from_pairs([("query", r#"["1","2","3","4","5","6","7"]"#)]);
        let (q, _) = run_query_agent(&note(), &findings, &mock, &w.prompts, &w.config).unwrap();
        assert_eq!(q.queries, vec!["1", "2", "3", "4", "5"]);
    }

    #[test]
    fn padding_goes_beyond_templates() {
        let (q, _) = fit_queries(vec!["x".into(), "X ".into()], 7, &note(), &[finding("flu", &[])]);
        assert_eq!(
            q.queries,
            vec![
                "x",
                "guidelines for flu",
                "clinical guidelines Cardiology",
                "treatment guidelines for flu",
                "clinical guidelines Cardiology part 2",
                "clinical guidelines Cardiology part 3",
                "clinical guidelines Cardiology part 4",
            ]
        );
    }

    #[test]
    fn per_diagnosis_mode() {
        let w = world();
        let cfg = PipelineConfig {
            query_mode: QueryMode::PerDiagnosis,
            ..w.config.clone()
        };
        let findings: Vec<_> = ["a", "b", "c", "d"].iter().map(|d| finding(d, &["t"])).collect();
        let mock = MockBackend::from_pairs([("query", r#"["qa","qb","qc","qd"]"#)]);
        let (q, _) = run_query_agent(&note(), &findings, &mock, &w.prompts, &cfg).unwrap();
        assert_eq!(q.queries.len(), 4);
    }

    #[test]
    fn retriever_shapes_and_dedup() {
        let w = world();
        let qs = QuerySet {
            queries: vec![
                "hypertension first line ace inhibitor lisinopril".into(),
                "hypertension first line ace inhibitor lisinopril please".into(),
            ],
        };
        let b = run_retriever(&qs, &w.index, &w.chunks, &w.embedder, 2).unwrap();
        assert_eq!(b.per_query.len(), 2);
        assert!(b.per_query.iter().all(|q| q.hits.len() <= 2));
        assert_eq!(b.per_query[0].hits[0].chunk_ref, ChunkRef::new("who-12", 0));
        assert!((b.per_query[0].hits[0].score - 1.0).abs() < 1e-6);
        assert_eq!(b.per_query[1].hits[0].chunk_ref, ChunkRef::new("who-12", 0));
        let flat = b.flattened();
        assert_eq!(flat.iter().filter(|h| h.chunk_ref.doc_id == "who-12").count(), 1);
    }

    #[test]
    fn retriever_rejects_foreign_index() {
        let w = world();
        let other = HashEmbedder::new(64, 32).unwrap();
        let qs = QuerySet { queries: vec!["x".into()] };
        assert!(matches!(
            run_retriever(&qs, &w.index, &w.chunks, &other, 2),
            Err(StageError::Config(_))
        ));
    }

    fn bundle() -> EvidenceBundle {
        let w = world();
        let qs = QuerySet {
            queries: vec!["hypertension lisinopril".into()],
        };
        run_retriever(&qs, &w.index, &w.chunks, &w.embedder, 3).unwrap()
    }

    #[test]
    fn scorer_forces_missing_treatment() {
        let w = world();
        let mock = MockBackend::default();
        let (j, _) = run_scorer(&note(), &[finding("pneumonia", &[])], &bundle(), &mock, &w.prompts, &w.config).unwrap();
        assert_eq!(j[0].status, AdherenceStatus::MissingTreatment);
        assert!(j[0].cited_chunks.is_empty());
    }

    #[test]
    fn scorer_accepts_valid_citations() {
        let w = world();
        let findings = [finding("hypertension", &["lisinopril"]), finding("pneumonia", &[])];
        let reply = json!([
            {"diagnosis": "pneumonia", "status": "Followed", "rationale": "ignored", "cited_chunks": ["who-12/0"]},
            {"diagnosis": "Hypertension", "status": "Followed", "rationale": "ok", "cited_chunks": ["who-12/0"]}
        ])
        .to_string();
        let mock = MockBackend::from_pairs([("scorer", reply.as_str())]);
        let (j, _) = run_scorer(&note(), &findings, &bundle(), &mock, &w.prompts, &w.config).unwrap();
        assert_eq!(j.len(), 2);
        assert_eq!(j[0].status, AdherenceStatus::Followed);
        assert_eq!(j[0].diagnosis, "hypertension");
        assert_eq!(j[0].cited_chunks, vec![ChunkRef::new("who-12", 0)]);
        assert_eq!(j[1].status, AdherenceStatus::MissingTreatment);
    }

    #[test]
    fn scorer_strips_unknown_citations() {
        let w = world();
        let findings = [finding("hypertension", &["lisinopril"])];
        let partly = r#"[{"diagnosis":"hypertension","status":"NotFollowed","rationale":"r","cited_chunks":["bogus/9","who-12/0"]}]"#;
        let mock = MockBackend::from_pairs([("scorer", partly)]);
        let (j, warnings) = run_scorer(&note(), &findings, &bundle(), &mock, &w.prompts, &w.config).unwrap();
        assert_eq!(j[0].cited_chunks, vec![ChunkRef::new("who-12", 0)]);
        assert!(warnings.iter().any(|w| w.contains("bogus/9")));

        let bogus = r#"[{"diagnosis":"hypertension","status":"Followed","rationale":"r","cited_chunks":["bogus/9"]}]"#;
        let mock = MockBackend::from_pairs([("scorer", bogus), ("scorer", bogus)]);
        let err = run_scorer(&note(), &findings, &bundle(), &mock, &w.prompts, &w.config).unwrap_err();
        assert!(matches!(err, StageError::StructuredOutput(m) if m.contains("cites no retrieved")));
    }

    #[test]
    fn scorer_rejects_bad_status_and_missing_judgment() {
        let w = world();
        let findings = [finding("hypertension", &["lisinopril"])];
        let bad = r#"[{"diagnosis":"hypertension","status":"Partially","cited_chunks":["who-12/0"]}]"#;
        let mock = MockBackend::from_pairs([("scorer", bad), ("scorer", "[]")]);
        let err = run_scorer(&note(), &findings, &bundle(), &mock, &w.prompts, &w.config).unwrap_err();
        assert!(matches!(err, StageError::StructuredOutput(m) if m.contains("no judgment")));

        let missing = r#"[{"diagnosis":"hypertension","status":"MissingTreatment","cited_chunks":["who-12/0"]}]"#;
        let mock = MockBackend::from_pairs([("scorer", missing), ("scorer", missing)]);
        assert!(run_scorer(&note(), &findings, &bundle(), &mock, &w.prompts, &w.config).is_err());
    }

    const EXTRACT: &str =
        r#"[{"diagnosis":"hypertension","treatments":["lisinopril"],"evidence":"started lisinopril"},{"diagnosis":"cough","treatments":[],"evidence":"cough noted"}]"#;
    const QUERIES: &str = r#"["hypertension ace inhibitor","cough evaluation"]"#;
    const SCORE: &str = r#"[{"diagnosis":"hypertension","status":"Followed","rationale":"ok","cited_chunks":["who-12/0"]}]"#;

    #[test]
    fn full_run_is_done_and_deterministic() {
        let w = world();
        let run = || {
            let mock = MockBackend::from_pairs([("extractor", EXTRACT), ("query", QUERIES), ("scorer", SCORE)]);
            let r = evaluate_note(&note(), &w.deps(&mock));
            assert_eq!(mock.remaining(), 0);
            r
        };
        let a = run();
        assert_eq!(a.outcome, Outcome::Done);
        assert_eq!(
            a.state_trace,
            vec!["pending", "extracting", "querying", "retrieving", "scoring", "done"]
        );
        assert_eq!(a.queries.as_ref().unwrap().queries.len(), 5);
        assert_eq!(a.score.unwrap(), NoteScore { followed: 1, not_followed: 1, score: Some(0.5) });
        assert_eq!(a.timings, StageTimings::default());
        assert_eq!(a, run());
    }

    #[test]
    fn zero_findings_give_null_score() {
        let w = world();
        let mock = MockBackend::from_pairs([("extractor", "[]"), ("query", QUERIES)]);
        let r = evaluate_note(&note(), &w.deps(&mock));
        assert!(r.is_done());
        assert_eq!(r.score.unwrap(), NoteScore { followed: 0, not_followed: 0, score: None });
        assert_eq!(r.judgments.as_deref(), Some(&[][..]));
    }

    #[test]
    fn missing_scorer_entry_fails_at_scoring() {
        let w = world();
        let mock = MockBackend::from_pairs([("extractor", EXTRACT), ("query", QUERIES)]);
        let r = evaluate_note(&note(), &w.deps(&mock));
        assert!(matches!(r.outcome, Outcome::Failed { stage: Stage::Scoring, .. }));
        assert_eq!(r.findings.len(), 2);
        assert!(r.evidence.is_some());
        assert!(r.judgments.is_none());
        assert_eq!(r.state_trace.last().unwrap(), "failed");
        assert_eq!(r.state_trace.len(), 6);
    }

    #[test]
    fn batch_rejects_parallel_mock() {
        let w = world();
        let mock = MockBackend::default();
        assert!(matches!(
            evaluate_batch(&[note()], &w.deps(&mock), 2),
            Err(StageError::Config(_))
        ));
        assert!(evaluate_batch(&[note(), note()], &w.deps(&mock), 1).is_err());
    }

    #[test]
    fn notes_jsonl() {
        let notes = read_notes("{\"id\":\"a\",\"specialty\":\"X\",\"text\":\"t\"}\n".as_bytes()).unwrap();
        assert_eq!(notes[0].specialty, "X");
        assert!(notes[0].length_warning().is_some());
        assert!(matches!(
            read_notes("{\"id\":\"a\",\"specialty\":\"X\",\"text\":\"t\"}\n{\"id\":\"a\",\"specialty\":\"X\",\"text\":\"t\"}".as_bytes()),
            Err(NoteLoadError::DuplicateId(_))
        ));
    }

    #[test]
    fn status_parsing_is_lenient_on_spelling() {
        assert_eq!(AdherenceStatus::parse("Not followed"), Some(AdherenceStatus::NotFollowed));
        assert_eq!(AdherenceStatus::parse("missing_treatment"), Some(AdherenceStatus::MissingTreatment));
        assert_eq!(AdherenceStatus::parse("yes"), None);
    }
}
