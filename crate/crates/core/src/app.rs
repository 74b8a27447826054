//! End-to-end commands behind the `gg` executable.
//!
//! Each command returns a summary on success or an [`AppError`] whose
//! [`exit_code`](AppError::exit_code) follows the CLI contract: 0 ok,
//! 1 evaluation failures, 2 usage or configuration errors, 3 I/O or
//! corrupt data.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::clock::{rfc3339, Clock, FixedClock};
use crate::config::{process_env, Config, ConfigError, LlmBackend, Overrides};
use crate::corpus::{chunk_corpus, load_corpus, ChunkStore, CorpusError};
use crate::embedding::{build_embedder, EmbedError, Embedder};
use crate::llm::{ChatBackend, MockBackend, RemoteChat, TranscriptError};
use crate::pipeline::{evaluate_batch, load_notes, NoteLoadError, NoteReport, PipelineDeps, StageError};
use crate::prompts::{PromptError, Prompts, PROMPT_VERSION};
use crate::report::{
    emit_table, failure_summary, read_run_dir, write_run_dir, ConfigSnapshot, ReportError, RunReport, TableFormat,
};
use crate::scoring::NoteScore;
use crate::vectorstore::{load_index, save_index, IndexEntry, IndexError, IndexFormatError, IndexMetadata, VectorIndex};

pub const EXIT_OK: i32 = 0;
pub const EXIT_EVAL_FAILURES: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

/// Instant used by the self-test so its output is byte-stable.
pub const SELFTEST_EPOCH: i64 = 1_704_067_200;
pub const SELFTEST_RUN_ID: &str = "selftest";

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::Config(_) => EXIT_USAGE,
            AppError::Data(_) | AppError::Io { .. } => EXIT_DATA,
        }
    }

    fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        AppError::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<CorpusError> for AppError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(source) => AppError::io("corpus", source),
            other => AppError::Data(other.to_string()),
        }
    }
}

impl From<EmbedError> for AppError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Config(_) | EmbedError::ZeroDim | EmbedError::TruncateTooLarge { .. } => {
                AppError::Usage(format!("embedding: {e}"))
            }
            other => AppError::Data(format!("embedding: {other}")),
        }
    }
}

impl From<IndexFormatError> for AppError {
    fn from(e: IndexFormatError) -> Self {
        match e {
            IndexFormatError::Io(source) => AppError::io("index file", source),
            other => AppError::Data(format!("index file: {other}")),
        }
    }
}

impl From<IndexError> for AppError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::DimMismatch { .. } | IndexError::ZeroDim => AppError::Usage(format!("index: {e}")),
            other => AppError::Data(format!("index: {other}")),
        }
    }
}

impl From<NoteLoadError> for AppError {
    fn from(e: NoteLoadError) -> Self {
        match e {
            NoteLoadError::Io(source) => AppError::io("notes", source),
            other => AppError::Data(other.to_string()),
        }
    }
}

impl From<TranscriptError> for AppError {
    fn from(e: TranscriptError) -> Self {
        AppError::Data(format!("mock transcript: {e}"))
    }
}

impl From<PromptError> for AppError {
    fn from(e: PromptError) -> Self {
        AppError::Usage(e.to_string())
    }
}

impl From<ReportError> for AppError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Io(source) => AppError::io("run directory", source),
            other => AppError::Data(other.to_string()),
        }
    }
}

impl From<StageError> for AppError {
    fn from(e: StageError) -> Self {
        match e {
            StageError::Config(m) => AppError::Usage(m),
            other => AppError::Data(other.to_string()),
        }
    }
}

/// Loads the layered configuration using the process environment.
pub fn load_config(file: Option<&Path>, overrides: &Overrides) -> Result<Config, AppError> {
    Ok(Config::resolve(file, &process_env, overrides)?)
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<(), AppError> {
    if path.exists() && !force {
        return Err(AppError::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

/// Path of the fingerprint file written next to a chunk store.
pub fn fingerprint_path(store: &Path) -> PathBuf {
    let mut name = store.file_name().unwrap_or_default().to_os_string();
    name.push(".sha256");
    store.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestSummary {
    pub docs: usize,
    pub skipped: usize,
    pub chunks: usize,
    pub fingerprint: String,
}

/// Corpus JSONL to a chunk store plus its fingerprint sidecar.
pub fn cmd_ingest(corpus: &Path, out: &Path, cfg: &Config, force: bool) -> Result<IngestSummary, AppError> {
    refuse_overwrite(out, force)?;
    let params = cfg.chunk_params()?;
    let loaded = load_corpus(corpus, &cfg.corpus.fields, cfg.strictness())?;
    for e in &loaded.skipped {
        log::warn!("skipped corpus record: {e}");
    }
    if loaded.docs.is_empty() {
        return Err(AppError::Data(format!("corpus {} contains no valid documents", corpus.display())));
    }
    let store = ChunkStore::new(chunk_corpus(&loaded.docs, params));
    store.save(out).map_err(|e| AppError::io(format!("writing {}", out.display()), e))?;
    let fingerprint = store.fingerprint();
    let fp_path = fingerprint_path(out);
    std::fs::write(&fp_path, format!("{fingerprint}\n"))
        .map_err(|e| AppError::io(format!("writing {}", fp_path.display()), e))?;
    Ok(IngestSummary {
        docs: loaded.docs.len(),
        skipped: loaded.skipped.len(),
        chunks: store.len(),
        fingerprint,
    })
}

fn load_store(path: &Path) -> Result<ChunkStore, AppError> {
    ChunkStore::load(path).map_err(|e| match e {
        CorpusError::Io(source) => AppError::io(format!("reading chunk store {}", path.display()), source),
        other => AppError::Data(format!("chunk store {}: {other}", path.display())),
    })
}

fn read_index(path: &Path) -> Result<VectorIndex, AppError> {
    load_index(path).map_err(|e| match e {
        IndexFormatError::Io(source) => AppError::io(format!("reading index {}", path.display()), source),
        other => AppError::Data(format!("index {}: {other}", path.display())),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSummary {
    pub entries: usize,
    pub dim: usize,
    pub embedder_id: String,
}

/// Embeds every chunk and writes the index. `built_at` is recorded only
/// when given, so identical inputs produce identical files.
pub fn cmd_index(
    chunks: &Path,
    out: &Path,
    cfg: &Config,
    force: bool,
    built_at: Option<String>,
) -> Result<IndexSummary, AppError> {
    refuse_overwrite(out, force)?;
    let store = load_store(chunks)?;
    let embedder = build_embedder(&cfg.embedding)?;
    let index = build_index(&store, embedder.as_ref(), built_at)?;
    save_index(&index, out)?;
    Ok(IndexSummary {
        entries: index.len(),
        dim: index.dim(),
        embedder_id: index.metadata().embedder_id.clone(),
    })
}

pub fn build_index(
    store: &ChunkStore,
    embedder: &dyn Embedder,
    built_at: Option<String>,
) -> Result<VectorIndex, AppError> {
    let metadata = IndexMetadata {
        corpus_fingerprint: store.fingerprint(),
        embedder_id: embedder.identity(),
        built_at,
    };
    if store.is_empty() {
        return Ok(VectorIndex::empty(embedder.dim(), metadata)?);
    }
    let texts: Vec<String> = store.chunks().iter().map(|c| c.text.clone()).collect();
    let vectors = embedder.embed_texts(&texts)?;
    let entries = store
        .chunks()
        .iter()
        .zip(vectors)
        .map(|(c, vector)| IndexEntry {
            chunk_ref: c.chunk_ref(),
            vector,
        });
    Ok(VectorIndex::build(embedder.dim(), metadata, entries)?)
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub notes: PathBuf,
    pub index: PathBuf,
    pub chunks: PathBuf,
    /// Parent of the run directory.
    pub out: PathBuf,
    pub run_id: Option<String>,
    pub keep_going: bool,
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub run_dir: PathBuf,
    pub run: RunReport,
    pub reports: Vec<NoteReport>,
    pub failures: Vec<String>,
    pub keep_going: bool,
}

impl EvalSummary {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() || self.keep_going {
            EXIT_OK
        } else {
            EXIT_EVAL_FAILURES
        }
    }
}

fn build_llm(cfg: &Config) -> Result<Box<dyn ChatBackend>, AppError> {
    match cfg.llm.backend {
        LlmBackend::Mock => {
            let path = cfg
                .llm
                .mock_transcript
                .as_deref()
                .ok_or_else(|| AppError::Usage("the mock LLM backend needs a transcript".into()))?;
            Ok(Box::new(MockBackend::load(path)?))
        }
        LlmBackend::Remote => {
            if cfg.llm.base_url.trim().is_empty() {
                return Err(AppError::Usage(
                    "the remote LLM backend needs llm.base_url (or GG_BASE_URL)".into(),
                ));
            }
            let key = process_env(&cfg.llm.api_key_env);
            Ok(Box::new(RemoteChat::new(&cfg.llm.remote_config(), key)))
        }
    }
}

fn run_id_from(clock: &dyn Clock) -> String {
    format!("run-{}", clock.now().format("%Y%m%dT%H%M%SZ"))
}

/// Evaluates all notes and writes `<out>/<run-id>/`.
///
/// Inputs are loaded and cross-checked before any model call.
pub fn cmd_eval(args: &EvalArgs, cfg: &Config, clock: &dyn Clock) -> Result<EvalSummary, AppError> {
    let index = read_index(&args.index)?;
    let store = load_store(&args.chunks)?;
    if index.metadata().corpus_fingerprint != store.fingerprint() {
        return Err(AppError::Data(format!(
            "index {} was built from a different chunk store than {}",
            args.index.display(),
            args.chunks.display()
        )));
    }
    let notes = load_notes(&args.notes)?;
    let embedder = build_embedder(&cfg.embedding)?;
    if embedder.identity() != index.metadata().embedder_id || embedder.dim() != index.dim() {
        return Err(AppError::Usage(format!(
            "index was built by `{}` (dim {}), but the configured embedder is `{}` (dim {})",
            index.metadata().embedder_id,
            index.dim(),
            embedder.identity(),
            embedder.dim()
        )));
    }
    let prompts = match &cfg.pipeline.prompt_dir {
        Some(dir) => Prompts::load_dir(dir)?,
        None => Prompts::default(),
    };
    let llm = build_llm(cfg)?;
    let run_id = args.run_id.clone().unwrap_or_else(|| run_id_from(clock));
    let run_dir = args.out.join(&run_id);
    if run_dir.exists() && !args.force {
        return Err(AppError::Usage(format!(
            "run directory {} already exists; pass --force to overwrite",
            run_dir.display()
        )));
    }

    let pipeline_cfg = cfg.pipeline_config();
    let deps = PipelineDeps {
        index: &index,
        chunks: &store,
        embedder: embedder.as_ref(),
        llm: llm.as_ref(),
        prompts: &prompts,
        config: &pipeline_cfg,
        clock,
    };
    let reports = evaluate_batch(&notes, &deps, cfg.pipeline.workers)?;

    let snapshot = ConfigSnapshot {
        embedder_id: embedder.identity(),
        query_mode: cfg.query_mode(),
        k: cfg.pipeline.k,
        llm_model: llm.model_name(),
        corpus_fingerprint: store.fingerprint(),
        prompt_version: PROMPT_VERSION.into(),
    };
    let run = RunReport::new(&run_id, &rfc3339(clock.now()), snapshot, &reports);
    if run_dir.exists() {
        std::fs::remove_dir_all(&run_dir).map_err(|e| AppError::io(format!("clearing {}", run_dir.display()), e))?;
    }
    write_run_dir(&run_dir, &run, &reports)?;
    Ok(EvalSummary {
        run_dir,
        failures: failure_summary(&reports),
        run,
        reports,
        keep_going: args.keep_going,
    })
}

/// Re-reads a run directory, checks every score and specialty row against
/// the stored judgments, and renders the table.
pub fn cmd_report(run_dir: &Path, format: TableFormat) -> Result<String, AppError> {
    let (run, reports) = read_run_dir(run_dir)?;
    for r in &reports {
        if let Some(judgments) = &r.judgments {
            if r.score != Some(NoteScore::from_judgments(judgments)) {
                return Err(AppError::Data(format!(
                    "note `{}`: stored score does not match its judgments",
                    r.note_id
                )));
            }
        }
    }
    run.verify_rows(&reports)?;
    Ok(emit_table(&run.specialties, format))
}

/// Directory holding the bundled self-test fixture.
pub fn default_fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("selftest")
}

#[derive(Debug, Clone)]
pub struct SelftestSummary {
    pub table: String,
    /// Files that differ from, or are missing relative to, the goldens.
    pub mismatches: Vec<String>,
    pub checked_files: usize,
}

impl SelftestSummary {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Relative paths of all files under `root`, sorted.
pub fn list_files(root: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    collect_files(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

fn first_difference(expected: &str, actual: &str) -> String {
    let mut exp = expected.lines();
    let mut act = actual.lines();
    for line in 1.. {
        match (exp.next(), act.next()) {
            (Some(e), Some(a)) if e == a => continue,
            (None, None) => return "trailing bytes differ".into(),
            (e, a) => {
                return format!(
                    "line {line}: expected {:?}, got {:?}",
                    e.unwrap_or("<end of file>"),
                    a.unwrap_or("<end of file>")
                )
            }
        }
    }
    unreachable!()
}

/// Compares two directory trees file by file.
pub fn compare_trees(golden: &Path, actual: &Path) -> std::io::Result<(usize, Vec<String>)> {
    let expected = list_files(golden)?;
    let produced = list_files(actual)?;
    let mut mismatches = Vec::new();
    for rel in &expected {
        let want = std::fs::read(golden.join(rel))?;
        match std::fs::read(actual.join(rel)) {
            Err(_) => mismatches.push(format!("{}: missing from output", rel.display())),
            Ok(got) if got != want => mismatches.push(format!(
                "{}: {}",
                rel.display(),
                first_difference(&String::from_utf8_lossy(&want), &String::from_utf8_lossy(&got))
            )),
            Ok(_) => {}
        }
    }
    for rel in produced.iter().filter(|p| !expected.contains(p)) {
        mismatches.push(format!("{}: not in goldens", rel.display()));
    }
    Ok((expected.len(), mismatches))
}

/// Paths of the pieces of a self-test fixture directory.
pub struct Fixture {
    pub dir: PathBuf,
}

impl Fixture {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.jsonl")
    }
    pub fn notes(&self) -> PathBuf {
        self.dir.join("notes.jsonl")
    }
    pub fn golden(&self) -> PathBuf {
        self.dir.join("golden")
    }
}

/// Runs corpus → index → eval into `work`, returning the run directory.
/// Configuration comes from the fixture alone; the environment is ignored.
pub fn run_fixture(fixture: &Fixture, work: &Path) -> Result<PathBuf, AppError> {
    if !fixture.dir.is_dir() {
        return Err(AppError::Usage(format!(
            "fixture directory {} does not exist",
            fixture.dir.display()
        )));
    }
    let cfg = Config::resolve(Some(&fixture.config()), &|_| None, &Overrides::default())?;
    std::fs::create_dir_all(work).map_err(|e| AppError::io(format!("creating {}", work.display()), e))?;
    let chunks = work.join("chunks.jsonl");
    let index = work.join("index.ggix");
    cmd_ingest(&fixture.corpus(), &chunks, &cfg, true)?;
    cmd_index(&chunks, &index, &cfg, true, None)?;
    let args = EvalArgs {
        notes: fixture.notes(),
        index,
        chunks,
        out: work.join("runs"),
        run_id: Some(SELFTEST_RUN_ID.into()),
        keep_going: false,
        force: true,
    };
    let summary = cmd_eval(&args, &cfg, &FixedClock::from_unix(SELFTEST_EPOCH))?;
    if !summary.failures.is_empty() {
        return Err(AppError::Data(format!(
            "self-test notes failed: {}",
            summary.failures.join("; ")
        )));
    }
    Ok(summary.run_dir)
}

/// Runs the bundled fixture offline and compares the run directory with
/// the checked-in goldens.
pub fn cmd_selftest(fixture_dir: &Path, work: &Path) -> Result<SelftestSummary, AppError> {
    let fixture = Fixture::new(fixture_dir);
    let run_dir = run_fixture(&fixture, work)?;
    if !fixture.golden().is_dir() {
        return Err(AppError::Usage(format!(
            "golden directory {} does not exist",
            fixture.golden().display()
        )));
    }
    let (checked_files, mismatches) =
        compare_trees(&fixture.golden(), &run_dir).map_err(|e| AppError::io("comparing goldens", e))?;
    Ok(SelftestSummary {
        table: cmd_report(&run_dir, TableFormat::Text)?,
        mismatches,
        checked_files,
    })
}
