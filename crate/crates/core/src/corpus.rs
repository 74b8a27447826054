//! Guideline corpus ingestion and chunking.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Publisher of a guideline article.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Source {
    Cco,
    Cdc,
    Cma,
    Icrc,
    Nice,
    PubMed,
    Spor,
    Who,
    WikiDoc,
    Other(String),
}

impl Source {
    /// Maps a source label to a known publisher, case-insensitively.
    /// Unknown labels are kept verbatim in [`Source::Other`].
    pub fn parse(label: &str) -> Self {
        match label.trim().to_ascii_lowercase().as_str() {
            "cco" => Source::Cco,
            "cdc" => Source::Cdc,
            "cma" => Source::Cma,
            "icrc" => Source::Icrc,
            "nice" => Source::Nice,
            "pubmed" => Source::PubMed,
            "spor" => Source::Spor,
            "who" => Source::Who,
            "wikidoc" => Source::WikiDoc,
            _ => Source::Other(label.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Source::Cco => "CCO",
            Source::Cdc => "CDC",
            Source::Cma => "CMA",
            Source::Icrc => "ICRC",
            Source::Nice => "NICE",
            Source::PubMed => "PubMed",
            Source::Spor => "SPOR",
            Source::Who => "WHO",
            Source::WikiDoc => "WikiDoc",
            Source::Other(label) => label,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Source {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let label = String::deserialize(d)?;
        Ok(Source::parse(&label))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineDoc {
    pub id: String,
    pub source: Source,
    pub title: String,
    pub body: String,
}

/// JSON key names for the logical document fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldMap {
    pub id: String,
    pub source: String,
    pub title: String,
    pub text: String,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            source: "source".into(),
            title: "title".into(),
            text: "text".into(),
        }
    }
}

/// What to do with a record that fails to parse or validate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    #[default]
    Abort,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordErrorKind {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("line is not a JSON object")]
    NotAnObject,
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("key `{0}` is not a string")]
    NotAString(String),
    #[error("empty id")]
    EmptyId,
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("empty body")]
    EmptyBody,
}

/// A record-level failure, tagged with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct RecordError {
    pub line: usize,
    pub kind: RecordErrorKind,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading corpus: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("corpus contains no documents")]
    Empty,
    #[error("chunk store line {line}: {reason}")]
    ChunkStore { line: usize, reason: String },
}

/// Streams [`GuidelineDoc`]s out of a JSONL reader, one per non-blank line.
///
/// Duplicate ids are reported against the later line.
pub struct CorpusReader<R> {
    lines: io::Lines<R>,
    line_no: usize,
    field_map: FieldMap,
    seen: HashSet<String>,
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R, field_map: FieldMap) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
            field_map,
            seen: HashSet::new(),
        }
    }

    fn parse_line(&mut self, line: &str) -> Result<GuidelineDoc, RecordErrorKind> {
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| RecordErrorKind::MalformedJson(e.to_string()))?;
        let obj = value.as_object().ok_or(RecordErrorKind::NotAnObject)?;
        let get = |key: &str, required: bool| -> Result<String, RecordErrorKind> {
            match obj.get(key) {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                Some(serde_json::Value::Null) | None if !required => Ok(String::new()),
                Some(_) => Err(RecordErrorKind::NotAString(key.to_string())),
                None => Err(RecordErrorKind::MissingKey(key.to_string())),
            }
        };
        let fm = &self.field_map;
        let id = get(&fm.id, true)?;
        let source = get(&fm.source, true)?;
        let title = get(&fm.title, false)?;
        let body = get(&fm.text, true)?;
        if id.trim().is_empty() {
            return Err(RecordErrorKind::EmptyId);
        }
        if body.trim().is_empty() {
            return Err(RecordErrorKind::EmptyBody);
        }
        if !self.seen.insert(id.clone()) {
            return Err(RecordErrorKind::DuplicateId(id));
        }
        Ok(GuidelineDoc {
            id,
            source: Source::parse(&source),
            title,
            body,
        })
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<GuidelineDoc, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let line_no = self.line_no;
            return Some(self.parse_line(&line).map_err(|kind| {
                RecordError {
                    line: line_no,
                    kind,
                }
                .into()
            }));
        }
    }
}

/// Documents loaded under [`Strictness::Skip`], plus the records that were skipped.
#[derive(Debug, Default)]
pub struct LoadedCorpus {
    pub docs: Vec<GuidelineDoc>,
    pub skipped: Vec<RecordError>,
}

pub fn load_corpus(
    path: &Path,
    field_map: &FieldMap,
    strictness: Strictness,
) -> Result<LoadedCorpus, CorpusError> {
    let file = File::open(path)?;
    read_corpus(BufReader::new(file), field_map, strictness)
}

pub fn read_corpus<R: BufRead>(
    reader: R,
    field_map: &FieldMap,
    strictness: Strictness,
) -> Result<LoadedCorpus, CorpusError> {
    let mut out = LoadedCorpus::default();
    for item in CorpusReader::new(reader, field_map.clone()) {
        match item {
            Ok(doc) => out.docs.push(doc),
            Err(CorpusError::Record(e)) if strictness == Strictness::Skip => {
                log::warn!("skipping corpus record: {e}");
                out.skipped.push(e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Splits on Unicode whitespace. Never yields empty tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkParamsError {
    #[error("chunk_size must be positive")]
    ZeroChunkSize,
    #[error("overlap ({overlap}) must be smaller than chunk_size ({chunk_size})")]
    OverlapTooLarge { chunk_size: usize, overlap: usize },
}

/// Chunk window size and overlap, in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkParams {
    chunk_size: usize,
    overlap: usize,
}

impl ChunkParams {
    pub fn new(chunk_size: usize, overlap: usize) -> Result<Self, ChunkParamsError> {
        if chunk_size == 0 {
            return Err(ChunkParamsError::ZeroChunkSize);
        }
        if overlap >= chunk_size {
            return Err(ChunkParamsError::OverlapTooLarge {
                chunk_size,
                overlap,
            });
        }
        Ok(Self {
            chunk_size,
            overlap,
        })
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    pub fn stride(&self) -> usize {
        self.chunk_size - self.overlap
    }
}

impl Default for ChunkParams {
    fn default() -> Self {
        Self {
            chunk_size: 512,
            overlap: 64,
        }
    }
}

/// Half-open token interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Identifies one chunk of one document. Renders as `doc_id/chunk_index`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkRef {
    pub doc_id: String,
    pub chunk_index: u32,
}

impl ChunkRef {
    pub fn new(doc_id: impl Into<String>, chunk_index: u32) -> Self {
        Self {
            doc_id: doc_id.into(),
            chunk_index,
        }
    }
}

impl fmt::Display for ChunkRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.doc_id, self.chunk_index)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid chunk reference `{0}` (expected `doc_id/chunk_index`)")]
pub struct ChunkRefParseError(pub String);

impl FromStr for ChunkRef {
    type Err = ChunkRefParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (doc, idx) = s
            .rsplit_once('/')
            .ok_or_else(|| ChunkRefParseError(s.to_string()))?;
        if doc.is_empty() {
            return Err(ChunkRefParseError(s.to_string()));
        }
        let idx = idx
            .parse::<u32>()
            .map_err(|_| ChunkRefParseError(s.to_string()))?;
        Ok(ChunkRef::new(doc, idx))
    }
}

impl Serialize for ChunkRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ChunkRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub chunk_index: u32,
    pub source: Source,
    pub token_span: Span,
    pub text: String,
}

impl Chunk {
    pub fn chunk_ref(&self) -> ChunkRef {
        ChunkRef::new(self.doc_id.clone(), self.chunk_index)
    }
}

/// Token spans for a document of `len` tokens.
///
/// Window `i` starts at `i * stride`; windowing stops once a window reaches
/// the end of the document, so a document that fits in one window yields
/// exactly one span.
pub fn chunk_spans(len: usize, params: ChunkParams) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + params.chunk_size).min(len);
        spans.push(Span { start, end });
        if end == len {
            break;
        }
        start += params.stride();
    }
    spans
}

pub fn chunk_doc(doc: &GuidelineDoc, params: ChunkParams) -> Vec<Chunk> {
    let tokens = tokenize(&doc.body);
    chunk_spans(tokens.len(), params)
        .into_iter()
        .enumerate()
        .map(|(i, span)| Chunk {
            doc_id: doc.id.clone(),
            chunk_index: i as u32,
            source: doc.source.clone(),
            token_span: span,
            text: tokens[span.start..span.end].join(" "),
        })
        .collect()
}

/// Chunks for a whole corpus, in document order.
pub fn chunk_corpus(docs: &[GuidelineDoc], params: ChunkParams) -> Vec<Chunk> {
    crate::par::map_slice(docs, |d| chunk_doc(d, params))
        .into_iter()
        .flatten()
        .collect()
}

/// The ingested chunk set, kept in build order and addressable by [`ChunkRef`].
#[derive(Debug, Clone, Default)]
pub struct ChunkStore {
    chunks: Vec<Chunk>,
    by_ref: HashMap<ChunkRef, usize>,
}

impl ChunkStore {
    pub fn new(chunks: Vec<Chunk>) -> Self {
        let by_ref = chunks
            .iter()
            .enumerate()
            .map(|(i, c)| (c.chunk_ref(), i))
            .collect();
        Self { chunks, by_ref }
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn get(&self, r: &ChunkRef) -> Option<&Chunk> {
        self.by_ref.get(r).map(|&i| &self.chunks[i])
    }

    /// JSONL rendering, one chunk per line.
    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for c in &self.chunks {
            serde_json::to_writer(&mut out, c).expect("chunk serializes");
            out.push(b'\n');
        }
        out
    }

    pub fn from_jsonl(bytes: &[u8]) -> Result<Self, CorpusError> {
        let mut chunks = Vec::new();
        for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let chunk: Chunk =
                serde_json::from_slice(line).map_err(|e| CorpusError::ChunkStore {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            chunks.push(chunk);
        }
        let store = Self::new(chunks);
        if store.by_ref.len() != store.chunks.len() {
            return Err(CorpusError::ChunkStore {
                line: 0,
                reason: "duplicate chunk references".into(),
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut f = File::create(path)?;
        f.write_all(&self.to_jsonl())?;
        f.sync_all()
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::from_jsonl(&std::fs::read(path)?)
    }

    /// SHA-256 of the JSONL rendering, hex encoded.
    pub fn fingerprint(&self) -> String {
        fingerprint_bytes(&self.to_jsonl())
    }
}

pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(body: &str) -> GuidelineDoc {
        GuidelineDoc {
            id: "d".into(),
            source: Source::Who,
            title: String::new(),
            body: body.into(),
        }
    }

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn maps_fields_and_sources() {
        let input = "{\"id\":\"w1\",\"source\":\"WHO\",\"title\":\"T\",\"text\":\"body\"}\n\
                     {\"id\":\"x\",\"source\":\"FooOrg\",\"text\":\"b\",\"extra\":1}\n";
        let loaded = read_corpus(input.as_bytes(), &FieldMap::default(), Strictness::Abort).unwrap();
        assert_eq!(
            loaded.docs[0],
            GuidelineDoc {
                id: "w1".into(),
                source: Source::Who,
                title: "T".into(),
                body: "body".into()
            }
        );
        assert_eq!(loaded.docs[1].source, Source::Other("FooOrg".into()));
        assert_eq!(loaded.docs[1].title, "");
    }

    #[test]
    fn custom_field_map() {
        let fm = FieldMap {
            text: "clean_text".into(),
            ..FieldMap::default()
        };
        let input = r#"{"id":"a","source":"nice","clean_text":"hello there"}"#;
        let loaded = read_corpus(input.as_bytes(), &fm, Strictness::Abort).unwrap();
        assert_eq!(loaded.docs[0].body, "hello there");
        assert_eq!(loaded.docs[0].source, Source::Nice);
    }

    #[test]
    fn skip_reports_line_numbers() {
        let input = "{\"id\":\"a\",\"source\":\"WHO\",\"text\":\"x\"}\n{oops\n{\"id\":\"b\",\"source\":\"CDC\",\"text\":\"y\"}\n";
        let loaded = read_corpus(input.as_bytes(), &FieldMap::default(), Strictness::Skip).unwrap();
        assert_eq!(loaded.docs.len(), 2);
        assert_eq!(loaded.skipped.len(), 1);
        assert_eq!(loaded.skipped[0].line, 2);
        assert!(matches!(loaded.skipped[0].kind, RecordErrorKind::MalformedJson(_)));
    }

    #[test]
    fn abort_on_first_bad_record() {
        let input = "{\"id\":\"a\",\"source\":\"WHO\",\"text\":\"x\"}\n{\"id\":\"b\",\"source\":\"WHO\"}\n";
        let err = read_corpus(input.as_bytes(), &FieldMap::default(), Strictness::Abort).unwrap_err();
        match err {
            CorpusError::Record(RecordError { line, kind }) => {
                assert_eq!(line, 2);
                assert_eq!(kind, RecordErrorKind::MissingKey("text".into()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_ids_and_empty_bodies() {
        let input = "{\"id\":\"a\",\"source\":\"WHO\",\"text\":\"x\"}\n\
                     {\"id\":\"a\",\"source\":\"WHO\",\"text\":\"y\"}\n\
                     {\"id\":\"c\",\"source\":\"WHO\",\"text\":\"   \"}\n";
        let loaded = read_corpus(input.as_bytes(), &FieldMap::default(), Strictness::Skip).unwrap();
        assert_eq!(loaded.docs.len(), 1);
        assert_eq!(loaded.skipped[0].kind, RecordErrorKind::DuplicateId("a".into()));
        assert_eq!(loaded.skipped[1].kind, RecordErrorKind::EmptyBody);
    }

    #[test]
    fn tokenize_splits_on_unicode_whitespace() {
        assert_eq!(tokenize("a  b\nc"), vec!["a", "b", "c"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("x\u{00A0}y\u{2003}z"), vec!["x", "y", "z"]);
    }

    #[test]
    fn params_validate() {
        assert_eq!(ChunkParams::new(0, 0), Err(ChunkParamsError::ZeroChunkSize));
        assert!(ChunkParams::new(4, 4).is_err());
        assert_eq!(ChunkParams::new(4, 3).unwrap().stride(), 1);
    }

    #[test]
    fn spans_for_long_doc() {
        let chunks = chunk_doc(&doc(&words(1000)), ChunkParams::default());
        let spans: Vec<_> = chunks.iter().map(|c| (c.token_span.start, c.token_span.end)).collect();
        assert_eq!(spans, vec![(0, 512), (448, 960), (896, 1000)]);
        assert!(chunks[1].text.starts_with("w448 "));
        assert!(chunks[2].text.ends_with(" w999"));
    }

    #[test]
    fn short_and_exact_docs_yield_one_chunk() {
        let short = chunk_doc(&doc(&words(100)), ChunkParams::default());
        assert_eq!(short.len(), 1);
        assert_eq!(short[0].token_span, Span { start: 0, end: 100 });
        let exact = chunk_doc(&doc(&words(512)), ChunkParams::default());
        assert_eq!(exact.len(), 1);
        assert_eq!(exact[0].token_span, Span { start: 0, end: 512 });
    }

    #[test]
    fn empty_body_yields_no_chunks() {
        assert!(chunk_doc(&doc("  \n "), ChunkParams::default()).is_empty());
    }

    #[test]
    fn chunk_ref_round_trip() {
        let r: ChunkRef = "who-12/0".parse().unwrap();
        assert_eq!(r, ChunkRef::new("who-12", 0));
        assert_eq!(r.to_string(), "who-12/0");
        let nested: ChunkRef = "a/b/7".parse().unwrap();
        assert_eq!(nested.doc_id, "a/b");
        assert!("nope".parse::<ChunkRef>().is_err());
        assert!("x/-1".parse::<ChunkRef>().is_err());
    }

    #[test]
    fn store_round_trip_and_fingerprint() {
        let chunks = chunk_doc(&doc(&words(40)), ChunkParams::new(16, 4).unwrap());
        let store = ChunkStore::new(chunks);
        let back = ChunkStore::from_jsonl(&store.to_jsonl()).unwrap();
        assert_eq!(back.chunks(), store.chunks());
        assert_eq!(back.fingerprint(), store.fingerprint());
        assert_eq!(store.fingerprint().len(), 64);
        assert!(back.get(&ChunkRef::new("d", 1)).is_some());
    }
}
