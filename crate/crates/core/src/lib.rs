//! Guideline-adherence evaluation for medical notes.
//!
//! A note flows through four agents: an extractor pulls diagnoses and
//! treatments out of the note, a query agent writes retrieval queries, a
//! retriever runs exact cosine search over embedded guideline chunks, and a
//! scorer judges each diagnosis against the retrieved evidence. Judgments are
//! tallied into a `[0, 1]` adherence score and rendered as JSON, CSV and
//! Graphviz DOT.
//!
//! Everything runs offline with [`embedding::HashEmbedder`] and
//! [`llm::MockBackend`]; the remote backends speak the usual
//! `/embeddings` and `/chat/completions` HTTP protocols.
//!
//! The `parallel` feature (on by default) spreads search, batch embedding and
//! note evaluation across a rayon pool. Without it every path runs
//! sequentially and produces identical results.

pub mod app;
pub mod clock;
pub mod config;
pub mod corpus;
pub mod embedding;
mod http;
pub mod llm;
pub mod par;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod scoring;
pub mod vectorstore;

pub use corpus::{Chunk, ChunkParams, ChunkRef, GuidelineDoc, Source};
pub use embedding::{EmbedderConfig, EmbeddingVector};
pub use pipeline::{MedicalNote, NoteReport};
pub use scoring::{NoteScore, SpecialtyRow};
pub use vectorstore::{SearchHit, VectorIndex};
