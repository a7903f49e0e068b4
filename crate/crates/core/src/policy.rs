//! Policy question answering over the vector index.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatMessage, CompletionParams, Gateway, GatewayError};
use crate::vector::{ChunkingConfig, ScoredChunk, UpsertOutcome, VectorError, VectorStore, DEFAULT_TOP_K};

/// Below this top cosine score the answer carries a low-confidence note.
/// Calibrated on the fixture corpus with the default hashing embedder.
pub const DEFAULT_LOW_CONFIDENCE: f64 = 0.12;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no .md or .txt files in {0}")]
    EmptyCorpus(PathBuf),
    #[error("query is empty")]
    EmptyQuery,
    #[error("no policy documents are indexed")]
    EmptyStore,
    #[error("cannot read {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub docs: usize,
    pub chunks: usize,
    pub indexed: Vec<String>,
    pub unchanged: Vec<String>,
    /// `(file name, reason)` for files that could not be ingested.
    pub failed: Vec<(String, String)>,
}

/// First `# ` heading, else the file stem.
pub fn document_title(text: &str, path: &Path) -> String {
    text.lines()
        .map(str::trim)
        .find_map(|l| l.strip_prefix("# "))
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
}

fn policy_files(dir: &Path) -> Result<Vec<PathBuf>, PolicyError> {
    let entries = fs::read_dir(dir).map_err(|e| PolicyError::Io(dir.to_path_buf(), e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("md") || e.eq_ignore_ascii_case("txt"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Indexes every `.md` / `.txt` file in `dir` (sorted by name). The file
/// name is the document id. Unchanged files are skipped; unreadable files
/// are reported and the rest proceed.
pub fn ingest_policies(
    dir: impl AsRef<Path>,
    store: &mut VectorStore,
    chunking: ChunkingConfig,
) -> Result<IngestReport, PolicyError> {
    let dir = dir.as_ref();
    let files = policy_files(dir)?;
    if files.is_empty() {
        return Err(PolicyError::EmptyCorpus(dir.to_path_buf()));
    }
    let mut report = IngestReport::default();
    for path in files {
        let doc_id = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => {
                tracing::warn!(doc = %doc_id, error = %e, "skipping policy file");
                report.failed.push((doc_id, e.to_string()));
                continue;
            }
        };
        let title = document_title(&text, &path);
        match store.upsert_document(&doc_id, &title, &text, chunking) {
            Ok(outcome) => {
                report.docs += 1;
                report.chunks += outcome.chunks();
                match outcome {
                    UpsertOutcome::Indexed { .. } => report.indexed.push(doc_id),
                    UpsertOutcome::Unchanged { .. } => report.unchanged.push(doc_id),
                }
            }
            Err(e @ VectorError::InvalidChunking { .. }) => return Err(e.into()),
            Err(e) => report.failed.push((doc_id, e.to_string())),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Citation {
    pub doc_id: String,
    pub chunk_id: String,
    pub title: String,
    pub char_span: (usize, usize),
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAnswer {
    pub answer_text: String,
    pub citations: Vec<Citation>,
    /// Retrieved chunk texts, only when sources were requested.
    pub raw_segments: Option<Vec<String>>,
    pub confidence_note: Option<String>,
}

impl PolicyAnswer {
    /// Answer followed by the note and the cited sections, for chat.
    pub fn display_text(&self) -> String {
        let mut out = self.answer_text.clone();
        if let Some(note) = &self.confidence_note {
            out.push_str("\n\n");
            out.push_str(note);
        }
        if !self.citations.is_empty() {
            let mut titles: Vec<&str> = Vec::new();
            for c in &self.citations {
                if !titles.contains(&c.title.as_str()) {
                    titles.push(&c.title);
                }
            }
            out.push_str("\n\nSources: ");
            out.push_str(&titles.join("; "));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyQueryOptions {
    pub k: usize,
    pub include_sources: bool,
    pub low_confidence: f64,
}

impl Default for PolicyQueryOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_TOP_K,
            include_sources: false,
            low_confidence: DEFAULT_LOW_CONFIDENCE,
        }
    }
}

const ANSWER_SYSTEM: &str = "You answer questions about a transit agency's policies. \
Use only the policy excerpts provided; do not use any outside knowledge. \
If the excerpts do not answer the question, say so plainly. Answer directly and briefly, and name the policy you relied on.";

fn excerpt_block(hits: &[ScoredChunk]) -> String {
    hits.iter()
        .enumerate()
        .map(|(i, h)| format!("[{}] {} ({})\n{}", i + 1, h.chunk.title, h.chunk.chunk_id, h.chunk.text.trim()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Retrieves the `k` best chunks and asks the model for an answer grounded
/// on them. Always yields an answer or an explicit low-confidence response.
pub fn answer_policy_query(
    query: &str,
    options: PolicyQueryOptions,
    store: &VectorStore,
    gateway: &Gateway,
) -> Result<PolicyAnswer, PolicyError> {
    let query = query.trim();
    if query.is_empty() {
        return Err(PolicyError::EmptyQuery);
    }
    if store.is_empty() {
        return Err(PolicyError::EmptyStore);
    }
    let hits = store.search(query, options.k.max(1))?;
    if hits.is_empty() {
        return Err(PolicyError::EmptyStore);
    }
    let top = hits[0].score;
    let confidence_note = (top < options.low_confidence).then(|| {
        format!(
            "Note: none of the policy documents closely match this question (best match score {top:.2}); the sections below are the nearest ones, so please check them or contact customer service."
        )
    });

    let messages = [
        ChatMessage::system(ANSWER_SYSTEM),
        ChatMessage::user(format!("Policy excerpts:\n{}\n\nQuestion: {query}", excerpt_block(&hits))),
    ];
    let reply = gateway.complete(&messages, &CompletionParams::strict())?;
    let answer_text = match reply.text.trim() {
        "" => format!(
            "I couldn't find a clear answer to that in the policy documents. The closest section is \"{}\".",
            hits[0].chunk.title
        ),
        t => t.to_string(),
    };
    let citations = hits
        .iter()
        .map(|h| Citation {
            doc_id: h.chunk.doc_id.clone(),
            chunk_id: h.chunk.chunk_id.clone(),
            title: h.chunk.title.clone(),
            char_span: h.chunk.char_span,
            score: h.score,
        })
        .collect();
    let raw_segments = options
        .include_sources
        .then(|| hits.iter().map(|h| h.chunk.text.clone()).collect());
    Ok(PolicyAnswer {
        answer_text,
        citations,
        raw_segments,
        confidence_note,
    })
}
