//! Document chunking, text embedding and exact cosine top-k search.
//!
//! The default [`HashingEmbedder`] is a feature-hashed bag of words: text is
//! lowercased, split on non-alphanumerics, common function words
//! ([`STOPWORDS`]) are dropped, a plural `s` is folded away, each remaining
//! token is hashed (FNV-1a, 64 bit) into one of `D` buckets, counts are accumulated and the vector is
//! L2-normalized. Any other [`Embedder`] can be plugged into the store.
//!
//! Chunk offsets are character (Unicode scalar) offsets into the source.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_DIM: usize = 256;
pub const DEFAULT_MAX_CHUNK_CHARS: usize = 1200;
pub const DEFAULT_OVERLAP_CHARS: usize = 150;
pub const DEFAULT_TOP_K: usize = 4;

const INDEX_MAGIC: &[u8; 4] = b"TTVX";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VectorError {
    #[error("document is empty")]
    EmptyDocument,
    #[error("store has no searchable chunks")]
    EmptyStore,
    #[error("invalid chunking: max {max_chars}, overlap {overlap_chars}")]
    InvalidChunking {
        max_chars: usize,
        overlap_chars: usize,
    },
    #[error("k must be positive")]
    ZeroK,
    #[error("vector has dimension {got}, store expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index file: {0}")]
    Index(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyChunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub title: String,
    pub text: String,
    /// `[start, end)` in characters of the source document.
    pub char_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk: PolicyChunk,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Zero vector: the text had no tokens. Such vectors are never indexed
    /// for search.
    pub fn is_empty_embedding(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// Cosine similarity; 0 when either side is a zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Embedding;
}

#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

/// Function words skipped by [`HashingEmbedder`]; they carry no topic and
/// would otherwise dominate short queries.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "all", "am", "an", "and", "any", "are", "as", "at", "be", "by", "can", "could",
    "do", "does", "for", "from", "how", "i", "if", "in", "is", "it", "its", "may", "me", "my",
    "no", "not", "of", "on", "or", "our", "should", "so", "that", "the", "their", "there", "this",
    "to", "us", "was", "we", "what", "when", "where", "which", "who", "will", "with", "would",
    "you", "your",
];

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// "bikes" -> "bike"; leaves "bus", "class" and short tokens alone.
fn fold_plural(token: &str) -> &str {
    match token.strip_suffix('s') {
        Some(stem) if stem.len() >= 3 && !stem.ends_with(['s', 'u', 'i']) => stem,
        _ => token,
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Embedding {
        let mut values = vec![0.0; self.dim];
        for token in crate::textmatch::tokens(text) {
            if STOPWORDS.contains(&token.as_str()) {
                continue;
            }
            let token = fold_plural(&token);
            let bucket = (fnv1a(token.as_bytes()) % self.dim as u64) as usize;
            values[bucket] += 1.0;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        Embedding { values }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub max_chunk_chars: usize,
    pub overlap_chars: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            max_chunk_chars: DEFAULT_MAX_CHUNK_CHARS,
            overlap_chars: DEFAULT_OVERLAP_CHARS,
        }
    }
}

fn split_point(chars: &[char], pos: usize, max: usize, overlap: usize) -> usize {
    let hard = pos + max;
    let earliest = pos + (overlap + 1).max(max / 2);
    let window = (earliest..=hard).rev();
    // Paragraph break: the chunk ends just after a blank line.
    for end in window.clone() {
        if end >= 2 && chars[end - 1] == '\n' && chars[end - 2] == '\n' {
            return end;
        }
    }
    for end in window {
        if end >= 2 && chars[end - 1].is_whitespace() && matches!(chars[end - 2], '.' | '!' | '?')
        {
            return end;
        }
    }
    hard
}

/// Splits a document into overlapping chunks of at most `max_chunk_chars`
/// characters, preferring paragraph, then sentence boundaries.
pub fn chunk_document(
    doc_id: &str,
    title: &str,
    text: &str,
    config: ChunkingConfig,
) -> Result<Vec<PolicyChunk>, VectorError> {
    let ChunkingConfig {
        max_chunk_chars: max,
        overlap_chars: overlap,
    } = config;
    if max == 0 || overlap >= max {
        return Err(VectorError::InvalidChunking {
            max_chars: max,
            overlap_chars: overlap,
        });
    }
    if text.trim().is_empty() {
        return Err(VectorError::EmptyDocument);
    }
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut chunks = Vec::new();
    let mut pos = 0;
    loop {
        let end = if n - pos <= max {
            n
        } else {
            split_point(&chars, pos, max, overlap)
        };
        chunks.push(PolicyChunk {
            chunk_id: format!("{doc_id}#{:04}", chunks.len()),
            doc_id: doc_id.to_string(),
            title: title.to_string(),
            text: chars[pos..end].iter().collect(),
            char_span: (pos, end),
        });
        if end == n {
            break;
        }
        pos = end - overlap;
    }
    Ok(chunks)
}

/// Hex SHA-256 of a document, used to skip unchanged re-ingestion.
pub fn content_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone)]
struct IndexedChunk {
    chunk: PolicyChunk,
    vector: Embedding,
    doc_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsertOutcome {
    Unchanged { chunks: usize },
    Indexed { chunks: usize },
}

impl UpsertOutcome {
    pub fn chunks(self) -> usize {
        match self {
            Self::Unchanged { chunks } | Self::Indexed { chunks } => chunks,
        }
    }
}

/// Exact-scan vector index over policy chunks.
pub struct VectorStore {
    embedder: Arc<dyn Embedder>,
    chunks: Vec<IndexedChunk>,
}

impl std::fmt::Debug for VectorStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorStore")
            .field("dim", &self.embedder.dim())
            .field("chunks", &self.chunks.len())
            .finish()
    }
}

impl Default for VectorStore {
    fn default() -> Self {
        Self::new(Arc::new(HashingEmbedder::default()))
    }
}

impl VectorStore {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        Self {
            embedder,
            chunks: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    pub fn embed(&self, text: &str) -> Embedding {
        self.embedder.embed(text)
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn doc_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.chunks.iter().map(|c| c.chunk.doc_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&PolicyChunk> {
        self.chunks
            .iter()
            .find(|c| c.chunk.chunk_id == chunk_id)
            .map(|c| &c.chunk)
    }

    pub fn chunks(&self) -> impl Iterator<Item = &PolicyChunk> {
        self.chunks.iter().map(|c| &c.chunk)
    }

    /// Chunks, embeds and indexes a document, replacing any earlier version.
    /// A document whose content hash is unchanged is left as is.
    pub fn upsert_document(
        &mut self,
        doc_id: &str,
        title: &str,
        text: &str,
        config: ChunkingConfig,
    ) -> Result<UpsertOutcome, VectorError> {
        let hash = content_hash(text);
        let existing: Vec<&IndexedChunk> = self
            .chunks
            .iter()
            .filter(|c| c.chunk.doc_id == doc_id)
            .collect();
        if !existing.is_empty() && existing.iter().all(|c| c.doc_hash == hash) {
            return Ok(UpsertOutcome::Unchanged {
                chunks: existing.len(),
            });
        }
        let chunks = chunk_document(doc_id, title, text, config)?;
        self.chunks.retain(|c| c.chunk.doc_id != doc_id);
        let count = chunks.len();
        for chunk in chunks {
            let vector = self.embedder.embed(&chunk.text);
            self.chunks.push(IndexedChunk {
                chunk,
                vector,
                doc_hash: hash.clone(),
            });
        }
        Ok(UpsertOutcome::Indexed { chunks: count })
    }

    /// Indexes a chunk with a caller-supplied vector.
    pub fn insert_with_vector(
        &mut self,
        chunk: PolicyChunk,
        vector: Embedding,
    ) -> Result<(), VectorError> {
        if vector.dim() != self.dim() {
            return Err(VectorError::DimensionMismatch {
                expected: self.dim(),
                got: vector.dim(),
            });
        }
        self.chunks.retain(|c| c.chunk.chunk_id != chunk.chunk_id);
        self.chunks.push(IndexedChunk {
            doc_hash: String::new(),
            chunk,
            vector,
        });
        Ok(())
    }

    pub fn search(&self, query: &str, k: usize) -> Result<Vec<ScoredChunk>, VectorError> {
        self.search_vector(&self.embedder.embed(query), k)
    }

    /// Exact top-k by cosine similarity, ties by chunk id.
    pub fn search_vector(&self, query: &Embedding, k: usize) -> Result<Vec<ScoredChunk>, VectorError> {
        if k == 0 {
            return Err(VectorError::ZeroK);
        }
        if query.dim() != self.dim() {
            return Err(VectorError::DimensionMismatch {
                expected: self.dim(),
                got: query.dim(),
            });
        }
        let mut scored: Vec<(f64, &PolicyChunk)> = self
            .chunks
            .iter()
            .filter(|c| !c.vector.is_empty_embedding())
            .map(|c| (cosine(&query.values, &c.vector.values), &c.chunk))
            .collect();
        if scored.is_empty() {
            return Err(VectorError::EmptyStore);
        }
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.chunk_id.cmp(&b.1.chunk_id))
        });
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(score, chunk)| ScoredChunk {
                chunk: chunk.clone(),
                score,
            })
            .collect())
    }

    /// Writes the whole index to `path` (via a temporary file and rename).
    ///
    /// Layout, little-endian: magic `TTVX`, version u32, dimension u32,
    /// record count u64, then per chunk the strings doc_id, doc_hash,
    /// chunk_id, title, text (u32 byte length + UTF-8), span start and end
    /// (u64 each) and `dimension` f64 values.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VectorError> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.chunks.len() as u64).to_le_bytes());
        for c in &self.chunks {
            for s in [
                &c.chunk.doc_id,
                &c.doc_hash,
                &c.chunk.chunk_id,
                &c.chunk.title,
                &c.chunk.text,
            ] {
                buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
                buf.extend_from_slice(s.as_bytes());
            }
            buf.extend_from_slice(&(c.chunk.char_span.0 as u64).to_le_bytes());
            buf.extend_from_slice(&(c.chunk.char_span.1 as u64).to_le_bytes());
            for v in &c.vector.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&buf)?;
        file.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    /// Loads an index written by [`VectorStore::save`]. The embedder must
    /// have the dimension recorded in the file.
    pub fn load(path: impl AsRef<Path>, embedder: Arc<dyn Embedder>) -> Result<Self, VectorError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4)? != INDEX_MAGIC {
            return Err(VectorError::Index("bad magic".into()));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(VectorError::Index(format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        if dim != embedder.dim() {
            return Err(VectorError::DimensionMismatch {
                expected: embedder.dim(),
                got: dim,
            });
        }
        let count = r.u64()?;
        let mut chunks = Vec::new();
        for _ in 0..count {
            let doc_id = r.string()?;
            let doc_hash = r.string()?;
            let chunk_id = r.string()?;
            let title = r.string()?;
            let text = r.string()?;
            let start = r.u64()? as usize;
            let end = r.u64()? as usize;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            chunks.push(IndexedChunk {
                chunk: PolicyChunk {
                    chunk_id,
                    doc_id,
                    title,
                    text,
                    char_span: (start, end),
                },
                vector: Embedding { values },
                doc_hash,
            });
        }
        if r.pos != bytes.len() {
            return Err(VectorError::Index("trailing bytes".into()));
        }
        Ok(Self { embedder, chunks })
    }

    /// Per-document chunk counts.
    pub fn doc_chunk_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for c in &self.chunks {
            *out.entry(c.chunk.doc_id.clone()).or_insert(0) += 1;
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], VectorError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| VectorError::Index("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, VectorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, VectorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, VectorError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| VectorError::Index("invalid utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dot_oracle(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn chunk(id: &str, text: &str) -> PolicyChunk {
        PolicyChunk {
            chunk_id: id.into(),
            doc_id: "d".into(),
            title: "t".into(),
            text: text.into(),
            char_span: (0, text.chars().count()),
        }
    }

    #[test]
    fn single_small_chunk() {
        let text = "x".repeat(100);
        let chunks = chunk_document(
            "d",
            "t",
            &text,
            ChunkingConfig {
                max_chunk_chars: 1000,
                overlap_chars: 100,
            },
        )
        .unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].char_span, (0, 100));
    }

    #[test]
    fn five_paragraphs() {
        let para = format!("{}.", "word ".repeat(100).trim_end());
        let text = vec![para; 5].join("\n\n");
        assert!(text.len() >= 2500);
        let cfg = ChunkingConfig {
            max_chunk_chars: 1000,
            overlap_chars: 100,
        };
        let chunks = chunk_document("d", "t", &text, cfg).unwrap();
        assert!(chunks.len() >= 3);
        assert_eq!(chunks[0].char_span.0, 0);
        assert_eq!(chunks.last().unwrap().char_span.1, text.chars().count());
        for c in &chunks {
            assert!(c.text.chars().count() <= 1000);
        }
        // The first split lands on a paragraph break.
        assert!(chunks[0].text.ends_with("\n\n"));
    }

    #[test]
    fn empty_document_and_bad_config() {
        assert!(matches!(
            chunk_document("d", "t", "", ChunkingConfig::default()),
            Err(VectorError::EmptyDocument)
        ));
        assert!(matches!(
            chunk_document(
                "d",
                "t",
                "abc",
                ChunkingConfig {
                    max_chunk_chars: 10,
                    overlap_chars: 10
                }
            ),
            Err(VectorError::InvalidChunking { .. })
        ));
    }

    #[test]
    fn embedding_determinism_and_order_invariance() {
        let e = HashingEmbedder::default();
        assert_eq!(e.embed("bike"), e.embed("bike"));
        let c = cosine(&e.embed("bike bicycle").values, &e.embed("bicycle bike").values);
        assert!((c - 1.0).abs() < 1e-9);
        assert!(e.embed("?!").is_empty_embedding());
        assert!((e.embed("Bike policy").norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_two_routes_agree() {
        let e = HashingEmbedder::default();
        let a = e.embed("bicycle policy");
        let b = e.embed("refund policy");
        let mut store = VectorStore::default();
        store.insert_with_vector(chunk("c", "refund policy"), b.clone()).unwrap();
        let via_store = store.search_vector(&a, 1).unwrap()[0].score;
        assert!((via_store - dot_oracle(&a.values, &b.values)).abs() < 1e-9);
    }

    #[test]
    fn search_examples() {
        let mut store = VectorStore::default();
        assert!(matches!(store.search("x", 1), Err(VectorError::EmptyStore)));
        store
            .upsert_document("only", "Only", "GO trains run daily.", ChunkingConfig::default())
            .unwrap();
        let hits = store.search("anything at all", 1).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].chunk.doc_id, "only");
        assert!(matches!(store.search("x", 0), Err(VectorError::ZeroK)));
    }

    #[test]
    fn bike_train_chunk_ranks_first() {
        let e = HashingEmbedder::default();
        let mut store = VectorStore::default();
        let fillers = [
            "Parking permits are sold monthly at stations",
            "Fares depend on distance travelled",
            "Lost items are held for thirty days",
            "Service animals are welcome aboard",
            "Children under twelve ride free",
            "Tap your card before boarding",
            "Quiet zones are on the upper level",
            "Food and drink are allowed in moderation",
            "Smoking is prohibited on all property",
            "Weekend passes cover unlimited travel",
            "Ramps are deployed by ambassadors",
            "Elevators connect all platforms",
            "Refunds are issued within thirty days",
            "Luggage must not block aisles",
            "Strollers may be brought on board",
            "Washrooms are in the accessibility coach",
            "Station hours vary by location",
            "Group travel requires advance notice",
            "Photography for personal use is permitted",
        ];
        for (i, f) in fillers.iter().enumerate() {
            store.insert_with_vector(chunk(&format!("c{i:02}"), f), e.embed(f)).unwrap();
        }
        let target = "You may bring a bike on the train outside rush hours";
        store.insert_with_vector(chunk("c99", target), e.embed(target)).unwrap();
        assert_eq!(store.len(), 20);

        let query = "can I bring my bike on the train";
        let q = e.embed(query);
        // Brute-force oracle over the corpus.
        let mut best = ("", f64::MIN);
        for (id, text) in fillers
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("c{i:02}"), *t))
            .chain(std::iter::once(("c99".to_string(), target)))
        {
            let s = dot_oracle(&q.values, &e.embed(text).values);
            if s > best.1 {
                best = (if id == "c99" { "c99" } else { "other" }, s);
            }
        }
        assert_eq!(best.0, "c99");
        assert_eq!(store.search(query, 1).unwrap()[0].chunk.chunk_id, "c99");
        assert_eq!(store.search(query, 50).unwrap().len(), 20);
    }

    #[test]
    fn upsert_is_idempotent_and_replaces_changes() {
        let mut store = VectorStore::default();
        let cfg = ChunkingConfig::default();
        assert_eq!(
            store.upsert_document("a", "A", "first version", cfg).unwrap(),
            UpsertOutcome::Indexed { chunks: 1 }
        );
        assert_eq!(
            store.upsert_document("a", "A", "first version", cfg).unwrap(),
            UpsertOutcome::Unchanged { chunks: 1 }
        );
        store.upsert_document("a", "A", "second version", cfg).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.chunks().next().unwrap().text, "second version");
    }

    #[test]
    fn index_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx/policy.idx");
        let mut store = VectorStore::default();
        let long = "Bikes are allowed. ".repeat(120);
        store.upsert_document("bikes.md", "Bikes", &long, ChunkingConfig::default()).unwrap();
        store.upsert_document("fares.md", "Fares", "Fares vary.", ChunkingConfig::default()).unwrap();
        store.save(&path).unwrap();
        let loaded = VectorStore::load(&path, Arc::new(HashingEmbedder::default())).unwrap();
        assert_eq!(loaded.len(), store.len());
        assert_eq!(
            loaded.search("bikes", 3).unwrap(),
            store.search("bikes", 3).unwrap()
        );
        let mut loaded = loaded;
        assert!(matches!(
            loaded.upsert_document("fares.md", "Fares", "Fares vary.", ChunkingConfig::default()),
            Ok(UpsertOutcome::Unchanged { .. })
        ));
        assert!(matches!(
            VectorStore::load(&path, Arc::new(HashingEmbedder::new(8))),
            Err(VectorError::DimensionMismatch { .. })
        ));
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            VectorStore::load(&path, Arc::new(HashingEmbedder::default())),
            Err(VectorError::Index(_))
        ));
    }

    fn arb_doc() -> impl Strategy<Value = String> {
        prop::collection::vec(
            prop_oneof![
                4 => "[a-zA-Zé]{1,9}",
                1 => Just(". ".to_string()),
                1 => Just("\n\n".to_string()),
                2 => Just(" ".to_string()),
            ],
            1..400,
        )
        .prop_map(|parts| parts.concat())
        .prop_filter("non-blank", |s| !s.trim().is_empty())
    }

    proptest! {
        #[test]
        fn chunks_cover_and_reconstruct(
            text in arb_doc(),
            max in 20usize..300,
            overlap_frac in 0.0f64..0.9,
        ) {
            let overlap = ((max as f64) * overlap_frac) as usize;
            let cfg = ChunkingConfig { max_chunk_chars: max, overlap_chars: overlap };
            let chunks = chunk_document("d", "t", &text, cfg).unwrap();
            let chars: Vec<char> = text.chars().collect();
            prop_assert_eq!(chunks[0].char_span.0, 0);
            prop_assert_eq!(chunks.last().unwrap().char_span.1, chars.len());
            let mut rebuilt: String = chunks[0].text.clone();
            for pair in chunks.windows(2) {
                prop_assert_eq!(pair[1].char_span.0, pair[0].char_span.1 - overlap);
                rebuilt.extend(pair[1].text.chars().skip(overlap));
            }
            for c in &chunks {
                let (s, e) = c.char_span;
                prop_assert!(e > s && e - s <= max);
                prop_assert_eq!(&c.text, &chars[s..e].iter().collect::<String>());
            }
            prop_assert_eq!(rebuilt, text);
        }

        #[test]
        fn cosine_symmetric_and_bounded(a in "[a-z ]{0,40}", b in "[a-z ]{0,40}") {
            let e = HashingEmbedder::new(32);
            let (va, vb) = (e.embed(&a), e.embed(&b));
            let ab = cosine(&va.values, &vb.values);
            let ba = cosine(&vb.values, &va.values);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn ranking_is_scale_invariant(
            vecs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 8), 2..12),
            scales in prop::collection::vec(0.01f64..100.0, 12),
            query in prop::collection::vec(-1.0f64..1.0, 8),
        ) {
            let embedder: Arc<dyn Embedder> = Arc::new(HashingEmbedder::new(8));
            let mut plain = VectorStore::new(embedder.clone());
            let mut scaled = VectorStore::new(embedder);
            for (i, v) in vecs.iter().enumerate() {
                let c = chunk(&format!("c{i:02}"), "x");
                plain.insert_with_vector(c.clone(), Embedding { values: v.clone() }).unwrap();
                let sv = v.iter().map(|x| x * scales[i]).collect();
                scaled.insert_with_vector(c, Embedding { values: sv }).unwrap();
            }
            let q = Embedding { values: query };
            let (Ok(a), Ok(b)) = (plain.search_vector(&q, 100), scaled.search_vector(&q, 100)) else {
                return Ok(());
            };
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.score - y.score).abs() < 1e-9);
                // Order may only differ between near-equal scores.
                if x.chunk.chunk_id != y.chunk.chunk_id {
                    let other = a.iter().find(|h| h.chunk.chunk_id == y.chunk.chunk_id).unwrap();
                    prop_assert!((other.score - x.score).abs() < 1e-9);
                }
            }
        }
    }
}
