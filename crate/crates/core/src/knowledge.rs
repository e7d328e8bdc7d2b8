//! Pathology knowledge base: document ingestion, sliding-window chunking,
//! a BM25 inverted index, retrieval and reference summarization.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatClient, ChatRequest};

pub const INDEX_FORMAT: &str = "pathcouncil-kb";
pub const INDEX_VERSION: u32 = 1;
pub const DEFAULT_CHUNK_SIZE: usize = 512;
pub const DEFAULT_OVERLAP: usize = 64;
pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_SUMMARY_BUDGET: usize = 4000;
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("bad chunk configuration: size {chunk_size}, overlap {overlap} (need 0 <= overlap < size)")]
    BadChunkConfig { chunk_size: usize, overlap: usize },
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("document {0:?} has an empty body")]
    EmptyDocument(String),
    #[error("duplicate document id {0:?}")]
    DuplicateDocument(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("index file {path}: {reason}")]
    BadIndexFile { path: String, reason: String },
    #[error("summarizer failed: {0}")]
    SummarizerError(#[source] BackendError),
    #[error("embedding backend failed: {0}")]
    Embedding(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub origin: String,
}

/// One split of a document. `char_span` counts Unicode scalar values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeChunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub char_span: (usize, usize),
    pub text: String,
}

pub fn chunk_id(doc_id: &str, start: usize) -> String {
    format!("{doc_id}#{start:08}")
}

/// Sliding-window chunking with stride `chunk_size - overlap`; the window
/// stops once it reaches the end of the document.
pub fn ingest(docs: &[SourceDocument], chunk_size: usize, overlap: usize) -> Result<Vec<KnowledgeChunk>, KnowledgeError> {
    if chunk_size == 0 || overlap >= chunk_size {
        return Err(KnowledgeError::BadChunkConfig { chunk_size, overlap });
    }
    let mut seen = BTreeSet::new();
    let stride = chunk_size - overlap;
    let mut out = Vec::new();
    for doc in docs {
        if !seen.insert(doc.doc_id.as_str()) {
            return Err(KnowledgeError::DuplicateDocument(doc.doc_id.clone()));
        }
        if doc.body.is_empty() {
            return Err(KnowledgeError::EmptyDocument(doc.doc_id.clone()));
        }
        // byte offset of every char boundary, plus the end
        let bounds: Vec<usize> = doc.body.char_indices().map(|(i, _)| i).chain([doc.body.len()]).collect();
        let len = bounds.len() - 1;
        let mut start = 0;
        loop {
            let end = (start + chunk_size).min(len);
            out.push(KnowledgeChunk {
                chunk_id: chunk_id(&doc.doc_id, start),
                doc_id: doc.doc_id.clone(),
                char_span: (start, end),
                text: doc.body[bounds[start]..bounds[end]].to_string(),
            });
            if end == len {
                break;
            }
            start += stride;
        }
    }
    Ok(out)
}

/// Inverse of [`ingest`] for one document: drops each chunk's overlap with
/// its predecessor and concatenates.
pub fn reconstruct(chunks: &[KnowledgeChunk]) -> String {
    let mut out = String::new();
    let mut covered = 0usize;
    for c in chunks {
        let (start, _) = c.char_span;
        let skip = covered.saturating_sub(start);
        out.extend(c.text.chars().skip(skip));
        covered = c.char_span.1;
    }
    out
}

/// Lowercase, split on non-alphanumerics, drop tokens shorter than two chars.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Ranks `scored` by descending score then ascending chunk id, keeps
/// `top_k`, and assigns 1-based ranks.
fn rank(mut scored: Vec<(String, f64)>, top_k: usize) -> Vec<RetrievalHit> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(top_k)
        .enumerate()
        .map(|(i, (chunk_id, score))| RetrievalHit {
            chunk_id,
            score,
            rank: i + 1,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Posting {
    chunk: u32,
    tf: u32,
}

/// Document metadata kept alongside the index for citation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentMeta {
    pub doc_id: String,
    pub title: String,
    pub origin: String,
}

/// BM25 inverted index over knowledge chunks. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    format: String,
    version: u32,
    pub k1: f64,
    pub b: f64,
    #[serde(default)]
    pub documents: Vec<DocumentMeta>,
    chunks: Vec<KnowledgeChunk>,
    lengths: Vec<u32>,
    avg_len: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

pub fn build_index(chunks: Vec<KnowledgeChunk>) -> Result<Bm25Index, KnowledgeError> {
    if chunks.is_empty() {
        return Err(KnowledgeError::EmptyCorpus);
    }
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut lengths = Vec::with_capacity(chunks.len());
    for (idx, c) in chunks.iter().enumerate() {
        let toks = tokenize(&c.text);
        lengths.push(toks.len() as u32);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in toks {
            *tf.entry(t).or_default() += 1;
        }
        for (term, n) in tf {
            postings.entry(term).or_default().push(Posting {
                chunk: idx as u32,
                tf: n,
            });
        }
    }
    let total: u64 = lengths.iter().map(|&l| l as u64).sum();
    let avg_len = total as f64 / chunks.len() as f64;
    Ok(Bm25Index {
        format: INDEX_FORMAT.into(),
        version: INDEX_VERSION,
        k1: BM25_K1,
        b: BM25_B,
        documents: Vec::new(),
        chunks,
        lengths,
        avg_len,
        postings,
    })
}

impl Bm25Index {
    pub fn with_documents(mut self, docs: &[SourceDocument]) -> Self {
        self.documents = docs
            .iter()
            .map(|d| DocumentMeta {
                doc_id: d.doc_id.clone(),
                title: d.title.clone(),
                origin: d.origin.clone(),
            })
            .collect();
        self
    }

    pub fn corpus_size(&self) -> usize {
        self.chunks.len()
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn chunks(&self) -> &[KnowledgeChunk] {
        &self.chunks
    }

    pub fn chunk(&self, id: &str) -> Option<&KnowledgeChunk> {
        self.chunks.iter().find(|c| c.chunk_id == id)
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.chunks.len() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 over the distinct tokens of `keywords`.
    pub fn retrieve(&self, keywords: &[String], top_k: usize) -> Vec<RetrievalHit> {
        if top_k == 0 {
            return Vec::new();
        }
        let terms: BTreeSet<String> = keywords.iter().flat_map(|k| tokenize(k)).collect();
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(term);
            for p in list {
                let len = self.lengths[p.chunk as usize] as f64;
                let tf = p.tf as f64;
                let norm = self.k1 * (1.0 - self.b + self.b * len / self.avg_len);
                *scores.entry(p.chunk).or_default() += idf * tf * (self.k1 + 1.0) / (tf + norm);
            }
        }
        rank(
            scores
                .into_iter()
                .map(|(i, s)| (self.chunks[i as usize].chunk_id.clone(), s))
                .collect(),
            top_k,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("index serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let idx: Bm25Index = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if idx.format != INDEX_FORMAT {
            return Err(format!("format {:?} is not {INDEX_FORMAT:?}", idx.format));
        }
        if idx.version != INDEX_VERSION {
            return Err(format!("unsupported index version {}", idx.version));
        }
        if idx.lengths.len() != idx.chunks.len() {
            return Err("length table does not match chunk count".into());
        }
        Ok(idx)
    }

    pub fn save(&self, path: &Path) -> Result<(), KnowledgeError> {
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(path, text).map_err(|e| KnowledgeError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        let text = std::fs::read_to_string(path).map_err(|e| KnowledgeError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|reason| KnowledgeError::BadIndexFile {
            path: path.display().to_string(),
            reason,
        })
    }
}

/// Anything that can answer a keyword query with ranked chunks.
#[async_trait]
pub trait Retriever: Send + Sync {
    async fn search(&self, keywords: &[String], top_k: usize) -> Result<Vec<RetrievalHit>, KnowledgeError>;
    fn chunk(&self, id: &str) -> Option<&KnowledgeChunk>;
}

#[async_trait]
impl Retriever for Bm25Index {
    async fn search(&self, keywords: &[String], top_k: usize) -> Result<Vec<RetrievalHit>, KnowledgeError> {
        Ok(self.retrieve(keywords, top_k))
    }

    fn chunk(&self, id: &str) -> Option<&KnowledgeChunk> {
        Bm25Index::chunk(self, id)
    }
}

/// Turns texts into dense vectors.
#[async_trait]
pub trait Embedder: Send + Sync {
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, KnowledgeError>;
}

/// Embedding endpoint speaking `POST {model, input: [..]}` → `{embeddings: [[..]]}`.
pub struct HttpEmbedder {
    client: reqwest::Client,
    url: String,
    model: String,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            client: reqwest::Client::new(),
            url: url.into(),
            model: model.into(),
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedReply {
    embeddings: Vec<Vec<f64>>,
}

#[async_trait]
impl Embedder for HttpEmbedder {
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, KnowledgeError> {
        let resp = self
            .client
            .post(&self.url)
            .json(&EmbedRequest {
                model: &self.model,
                input: texts,
            })
            .send()
            .await
            .and_then(|r| r.error_for_status())
            .map_err(|e| KnowledgeError::Embedding(e.to_string()))?;
        let reply: EmbedReply = resp.json().await.map_err(|e| KnowledgeError::Embedding(e.to_string()))?;
        if reply.embeddings.len() != texts.len() {
            return Err(KnowledgeError::Embedding(format!(
                "{} embeddings for {} inputs",
                reply.embeddings.len(),
                texts.len()
            )));
        }
        Ok(reply.embeddings)
    }
}

/// Dense retrieval by cosine similarity against precomputed chunk vectors.
pub struct EmbeddingIndex<E> {
    embedder: E,
    chunks: Vec<KnowledgeChunk>,
    vectors: Vec<Vec<f64>>,
}

impl<E: Embedder> EmbeddingIndex<E> {
    pub async fn build(embedder: E, chunks: Vec<KnowledgeChunk>) -> Result<Self, KnowledgeError> {
        if chunks.is_empty() {
            return Err(KnowledgeError::EmptyCorpus);
        }
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        let vectors = embedder.embed(&texts).await?;
        Ok(Self {
            embedder,
            chunks,
            vectors,
        })
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[async_trait]
impl<E: Embedder> Retriever for EmbeddingIndex<E> {
    async fn search(&self, keywords: &[String], top_k: usize) -> Result<Vec<RetrievalHit>, KnowledgeError> {
        if keywords.is_empty() || top_k == 0 {
            return Ok(Vec::new());
        }
        let q = self.embedder.embed(&[keywords.join(" ")]).await?.remove(0);
        let scored = self
            .chunks
            .iter()
            .zip(&self.vectors)
            .map(|(c, v)| (c.chunk_id.clone(), cosine(&q, v)))
            .filter(|(_, s)| *s > 0.0)
            .collect();
        Ok(rank(scored, top_k))
    }

    fn chunk(&self, id: &str) -> Option<&KnowledgeChunk> {
        self.chunks.iter().find(|c| c.chunk_id == id)
    }
}

/// Reference information distilled from retrieved chunks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub text: String,
    pub supporting_chunk_ids: Vec<String>,
}

impl ReferenceSummary {
    pub fn is_empty(&self) -> bool {
        self.text.trim().is_empty()
    }
}

const SUMMARIZE_SYSTEM: &str = "Summarize the reference passages below into concise pathology reference information. Keep diagnostic criteria and grading or staging facts; do not add knowledge that is not in the passages.";

fn truncate_chars(s: &str, budget: usize) -> String {
    match s.char_indices().nth(budget) {
        Some((i, _)) => s[..i].to_string(),
        None => s.to_string(),
    }
}

/// Without a summarizer: hit texts joined by blank lines in rank order and
/// truncated to `budget` chars. With one: its reply.
pub async fn summarize_references(
    hits: &[RetrievalHit],
    chunks: &HashMap<&str, &KnowledgeChunk>,
    summarizer: Option<&dyn ChatClient>,
    budget: usize,
) -> Result<ReferenceSummary, KnowledgeError> {
    let mut ordered: Vec<&RetrievalHit> = hits.iter().collect();
    ordered.sort_by_key(|h| h.rank);
    let found: Vec<&KnowledgeChunk> = ordered.iter().filter_map(|h| chunks.get(h.chunk_id.as_str()).copied()).collect();
    let supporting_chunk_ids: Vec<String> = found.iter().map(|c| c.chunk_id.clone()).collect();
    if found.is_empty() {
        return Ok(ReferenceSummary::default());
    }
    let joined = found.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join("\n\n");
    let text = match summarizer {
        None => truncate_chars(&joined, budget),
        Some(s) => {
            let reply = s
                .complete(&ChatRequest::new(SUMMARIZE_SYSTEM, truncate_chars(&joined, budget.max(1) * 4)))
                .await
                .map_err(KnowledgeError::SummarizerError)?;
            reply.text
        }
    };
    Ok(ReferenceSummary {
        text,
        supporting_chunk_ids,
    })
}

/// One manifest entry. `path` is resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub title: String,
    pub origin: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
}

/// Reads a corpus manifest and the documents it lists. Document ids default
/// to the file stem.
pub fn load_manifest(path: &Path) -> Result<Vec<SourceDocument>, KnowledgeError> {
    let io = |p: &Path, e: String| KnowledgeError::Io {
        path: p.display().to_string(),
        reason: e,
    };
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e.to_string()))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| io(path, e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut docs = Vec::with_capacity(entries.len());
    for e in entries {
        let p = if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) };
        let body = std::fs::read_to_string(&p).map_err(|err| io(&p, err.to_string()))?;
        let doc_id = e.doc_id.clone().unwrap_or_else(|| {
            p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        });
        docs.push(SourceDocument {
            doc_id,
            title: e.title,
            body,
            origin: e.origin,
        });
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::FnChat;
    use proptest::prelude::*;

    fn doc(id: &str, body: &str) -> SourceDocument {
        SourceDocument {
            doc_id: id.into(),
            title: id.into(),
            body: body.into(),
            origin: "test".into(),
        }
    }

    #[test]
    fn stride_arithmetic() {
        let body: String = (0..1000).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let c = ingest(&[doc("d", &body)], 512, 64).unwrap();
        assert_eq!(c.iter().map(|c| c.char_span.0).collect::<Vec<_>>(), [0, 448, 896]);
        assert_eq!(c[2].char_span, (896, 1000));
        assert_eq!(c[1].chunk_id, "d#00000448");
        assert_eq!(reconstruct(&c), body);
    }

    #[test]
    fn short_document_single_chunk() {
        let body = "x".repeat(100);
        let c = ingest(&[doc("d", &body)], 512, 64).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].char_span, (0, 100));
    }

    #[test]
    fn zero_stride_rejected() {
        assert!(matches!(
            ingest(&[doc("d", "abc")], 512, 512),
            Err(KnowledgeError::BadChunkConfig { .. })
        ));
        assert!(matches!(ingest(&[doc("d", "abc")], 0, 0), Err(KnowledgeError::BadChunkConfig { .. })));
        assert!(matches!(
            ingest(&[doc("d", "a"), doc("d", "b")], 4, 1),
            Err(KnowledgeError::DuplicateDocument(_))
        ));
    }

    #[test]
    fn multibyte_chunking_counts_chars() {
        let body = "αβγδεζηθικ";
        let c = ingest(&[doc("g", body)], 4, 1).unwrap();
        assert_eq!(c[0].text, "αβγδ");
        assert_eq!(c[1].text, "δεζη");
        assert_eq!(reconstruct(&c), body);
    }

    #[test]
    fn tokenizer_contract() {
        assert_eq!(tokenize("Adenocarcinoma, glandular."), vec!["adenocarcinoma", "glandular"]);
        assert_eq!(tokenize("a pT3 N0 x"), vec!["pt3", "n0"]);
    }

    fn chunks_of(texts: &[&str]) -> Vec<KnowledgeChunk> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| KnowledgeChunk {
                chunk_id: format!("c{i:02}"),
                doc_id: "d".into(),
                char_span: (0, t.chars().count()),
                text: t.to_string(),
            })
            .collect()
    }

    #[test]
    fn index_bookkeeping() {
        let idx = build_index(chunks_of(&["alpha beta", "beta gamma", "gamma delta"])).unwrap();
        assert_eq!(idx.corpus_size(), 3);
        assert_eq!(idx.doc_freq("beta"), 2);
        let again = build_index(chunks_of(&["alpha beta", "beta gamma", "gamma delta"])).unwrap();
        assert_eq!(idx, again);
        assert_eq!(idx.to_json(), again.to_json());
        assert!(matches!(build_index(vec![]), Err(KnowledgeError::EmptyCorpus)));
    }

    #[test]
    fn unique_term_ranks_first_and_disjoint_is_empty() {
        let idx = build_index(chunks_of(&["glands and stroma", "seminoma sheets", "stroma only"])).unwrap();
        let hits = idx.retrieve(&["seminoma".into()], 5);
        assert_eq!(hits.len(), 1);
        assert_eq!((hits[0].chunk_id.as_str(), hits[0].rank), ("c01", 1));
        assert!(idx.retrieve(&["zebra".into()], 5).is_empty());
    }

    /// Hand BM25 for a single query term.
    fn hand_bm25(tf: f64, len: f64, avg: f64, n: f64, df: f64) -> f64 {
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * len / avg))
    }

    #[test]
    fn term_frequency_monotonicity() {
        let idx = build_index(chunks_of(&["mitoses mitoses", "mitoses stroma", "glands glands"])).unwrap();
        let hits = idx.retrieve(&["mitoses".into()], 5);
        assert_eq!(hits[0].chunk_id, "c00");
        assert_eq!(hits[1].chunk_id, "c01");
        let avg = 2.0;
        assert!((hits[0].score - hand_bm25(2.0, 2.0, avg, 3.0, 2.0)).abs() <= 1e-12);
        assert!((hits[1].score - hand_bm25(1.0, 2.0, avg, 3.0, 2.0)).abs() <= 1e-12);
    }

    #[test]
    fn ties_break_by_chunk_id() {
        let idx = build_index(chunks_of(&["grade", "grade", "other words"])).unwrap();
        let hits = idx.retrieve(&["grade".into()], 1);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].chunk_id, "c00");
    }

    #[test]
    fn persisted_index_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("kb.json");
        let idx = build_index(chunks_of(&["alpha beta", "beta gamma"])).unwrap();
        idx.save(&p).unwrap();
        let back = Bm25Index::load(&p).unwrap();
        assert_eq!(back, idx);
        std::fs::write(&p, r#"{"format":"other","version":1}"#).unwrap();
        assert!(matches!(Bm25Index::load(&p), Err(KnowledgeError::BadIndexFile { .. })));
    }

    #[tokio::test]
    async fn fallback_summary_concatenates_in_rank_order() {
        let cs = chunks_of(&["chunkA", "chunkB"]);
        let map: HashMap<&str, &KnowledgeChunk> = cs.iter().map(|c| (c.chunk_id.as_str(), c)).collect();
        let hits = vec![
            RetrievalHit { chunk_id: "c01".into(), score: 1.0, rank: 2 },
            RetrievalHit { chunk_id: "c00".into(), score: 2.0, rank: 1 },
        ];
        let s = summarize_references(&hits, &map, None, 100).await.unwrap();
        assert_eq!(s.text, "chunkA\n\nchunkB");
        assert_eq!(s.supporting_chunk_ids, ["c00", "c01"]);
        let short = summarize_references(&hits, &map, None, 3).await.unwrap();
        assert_eq!(short.text, "chu");
        let empty = summarize_references(&[], &map, None, 100).await.unwrap();
        assert!(empty.text.is_empty() && empty.supporting_chunk_ids.is_empty());
        let echo = FnChat::constant("s", "WHO: adenocarcinoma shows glands");
        let s = summarize_references(&hits, &map, Some(&echo), 100).await.unwrap();
        assert_eq!(s.text, "WHO: adenocarcinoma shows glands");
        assert_eq!(s.supporting_chunk_ids.len(), 2);
    }

    /// Bag-of-letters embedder for offline tests.
    struct LetterEmbedder;

    #[async_trait]
    impl Embedder for LetterEmbedder {
        async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, KnowledgeError> {
            Ok(texts
                .iter()
                .map(|t| {
                    let mut v = vec![0.0; 26];
                    for b in t.to_ascii_lowercase().bytes().filter(u8::is_ascii_lowercase) {
                        v[(b - b'a') as usize] += 1.0;
                    }
                    v
                })
                .collect())
        }
    }

    #[tokio::test]
    async fn embedding_retriever_ranks_by_cosine() {
        let idx = EmbeddingIndex::build(LetterEmbedder, chunks_of(&["zzz", "abc abc", "xyz"])).await.unwrap();
        let hits = idx.search(&["cab".into()], 2).await.unwrap();
        assert_eq!(hits[0].chunk_id, "c01");
        assert!(hits.len() <= 2);
        assert!(Retriever::chunk(&idx, "c02").is_some());
    }

    proptest! {
        #[test]
        fn chunk_reconstruction_is_exact(body in "[a-zé ]{1,300}", size in 2usize..60, ov in 0usize..59) {
            prop_assume!(ov < size);
            let c = ingest(&[doc("d", &body)], size, ov).unwrap();
            prop_assert_eq!(reconstruct(&c), body.clone());
            for w in c.windows(2) {
                prop_assert_eq!(w[0].char_span.1 - w[1].char_span.0, ov);
            }
            for ch in &c {
                let len = ch.char_span.1 - ch.char_span.0;
                prop_assert!(len > 0 && len <= size);
            }
        }

        #[test]
        fn retrieval_bounded_and_sorted(k in 1usize..6, q in "[a-c]{2} [a-c]{2}") {
            let idx = build_index(chunks_of(&["ab ab bc", "ca ab", "bc ca cc", "aa bb", "ab"])).unwrap();
            let hits = idx.retrieve(&[q], k);
            prop_assert!(hits.len() <= k);
            for w in hits.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }
    }
}
