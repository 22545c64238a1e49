//! Embedding providers, cosine similarity, exact top-k retrieval and the
//! retrieval-weighted claim relevance score.
//!
//! A claim's relevance is the best document-mediated agreement with the query:
//!
//! ```text
//! s_kj = cos(query, doc_j) * cos(claim_k, doc_j)
//! r_k  = max({s_kj : j} ∪ {0})
//! ```
//!
//! so `r_k` lies in `[0, 1]` and is zero when no documents were retrieved.

use serde::{Deserialize, Serialize};

use crate::backend::{HttpClient, HttpConfig};
use crate::corpus::{AnswerRecord, DocumentItem, EmbeddingVector, QueryItem};
use crate::error::{Error, Result};
use crate::hash::fnv1a64;

pub const MIN_HASHED_DIM: usize = 16;
pub const DEFAULT_HASHED_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingProviderConfig {
    HashedTf {
        dim: usize,
    },
    ExternalHttp {
        #[serde(flatten)]
        http: HttpConfig,
        /// Expected output dimension; when absent every vector must match the
        /// first one returned.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dim: Option<usize>,
    },
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        EmbeddingProviderConfig::HashedTf {
            dim: DEFAULT_HASHED_DIM,
        }
    }
}

impl EmbeddingProviderConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            EmbeddingProviderConfig::HashedTf { .. } => "hashed_tf",
            EmbeddingProviderConfig::ExternalHttp { .. } => "external_http",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EmbeddingProviderConfig::HashedTf { dim } if *dim < MIN_HASHED_DIM => Err(Error::Config(
                format!("hashed_tf dimension must be at least {MIN_HASHED_DIM}, got {dim}"),
            )),
            EmbeddingProviderConfig::ExternalHttp { dim: Some(0), .. } => {
                Err(Error::Config("external_http dimension must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        self.validate()?;
        Ok(match self {
            EmbeddingProviderConfig::HashedTf { dim } => Box::new(HashedTf::new(*dim)?),
            EmbeddingProviderConfig::ExternalHttp { http, dim } => Box::new(HttpEmbedder {
                client: HttpClient::embeddings(http)?,
                dim: *dim,
            }),
        })
    }
}

pub trait Embedder: Send + Sync {
    /// Embeds a batch, returning vectors in input order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    fn kind(&self) -> &'static str;

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| Error::BackendResponse("empty embedding batch".into()))
    }
}

pub fn embed(text: &str, provider: &dyn Embedder) -> Result<EmbeddingVector> {
    provider.embed(text)
}

/// Lowercased maximal runs of alphanumeric characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Hashed term-frequency embedding, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashedTf {
    dim: usize,
}

impl HashedTf {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < MIN_HASHED_DIM {
            return Err(Error::Config(format!(
                "hashed_tf dimension must be at least {MIN_HASHED_DIM}, got {dim}"
            )));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dim as u64) as usize
    }

    fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut counts = vec![0.0; self.dim];
        for token in tokenize(text) {
            counts[self.bucket(&token)] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 0.0 {
            counts.iter_mut().for_each(|c| *c /= norm);
        }
        EmbeddingVector::new(counts).expect("finite counts of positive dimension")
    }
}

impl Embedder for HashedTf {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn kind(&self) -> &'static str {
        "hashed_tf"
    }
}

#[derive(Debug)]
pub struct HttpEmbedder {
    client: HttpClient,
    dim: Option<usize>,
}

impl Embedder for HttpEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let raw = self.client.embed(texts)?;
        let expected = self.dim.or_else(|| raw.first().map(Vec::len));
        raw.into_iter()
            .map(|v| {
                if let Some(expected) = expected {
                    if v.len() != expected {
                        return Err(Error::DimensionMismatch {
                            expected,
                            actual: v.len(),
                        });
                    }
                }
                EmbeddingVector::new(v)
            })
            .collect()
    }

    fn kind(&self) -> &'static str {
        "external_http"
    }
}

/// Cosine similarity clamped to `[-1, 1]`; zero when either vector is zero.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            actual: v.dim(),
        });
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = u.values().iter().zip(v.values()).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn embedding_or_compute(
    id: &str,
    text: &str,
    inline: Option<&EmbeddingVector>,
    provider: &dyn Embedder,
) -> Result<EmbeddingVector> {
    match inline {
        Some(v) => Ok(v.clone()),
        None => provider.embed(text).map_err(|e| Error::Embedding {
            id: id.to_string(),
            source: Box::new(e),
        }),
    }
}

/// Exact top-k by cosine to the query, descending, ties by ascending id.
pub fn retrieve_top_k(
    query: &QueryItem,
    corpus: &[DocumentItem],
    k: usize,
    provider: &dyn Embedder,
) -> Result<Vec<DocumentItem>> {
    if k == 0 {
        return Err(Error::Config("top-k must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Ok(Vec::new());
    }
    let q = embedding_or_compute(&query.id, &query.text, query.embedding.as_ref(), provider)?;
    let mut scored = corpus
        .iter()
        .map(|d| {
            let e = embedding_or_compute(&d.id, &d.text, d.embedding.as_ref(), provider)?;
            Ok((cosine(&q, &e)?, d))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|(sa, da), (sb, db)| sb.total_cmp(sa).then_with(|| da.id.cmp(&db.id)));
    Ok(scored.into_iter().take(k).map(|(_, d)| d.clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceBreakdown {
    pub claim_id: String,
    /// `(document id, cos(query, doc) * cos(claim, doc))` in document order.
    pub per_document: Vec<(String, f64)>,
    pub relevance: f64,
}

/// Scores every claim of `record` and writes the relevance back onto it.
///
/// Missing embeddings are computed in a single provider batch; inline
/// embeddings are used as-is.
pub fn score_claims(record: &mut AnswerRecord, provider: &dyn Embedder) -> Result<Vec<RelevanceBreakdown>> {
    let items: Vec<(&str, &str, Option<&EmbeddingVector>)> =
        std::iter::once((
            record.query.id.as_str(),
            record.query.text.as_str(),
            record.query.embedding.as_ref(),
        ))
        .chain(
            record
                .documents
                .iter()
                .map(|d| (d.id.as_str(), d.text.as_str(), d.embedding.as_ref())),
        )
        .chain(
            record
                .claims
                .iter()
                .map(|c| (c.id.as_str(), c.text.as_str(), c.embedding.as_ref())),
        )
        .collect();
    let missing: Vec<(&str, &str)> = items
        .iter()
        .filter(|(_, _, e)| e.is_none())
        .map(|&(id, text, _)| (id, text))
        .collect();
    let computed = if missing.is_empty() {
        Vec::new()
    } else {
        let texts: Vec<&str> = missing.iter().map(|&(_, t)| t).collect();
        let batch_id = || match missing.as_slice() {
            [(only, _)] => only.to_string(),
            _ => format!("{} ({} items)", record.query.id, missing.len()),
        };
        let out = provider.embed_batch(&texts).map_err(|e| Error::Embedding {
            id: batch_id(),
            source: Box::new(e),
        })?;
        if out.len() != texts.len() {
            return Err(Error::Embedding {
                id: batch_id(),
                source: Box::new(Error::BackendResponse(format!(
                    "expected {} embeddings, got {}",
                    texts.len(),
                    out.len()
                ))),
            });
        }
        out
    };
    let mut computed = computed.into_iter();
    let mut resolved: Vec<EmbeddingVector> = items
        .iter()
        .map(|(_, _, e)| match e {
            Some(v) => (*v).clone(),
            None => computed.next().expect("one computed vector per missing slot"),
        })
        .collect();
    drop(items);
    let n_docs = record.documents.len();
    let claim_vecs = resolved.split_off(1 + n_docs);
    let doc_vecs = resolved.split_off(1);
    let query_vec = resolved.pop().expect("query slot");

    let dim_err = |id: &str, e: Error| Error::Embedding {
        id: id.to_string(),
        source: Box::new(e),
    };
    let query_doc: Vec<f64> = record
        .documents
        .iter()
        .zip(&doc_vecs)
        .map(|(d, v)| cosine(&query_vec, v).map_err(|e| dim_err(&d.id, e)))
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(record.claims.len());
    for (claim, claim_vec) in record.claims.iter_mut().zip(&claim_vecs) {
        let mut per_document = Vec::with_capacity(doc_vecs.len());
        let mut relevance = 0.0_f64;
        for ((doc, doc_vec), qd) in record.documents.iter().zip(&doc_vecs).zip(&query_doc) {
            let cd = cosine(claim_vec, doc_vec).map_err(|e| dim_err(&claim.id, e))?;
            let s = qd * cd;
            relevance = relevance.max(s);
            per_document.push((doc.id.clone(), s));
        }
        claim.relevance = Some(relevance);
        out.push(RelevanceBreakdown {
            claim_id: claim.id.clone(),
            per_document,
            relevance,
        });
    }
    Ok(out)
}
