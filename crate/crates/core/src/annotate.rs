//! Claim-level factuality annotation.
//!
//! Three interchangeable backends: labels already stored on the dataset, a
//! token-overlap heuristic for offline runs, and a chat-model judge. The
//! calibration guarantee is only as good as these labels, so the judge's reply
//! is held to a strict contract and never defaulted.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::backend::{HttpClient, HttpConfig};
use crate::corpus::{AnswerRecord, ClaimRecord, DocumentItem, Label, QueryItem};
use crate::error::{Error, Result};
use crate::prompt;
use crate::similarity::tokenize;

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.6;

fn default_overlap_threshold() -> f64 {
    DEFAULT_OVERLAP_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnnotatorConfig {
    Oracle,
    Overlap {
        #[serde(default = "default_overlap_threshold")]
        overlap_threshold: f64,
    },
    ExternalLlm {
        #[serde(flatten)]
        http: HttpConfig,
        /// Overrides the bundled template; must contain `{claim}`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prompt_template: Option<String>,
    },
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        AnnotatorConfig::Oracle
    }
}

impl AnnotatorConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            AnnotatorConfig::Oracle => "oracle",
            AnnotatorConfig::Overlap { .. } => "overlap",
            AnnotatorConfig::ExternalLlm { .. } => "external_llm",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AnnotatorConfig::Overlap { overlap_threshold: t } if !(*t > 0.0 && *t <= 1.0) => Err(
                Error::Config(format!("overlap threshold must lie in (0, 1], got {t}")),
            ),
            AnnotatorConfig::ExternalLlm {
                prompt_template: Some(t),
                ..
            } if !t.contains("{claim}") => Err(Error::Config(
                "annotation prompt template must contain {claim}".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Annotator> {
        self.validate()?;
        let backend = match self {
            AnnotatorConfig::Oracle => Backend::Oracle,
            AnnotatorConfig::Overlap { overlap_threshold } => Backend::Overlap(*overlap_threshold),
            AnnotatorConfig::ExternalLlm {
                http,
                prompt_template,
            } => Backend::Llm {
                client: HttpClient::chat_completions(http)?,
                template: prompt_template
                    .clone()
                    .unwrap_or_else(|| prompt::ANNOTATE_TEMPLATE.to_string()),
            },
        };
        Ok(Annotator { backend })
    }
}

#[derive(Debug)]
enum Backend {
    Oracle,
    Overlap(f64),
    Llm { client: HttpClient, template: String },
}

#[derive(Debug)]
pub struct Annotator {
    backend: Backend,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Verdict {
    factual: bool,
}

/// Parses the judge's reply. The reply must be exactly `{"factual": <bool>}`;
/// a second pass only removes a surrounding Markdown code fence.
pub fn parse_verdict(reply: &str) -> Result<bool> {
    if let Ok(v) = serde_json::from_str::<Verdict>(reply) {
        return Ok(v.factual);
    }
    let unfenced = strip_code_fence(reply.trim());
    serde_json::from_str::<Verdict>(unfenced)
        .map(|v| v.factual)
        .map_err(|e| {
            Error::BackendResponse(format!(
                "annotation verdict {:?} is not {{\"factual\": bool}}: {e}",
                reply.chars().take(120).collect::<String>()
            ))
        })
}

fn strip_code_fence(s: &str) -> &str {
    let Some(body) = s.strip_prefix("```") else {
        return s;
    };
    let Some(body) = body.strip_suffix("```") else {
        return s;
    };
    let body = body.strip_prefix("json").unwrap_or(body);
    body.trim()
}

/// Fraction of the claim's distinct tokens that also appear in the reference
/// texts. A claim without tokens scores 0.
pub fn overlap_ratio(claim: &str, references: &[&str]) -> f64 {
    let claim_tokens: HashSet<String> = tokenize(claim).collect();
    if claim_tokens.is_empty() {
        return 0.0;
    }
    let reference: HashSet<String> = references.iter().flat_map(|t| tokenize(t)).collect();
    let shared = claim_tokens.intersection(&reference).count();
    shared as f64 / claim_tokens.len() as f64
}

fn format_documents(documents: &[DocumentItem]) -> String {
    documents
        .iter()
        .enumerate()
        .map(|(i, d)| format!("[{}] ({}) {}", i + 1, d.id, d.text))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Annotator {
    pub fn kind(&self) -> &'static str {
        match self.backend {
            Backend::Oracle => "oracle",
            Backend::Overlap(_) => "overlap",
            Backend::Llm { .. } => "external_llm",
        }
    }

    pub fn annotate_claim(
        &self,
        claim: &ClaimRecord,
        query: &QueryItem,
        ground_truth: Option<&str>,
        documents: &[DocumentItem],
    ) -> Result<Label> {
        if let Backend::Oracle = self.backend {
            return if claim.label.is_labeled() {
                Ok(claim.label)
            } else {
                Err(Error::Unlabeled(claim.id.clone()))
            };
        }
        let ground_truth = ground_truth
            .filter(|g| !g.trim().is_empty())
            .ok_or_else(|| Error::MissingGroundTruth(claim.id.clone()))?;
        match &self.backend {
            Backend::Oracle => unreachable!(),
            Backend::Overlap(threshold) => {
                let mut refs = vec![ground_truth];
                refs.extend(documents.iter().map(|d| d.text.as_str()));
                Ok(Label::from_factual(overlap_ratio(&claim.text, &refs) >= *threshold))
            }
            Backend::Llm { client, template } => {
                let docs = format_documents(documents);
                let user = prompt::fill(
                    template,
                    &[
                        ("query", &query.text),
                        ("ground_truth", ground_truth),
                        ("documents", &docs),
                        ("claim", &claim.text),
                    ],
                );
                let reply = client
                    .chat(prompt::ANNOTATE_SYSTEM, &user)
                    .map_err(|e| annotate_err(&claim.id, e))?;
                parse_verdict(&reply)
                    .map(Label::from_factual)
                    .map_err(|e| annotate_err(&claim.id, e))
            }
        }
    }

    /// Returns a copy of `record` with every claim labeled. Only labels change.
    pub fn annotate_record(&self, record: &AnswerRecord) -> Result<AnswerRecord> {
        let mut out = record.clone();
        for claim in &mut out.claims {
            claim.label = self
                .annotate_claim(
                    claim,
                    &record.query,
                    record.ground_truth.as_deref(),
                    &record.documents,
                )
                .map_err(|e| e.in_query(&record.query.id))?;
        }
        Ok(out)
    }
}

fn annotate_err(claim_id: &str, e: Error) -> Error {
    match e {
        Error::Backend(m) => Error::Backend(format!("claim `{claim_id}`: {m}")),
        Error::BackendResponse(m) => Error::BackendResponse(format!("claim `{claim_id}`: {m}")),
        other => other,
    }
}

pub fn annotate_claim(
    claim: &ClaimRecord,
    query: &QueryItem,
    ground_truth: Option<&str>,
    documents: &[DocumentItem],
    annotator: &Annotator,
) -> Result<Label> {
    annotator.annotate_claim(claim, query, ground_truth, documents)
}

pub fn annotate_record(record: &AnswerRecord, annotator: &Annotator) -> Result<AnswerRecord> {
    annotator.annotate_record(record)
}
