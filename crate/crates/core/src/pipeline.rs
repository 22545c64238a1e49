//! End-to-end orchestration: decompose, retrieve, score, annotate, calibrate,
//! filter, merge, and evaluate.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::{Annotator, AnnotatorConfig};
use crate::backend::{HttpClient, HttpConfig};
use crate::conformal::{
    calibrate, filter_record, threshold_for, CalibrationResult, FilterOutcome, GroupPolicy, Mode,
};
use crate::corpus::{self, AnswerRecord, ClaimRecord, DocumentItem, EmbeddingStore, Label, Split};
use crate::error::{Error, Result};
use crate::prompt;
use crate::similarity::{retrieve_top_k, score_claims, Embedder, EmbeddingProviderConfig};

pub const ALL_GROUPS: &str = "__all__";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecomposeBackend {
    #[default]
    SentenceSplit,
    ExternalLlm {
        #[serde(flatten)]
        http: HttpConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MergeBackend {
    #[default]
    Concatenate,
    ExternalLlm {
        #[serde(flatten)]
        http: HttpConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// JSONL document corpus; see [`corpus::load_documents`].
    pub corpus: PathBuf,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub provider: EmbeddingProviderConfig,
    pub annotator: AnnotatorConfig,
    pub decompose: DecomposeBackend,
    pub merge: MergeBackend,
    pub policy: GroupPolicy,
    /// Worker threads for record processing; 0 uses the machine's parallelism.
    pub concurrency: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_store: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalConfig>,
}

/// Splits on `.`, `!` or `?` followed by whitespace; segments are trimmed and
/// empty ones dropped. Claim ids are `c1`, `c2`, ...
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = chars.peek().map_or(true, |&(_, next)| next.is_whitespace());
            if at_boundary {
                let end = i + c.len_utf8();
                out.push(text[start..end].trim().to_string());
                start = end;
            }
        }
    }
    out.push(text[start..].trim().to_string());
    out.retain(|s| !s.is_empty());
    out
}

fn claims_from_texts(texts: Vec<String>) -> Vec<ClaimRecord> {
    texts
        .into_iter()
        .enumerate()
        .map(|(i, t)| ClaimRecord::new(format!("c{}", i + 1), t))
        .collect()
}

fn parse_json_string_array(reply: &str) -> Result<Vec<String>> {
    let trimmed = reply.trim();
    let body = trimmed
        .strip_prefix("```")
        .and_then(|b| b.strip_suffix("```"))
        .map(|b| b.strip_prefix("json").unwrap_or(b).trim())
        .unwrap_or(trimmed);
    serde_json::from_str::<Vec<String>>(body)
        .map_err(|e| Error::BackendResponse(format!("expected a JSON array of claim strings: {e}")))
}

pub struct Decomposer(Option<HttpClient>);

impl Decomposer {
    pub fn new(backend: &DecomposeBackend) -> Result<Self> {
        Ok(Self(match backend {
            DecomposeBackend::SentenceSplit => None,
            DecomposeBackend::ExternalLlm { http } => Some(HttpClient::chat_completions(http)?),
        }))
    }

    pub fn decompose(&self, answer_text: &str) -> Result<Vec<ClaimRecord>> {
        let texts = match &self.0 {
            None => split_sentences(answer_text),
            Some(_) if answer_text.trim().is_empty() => Vec::new(),
            Some(client) => {
                let user = prompt::fill(prompt::DECOMPOSE_TEMPLATE, &[("answer", answer_text)]);
                let reply = client.chat(prompt::DECOMPOSE_SYSTEM, &user)?;
                parse_json_string_array(&reply)?
                    .into_iter()
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
        };
        Ok(claims_from_texts(texts))
    }
}

pub fn decompose(answer_text: &str, backend: &DecomposeBackend) -> Result<Vec<ClaimRecord>> {
    Decomposer::new(backend)?.decompose(answer_text)
}

pub struct Merger(Option<HttpClient>);

impl Merger {
    pub fn new(backend: &MergeBackend) -> Result<Self> {
        Ok(Self(match backend {
            MergeBackend::Concatenate => None,
            MergeBackend::ExternalLlm { http } => Some(HttpClient::chat_completions(http)?),
        }))
    }

    pub fn merge(&self, claims: &[ClaimRecord]) -> Result<String> {
        if claims.is_empty() {
            return Ok(String::new());
        }
        match &self.0 {
            None => Ok(claims
                .iter()
                .map(|c| c.text.as_str())
                .collect::<Vec<_>>()
                .join(" ")),
            Some(client) => {
                let listing = claims
                    .iter()
                    .map(|c| format!("- {}", c.text))
                    .collect::<Vec<_>>()
                    .join("\n");
                let user = prompt::fill(prompt::MERGE_TEMPLATE, &[("claims", &listing)]);
                Ok(client.chat(prompt::MERGE_SYSTEM, &user)?.trim().to_string())
            }
        }
    }
}

pub fn merge(claims: &[ClaimRecord], backend: &MergeBackend) -> Result<String> {
    Merger::new(backend)?.merge(claims)
}

/// `$SOURCE_DATE_EPOCH` when set, otherwise the current time.
pub fn created_unix() -> i64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
    {
        return t;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// Built backends plus the worker pool.
pub struct Pipeline {
    config: PipelineConfig,
    embedder: Box<dyn Embedder>,
    annotator: Annotator,
    decomposer: Decomposer,
    merger: Merger,
    store: Option<EmbeddingStore>,
    corpus: Option<(Vec<DocumentItem>, usize)>,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        let store = config
            .embedding_store
            .as_ref()
            .map(EmbeddingStore::load)
            .transpose()?;
        let corpus = match &config.retrieval {
            Some(r) if r.top_k == 0 => return Err(Error::Config("top-k must be at least 1".into())),
            Some(r) => Some((corpus::load_documents(&r.corpus)?, r.top_k)),
            None => None,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.concurrency)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Self {
            embedder: config.provider.build()?,
            annotator: config.annotator.build()?,
            decomposer: Decomposer::new(&config.decompose)?,
            merger: Merger::new(&config.merge)?,
            store,
            corpus,
            pool,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn annotator(&self) -> &Annotator {
        &self.annotator
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    /// Loads a dataset and resolves embeddings from the configured store.
    /// Calibration data only needs stored labels when the oracle annotator
    /// is in use; other annotators produce the labels themselves.
    pub fn load(&self, path: impl AsRef<Path>, calibration: bool) -> Result<Vec<AnswerRecord>> {
        let split = if calibration && self.annotator.kind() == "oracle" {
            Split::Calibration
        } else {
            Split::Test
        };
        let mut records = corpus::load_dataset(path, split)?;
        if let Some(store) = &self.store {
            store.resolve(&mut records);
        }
        Ok(records)
    }

    fn prepare_one(&self, record: &AnswerRecord, annotate: bool) -> Result<AnswerRecord> {
        let mut out = record.clone();
        if out.claims.is_empty() {
            if let Some(raw) = out.raw_answer.as_deref() {
                out.claims = self.decomposer.decompose(raw)?;
                if let Some(store) = &self.store {
                    store.resolve(std::slice::from_mut(&mut out));
                }
            }
        }
        if let Some((docs, k)) = &self.corpus {
            out.documents = retrieve_top_k(&out.query, docs, *k, self.embedder.as_ref())?;
        }
        score_claims(&mut out, self.embedder.as_ref())?;
        if annotate {
            out = self.annotator.annotate_record(&out)?;
        }
        Ok(out)
    }

    /// Decomposes (when a record has a raw answer but no claims), retrieves
    /// (when a corpus is configured), scores, and optionally annotates every
    /// record. Output order matches input order; the first failing record in
    /// input order determines the error.
    pub fn prepare(&self, records: &[AnswerRecord], annotate: bool) -> Result<Vec<AnswerRecord>> {
        let results: Vec<Result<AnswerRecord>> = self.pool.install(|| {
            records
                .par_iter()
                .map(|r| self.prepare_one(r, annotate).map_err(|e| e.in_query(&r.query.id)))
                .collect()
        });
        results.into_iter().collect()
    }

    pub fn calibrate_prepared(&self, records: &[AnswerRecord], alpha: f64, mode: Mode) -> Result<CalibrationResult> {
        Ok(calibrate(records, alpha, mode, 0)?.with_provenance(
            self.annotator.kind(),
            self.embedder.kind(),
            created_unix(),
        ))
    }

    pub fn run_calibration(&self, dataset: impl AsRef<Path>, alpha: f64, mode: Mode) -> Result<CalibrationResult> {
        let records = self.load(dataset, true)?;
        let prepared = self.prepare(&records, true)?;
        self.calibrate_prepared(&prepared, alpha, mode)
    }

    /// Filters already-scored records and merges the retained claims.
    pub fn infer_prepared(&self, records: &[AnswerRecord], calib: &CalibrationResult) -> Result<Vec<InferenceRecord>> {
        let results: Vec<Result<InferenceRecord>> = self.pool.install(|| {
            records
                .par_iter()
                .map(|r| {
                    let q = threshold_for(calib, r.group_label(), self.config.policy)
                        .map_err(|e| e.in_query(&r.query.id))?;
                    let outcome = filter_record(r, q)?;
                    let merged_answer = self
                        .merger
                        .merge(&outcome.retained)
                        .map_err(|e| e.in_query(&r.query.id))?;
                    Ok(InferenceRecord {
                        group: r.group_label().map(str::to_string),
                        outcome,
                        merged_answer,
                    })
                })
                .collect()
        });
        results.into_iter().collect()
    }

    pub fn run_inference(&self, dataset: impl AsRef<Path>, calib: &CalibrationResult) -> Result<Vec<InferenceRecord>> {
        let records = self.load(dataset, false)?;
        let prepared = self.prepare(&records, false)?;
        self.infer_prepared(&prepared, calib)
    }

    /// One report per α on fixed prepared splits, in the order given.
    pub fn sweep_prepared(
        &self,
        calibration: &[AnswerRecord],
        labeled_test: &[AnswerRecord],
        alphas: &[f64],
        mode: Mode,
    ) -> Result<Vec<EvaluationReport>> {
        alphas
            .iter()
            .map(|&alpha| {
                let calib = self.calibrate_prepared(calibration, alpha, mode)?;
                let inferred = self.infer_prepared(labeled_test, &calib)?;
                let outcomes: Vec<FilterOutcome> = inferred.into_iter().map(|r| r.outcome).collect();
                evaluate(&outcomes, labeled_test, alpha, mode)
            })
            .collect()
    }

    /// Embeds every query, document and claim in `records` plus the extra
    /// `documents`, keyed for [`EmbeddingStore::resolve`]. Inline embeddings
    /// are copied rather than recomputed. Records with a raw answer but no
    /// claims are decomposed first so the claim keys match later runs.
    pub fn build_store(&self, records: &[AnswerRecord], documents: &[DocumentItem]) -> Result<EmbeddingStore> {
        const BATCH: usize = 64;
        let mut items: Vec<(String, String, Option<corpus::EmbeddingVector>)> = Vec::new();
        let mut seen: HashMap<String, String> = HashMap::new();
        let mut push = |key: String, text: &str, inline: Option<&corpus::EmbeddingVector>| -> Result<()> {
            match seen.get(&key) {
                Some(prev) if prev == text => Ok(()),
                Some(_) => Err(Error::Mismatch(format!("id `{key}` appears with different texts"))),
                None => {
                    seen.insert(key.clone(), text.to_string());
                    items.push((key, text.to_string(), inline.cloned()));
                    Ok(())
                }
            }
        };
        for record in records {
            let claims = if record.claims.is_empty() {
                match record.raw_answer.as_deref() {
                    Some(raw) => self.decomposer.decompose(raw).map_err(|e| e.in_query(&record.query.id))?,
                    None => Vec::new(),
                }
            } else {
                record.claims.clone()
            };
            push(record.query.id.clone(), &record.query.text, record.query.embedding.as_ref())?;
            for d in &record.documents {
                push(d.id.clone(), &d.text, d.embedding.as_ref())?;
            }
            for c in &claims {
                push(corpus::claim_key(&record.query.id, &c.id), &c.text, c.embedding.as_ref())?;
            }
        }
        for d in documents {
            push(d.id.clone(), &d.text, d.embedding.as_ref())?;
        }

        let missing: Vec<usize> = (0..items.len()).filter(|&i| items[i].2.is_none()).collect();
        let batches: Vec<Result<Vec<corpus::EmbeddingVector>>> = self.pool.install(|| {
            missing
                .par_chunks(BATCH)
                .map(|chunk| {
                    let texts: Vec<&str> = chunk.iter().map(|&i| items[i].1.as_str()).collect();
                    let out = self.embedder.embed_batch(&texts)?;
                    if out.len() != texts.len() {
                        return Err(Error::BackendResponse(format!(
                            "{} embeddings for {} inputs",
                            out.len(),
                            texts.len()
                        )));
                    }
                    Ok(out)
                })
                .collect()
        });
        let mut computed = Vec::with_capacity(missing.len());
        for batch in batches {
            computed.extend(batch?);
        }
        for (&i, v) in missing.iter().zip(computed) {
            items[i].2 = Some(v);
        }
        let mut store = EmbeddingStore::default();
        for (key, _, v) in items {
            store.insert(key, v.expect("every item embedded"))?;
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(flatten)]
    pub outcome: FilterOutcome,
    pub merged_answer: String,
}

/// What `infer` writes: the outcomes plus the calibration they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    pub alpha: f64,
    pub mode: Mode,
    pub policy: GroupPolicy,
    pub records: Vec<InferenceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub query_id: String,
    pub retained_count: usize,
    pub removed_count: usize,
    pub all_retained_factual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n: usize,
    /// Mean over records of `removed / max(1, claims)`.
    pub removal_rate: f64,
    /// Removed claims over all claims, pooled.
    pub removal_rate_micro: f64,
    /// Fraction of records whose retained claims are all factual.
    pub empirical_factuality: f64,
    /// Factual retained claims over all retained claims, pooled (1 when
    /// nothing is retained).
    pub empirical_factuality_claim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub alpha: f64,
    pub mode: Mode,
    pub n_test: usize,
    pub removal_rate: f64,
    pub removal_rate_micro: f64,
    pub empirical_factuality: f64,
    pub empirical_factuality_claim: f64,
    pub per_group: BTreeMap<String, GroupMetrics>,
    pub per_record: Vec<RecordMetrics>,
}

#[derive(Default)]
struct Tally {
    n: usize,
    removal_sum: f64,
    removed: usize,
    claims: usize,
    factual_records: usize,
    retained: usize,
    retained_factual: usize,
}

impl Tally {
    fn add(&mut self, removed: usize, retained: usize, retained_factual: usize) {
        let total = removed + retained;
        self.n += 1;
        self.removal_sum += removed as f64 / total.max(1) as f64;
        self.removed += removed;
        self.claims += total;
        self.retained += retained;
        self.retained_factual += retained_factual;
        if retained_factual == retained {
            self.factual_records += 1;
        }
    }

    fn metrics(&self) -> GroupMetrics {
        let ratio = |num: f64, den: usize, empty: f64| if den == 0 { empty } else { num / den as f64 };
        GroupMetrics {
            n: self.n,
            removal_rate: ratio(self.removal_sum, self.n, 0.0),
            removal_rate_micro: ratio(self.removed as f64, self.claims, 0.0),
            empirical_factuality: ratio(self.factual_records as f64, self.n, 1.0),
            empirical_factuality_claim: ratio(self.retained_factual as f64, self.retained, 1.0),
        }
    }
}

/// Scores filter outcomes against ground-truth claim labels.
///
/// Factuality is per record: a record counts as factual when every retained
/// claim is labeled factual, and an empty retained set is factual.
pub fn evaluate(
    outcomes: &[FilterOutcome],
    labeled_test: &[AnswerRecord],
    alpha: f64,
    mode: Mode,
) -> Result<EvaluationReport> {
    let by_id: HashMap<&str, &AnswerRecord> = labeled_test.iter().map(|r| (r.query.id.as_str(), r)).collect();
    if outcomes.len() != labeled_test.len() {
        return Err(Error::Mismatch(format!(
            "{} outcomes for {} test records",
            outcomes.len(),
            labeled_test.len()
        )));
    }
    let mut overall = Tally::default();
    let mut groups: BTreeMap<String, Tally> = BTreeMap::new();
    let mut per_record = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        let record = by_id
            .get(outcome.query_id.as_str())
            .ok_or_else(|| Error::Mismatch(format!("no test record for query `{}`", outcome.query_id)))?;
        let labels: HashMap<&str, Label> = record.claims.iter().map(|c| (c.id.as_str(), c.label)).collect();
        if outcome.retained.len() + outcome.removed.len() != record.claims.len() {
            return Err(Error::Mismatch(format!(
                "query `{}`: outcome covers {} claims, test record has {}",
                outcome.query_id,
                outcome.retained.len() + outcome.removed.len(),
                record.claims.len()
            )));
        }
        let label_of = |c: &ClaimRecord| -> Result<Label> {
            match labels.get(c.id.as_str()) {
                Some(l) if l.is_labeled() => Ok(*l),
                Some(_) => Err(Error::Unlabeled(c.id.clone()).in_query(&outcome.query_id)),
                None => Err(Error::Mismatch(format!(
                    "query `{}`: claim `{}` not in test record",
                    outcome.query_id, c.id
                ))),
            }
        };
        for c in &outcome.removed {
            label_of(c)?;
        }
        let mut retained_factual = 0;
        for c in &outcome.retained {
            if label_of(c)? == Label::Factual {
                retained_factual += 1;
            }
        }
        let (removed, retained) = (outcome.removed.len(), outcome.retained.len());
        overall.add(removed, retained, retained_factual);
        if let Some(g) = record.group_label() {
            groups.entry(g.to_string()).or_default().add(removed, retained, retained_factual);
        }
        per_record.push(RecordMetrics {
            query_id: outcome.query_id.clone(),
            retained_count: retained,
            removed_count: removed,
            all_retained_factual: retained_factual == retained,
        });
    }
    let m = overall.metrics();
    Ok(EvaluationReport {
        alpha,
        mode,
        n_test: m.n,
        removal_rate: m.removal_rate,
        removal_rate_micro: m.removal_rate_micro,
        empirical_factuality: m.empirical_factuality,
        empirical_factuality_claim: m.empirical_factuality_claim,
        per_group: groups.into_iter().map(|(g, t)| (g, t.metrics())).collect(),
        per_record,
    })
}

pub const CSV_HEADER: [&str; 7] = [
    "alpha",
    "mode",
    "group",
    "n",
    "removal_rate",
    "empirical_factuality_record",
    "empirical_factuality_claim",
];

/// α rounded to 10 decimals so sweep grids print as typed (`0.15`, not
/// `0.15000000000000002`).
pub fn format_alpha(alpha: f64) -> String {
    let rounded = (alpha * 1e10).round() / 1e10;
    format!("{rounded}")
}

fn format_rate(x: f64) -> String {
    format!("{x:.6}")
}

/// One row per (α, group) including the `__all__` aggregate; rows ordered by
/// ascending α, then group label.
pub fn write_reports_csv<W: Write>(writer: W, reports: &[EvaluationReport]) -> Result<()> {
    let mut sorted: Vec<&EvaluationReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for report in sorted {
        let mut rows: Vec<(&str, GroupMetrics)> = report
            .per_group
            .iter()
            .map(|(g, m)| (g.as_str(), m.clone()))
            .collect();
        rows.push((
            ALL_GROUPS,
            GroupMetrics {
                n: report.n_test,
                removal_rate: report.removal_rate,
                removal_rate_micro: report.removal_rate_micro,
                empirical_factuality: report.empirical_factuality,
                empirical_factuality_claim: report.empirical_factuality_claim,
            },
        ));
        rows.sort_by(|a, b| a.0.cmp(b.0));
        for (group, m) in rows {
            w.write_record([
                format_alpha(report.alpha),
                report.mode.to_string(),
                group.to_string(),
                m.n.to_string(),
                format_rate(m.removal_rate),
                format_rate(m.empirical_factuality),
                format_rate(m.empirical_factuality_claim),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn reports_csv_string(reports: &[EvaluationReport]) -> Result<String> {
    let mut buf = Vec::new();
    write_reports_csv(&mut buf, reports)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}
