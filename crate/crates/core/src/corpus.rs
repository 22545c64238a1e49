//! Data model and JSONL ingestion for queries, retrieved documents and
//! decomposed claims.
//!
//! One [`AnswerRecord`] per line. Embeddings may be inlined on any item or
//! resolved afterwards from an [`EmbeddingStore`]; inline vectors always win.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{mix64, Fnv1a};

/// A finite, non-empty vector of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidEmbedding("dimension must be positive".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding(format!(
                "non-finite component at index {pos}"
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Factual,
    Nonfactual,
    #[default]
    Unlabeled,
}

impl Label {
    pub fn from_factual(factual: bool) -> Self {
        if factual {
            Label::Factual
        } else {
            Label::Nonfactual
        }
    }

    pub fn is_labeled(self) -> bool {
        self != Label::Unlabeled
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryItem {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
}

impl QueryItem {
    /// The group label, treating an empty string as absent.
    pub fn group_label(&self) -> Option<&str> {
        self.group.as_deref().filter(|g| !g.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentItem {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<f64>,
    #[serde(default)]
    pub label: Label,
}

impl ClaimRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            embedding: None,
            relevance: None,
            label: Label::Unlabeled,
        }
    }

    pub fn with_relevance(mut self, relevance: f64) -> Self {
        self.relevance = Some(relevance);
        self
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }

    pub(crate) fn relevance_or_err(&self) -> Result<f64> {
        self.relevance
            .ok_or_else(|| Error::MissingRelevance(self.id.clone()))
    }
}

/// A query with its retrieved documents and decomposed answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub query: QueryItem,
    #[serde(default)]
    pub documents: Vec<DocumentItem>,
    #[serde(default)]
    pub claims: Vec<ClaimRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

impl AnswerRecord {
    pub fn group_label(&self) -> Option<&str> {
        self.query.group_label()
    }

    /// Checks the per-record invariants: non-empty texts, unique document and
    /// claim ids, relevances inside `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let qid = &self.query.id;
        if qid.is_empty() {
            return Err(Error::InvalidRecord("query id is empty".into()));
        }
        if self.query.text.is_empty() {
            return Err(Error::InvalidRecord(format!("query `{qid}` has empty text")));
        }
        let mut seen = HashSet::new();
        for doc in &self.documents {
            if doc.text.is_empty() {
                return Err(Error::InvalidRecord(format!(
                    "query `{qid}`: document `{}` has empty text",
                    doc.id
                )));
            }
            if !seen.insert(doc.id.as_str()) {
                return Err(Error::DuplicateId {
                    kind: "document",
                    id: doc.id.clone(),
                });
            }
        }
        seen.clear();
        for claim in &self.claims {
            if claim.text.is_empty() {
                return Err(Error::InvalidRecord(format!(
                    "query `{qid}`: claim `{}` has empty text",
                    claim.id
                )));
            }
            if !seen.insert(claim.id.as_str()) {
                return Err(Error::DuplicateId {
                    kind: "claim",
                    id: claim.id.clone(),
                });
            }
            if let Some(r) = claim.relevance {
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::InvalidRecord(format!(
                        "query `{qid}`: claim `{}` relevance {r} outside [0, 1]",
                        claim.id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Every claim must carry a factual/nonfactual label.
    Calibration,
    Test,
}

/// Loads a JSONL dataset, one [`AnswerRecord`] per non-blank line.
pub fn load_dataset(path: impl AsRef<Path>, split: Split) -> Result<Vec<AnswerRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    parse_dataset(reader, &path.display().to_string(), split)
}

pub fn parse_dataset<R: BufRead>(reader: R, source: &str, split: Split) -> Result<Vec<AnswerRecord>> {
    let mut records = Vec::new();
    let mut query_ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: source.to_string(),
            line: idx + 1,
            message,
        };
        let record: AnswerRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        record.validate().map_err(|e| parse_err(e.to_string()))?;
        if !query_ids.insert(record.query.id.clone()) {
            return Err(Error::DuplicateId {
                kind: "query",
                id: record.query.id,
            });
        }
        if split == Split::Calibration {
            if let Some(c) = record.claims.iter().find(|c| !c.label.is_labeled()) {
                return Err(Error::UnlabeledCalibrationClaim {
                    query_id: record.query.id.clone(),
                    claim_id: c.id.clone(),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_dataset<W: Write>(mut writer: W, records: &[AnswerRecord]) -> Result<()> {
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[AnswerRecord]) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), records)
}

/// Loads a document corpus: JSONL of `{"id", "text", "embedding"?}`.
pub fn load_documents(path: impl AsRef<Path>) -> Result<Vec<DocumentItem>> {
    let path = path.as_ref();
    let source = path.display().to_string();
    let mut docs = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: DocumentItem = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !ids.insert(doc.id.clone()) {
            return Err(Error::DuplicateId {
                kind: "document",
                id: doc.id,
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Store key for a claim: `<query id>/<claim id>`.
pub fn claim_key(query_id: &str, claim_id: &str) -> String {
    format!("{query_id}/{claim_id}")
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreEntry {
    id: String,
    embedding: EmbeddingVector,
}

/// Embeddings keyed by item id, shared across records. Query and document
/// ids are used as-is; claim ids are only unique within their record, so
/// claims are keyed by [`claim_key`].
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    entries: HashMap<String, EmbeddingVector>,
    order: Vec<String>,
}

impl EmbeddingStore {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let source = path.display().to_string();
        let mut store = Self::default();
        for (idx, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: StoreEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: source.clone(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            store.insert(entry.id, entry.embedding)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, id: String, embedding: EmbeddingVector) -> Result<()> {
        if self.entries.contains_key(&id) {
            return Err(Error::DuplicateId {
                kind: "embedding store",
                id,
            });
        }
        self.order.push(id.clone());
        self.entries.insert(id, embedding);
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fills every missing embedding in `records` from the store.
    pub fn resolve(&self, records: &mut [AnswerRecord]) {
        let fill = |id: &str, slot: &mut Option<EmbeddingVector>| {
            if slot.is_none() {
                if let Some(v) = self.entries.get(id) {
                    *slot = Some(v.clone());
                }
            }
        };
        for record in records {
            fill(&record.query.id, &mut record.query.embedding);
            for doc in &mut record.documents {
                fill(&doc.id, &mut doc.embedding);
            }
            for claim in &mut record.claims {
                fill(&claim_key(&record.query.id, &claim.id), &mut claim.embedding);
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for id in &self.order {
            let entry = StoreEntry {
                id: id.clone(),
                embedding: self.entries[id].clone(),
            };
            serde_json::to_writer(&mut w, &entry)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Partitions records by their query's group label, keeping input order
/// within each part.
pub fn partition_by_group(records: &[AnswerRecord]) -> Result<BTreeMap<String, Vec<AnswerRecord>>> {
    let mut parts: BTreeMap<String, Vec<AnswerRecord>> = BTreeMap::new();
    for record in records {
        let group = record
            .group_label()
            .ok_or_else(|| Error::MissingGroup(record.query.id.clone()))?;
        parts.entry(group.to_string()).or_default().push(record.clone());
    }
    Ok(parts)
}

/// Deterministic calibration/test split keyed on `(seed, query id)`.
///
/// Records are ranked by a mixed FNV-1a hash of the seed's little-endian
/// bytes followed by the query id; the
/// first `floor(n * calibration_fraction)` go to calibration. Both halves keep
/// input order, and a record's side does not depend on the other records'
/// positions in the file.
pub fn split_calibration_test(
    records: &[AnswerRecord],
    calibration_fraction: f64,
    seed: u64,
) -> Result<(Vec<AnswerRecord>, Vec<AnswerRecord>)> {
    if !(0.0..=1.0).contains(&calibration_fraction) {
        return Err(Error::Config(format!(
            "calibration fraction must lie in [0, 1], got {calibration_fraction}"
        )));
    }
    let n_cal = (records.len() as f64 * calibration_fraction).floor() as usize;
    let mut ranked: Vec<(u64, &str, usize)> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let key = mix64(
                Fnv1a::default()
                    .write(&seed.to_le_bytes())
                    .write(r.query.id.as_bytes())
                    .finish(),
            );
            (key, r.query.id.as_str(), i)
        })
        .collect();
    ranked.sort_unstable();
    let mut is_cal = vec![false; records.len()];
    for &(_, _, i) in ranked.iter().take(n_cal) {
        is_cal[i] = true;
    }
    let (cal, test): (Vec<_>, Vec<_>) = records
        .iter()
        .cloned()
        .zip(is_cal)
        .partition(|(_, c)| *c);
    Ok((
        cal.into_iter().map(|(r, _)| r).collect(),
        test.into_iter().map(|(r, _)| r).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn line(qid: &str, group: Option<&str>, labels: &[&str]) -> String {
        let claims: Vec<_> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| serde_json::json!({"id": format!("{qid}-c{i}"), "text": format!("claim {i}"), "label": l}))
            .collect();
        let mut query = serde_json::json!({"id": qid, "text": "what?"});
        if let Some(g) = group {
            query["group"] = g.into();
        }
        serde_json::json!({
            "query": query,
            "documents": [{"id": "d1", "text": "doc"}],
            "claims": claims,
            "ground_truth": "answer"
        })
        .to_string()
    }

    fn parse(text: &str, split: Split) -> Result<Vec<AnswerRecord>> {
        parse_dataset(Cursor::new(text), "mem", split)
    }

    #[test]
    fn loads_in_file_order() {
        let text = [
            line("q1", None, &["factual"]),
            line("q2", None, &["nonfactual"]),
            line("q3", None, &[]),
        ]
        .join("\n");
        let records = parse(&text, Split::Calibration).unwrap();
        let ids: Vec<_> = records.iter().map(|r| r.query.id.as_str()).collect();
        assert_eq!(ids, ["q1", "q2", "q3"]);
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        assert!(parse("", Split::Test).unwrap().is_empty());
        assert!(parse("\n\n", Split::Calibration).unwrap().is_empty());
    }

    #[test]
    fn unlabeled_claim_rejected_on_calibration_only() {
        let text = line("q1", None, &["factual", "unlabeled"]);
        match parse(&text, Split::Calibration) {
            Err(Error::UnlabeledCalibrationClaim { claim_id, .. }) => assert_eq!(claim_id, "q1-c1"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(parse(&text, Split::Test).unwrap().len(), 1);
    }

    #[test]
    fn missing_label_defaults_to_unlabeled() {
        let text = r#"{"query":{"id":"q","text":"t"},"claims":[{"id":"c","text":"x"}]}"#;
        let r = parse(text, Split::Test).unwrap();
        assert_eq!(r[0].claims[0].label, Label::Unlabeled);
        assert!(parse(text, Split::Calibration).is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{{not json\n", line("q1", None, &[]));
        match parse(&text, Split::Test) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = format!("{}\n{}", line("q1", None, &[]), line("q1", None, &[]));
        assert!(matches!(
            parse(&text, Split::Test),
            Err(Error::DuplicateId { kind: "query", .. })
        ));
        let dup_claims = r#"{"query":{"id":"q","text":"t"},"claims":[{"id":"c","text":"x"},{"id":"c","text":"y"}]}"#;
        assert!(matches!(parse(dup_claims, Split::Test), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn non_finite_embedding_rejected() {
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
        let text = r#"{"query":{"id":"q","text":"t","embedding":[]}}"#;
        assert!(parse(text, Split::Test).is_err());
    }

    #[test]
    fn partition_groups_in_order() {
        let text = [
            line("r1", Some("A"), &[]),
            line("r2", Some("B"), &[]),
            line("r3", Some("A"), &[]),
        ]
        .join("\n");
        let records = parse(&text, Split::Test).unwrap();
        let parts = partition_by_group(&records).unwrap();
        let ids = |g: &str| -> Vec<String> { parts[g].iter().map(|r| r.query.id.clone()).collect() };
        assert_eq!(ids("A"), ["r1", "r3"]);
        assert_eq!(ids("B"), ["r2"]);
    }

    #[test]
    fn partition_single_group() {
        let text = [line("r1", Some("A"), &[]), line("r2", Some("A"), &[])].join("\n");
        let parts = partition_by_group(&parse(&text, Split::Test).unwrap()).unwrap();
        assert_eq!(parts.len(), 1);
    }

    #[test]
    fn partition_requires_groups() {
        let text = [line("r1", Some("A"), &[]), line("r2", None, &[])].join("\n");
        let records = parse(&text, Split::Test).unwrap();
        assert!(matches!(partition_by_group(&records), Err(Error::MissingGroup(id)) if id == "r2"));
    }

    #[test]
    fn store_fills_only_missing_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"q\",\"embedding\":[1.0,0.0]}\n{\"id\":\"q/c\",\"embedding\":[9.0,9.0]}\n{\"id\":\"q/d\",\"embedding\":[0.0,1.0]}\n",
        )
        .unwrap();
        let store = EmbeddingStore::load(&path).unwrap();
        let text = r#"{"query":{"id":"q","text":"t"},"claims":[{"id":"c","text":"x","embedding":[5.0,5.0]},{"id":"d","text":"y"}]}"#;
        let mut records = parse(text, Split::Test).unwrap();
        store.resolve(&mut records);
        assert_eq!(records[0].query.embedding.as_ref().unwrap().values(), &[1.0, 0.0]);
        assert_eq!(records[0].claims[0].embedding.as_ref().unwrap().values(), &[5.0, 5.0]);
        assert_eq!(records[0].claims[1].embedding.as_ref().unwrap().values(), &[0.0, 1.0]);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let text: Vec<_> = (0..20).map(|i| line(&format!("q{i}"), None, &[])).collect();
        let records = parse(&text.join("\n"), Split::Test).unwrap();
        let (cal, test) = split_calibration_test(&records, 0.5, 42).unwrap();
        assert_eq!(cal.len(), 10);
        assert_eq!(test.len(), 10);
        let (cal2, _) = split_calibration_test(&records, 0.5, 42).unwrap();
        assert_eq!(cal, cal2);
        let (cal3, _) = split_calibration_test(&records, 0.5, 7).unwrap();
        assert_ne!(cal, cal3);
        let ids: HashSet<_> = cal.iter().chain(&test).map(|r| r.query.id.clone()).collect();
        assert_eq!(ids.len(), 20);
    }
}
