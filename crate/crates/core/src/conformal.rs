//! Conformal scores, finite-sample quantiles, claim filtering, and marginal
//! and per-group (Mondrian) calibration.
//!
//! A record's conformal score is the smallest threshold at which every
//! retained claim is factual, which with strict retention (`relevance > q`) is
//! the largest relevance among its nonfactual claims, or 0 if it has none.
//! Calibrating `q̂` as the `k`-th smallest of `n` scores with
//! `k = ⌈(n + 1)(1 − α)⌉` then gives `P(S_test ≤ q̂) ≥ 1 − α`, i.e. the
//! filtered test answer is entirely factual with probability at least `1 − α`.
//! Running the same procedure separately on each group's records gives the
//! guarantee within every group.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerRecord, ClaimRecord, Label};
use crate::error::{Error, Result};

/// A filter threshold. Claims are retained iff their relevance is strictly
/// greater than the value; `RejectAll` retains nothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Value(f64),
    RejectAll,
}

impl Threshold {
    pub fn retains(&self, relevance: f64) -> bool {
        match *self {
            Threshold::Value(q) => relevance > q,
            Threshold::RejectAll => false,
        }
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Threshold::Value(q) => Some(q),
            Threshold::RejectAll => None,
        }
    }

    pub fn is_reject_all(&self) -> bool {
        matches!(self, Threshold::RejectAll)
    }

    /// `RejectAll` sorts above every value.
    pub fn cmp_total(&self, other: &Threshold) -> std::cmp::Ordering {
        use std::cmp::Ordering::*;
        match (self, other) {
            (Threshold::Value(a), Threshold::Value(b)) => a.total_cmp(b),
            (Threshold::Value(_), Threshold::RejectAll) => Less,
            (Threshold::RejectAll, Threshold::Value(_)) => Greater,
            (Threshold::RejectAll, Threshold::RejectAll) => Equal,
        }
    }

    fn validate_calibrated(&self) -> Result<()> {
        match *self {
            Threshold::Value(q) if !(0.0..=1.0).contains(&q) => Err(Error::ScoreOutOfRange(q)),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Value(q) => write!(f, "{q}"),
            Threshold::RejectAll => f.write_str(REJECT_ALL),
        }
    }
}

const REJECT_ALL: &str = "REJECT_ALL";

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Value(q) => s.serialize_f64(*q),
            Threshold::RejectAll => s.serialize_str(REJECT_ALL),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(q) if q.is_finite() => Ok(Threshold::Value(q)),
            Raw::Num(q) => Err(de::Error::custom(format!("non-finite threshold {q}"))),
            Raw::Str(s) if s == REJECT_ALL => Ok(Threshold::RejectAll),
            Raw::Str(s) => Err(de::Error::custom(format!(
                "expected a number or \"{REJECT_ALL}\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Marginal,
    Mondrian,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Marginal => "marginal",
            Mode::Mondrian => "mondrian",
        })
    }
}

/// What to do when a test query's group has no calibrated threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GroupPolicy {
    #[default]
    Strict,
    FallbackMarginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalScore {
    pub query_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

/// Largest relevance among nonfactual claims; 0 if there are none.
pub fn conformal_score(record: &AnswerRecord) -> Result<ConformalScore> {
    let mut score = 0.0_f64;
    for claim in &record.claims {
        let relevance = claim.relevance_or_err().map_err(|e| e.in_query(&record.query.id))?;
        match claim.label {
            Label::Nonfactual => score = score.max(relevance),
            Label::Factual => {}
            Label::Unlabeled => {
                return Err(Error::Unlabeled(claim.id.clone()).in_query(&record.query.id))
            }
        }
    }
    Ok(ConformalScore {
        query_id: record.query.id.clone(),
        score,
        group: record.group_label().map(str::to_string),
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

/// `⌊m·α⌋` in exact arithmetic, reading `α ∈ (0, 1)` as its shortest
/// round-trip decimal (`0.1` is one tenth, not the nearest binary fraction).
fn floor_scaled(m: u128, alpha: f64) -> u128 {
    let text = alpha.to_string();
    let digits = text.strip_prefix("0.").expect("alpha in (0, 1) prints as 0.xxx");
    // At most 17 significant digits and m < 2^65, so the product stays below
    // 10^37; with 37 or more decimals the floor is 0.
    if digits.len() >= 37 {
        return 0;
    }
    let numerator: u128 = digits.parse().expect("decimal digits");
    m * numerator / 10u128.pow(digits.len() as u32)
}

/// `⌈(n + 1)(1 − α)⌉`, the 1-based rank of the calibrated order statistic,
/// computed exactly as `(n + 1) − ⌊(n + 1)α⌋`.
pub fn quantile_rank(n: usize, alpha: f64) -> Result<usize> {
    check_alpha(alpha)?;
    let m = n as u128 + 1;
    Ok((m - floor_scaled(m, alpha)) as usize)
}

/// The `k`-th smallest score (1-based, duplicates kept), or `RejectAll` when
/// `k > n`.
pub fn order_statistic(scores: &[f64], k: usize) -> Threshold {
    if k == 0 || k > scores.len() {
        return Threshold::RejectAll;
    }
    let mut buf = scores.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
    Threshold::Value(*kth)
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    match scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        Some(&bad) => Err(Error::ScoreOutOfRange(bad)),
        None => Ok(()),
    }
}

pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<Threshold> {
    conformal_quantile_with_offset(scores, alpha, 0)
}

/// [`conformal_quantile`] with the rank shifted by `rank_offset`. Any nonzero
/// offset breaks the coverage guarantee; it exists for mutation tests of the
/// coverage harness.
#[doc(hidden)]
pub fn conformal_quantile_with_offset(scores: &[f64], alpha: f64, rank_offset: i64) -> Result<Threshold> {
    check_scores(scores)?;
    let k = quantile_rank(scores.len(), alpha)? as i64 + rank_offset;
    Ok(order_statistic(scores, k.max(1) as usize))
}

/// The plain empirical `(1 − α)`-quantile, `S_(⌈n(1 − α)⌉)`, which minimizes
/// the mean pinball loss at `α`.
pub fn empirical_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let n = scores.len() as u128;
    let k = ((n - floor_scaled(n, alpha)) as usize).max(1);
    Ok(order_statistic(scores, k)
        .value()
        .expect("rank within bounds"))
}

/// `(1 − α)·max(r, 0) + α·max(−r, 0)`.
pub fn pinball_loss(r: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * r.max(0.0) + alpha * (-r).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub query_id: String,
    pub threshold_used: Threshold,
    pub retained: Vec<ClaimRecord>,
    pub removed: Vec<ClaimRecord>,
}

pub fn filter_claims(claims: &[ClaimRecord], q: Threshold) -> Result<FilterOutcome> {
    let mut retained = Vec::new();
    let mut removed = Vec::new();
    for claim in claims {
        if q.retains(claim.relevance_or_err()?) {
            retained.push(claim.clone());
        } else {
            removed.push(claim.clone());
        }
    }
    Ok(FilterOutcome {
        query_id: String::new(),
        threshold_used: q,
        retained,
        removed,
    })
}

pub fn filter_record(record: &AnswerRecord, q: Threshold) -> Result<FilterOutcome> {
    let mut out = filter_claims(&record.claims, q).map_err(|e| e.in_query(&record.query.id))?;
    out.query_id = record.query.id.clone();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupThreshold {
    pub q: Threshold,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    pub marginal_q: Threshold,
    #[serde(default)]
    pub per_group: BTreeMap<String, GroupThreshold>,
    pub n: usize,
    #[serde(default)]
    pub annotator: String,
    #[serde(default)]
    pub provider: String,
    #[serde(default)]
    pub created_unix: i64,
    /// Effective run configuration, echoed for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl CalibrationResult {
    pub fn mode(&self) -> Mode {
        if self.per_group.is_empty() {
            Mode::Marginal
        } else {
            Mode::Mondrian
        }
    }

    pub fn with_provenance(mut self, annotator: &str, provider: &str, created_unix: i64) -> Self {
        self.annotator = annotator.to_string();
        self.provider = provider.to_string();
        self.created_unix = created_unix;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        self.marginal_q.validate_calibrated()?;
        for g in self.per_group.values() {
            g.q.validate_calibrated()?;
        }
        if !self.per_group.is_empty() {
            let total: usize = self.per_group.values().map(|g| g.n).sum();
            if total != self.n {
                return Err(Error::Config(format!(
                    "calibration counts disagree: n = {} but groups sum to {total}",
                    self.n
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let calib: Self = serde_json::from_str(text)?;
        calib.validate()?;
        Ok(calib)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn scores_of(records: &[AnswerRecord]) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| conformal_score(r).map(|s| s.score))
        .collect()
}

pub fn calibrate_marginal(records: &[AnswerRecord], alpha: f64) -> Result<CalibrationResult> {
    calibrate(records, alpha, Mode::Marginal, 0)
}

pub fn calibrate_mondrian(records: &[AnswerRecord], alpha: f64) -> Result<CalibrationResult> {
    calibrate(records, alpha, Mode::Mondrian, 0)
}

/// Calibrates in either mode. `rank_offset` must be 0 outside of mutation
/// tests; see [`conformal_quantile_with_offset`].
#[doc(hidden)]
pub fn calibrate(records: &[AnswerRecord], alpha: f64, mode: Mode, rank_offset: i64) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    let scores = scores_of(records)?;
    let marginal_q = conformal_quantile_with_offset(&scores, alpha, rank_offset)?;
    let mut per_group = BTreeMap::new();
    if mode == Mode::Mondrian {
        let mut grouped: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (record, &score) in records.iter().zip(&scores) {
            let group = record
                .group_label()
                .ok_or_else(|| Error::MissingGroup(record.query.id.clone()))?;
            grouped.entry(group).or_default().push(score);
        }
        for (group, group_scores) in grouped {
            let q = conformal_quantile_with_offset(&group_scores, alpha, rank_offset)?;
            per_group.insert(
                group.to_string(),
                GroupThreshold {
                    q,
                    n: group_scores.len(),
                },
            );
        }
    }
    Ok(CalibrationResult {
        alpha,
        marginal_q,
        per_group,
        n: records.len(),
        annotator: String::new(),
        provider: String::new(),
        created_unix: 0,
        config: None,
    })
}

/// Looks up the threshold for a test query's group.
///
/// Marginal calibrations have no per-group table, so every query gets
/// `marginal_q` regardless of `policy`.
pub fn threshold_for(calib: &CalibrationResult, group: Option<&str>, policy: GroupPolicy) -> Result<Threshold> {
    if calib.per_group.is_empty() {
        return Ok(calib.marginal_q);
    }
    match group.and_then(|g| calib.per_group.get(g)) {
        Some(g) => Ok(g.q),
        None => match policy {
            GroupPolicy::FallbackMarginal => Ok(calib.marginal_q),
            GroupPolicy::Strict => Err(Error::UnknownGroup(group.unwrap_or("<none>").to_string())),
        },
    }
}
