//! Synthetic populations and a Monte Carlo harness for the coverage
//! guarantees.
//!
//! Relevances are drawn directly (no embeddings), so the harness exercises
//! calibration, filtering and evaluation in isolation. Each trial draws fresh
//! calibration and test sets, which makes the trial mean an estimate of the
//! probability taken over both draws.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{self, filter_record, threshold_for, GroupPolicy, Mode};
use crate::corpus::{AnswerRecord, ClaimRecord, Label, QueryItem};
use crate::error::{Error, Result};
use crate::pipeline::evaluate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub label: String,
    pub weight: f64,
    /// Inclusive `[min, max]` number of claims per answer.
    pub claim_count_range: (usize, usize),
    pub factual_prob: f64,
    pub score_separation: f64,
}

impl GroupSpec {
    pub fn new(label: &str, weight: f64, claim_count_range: (usize, usize), factual_prob: f64, score_separation: f64) -> Self {
        Self {
            label: label.to_string(),
            weight,
            claim_count_range,
            factual_prob,
            score_separation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_calibration: usize,
    pub n_test: usize,
    pub groups: Vec<GroupSpec>,
    pub trials: usize,
}

impl Default for SynthConfig {
    /// Two equally likely groups with factual rates 0.9 and 0.6.
    fn default() -> Self {
        Self {
            seed: 42,
            n_calibration: 500,
            n_test: 200,
            groups: vec![
                GroupSpec::new("easy", 1.0, (4, 10), 0.9, 0.3),
                GroupSpec::new("hard", 1.0, (4, 10), 0.6, 0.3),
            ],
            trials: 1000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_calibration == 0 || self.n_test == 0 {
            return bad("n_calibration and n_test must be positive".into());
        }
        if self.trials == 0 {
            return bad("trials must be positive".into());
        }
        if self.groups.is_empty() {
            return bad("at least one group is required".into());
        }
        let mut labels = std::collections::HashSet::new();
        for g in &self.groups {
            if g.label.is_empty() || !labels.insert(g.label.as_str()) {
                return bad(format!("group labels must be unique and non-empty, got `{}`", g.label));
            }
            if !(g.weight.is_finite() && g.weight > 0.0) {
                return bad(format!("group `{}`: weight must be positive", g.label));
            }
            if !(0.0..=1.0).contains(&g.factual_prob) || !(0.0..=1.0).contains(&g.score_separation) {
                return bad(format!(
                    "group `{}`: factual_prob and score_separation must lie in [0, 1]",
                    g.label
                ));
            }
            if g.claim_count_range.0 > g.claim_count_range.1 {
                return bad(format!("group `{}`: claim count range is empty", g.label));
            }
        }
        Ok(())
    }
}

/// Draws a relevance for one claim.
pub trait ScoreSampler: Sync {
    fn sample(&self, rng: &mut dyn RngCore, group: &GroupSpec, factual: bool) -> f64;
}

/// Factual ~ U(s, 1), nonfactual ~ U(0, 1 - s) with `s` the group's
/// separation; `s = 1` makes the supports disjoint.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformSeparation;

impl ScoreSampler for UniformSeparation {
    fn sample(&self, rng: &mut dyn RngCore, group: &GroupSpec, factual: bool) -> f64 {
        let s = group.score_separation;
        let u: f64 = rng.random();
        if factual {
            s + (1.0 - s) * u
        } else {
            (1.0 - s) * u
        }
    }
}

/// Deterministic stream for `(seed, trial)`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn draw_records(
    cfg: &SynthConfig,
    prefix: &str,
    n: usize,
    groups: &WeightedIndex<f64>,
    rng: &mut ChaCha8Rng,
    sampler: &dyn ScoreSampler,
) -> Vec<AnswerRecord> {
    (0..n)
        .map(|i| {
            let spec = &cfg.groups[groups.sample(rng)];
            let (lo, hi) = spec.claim_count_range;
            let count = rng.random_range(lo..=hi);
            let claims = (0..count)
                .map(|k| {
                    let factual = rng.random_bool(spec.factual_prob);
                    let relevance = sampler.sample(rng, spec, factual);
                    let id = format!("c{k}");
                    ClaimRecord::new(id.clone(), id)
                        .with_relevance(relevance)
                        .with_label(Label::from_factual(factual))
                })
                .collect();
            let id = format!("{prefix}-{i}");
            AnswerRecord {
                query: QueryItem {
                    text: id.clone(),
                    id,
                    group: Some(spec.label.clone()),
                    embedding: None,
                },
                documents: Vec::new(),
                claims,
                raw_answer: None,
                ground_truth: None,
            }
        })
        .collect()
}

pub type Population = (Vec<AnswerRecord>, Vec<AnswerRecord>);

pub fn generate_with(cfg: &SynthConfig, rng: &mut ChaCha8Rng, sampler: &dyn ScoreSampler) -> Result<Population> {
    cfg.validate()?;
    let weights = WeightedIndex::new(cfg.groups.iter().map(|g| g.weight))
        .map_err(|e| Error::Config(format!("group weights: {e}")))?;
    let cal = draw_records(cfg, "cal", cfg.n_calibration, &weights, rng, sampler);
    let test = draw_records(cfg, "test", cfg.n_test, &weights, rng, sampler);
    Ok((cal, test))
}

/// Calibration and test sets for trial 0 of `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<Population> {
    generate_with(cfg, &mut trial_rng(cfg.seed, 0), &UniformSeparation)
}

#[derive(Clone, Copy)]
pub struct HarnessOptions<'a> {
    pub sampler: &'a dyn ScoreSampler,
    /// Shift applied to the calibrated order-statistic rank. Nonzero values
    /// deliberately miscalibrate; used to check that the harness notices.
    pub rank_offset: i64,
}

impl Default for HarnessOptions<'_> {
    fn default() -> Self {
        Self {
            sampler: &UniformSeparation,
            rank_offset: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialGroup {
    pub n_test: usize,
    pub n_calibration: usize,
    pub factuality: f64,
    pub removal_rate: f64,
    pub zero_score_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub empirical_factuality: f64,
    pub removal_rate: f64,
    /// Fraction of calibration scores equal to 0 (answers with no
    /// nonfactual claim).
    pub zero_score_mass: f64,
    pub per_group: BTreeMap<String, TrialGroup>,
}

/// One generate → calibrate → filter → evaluate cycle on trial `trial`'s
/// stream.
pub fn coverage_trial(cfg: &SynthConfig, alpha: f64, mode: Mode, trial: u64, opts: HarnessOptions<'_>) -> Result<TrialResult> {
    let mut rng = trial_rng(cfg.seed, trial);
    let (cal, test) = generate_with(cfg, &mut rng, opts.sampler)?;
    let calib = conformal::calibrate(&cal, alpha, mode, opts.rank_offset)?;
    let outcomes = test
        .iter()
        .map(|r| {
            let q = threshold_for(&calib, r.group_label(), GroupPolicy::FallbackMarginal)?;
            filter_record(r, q)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&outcomes, &test, alpha, mode)?;

    let mut cal_stats: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut zeros = 0;
    for r in &cal {
        let is_zero = conformal::conformal_score(r)?.score == 0.0;
        zeros += usize::from(is_zero);
        let e = cal_stats.entry(r.group_label().unwrap_or_default()).or_default();
        e.0 += 1;
        e.1 += usize::from(is_zero);
    }
    let per_group = report
        .per_group
        .iter()
        .map(|(g, m)| {
            let (n_cal, n_zero) = cal_stats.get(g.as_str()).copied().unwrap_or((0, 0));
            (
                g.clone(),
                TrialGroup {
                    n_test: m.n,
                    n_calibration: n_cal,
                    factuality: m.empirical_factuality,
                    removal_rate: m.removal_rate,
                    zero_score_mass: if n_cal == 0 { 0.0 } else { n_zero as f64 / n_cal as f64 },
                },
            )
        })
        .collect();
    Ok(TrialResult {
        empirical_factuality: report.empirical_factuality,
        removal_rate: report.removal_rate,
        zero_score_mass: zeros as f64 / cal.len() as f64,
        per_group,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCoverage {
    /// Trials in which the group appeared in the test set.
    pub trials: usize,
    pub mean_factuality: f64,
    pub se_factuality: f64,
    pub mean_removal: f64,
    pub mean_calibration_n: f64,
    pub zero_score_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub alpha: f64,
    pub mode: Mode,
    pub trials: usize,
    pub mean_factuality: f64,
    pub se_factuality: f64,
    pub mean_removal: f64,
    pub se_removal: f64,
    pub n_calibration: usize,
    pub zero_score_mass: f64,
    pub per_group: BTreeMap<String, GroupCoverage>,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs `cfg.trials` independent trials in parallel and aggregates them in
/// trial order, so the summary does not depend on scheduling.
pub fn run_coverage(cfg: &SynthConfig, alpha: f64, mode: Mode, opts: HarnessOptions<'_>) -> Result<CoverageSummary> {
    cfg.validate()?;
    let results: Vec<Result<TrialResult>> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| coverage_trial(cfg, alpha, mode, t, opts))
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let fact: Vec<f64> = results.iter().map(|r| r.empirical_factuality).collect();
    let removal: Vec<f64> = results.iter().map(|r| r.removal_rate).collect();
    let zero: Vec<f64> = results.iter().map(|r| r.zero_score_mass).collect();
    let (mean_factuality, se_factuality) = mean_se(&fact);
    let (mean_removal, se_removal) = mean_se(&removal);

    let mut per_group = BTreeMap::new();
    for spec in &cfg.groups {
        let rows: Vec<&TrialGroup> = results.iter().filter_map(|r| r.per_group.get(&spec.label)).collect();
        if rows.is_empty() {
            continue;
        }
        let col = |f: fn(&TrialGroup) -> f64| rows.iter().map(|g| f(g)).collect::<Vec<_>>();
        let (mf, sf) = mean_se(&col(|g| g.factuality));
        per_group.insert(
            spec.label.clone(),
            GroupCoverage {
                trials: rows.len(),
                mean_factuality: mf,
                se_factuality: sf,
                mean_removal: mean_se(&col(|g| g.removal_rate)).0,
                mean_calibration_n: mean_se(&col(|g| g.n_calibration as f64)).0,
                zero_score_mass: mean_se(&col(|g| g.zero_score_mass)).0,
            },
        );
    }
    Ok(CoverageSummary {
        alpha,
        mode,
        trials: cfg.trials,
        mean_factuality,
        se_factuality,
        mean_removal,
        se_removal,
        n_calibration: cfg.n_calibration,
        zero_score_mass: mean_se(&zero).0,
        per_group,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    /// `__all__` or a group label.
    pub scope: String,
    pub kind: String,
    pub observed: f64,
    pub bound: f64,
}

/// Upper limit on coverage for a calibration set of size `n`: the rank rule
/// covers at most `1 - α + 1/(n + 1)` with continuous scores, and at most the
/// point mass at 0 when that mass alone exceeds `1 - α`.
pub fn coverage_upper_bound(alpha: f64, n: f64, zero_score_mass: f64) -> f64 {
    (1.0 - alpha + 1.0 / (n + 1.0)).max(zero_score_mass)
}

/// Checks the summary against `1 - α ± tolerance` (with the finite-sample
/// upper allowance). In Mondrian mode every group is checked separately.
pub fn check_bounds(summary: &CoverageSummary, tolerance: f64) -> Vec<BoundViolation> {
    let target = 1.0 - summary.alpha;
    let mut out = Vec::new();
    let mut check = |scope: &str, observed: f64, n: f64, zero: f64| {
        let lower = target - tolerance;
        if observed < lower {
            out.push(BoundViolation {
                scope: scope.to_string(),
                kind: "under_coverage".into(),
                observed,
                bound: lower,
            });
        }
        let upper = coverage_upper_bound(summary.alpha, n, zero) + tolerance;
        if observed > upper {
            out.push(BoundViolation {
                scope: scope.to_string(),
                kind: "over_coverage".into(),
                observed,
                bound: upper,
            });
        }
    };
    match summary.mode {
        Mode::Marginal => check(
            crate::pipeline::ALL_GROUPS,
            summary.mean_factuality,
            summary.n_calibration as f64,
            summary.zero_score_mass,
        ),
        Mode::Mondrian => {
            for (g, c) in &summary.per_group {
                check(g, c.mean_factuality, c.mean_calibration_n, c.zero_score_mass);
            }
        }
    }
    out
}
