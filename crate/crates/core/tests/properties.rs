//! Randomized invariants over the public library API.

use std::collections::BTreeSet;

use conformal_claims::conformal::{calibrate, filter_record, threshold_for, GroupPolicy, Mode, Threshold};
use conformal_claims::corpus::{
    parse_dataset, partition_by_group, split_calibration_test, write_dataset, AnswerRecord, ClaimRecord, DocumentItem,
    EmbeddingVector, Label, QueryItem, Split,
};
use conformal_claims::pipeline::{evaluate, Pipeline, PipelineConfig};
use conformal_claims::similarity::{score_claims, HashedTf};
use conformal_claims::synth::{generate, GroupSpec, SynthConfig};
use proptest::prelude::*;

const WORDS: [&str; 12] = [
    "aspirin", "fever", "river", "paris", "capital", "dose", "blood", "mountain", "treaty", "signed", "reduces", "flows",
];

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 1..6).prop_map(|w| w.join(" "))
}

fn label() -> impl Strategy<Value = Label> {
    prop::bool::ANY.prop_map(Label::from_factual)
}

fn claims() -> impl Strategy<Value = Vec<ClaimRecord>> {
    prop::collection::vec((text(), 0.0..=1.0f64, label()), 0..6).prop_map(|cs| {
        cs.into_iter()
            .enumerate()
            .map(|(i, (t, r, l))| ClaimRecord::new(format!("c{i}"), t).with_relevance(r).with_label(l))
            .collect()
    })
}

fn records() -> impl Strategy<Value = Vec<AnswerRecord>> {
    prop::collection::vec(
        (
            text(),
            prop::sample::select(vec!["a", "b", "c"]),
            prop::collection::vec(text(), 0..3),
            claims(),
            prop::option::of(text()),
        ),
        0..12,
    )
    .prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (qt, g, docs, claims, gt))| {
                let qid = format!("q{i}");
                AnswerRecord {
                    documents: docs
                        .into_iter()
                        .enumerate()
                        .map(|(j, t)| DocumentItem {
                            id: format!("{qid}-d{j}"),
                            text: t,
                            embedding: None,
                        })
                        .collect(),
                    query: QueryItem {
                        id: qid,
                        text: qt,
                        group: Some(g.to_string()),
                        embedding: None,
                    },
                    claims,
                    raw_answer: None,
                    ground_truth: gt,
                }
            })
            .collect()
    })
}

fn vector(dim: usize) -> impl Strategy<Value = EmbeddingVector> {
    prop::collection::vec(-1.0..1.0f64, dim).prop_map(|v| EmbeddingVector::new(v).unwrap())
}

/// One record with inline embeddings: `(query, docs, claims)`.
fn embedded() -> impl Strategy<Value = (EmbeddingVector, Vec<EmbeddingVector>, Vec<EmbeddingVector>, EmbeddingVector)> {
    (vector(16), prop::collection::vec(vector(16), 0..5), prop::collection::vec(vector(16), 1..4), vector(16))
}

fn embedded_record(q: &EmbeddingVector, docs: &[EmbeddingVector], claims: &[EmbeddingVector]) -> AnswerRecord {
    AnswerRecord {
        query: QueryItem {
            id: "q".into(),
            text: "q".into(),
            group: None,
            embedding: Some(q.clone()),
        },
        documents: docs
            .iter()
            .enumerate()
            .map(|(i, v)| DocumentItem {
                id: format!("d{i}"),
                text: "d".into(),
                embedding: Some(v.clone()),
            })
            .collect(),
        claims: claims
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut c = ClaimRecord::new(format!("c{i}"), "c");
                c.embedding = Some(v.clone());
                c
            })
            .collect(),
        raw_answer: None,
        ground_truth: None,
    }
}

fn relevances(record: &AnswerRecord) -> Vec<f64> {
    let mut r = record.clone();
    score_claims(&mut r, &HashedTf::new(16).unwrap()).unwrap();
    r.claims.iter().map(|c| c.relevance.unwrap()).collect()
}

fn factuality_and_removal(records: &[AnswerRecord], q: Threshold) -> (f64, f64) {
    let outcomes: Vec<_> = records.iter().map(|r| filter_record(r, q).unwrap()).collect();
    let report = evaluate(&outcomes, records, 0.1, Mode::Marginal).unwrap();
    (report.empirical_factuality, report.removal_rate)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_round_trips(records in records()) {
        let mut first = Vec::new();
        write_dataset(&mut first, &records).unwrap();
        let parsed = parse_dataset(first.as_slice(), "mem", Split::Calibration).unwrap();
        prop_assert_eq!(&parsed, &records);
        let mut second = Vec::new();
        write_dataset(&mut second, &parsed).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn partition_preserves_every_record(records in records()) {
        let parts = partition_by_group(&records).unwrap();
        prop_assert_eq!(parts.values().map(Vec::len).sum::<usize>(), records.len());
        for (g, part) in &parts {
            prop_assert!(part.iter().all(|r| r.group_label() == Some(g.as_str())));
        }
    }

    #[test]
    fn split_sizes_and_disjointness(records in records(), f in 0.0..=1.0f64, seed in any::<u64>()) {
        let (cal, test) = split_calibration_test(&records, f, seed).unwrap();
        prop_assert_eq!(cal.len(), (records.len() as f64 * f).floor() as usize);
        prop_assert_eq!(cal.len() + test.len(), records.len());
        let cal_ids: BTreeSet<_> = cal.iter().map(|r| r.query.id.clone()).collect();
        prop_assert!(test.iter().all(|r| !cal_ids.contains(&r.query.id)));

        let mut reversed = records.clone();
        reversed.reverse();
        let (cal_rev, _) = split_calibration_test(&reversed, f, seed).unwrap();
        let rev_ids: BTreeSet<_> = cal_rev.iter().map(|r| r.query.id.clone()).collect();
        prop_assert_eq!(cal_ids, rev_ids);
    }

    #[test]
    fn adding_a_document_never_lowers_relevance((q, docs, claims, extra) in embedded()) {
        let before = relevances(&embedded_record(&q, &docs, &claims));
        let mut more = docs.clone();
        more.push(extra);
        let after = relevances(&embedded_record(&q, &more, &claims));
        for (b, a) in before.iter().zip(&after) {
            prop_assert!(a >= b, "{a} < {b}");
        }
    }

    #[test]
    fn document_order_is_irrelevant((q, docs, claims, _) in embedded(), rot in 0usize..5) {
        let mut rotated = docs.clone();
        if !rotated.is_empty() {
            let k = rot % rotated.len();
            rotated.rotate_left(k);
        }
        rotated.reverse();
        prop_assert_eq!(
            relevances(&embedded_record(&q, &docs, &claims)),
            relevances(&embedded_record(&q, &rotated, &claims))
        );
    }

    #[test]
    fn factuality_rises_with_threshold(records in records(), a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (f_lo, r_lo) = factuality_and_removal(&records, Threshold::Value(lo));
        let (f_hi, r_hi) = factuality_and_removal(&records, Threshold::Value(hi));
        prop_assert!(f_hi >= f_lo);
        prop_assert!(r_hi >= r_lo);
        let (f_all, _) = factuality_and_removal(&records, Threshold::RejectAll);
        prop_assert_eq!(f_all, 1.0);
    }

    #[test]
    fn zero_threshold_keeps_positive_claims(records in records()) {
        let positive: Vec<AnswerRecord> = records
            .into_iter()
            .map(|mut r| {
                for c in &mut r.claims {
                    c.relevance = c.relevance.map(|x| x.max(1e-9));
                }
                r
            })
            .collect();
        let (_, removal) = factuality_and_removal(&positive, Threshold::Value(0.0));
        prop_assert_eq!(removal, 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn removal_falls_as_alpha_grows(seed in any::<u64>(), a in 0.01..0.99f64, b in 0.01..0.99f64, mondrian in any::<bool>()) {
        let cfg = SynthConfig {
            seed,
            n_calibration: 60,
            n_test: 40,
            groups: vec![GroupSpec::new("x", 1.0, (1, 6), 0.8, 0.3), GroupSpec::new("y", 1.0, (1, 6), 0.5, 0.1)],
            trials: 1,
        };
        let (cal, test) = generate(&cfg).unwrap();
        let mode = if mondrian { Mode::Mondrian } else { Mode::Marginal };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let removal = |alpha: f64| {
            let calib = calibrate(&cal, alpha, mode, 0).unwrap();
            let outcomes: Vec<_> = test
                .iter()
                .map(|r| {
                    let q = threshold_for(&calib, r.group_label(), GroupPolicy::FallbackMarginal).unwrap();
                    filter_record(r, q).unwrap()
                })
                .collect();
            evaluate(&outcomes, &test, alpha, mode).unwrap().removal_rate
        };
        prop_assert!(removal(hi) <= removal(lo));
    }

    #[test]
    fn preparation_is_independent_of_concurrency(records in records()) {
        let prepare = |concurrency: usize| {
            let pipeline = Pipeline::new(PipelineConfig { concurrency, ..PipelineConfig::default() }).unwrap();
            let mut out = Vec::new();
            write_dataset(&mut out, &pipeline.prepare(&records, true).unwrap()).unwrap();
            out
        };
        prop_assert_eq!(prepare(1), prepare(3));
    }
}
