mod common;

use std::collections::BTreeSet;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use ret_core::index::IndexedDoc;
use ret_core::{
    maxsim_score, pseudo_recall_at_k, recall_at_k, EvalRecord, QueryResults, RetrievalIndex,
    SearchHit, Side, TokenMatrix,
};

fn doc(id: &str, rows: &Mat) -> TokenMatrix {
    TokenMatrix::from_rows(Side::Document, id, rows).unwrap()
}

fn query(rows: &Mat) -> TokenMatrix {
    TokenMatrix::from_rows(Side::Query, "q", rows).unwrap()
}

fn random_index(seed: u64, n: usize, k: usize, w: usize) -> (RetrievalIndex, Vec<Mat>) {
    let mut r = rng(seed);
    let mut index = RetrievalIndex::new(k, w);
    let mut mats = Vec::new();
    for i in 0..n {
        let m = rand_mat(&mut r, k, w, 1.0);
        index.add(format!("d{i}"), doc(&format!("d{i}"), &m), format!("text {i}"), i % 3 != 0).unwrap();
        mats.push(m);
    }
    (index, mats)
}

/// Full sort of double-loop scores, ties by insertion order.
fn oracle_ranking(q: &Mat, docs: &[Mat]) -> Vec<(String, f64)> {
    let mut scored: Vec<(usize, f64)> = docs.iter().map(|d| maxsim(q, d)).enumerate().collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(i, s)| (format!("d{i}"), s)).collect()
}

fn assert_matches_oracle(hits: &[SearchHit], oracle: &[(String, f64)]) {
    for (h, (id, s)) in hits.iter().zip(oracle) {
        assert_eq!(&h.doc_id, id);
        assert!((h.score - s).abs() <= 1e-12, "{id}: {} vs {s}", h.score);
    }
}

#[test]
fn own_tokens_retrieve_self_first() {
    let (index, mats) = random_index(1, 30, 4, 8);
    for (i, m) in mats.iter().enumerate() {
        let m: Mat = m.iter().map(|r| r.iter().map(|v| v * 10.0).collect()).collect();
        let hits = index.search(&query(&m), 1).unwrap();
        assert_eq!(hits[0].doc_id, format!("d{i}"));
    }
}

#[test]
fn single_document_index_returns_exact_score() {
    let mut r = rng(2);
    let d = rand_mat(&mut r, 3, 5, 1.0);
    let q = rand_mat(&mut r, 2, 5, 1.0);
    let mut index = RetrievalIndex::new(3, 5);
    index.add("only", doc("only", &d), "t", true).unwrap();
    let hits = index.search(&query(&q), 10).unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].doc_id, "only");
    assert_eq!(hits[0].score, maxsim(&q, &d));
}

#[test]
fn planted_orthonormal_document_scores_k() {
    let (k, w) = (4, 16);
    let basis: Mat = (0..k).map(|i| (0..w).map(|j| if j == 2 * i + 1 { 1.0 } else { 0.0 }).collect()).collect();
    let mut r = rng(3);
    let mut index = RetrievalIndex::new(k, w);
    for i in 0..10 {
        let m = if i == 6 {
            basis.clone()
        } else {
            rand_mat(&mut r, k, w, 1.0)
                .into_iter()
                .map(|row| {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.into_iter().map(|v| v / n).collect()
                })
                .collect()
        };
        index.add(format!("d{i}"), doc("x", &m), "", false).unwrap();
    }
    let hits = index.search(&query(&basis), 3).unwrap();
    assert_eq!(hits[0].doc_id, "d6");
    assert!((hits[0].score - k as f64).abs() <= 1e-12);
    assert!(hits[1].score < hits[0].score);
}

#[test]
fn thousand_documents_stay_exact() {
    let (index, mats) = random_index(4, 1000, 4, 8);
    assert_eq!(index.len(), 1000);
    let mut r = rng(5);
    for _ in 0..3 {
        let q = rand_mat(&mut r, 3, 8, 1.0);
        let hits = index.search(&query(&q), 1000).unwrap();
        assert_eq!(hits.len(), 1000);
        assert_matches_oracle(&hits, &oracle_ranking(&q, &mats));
    }
}

#[test]
fn hundred_random_instances_match_brute_force() {
    let mut r = rng(6);
    for trial in 0..100 {
        let k = r.random_range(1..=8);
        let w = r.random_range(1..=16);
        let n = r.random_range(1..=50);
        let (index, mats) = random_index(100 + trial, n, k, w);
        let kq = r.random_range(1..=8);
        let q = rand_mat(&mut r, kq, w, 1.0);
        let qt = query(&q);
        let top = r.random_range(1..=60);
        let hits = index.search(&qt, top).unwrap();
        assert_eq!(hits.len(), top.min(n));
        let oracle = oracle_ranking(&q, &mats);
        assert_matches_oracle(&hits, &oracle);
        for h in &hits {
            let d = index.get(&h.doc_id).unwrap();
            assert!((maxsim_score(&qt, &d.tokens).unwrap() - h.score).abs() <= 1e-12);
        }
    }
}

#[test]
fn search_rejects_zero_k_and_tolerates_empty_index() {
    let (index, _) = random_index(7, 3, 2, 4);
    let q = query(&vec![vec![1.0; 4]]);
    assert!(index.search(&q, 0).is_err());
    let empty = RetrievalIndex::new(2, 4);
    assert!(empty.is_empty());
    assert!(empty.search(&q, 5).unwrap().is_empty());
}

#[test]
fn duplicate_ids_are_rejected() {
    let (mut index, mats) = random_index(8, 3, 2, 4);
    let err = index.add("d1", doc("d1", &mats[0]), "", true).unwrap_err();
    assert!(err.to_string().contains("d1"));
    assert_eq!(index.len(), 3);
}

#[test]
fn index_round_trip_preserves_rankings_and_scores() {
    let (index, _) = random_index(9, 40, 4, 16);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("docs.idx");
    index.write(&path).unwrap();
    let back = RetrievalIndex::read(&path).unwrap();
    assert_eq!(back, index);
    let mut r = rng(10);
    for _ in 0..10 {
        let q = query(&rand_mat(&mut r, 4, 16, 1.0));
        let a = index.search(&q, 40).unwrap();
        let b = back.search(&q, 40).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.doc_id, y.doc_id);
            assert_eq!(x.score.to_bits(), y.score.to_bits());
        }
    }
    let docs: Vec<&IndexedDoc> = back.docs().iter().collect();
    assert!(docs.iter().any(|d| !d.has_image) && docs.iter().any(|d| d.has_image));
}

#[test]
fn index_golden_bytes() {
    let mut index = RetrievalIndex::new(1, 2);
    index.add("ab", doc("ab", &vec![vec![1.0, -2.0]]), "Hi", true).unwrap();
    let mut expected = Vec::new();
    expected.extend_from_slice(b"RETIDX1");
    expected.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
    expected.extend_from_slice(&[2, 0, 0, 0, b'a', b'b', 1]);
    expected.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0xf0, 0x3f]);
    expected.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 0xc0]);
    expected.extend_from_slice(&[2, 0, 0, 0, b'H', b'i']);
    assert_eq!(index.to_bytes(), expected);
    assert_eq!(RetrievalIndex::from_bytes(&expected).unwrap(), index);
    let mut bad = expected.clone();
    bad[0] = b'X';
    assert!(RetrievalIndex::from_bytes(&bad).is_err());
}

fn record(id: &str, gold: &[&str], answer: Option<&str>) -> EvalRecord {
    EvalRecord {
        query_id: id.into(),
        gold_doc_ids: gold.iter().map(|s| s.to_string()).collect(),
        answer: answer.map(str::to_string),
    }
}

fn results(id: &str, ranked: &[String]) -> QueryResults {
    QueryResults {
        query_id: id.into(),
        hits: ranked
            .iter()
            .enumerate()
            .map(|(i, d)| SearchHit {
                doc_id: d.clone(),
                score: -(i as f64),
            })
            .collect(),
    }
}

/// Random rankings over 30 docs and random gold sets for 20 queries.
fn random_eval(seed: u64) -> (Vec<QueryResults>, Vec<EvalRecord>, RetrievalIndex) {
    use rand::seq::SliceRandom;
    let mut r = rng(seed);
    let ids: Vec<String> = (0..30).map(|i| format!("d{i}")).collect();
    let mut index = RetrievalIndex::new(1, 1);
    for (i, id) in ids.iter().enumerate() {
        let text = format!("title: Name{} content: x", i % 7);
        index.add(id, doc(id, &vec![vec![0.0]]), text, true).unwrap();
    }
    let mut res = Vec::new();
    let mut recs = Vec::new();
    for q in 0..20 {
        let mut ranked = ids.clone();
        ranked.shuffle(&mut r);
        ranked.truncate(r.random_range(1..=30));
        let gold: Vec<&str> = (0..r.random_range(1..=3)).map(|_| ids[r.random_range(0..30)].as_str()).collect();
        let answer = format!("NAME{}", r.random_range(0..9));
        res.push(results(&format!("q{q}"), &ranked));
        recs.push(record(&format!("q{q}"), &gold, Some(&answer)));
    }
    (res, recs, index)
}

#[test]
fn recall_matches_counting_oracle() {
    for seed in 0..10 {
        let (res, recs, _) = random_eval(seed);
        for k in [1, 3, 5, 10, 50] {
            let mut count = 0;
            for (q, rec) in res.iter().zip(&recs) {
                let mut found = false;
                for h in q.hits.iter().take(k) {
                    for g in &rec.gold_doc_ids {
                        if *g == h.doc_id {
                            found = true;
                        }
                    }
                }
                count += usize::from(found);
            }
            assert_eq!(recall_at_k(&res, &recs, k).unwrap(), count as f64 / 20.0);
        }
    }
}

#[test]
fn pseudo_recall_matches_scan_oracle() {
    for seed in 0..10 {
        let (res, recs, index) = random_eval(seed);
        for k in [1, 5, 10] {
            let mut count = 0;
            for (q, rec) in res.iter().zip(&recs) {
                let answer = rec.answer.as_ref().unwrap().to_lowercase();
                let found = q.hits.iter().take(k).any(|h| {
                    let text = index.get(&h.doc_id).unwrap().text.to_lowercase();
                    (0..text.len()).any(|s| text[s..].starts_with(&answer))
                });
                count += usize::from(found);
            }
            assert_eq!(pseudo_recall_at_k(&res, &recs, &index, k).unwrap(), count as f64 / 20.0);
        }
    }
}

#[test]
fn recall_edge_cases() {
    let ranked: Vec<String> = vec!["a".into(), "b".into()];
    let recs = vec![record("q", &["a"], Some("paris")), record("r", &["zzz"], None)];
    let res = vec![results("q", &ranked)];
    assert_eq!(recall_at_k(&res, &recs, 1).unwrap(), 1.0);
    let res = vec![results("r", &ranked)];
    assert_eq!(recall_at_k(&res, &recs, 100).unwrap(), 0.0);
    assert!(pseudo_recall_at_k(&res, &recs, &RetrievalIndex::new(1, 1), 1).is_err());
    assert!(recall_at_k(&[results("nope", &ranked)], &recs, 1).is_err());
    assert!(recall_at_k(&[], &recs, 1).is_err());

    let mut index = RetrievalIndex::new(1, 1);
    index.add("a", doc("a", &vec![vec![0.0]]), "title: Paris content: ...", true).unwrap();
    index.add("b", doc("b", &vec![vec![0.0]]), "title: Rome", true).unwrap();
    let res = vec![results("q", &ranked)];
    assert_eq!(pseudo_recall_at_k(&res, &recs, &index, 1).unwrap(), 1.0);
    let miss = vec![record("q", &["a"], Some("berlin"))];
    assert_eq!(pseudo_recall_at_k(&res, &miss, &index, 2).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>()) {
        let (res, recs, index) = random_eval(seed);
        let mut prev = (0.0, 0.0);
        for k in 1..=31 {
            let r = recall_at_k(&res, &recs, k).unwrap();
            let p = pseudo_recall_at_k(&res, &recs, &index, k).unwrap();
            prop_assert!(r >= prev.0 && p >= prev.1);
            prop_assert!((0.0..=1.0).contains(&r));
            prev = (r, p);
        }
    }

    #[test]
    fn search_is_total_order_and_repeatable(seed in any::<u64>(), n in 1usize..40) {
        let (index, _) = random_index(seed, n, 3, 6);
        let mut r = rng(seed ^ 1);
        let q = query(&rand_mat(&mut r, 2, 6, 1.0));
        let a = index.search(&q, n).unwrap();
        let b = index.search(&q, n).unwrap();
        prop_assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
        prop_assert_eq!(&a, &b);
        let ids: BTreeSet<&str> = a.iter().map(|h| h.doc_id.as_str()).collect();
        prop_assert_eq!(ids.len(), n);
    }
}
