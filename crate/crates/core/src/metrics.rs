//! Recall@K and answer-containment pseudo-recall@K.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{RetrievalIndex, SearchHit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub gold_doc_ids: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

/// Ranked hits for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResults {
    pub query_id: String,
    pub hits: Vec<SearchHit>,
}

fn lookup(records: &[EvalRecord]) -> HashMap<&str, &EvalRecord> {
    records.iter().map(|r| (r.query_id.as_str(), r)).collect()
}

/// Fraction of queries with at least one gold document among the first `k`
/// hits. Shorter hit lists are used whole.
pub fn recall_at_k(results: &[QueryResults], records: &[EvalRecord], k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("results"));
    }
    let by_id = lookup(records);
    let mut hits = 0usize;
    for r in results {
        let rec = by_id
            .get(r.query_id.as_str())
            .ok_or_else(|| Error::UnknownQuery(r.query_id.clone()))?;
        if rec.gold_doc_ids.is_empty() {
            return Err(Error::Config(format!("query {:?} has no gold documents", r.query_id)));
        }
        if r.hits.iter().take(k).any(|h| rec.gold_doc_ids.contains(&h.doc_id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Fraction of queries where any of the first `k` documents' text contains
/// the answer, compared case-insensitively.
pub fn pseudo_recall_at_k(
    results: &[QueryResults],
    records: &[EvalRecord],
    index: &RetrievalIndex,
    k: usize,
) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("results"));
    }
    let by_id = lookup(records);
    let mut hits = 0usize;
    for r in results {
        let rec = by_id
            .get(r.query_id.as_str())
            .ok_or_else(|| Error::UnknownQuery(r.query_id.clone()))?;
        let answer = rec
            .answer
            .as_deref()
            .ok_or_else(|| Error::MissingAnswer(r.query_id.clone()))?
            .to_lowercase();
        let found = r.hits.iter().take(k).any(|h| {
            index
                .get(&h.doc_id)
                .is_some_and(|d| d.text.to_lowercase().contains(&answer))
        });
        if found {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}
