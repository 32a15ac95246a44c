//! Recall@K over a gold set of relevant chunks.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::read_jsonl;

pub const DEFAULT_KS: [usize; 5] = [1, 5, 10, 20, 50];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GoldEntry {
    pub query_id: String,
    pub gold_chunk_ids: Vec<String>,
}

/// Query id to its set of relevant chunk ids.
pub type GoldSet = BTreeMap<String, BTreeSet<String>>;

pub fn load_gold(path: &Path) -> Result<GoldSet> {
    let mut gold = GoldSet::new();
    for (_, entry) in read_jsonl::<GoldEntry>(path)? {
        gold.entry(entry.query_id)
            .or_default()
            .extend(entry.gold_chunk_ids);
    }
    Ok(gold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QueryOutcome {
    pub query_id: String,
    /// Rank (1-based) of the first relevant chunk, if retrieved at all.
    pub first_hit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub queries: usize,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub per_query: Vec<QueryOutcome>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,recall\n");
        for (k, r) in &self.recall_at_k {
            out.push_str(&format!("{k},{r:.6}\n"));
        }
        out
    }
}

/// Fraction of gold queries with at least one relevant chunk in the top K.
///
/// `rankings` maps query id to chunk ids in rank order; a query without a
/// ranking counts as a miss. Gold chunks must exist in `known_chunk_ids`.
pub fn recall_at_k(
    rankings: &BTreeMap<String, Vec<String>>,
    gold: &GoldSet,
    ks: &[usize],
    known_chunk_ids: &HashSet<String>,
) -> Result<EvalReport> {
    for (query_id, chunks) in gold {
        if let Some(bad) = chunks.iter().find(|c| !known_chunk_ids.contains(*c)) {
            return Err(Error::UnknownChunkId {
                query_id: query_id.clone(),
                chunk_id: bad.clone(),
            });
        }
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0) {
        return Err(Error::InvalidConfig(format!(
            "recall cutoff must be positive, got {k}"
        )));
    }
    let per_query: Vec<QueryOutcome> = gold
        .iter()
        .map(|(query_id, relevant)| QueryOutcome {
            query_id: query_id.clone(),
            first_hit: rankings
                .get(query_id)
                .and_then(|r| r.iter().position(|c| relevant.contains(c)))
                .map(|p| p + 1),
        })
        .collect();
    let n = per_query.len();
    let recall_at_k = ks
        .iter()
        .map(|&k| {
            let hits = per_query
                .iter()
                .filter(|q| q.first_hit.is_some_and(|h| h <= k))
                .count();
            let r = if n == 0 { 0.0 } else { hits as f64 / n as f64 };
            (k, r)
        })
        .collect();
    Ok(EvalReport {
        queries: n,
        recall_at_k,
        per_query,
    })
}
