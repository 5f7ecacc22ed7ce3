//! Ranking and retrieval metrics: mAP@10 and R@k over ranked candidate
//! lists.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::objective::cosine_similarity;
use serde::Serialize;
use std::collections::{BTreeSet, HashMap};

/// Ground truth for one query.
#[derive(Debug, Clone)]
pub struct RelevanceSet {
    pub query_id: String,
    pub relevant_ids: BTreeSet<String>,
}

impl RelevanceSet {
    pub fn new(query_id: impl Into<String>, relevant: impl IntoIterator<Item = String>) -> Result<Self> {
        let relevant_ids: BTreeSet<String> = relevant.into_iter().collect();
        if relevant_ids.is_empty() {
            return Err(Error::Contract("relevance set must be nonempty".into()));
        }
        Ok(RelevanceSet {
            query_id: query_id.into(),
            relevant_ids,
        })
    }
}

/// Candidates ordered by descending score; ties broken by ascending id so
/// rankings are deterministic across platforms.
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub query_id: String,
    pub ranking: Vec<(String, f64)>,
}

impl RankingResult {
    /// Order scored candidates into a ranking.
    pub fn from_scores(query_id: impl Into<String>, mut scored: Vec<(String, f64)>) -> Self {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        RankingResult {
            query_id: query_id.into(),
            ranking: scored,
        }
    }
}

/// Rank candidates by cosine similarity to the query.
pub fn rank(
    query_id: &str,
    query: &Matrix,
    candidates: &[(String, Matrix)],
) -> Result<RankingResult> {
    if candidates.is_empty() {
        return Err(Error::Contract("rank called with no candidates".into()));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for (id, vector) in candidates {
        scored.push((id.clone(), cosine_similarity(query, vector)?));
    }
    Ok(RankingResult::from_scores(query_id, scored))
}

/// Average precision truncated at `cutoff`, normalized by
/// `min(|relevant|, cutoff)` so the value stays in [0, 1] even when the
/// relevant set is larger than the cutoff.
pub fn average_precision_at(
    result: &RankingResult,
    rel: &RelevanceSet,
    cutoff: usize,
) -> Result<f64> {
    if cutoff == 0 {
        return Err(Error::Contract("cutoff must be at least 1".into()));
    }
    if rel.relevant_ids.is_empty() {
        return Err(Error::Contract("relevance set must be nonempty".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (idx, (id, _)) in result.ranking.iter().take(cutoff).enumerate() {
        if rel.relevant_ids.contains(id) {
            hits += 1;
            sum += hits as f64 / (idx + 1) as f64;
        }
    }
    Ok(sum / rel.relevant_ids.len().min(cutoff) as f64)
}

/// Fraction of the relevant set retrieved within the top `k`.
pub fn recall_at(result: &RankingResult, rel: &RelevanceSet, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if rel.relevant_ids.is_empty() {
        return Err(Error::Contract("relevance set must be nonempty".into()));
    }
    let hits = result
        .ranking
        .iter()
        .take(k)
        .filter(|(id, _)| rel.relevant_ids.contains(id))
        .count();
    Ok(hits as f64 / rel.relevant_ids.len() as f64)
}

/// Hit-or-miss variant: 1 when any relevant item appears in the top `k`.
pub fn recall_at_binary(result: &RankingResult, rel: &RelevanceSet, k: usize) -> Result<f64> {
    Ok(if recall_at(result, rel, k)? > 0.0 { 1.0 } else { 0.0 })
}

/// Retrieval report averaged over queries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub map_at_10: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub num_queries: usize,
}

impl EvalReport {
    /// Line-oriented `key=value` rendering.
    pub fn to_text(&self) -> String {
        format!(
            "map_at_10={}\nr_at_1={}\nr_at_5={}\nr_at_10={}\nnum_queries={}\n",
            self.map_at_10, self.r_at_1, self.r_at_5, self.r_at_10, self.num_queries
        )
    }
}

/// Aggregate precomputed rankings against their relevance sets. Queries are
/// reduced in their input order, so the report does not depend on any
/// parallel scheduling upstream.
pub fn evaluate_rankings(
    results: &[RankingResult],
    relevance: &[RelevanceSet],
    binary_recall: bool,
) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::Contract("no queries to evaluate".into()));
    }
    let by_query: HashMap<&str, &RelevanceSet> = relevance
        .iter()
        .map(|r| (r.query_id.as_str(), r))
        .collect();
    let recall = if binary_recall { recall_at_binary } else { recall_at };
    let mut map10 = 0.0;
    let mut r1 = 0.0;
    let mut r5 = 0.0;
    let mut r10 = 0.0;
    for result in results {
        let rel = by_query.get(result.query_id.as_str()).ok_or_else(|| {
            Error::Contract(format!(
                "query `{}` has no relevance set",
                result.query_id
            ))
        })?;
        map10 += average_precision_at(result, rel, 10)?;
        r1 += recall(result, rel, 1)?;
        r5 += recall(result, rel, 5)?;
        r10 += recall(result, rel, 10)?;
    }
    let n = results.len() as f64;
    Ok(EvalReport {
        map_at_10: map10 / n,
        r_at_1: r1 / n,
        r_at_5: r5 / n,
        r_at_10: r10 / n,
        num_queries: results.len(),
    })
}

/// Rank every query against the shared candidate pool by cosine similarity,
/// then aggregate.
pub fn evaluate(
    queries: &[(String, Matrix)],
    candidates: &[(String, Matrix)],
    relevance: &[RelevanceSet],
) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(queries.len());
    for (id, vector) in queries {
        results.push(rank(id, vector, candidates)?);
    }
    evaluate_rankings(&results, relevance, false)
}
