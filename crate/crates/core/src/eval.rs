//! Retrieval metrics (hit-based recall, MRR, nDCG) and the docid
//! diversity diagnostic.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use crate::{Error, Result};

/// 1 if any relevant document appears in the top k, else 0.
pub fn recall_at_k(ranked: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if ranked.iter().take(k).any(|d| relevant.contains(d)) {
        1.0
    } else {
        0.0
    }
}

/// Reciprocal rank of the first relevant document within the top k, else 0.
pub fn mrr_at_k(ranked: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|d| relevant.contains(d))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// DCG@10 with gain 2^rel − 1 and log2(rank+1) discount, normalized by
/// the ideal DCG over the full relevance map.
pub fn ndcg_at_10(ranked: &[String], relevance: &BTreeMap<String, u32>) -> f64 {
    fn gain(rel: u32) -> f64 {
        (2f64).powi(rel as i32) - 1.0
    }
    let dcg: f64 = ranked
        .iter()
        .take(10)
        .enumerate()
        .map(|(i, d)| gain(relevance.get(d).copied().unwrap_or(0)) / ((i + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<u32> = relevance.values().copied().filter(|&r| r > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(10)
        .enumerate()
        .map(|(i, &r)| gain(r) / ((i + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// d = 1 − (1/2n)·Σ_j |n_j − n/K|: 1.0 for perfectly balanced token
/// usage, 1/K when every document lands on a single token.
pub fn diversity(step_assignments: &[usize], k: usize) -> Result<f64> {
    let n = step_assignments.len();
    if n == 0 || k == 0 {
        return Err(Error::Argument("diversity needs N ≥ 1 and K ≥ 1".into()));
    }
    let mut counts = vec![0usize; k];
    for &t in step_assignments {
        if t >= k {
            return Err(Error::Index(format!("token {t} out of K={k}")));
        }
        counts[t] += 1;
    }
    let uniform = n as f64 / k as f64;
    let deviation: f64 = counts.iter().map(|&c| (c as f64 - uniform).abs()).sum();
    Ok(1.0 - deviation / (2.0 * n as f64))
}

/// Macro-averaged metrics over one query set.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct MetricSummary {
    pub n_queries: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub mrr_at: BTreeMap<usize, f64>,
    pub ndcg_at_10: f64,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub full: MetricSummary,
    pub seen: Option<MetricSummary>,
    pub unseen: Option<MetricSummary>,
    pub diversity_per_step: Vec<f64>,
}

pub const RECALL_CUTOFFS: [usize; 3] = [1, 10, 100];
pub const MRR_CUTOFF: usize = 100;

/// One evaluated query: ranked doc ids and the relevant set (grade 1).
pub struct Judged<'a> {
    pub ranked: &'a [String],
    pub relevant: &'a BTreeSet<String>,
}

pub fn summarize(queries: &[Judged]) -> MetricSummary {
    let mut out = MetricSummary { n_queries: queries.len(), ..MetricSummary::default() };
    if queries.is_empty() {
        return out;
    }
    let n = queries.len() as f64;
    for &k in &RECALL_CUTOFFS {
        let v: f64 = queries.iter().map(|q| recall_at_k(q.ranked, q.relevant, k)).sum();
        out.recall_at.insert(k, v / n);
    }
    let v: f64 = queries.iter().map(|q| mrr_at_k(q.ranked, q.relevant, MRR_CUTOFF)).sum();
    out.mrr_at.insert(MRR_CUTOFF, v / n);
    out.ndcg_at_10 = queries
        .iter()
        .map(|q| {
            let rel: BTreeMap<String, u32> =
                q.relevant.iter().map(|d| (d.clone(), 1)).collect();
            ndcg_at_10(q.ranked, &rel)
        })
        .sum::<f64>()
        / n;
    out
}
