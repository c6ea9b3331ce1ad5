//! Retrieval evaluation: Recall@N and Selective Ordered Recall (Top-k@N).
//!
//! Both metrics share one notion of a correct retrieval: the retrieved tile
//! belongs to `GT_N(q)`, the `N` tiles geographically closest to the query.
//! A radius-based positive set is available for Recall@N as an alternative.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_N: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    /// Retrieved tile ids in rank order.
    pub retrieved_ids: Vec<u32>,
    /// Tile ids ordered by geographic distance from the query.
    pub gt_ids: Vec<u32>,
    /// Distance from the query position to each retrieved tile center;
    /// only needed for [`PositiveSet::WithinRadius`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retrieved_distances: Vec<f64>,
}

impl EvalRecord {
    pub fn new(query_id: impl Into<String>, retrieved_ids: Vec<u32>, gt_ids: Vec<u32>) -> Self {
        Self {
            query_id: query_id.into(),
            retrieved_ids,
            gt_ids,
            retrieved_distances: Vec::new(),
        }
    }

    /// `|Retrieved_N(q) ∩ GT_N(q)|`.
    pub fn overlap(&self, n: usize) -> usize {
        let gt: HashSet<u32> = self.gt_ids.iter().take(n).copied().collect();
        self.retrieved_ids
            .iter()
            .take(n)
            .filter(|id| gt.contains(id))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PositiveSet {
    /// The first `N` geographic neighbors.
    GroundTruthNeighbors,
    /// Any tile whose center lies within the radius, meters.
    WithinRadius(f64),
}

fn check_records(records: &[EvalRecord], n: usize) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation record list"));
    }
    if n == 0 {
        return Err(Error::param("n must be at least 1"));
    }
    for r in records {
        if r.retrieved_ids.len() < n {
            return Err(Error::param(format!(
                "query {}: n = {n} exceeds {} retrievals",
                r.query_id,
                r.retrieved_ids.len()
            )));
        }
    }
    Ok(())
}

/// Fraction of queries with a correct retrieval among the top `n`.
pub fn recall_at_n(records: &[EvalRecord], n: usize) -> Result<f64> {
    recall_at_n_with(records, n, PositiveSet::GroundTruthNeighbors)
}

pub fn recall_at_n_with(records: &[EvalRecord], n: usize, positives: PositiveSet) -> Result<f64> {
    check_records(records, n)?;
    let mut hits = 0usize;
    for r in records {
        let hit = match positives {
            PositiveSet::GroundTruthNeighbors => {
                if r.gt_ids.is_empty() {
                    return Err(Error::param(format!("query {}: empty ground truth", r.query_id)));
                }
                r.overlap(n) > 0
            }
            PositiveSet::WithinRadius(radius) => {
                if r.retrieved_distances.len() < n {
                    return Err(Error::param(format!(
                        "query {}: radius positives need retrieved distances",
                        r.query_id
                    )));
                }
                r.retrieved_distances[..n].iter().any(|d| *d <= radius)
            }
        };
        hits += hit as usize;
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Fraction of queries where at least `k` of the top `n` retrievals are
/// among the `n` geographically closest tiles.
pub fn top_k_at_n(records: &[EvalRecord], k: usize, n: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::param(format!("need 1 <= k <= n, got k = {k}, n = {n}")));
    }
    check_records(records, n)?;
    if let Some(r) = records.iter().find(|r| r.gt_ids.len() < n) {
        return Err(Error::param(format!(
            "query {}: ground truth has {} entries, need {n}",
            r.query_id,
            r.gt_ids.len()
        )));
    }
    let hits = records.iter().filter(|r| r.overlap(n) >= k).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Recall@1, Recall@N and Top-k@N over one query set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VprSummary {
    pub k: usize,
    pub n: usize,
    pub recall_at_1: f64,
    pub recall_at_n: f64,
    pub top_k_at_n: f64,
}

pub fn summarize(records: &[EvalRecord], k: usize, n: usize) -> Result<VprSummary> {
    Ok(VprSummary {
        k,
        n,
        recall_at_1: recall_at_n(records, 1)?,
        recall_at_n: recall_at_n(records, n)?,
        top_k_at_n: top_k_at_n(records, k, n)?,
    })
}

impl VprSummary {
    /// Percentages in a `Methods | R@1 | R@N | Top-k@N` table.
    pub fn table(&self, method: &str) -> String {
        let mut s = String::new();
        let h1 = format!("R@{}", self.n);
        let h2 = format!("Top-{}@{}", self.k, self.n);
        writeln!(s, "{:<16} {:>8} {:>8} {:>8}", "Methods", "R@1", h1, h2).unwrap();
        writeln!(
            s,
            "{:<16} {:>8.2} {:>8.2} {:>8.2}",
            method,
            self.recall_at_1 * 100.0,
            self.recall_at_n * 100.0,
            self.top_k_at_n * 100.0
        )
        .unwrap();
        s
    }
}

/// `metric,k,n,value` rows. Recall@N is written with `k = 1`, which is
/// the Top-1@N it coincides with.
pub fn write_report_csv(mut w: impl Write, summary: &VprSummary) -> Result<()> {
    let mut s = String::from("metric,k,n,value\n");
    writeln!(s, "recall,1,1,{}", summary.recall_at_1).unwrap();
    writeln!(s, "recall,1,{},{}", summary.n, summary.recall_at_n).unwrap();
    writeln!(s, "top_k,{},{},{}", summary.k, summary.n, summary.top_k_at_n).unwrap();
    w.write_all(s.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct QueryDetail<'a> {
    query_id: &'a str,
    retrieved: &'a [u32],
    ground_truth: &'a [u32],
    overlap: usize,
    rank1_correct: bool,
}

/// One JSON object per query for debugging.
pub fn write_detail_jsonl(mut w: impl Write, records: &[EvalRecord], n: usize) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        let detail = QueryDetail {
            query_id: &r.query_id,
            retrieved: &r.retrieved_ids[..n.min(r.retrieved_ids.len())],
            ground_truth: &r.gt_ids[..n.min(r.gt_ids.len())],
            overlap: r.overlap(n),
            rank1_correct: r.overlap(1) > 0,
        };
        serde_json::to_writer(&mut out, &detail).map_err(|e| Error::format(e.to_string()))?;
        out.push(b'\n');
    }
    w.write_all(&out)?;
    Ok(())
}
