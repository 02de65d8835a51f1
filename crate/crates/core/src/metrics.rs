//! Retrieval metrics over runs and qrels.
//!
//! Only queries that appear in the run and have at least one positive
//! judgment are evaluated; the rest are counted separately.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Qrels;
use crate::runfile::Run;

pub const HITS_CUTOFFS: [usize; 4] = [1, 5, 20, 100];
pub const RECALL_CUTOFFS: [usize; 3] = [5, 20, 100];

fn judged<'a>(run: &'a Run, qrels: &'a Qrels) -> impl Iterator<Item = (&'a Vec<(String, f64)>, BTreeSet<&'a str>)> {
    run.lists.iter().filter_map(move |(qid, list)| {
        let pos = qrels.positives(qid);
        (!pos.is_empty()).then_some((list, pos))
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Fraction of queries with at least one positive in the top `k`.
pub fn hits_at_k(run: &Run, qrels: &Qrels, k: usize) -> f64 {
    mean(judged(run, qrels).map(|(list, pos)| {
        list.iter().take(k).any(|(p, _)| pos.contains(p.as_str())) as u8 as f64
    }))
}

/// Mean fraction of each query's positives found in the top `k`.
pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize) -> f64 {
    mean(judged(run, qrels).map(|(list, pos)| {
        let found = list.iter().take(k).filter(|(p, _)| pos.contains(p.as_str())).count();
        found as f64 / pos.len() as f64
    }))
}

/// Mean reciprocal rank of the first positive within the top `k`.
pub fn mrr_at_k(run: &Run, qrels: &Qrels, k: usize) -> f64 {
    mean(judged(run, qrels).map(|(list, pos)| {
        list.iter()
            .take(k)
            .position(|(p, _)| pos.contains(p.as_str()))
            .map_or(0.0, |i| 1.0 / (i + 1) as f64)
    }))
}

/// `hist[r - 1]` = number of positive passages retrieved at rank `r`, for `r` in `1..=depth`.
pub fn rank_histogram(run: &Run, qrels: &Qrels, depth: usize) -> Vec<usize> {
    let mut hist = vec![0; depth];
    for (list, pos) in judged(run, qrels) {
        for (i, (p, _)) in list.iter().take(depth).enumerate() {
            if pos.contains(p.as_str()) {
                hist[i] += 1;
            }
        }
    }
    hist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub qid: String,
    pub positives: usize,
    /// 1-based rank of the first positive, if retrieved at all.
    pub first_positive: Option<usize>,
    pub positives_top5: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub hits: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub mrr10: f64,
    pub evaluated: usize,
    /// Run queries with no qrels entry at all.
    pub missing_judgments: usize,
    /// Run queries judged but with no positive passage.
    pub no_positives: usize,
    pub per_query: Vec<QueryEval>,
    pub histogram: Vec<usize>,
}

impl EvalResult {
    pub fn hits_at(&self, k: usize) -> f64 {
        self.hits.get(&k).copied().unwrap_or(0.0)
    }

    /// Positives retrieved at rank ≤ 5, summed over queries.
    pub fn positives_top5(&self) -> usize {
        self.histogram.iter().take(5).sum()
    }

    /// Plain-text report: a metrics block then a histogram block.
    pub fn report(&self) -> String {
        let mut s = String::from("[metrics]\n");
        let _ = writeln!(s, "queries_evaluated {}", self.evaluated);
        let _ = writeln!(s, "queries_missing_judgments {}", self.missing_judgments);
        let _ = writeln!(s, "queries_without_positives {}", self.no_positives);
        for (k, v) in &self.hits {
            let _ = writeln!(s, "hits@{k} {v:.6}");
        }
        for (k, v) in &self.recall {
            let _ = writeln!(s, "recall@{k} {v:.6}");
        }
        let _ = writeln!(s, "mrr@10 {:.6}", self.mrr10);
        s.push_str("\n[histogram]\nrank positives\n");
        for (i, c) in self.histogram.iter().enumerate() {
            let _ = writeln!(s, "{} {c}", i + 1);
        }
        s
    }
}

pub fn evaluate(run: &Run, qrels: &Qrels, depth: usize) -> EvalResult {
    let mut missing = 0;
    let mut no_pos = 0;
    let mut per_query = Vec::new();
    for (qid, list) in &run.lists {
        if !qrels.contains_query(qid) {
            missing += 1;
            continue;
        }
        let pos = qrels.positives(qid);
        if pos.is_empty() {
            no_pos += 1;
            continue;
        }
        per_query.push(QueryEval {
            qid: qid.clone(),
            positives: pos.len(),
            first_positive: list.iter().position(|(p, _)| pos.contains(p.as_str())).map(|i| i + 1),
            positives_top5: list.iter().take(5).filter(|(p, _)| pos.contains(p.as_str())).count(),
        });
    }
    EvalResult {
        hits: HITS_CUTOFFS.iter().map(|&k| (k, hits_at_k(run, qrels, k))).collect(),
        recall: RECALL_CUTOFFS.iter().map(|&k| (k, recall_at_k(run, qrels, k))).collect(),
        mrr10: mrr_at_k(run, qrels, 10),
        evaluated: per_query.len(),
        missing_judgments: missing,
        no_positives: no_pos,
        per_query,
        histogram: rank_histogram(run, qrels, depth),
    }
}

/// Two histograms side by side, for before/after comparisons.
pub fn histogram_comparison(before: &[usize], after: &[usize]) -> String {
    let mut s = String::from("rank before after\n");
    for i in 0..before.len().max(after.len()) {
        let b = before.get(i).copied().unwrap_or(0);
        let a = after.get(i).copied().unwrap_or(0);
        let _ = writeln!(s, "{} {b} {a}", i + 1);
    }
    s
}
