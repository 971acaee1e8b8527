//! Ranking metrics: average precision over a full ranking, AP truncated at K
//! (normalized by `min(R, K)`) and precision at K (short lists count as
//! zero-padded).
//!
//! `R` is always the number of relevant items in the whole gallery, not in
//! the returned list. Queries whose class never occurs in the gallery are
//! excluded from the means and counted separately.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde_json::json;
use thiserror::Error;

use crate::parallel;

pub const DEFAULT_K: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{observed} relevant items in the ranking but total relevant is {total}")]
    RelevantOverflow { observed: usize, total: usize },
    #[error("cutoff K must be at least 1")]
    InvalidK,
    #[error("{rankings} rankings but {labels} query labels")]
    LengthMismatch { rankings: usize, labels: usize },
    #[error("ranking for query {query} references gallery item {index} but the gallery has {size}")]
    IndexOutOfRange { query: usize, index: usize, size: usize },
    #[error("no query has a relevant gallery item ({excluded} excluded)")]
    NoQueries { excluded: usize },
}

fn check_overflow(relevance: &[bool], total: usize) -> Result<(), MetricsError> {
    let observed = relevance.iter().filter(|&&r| r).count();
    if observed > total {
        Err(MetricsError::RelevantOverflow { observed, total })
    } else {
        Ok(())
    }
}

fn precision_sum(relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum
}

/// Non-interpolated AP: `(1/R) Σ P(k)·rel(k)`. Zero when `R == 0`.
pub fn average_precision(relevance: &[bool], total_relevant: usize) -> Result<f64, MetricsError> {
    check_overflow(relevance, total_relevant)?;
    if total_relevant == 0 {
        return Ok(0.0);
    }
    Ok(precision_sum(relevance) / total_relevant as f64)
}

/// AP over the first `k` positions, divided by `min(R, k)`. Longer lists
/// are truncated.
pub fn ap_at_k(relevance: &[bool], total_relevant: usize, k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    let top = &relevance[..relevance.len().min(k)];
    check_overflow(top, total_relevant)?;
    let norm = total_relevant.min(k);
    if norm == 0 {
        return Ok(0.0);
    }
    Ok(precision_sum(top) / norm as f64)
}

pub fn precision_at_k(relevance: &[bool], k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    let hits = relevance.iter().take(k).filter(|&&r| r).count();
    Ok(hits as f64 / k as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryMetrics {
    /// Position of the query in the evaluated batch.
    pub query: usize,
    pub total_relevant: usize,
    pub ap: f64,
    pub ap_at_k: f64,
    pub p_at_k: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub map_full: f64,
    pub map_at_k: f64,
    pub p_at_k: f64,
    pub k: usize,
    pub query_count: usize,
    pub excluded: usize,
    pub per_query: Vec<QueryMetrics>,
}

/// Scores rankings (gallery indices, best first) against class labels.
///
/// `map_full` is only the full-gallery mAP when every ranking is complete;
/// for truncated rankings the missing relevant items contribute zero.
pub fn evaluate<Q: AsRef<str> + Sync, G: AsRef<str> + Sync>(
    rankings: &[Vec<usize>],
    query_labels: &[Q],
    gallery_labels: &[G],
    k: usize,
) -> Result<EvalReport, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    if rankings.len() != query_labels.len() {
        return Err(MetricsError::LengthMismatch {
            rankings: rankings.len(),
            labels: query_labels.len(),
        });
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for l in gallery_labels {
        *counts.entry(l.as_ref()).or_default() += 1;
    }
    let scored: Vec<Result<Option<QueryMetrics>, MetricsError>> = parallel::map_indexed(rankings.len(), |q| {
        let label = query_labels[q].as_ref();
        let total = counts.get(label).copied().unwrap_or(0);
        if total == 0 {
            return Ok(None);
        }
        let mut relevance = Vec::with_capacity(rankings[q].len());
        for &g in &rankings[q] {
            let gl = gallery_labels.get(g).ok_or(MetricsError::IndexOutOfRange {
                query: q,
                index: g,
                size: gallery_labels.len(),
            })?;
            relevance.push(gl.as_ref() == label);
        }
        Ok(Some(QueryMetrics {
            query: q,
            total_relevant: total,
            ap: average_precision(&relevance, total)?,
            ap_at_k: ap_at_k(&relevance, total, k)?,
            p_at_k: precision_at_k(&relevance, k)?,
        }))
    });
    let mut per_query = Vec::new();
    let mut excluded = 0;
    for s in scored {
        match s? {
            Some(m) => per_query.push(m),
            None => excluded += 1,
        }
    }
    if per_query.is_empty() {
        return Err(MetricsError::NoQueries { excluded });
    }
    let n = per_query.len() as f64;
    let mean = |f: fn(&QueryMetrics) -> f64| per_query.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        map_full: mean(|m| m.ap),
        map_at_k: mean(|m| m.ap_at_k),
        p_at_k: mean(|m| m.p_at_k),
        k,
        query_count: per_query.len(),
        excluded,
        per_query,
    })
}

impl EvalReport {
    /// `metric<TAB>value` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        let k = self.k;
        writeln!(out, "mAP\t{}", self.map_full).unwrap();
        writeln!(out, "mAP@{k}\t{}", self.map_at_k).unwrap();
        writeln!(out, "P@{k}\t{}", self.p_at_k).unwrap();
        writeln!(out, "queries\t{}", self.query_count).unwrap();
        writeln!(out, "excluded\t{}", self.excluded).unwrap();
        out
    }

    pub fn to_json(&self) -> String {
        let v = json!({
            "mAP": self.map_full,
            "mAP@K": self.map_at_k,
            "P@K": self.p_at_k,
            "K": self.k,
            "queries": self.query_count,
            "excluded": self.excluded,
        });
        serde_json::to_string_pretty(&v).expect("plain values serialize")
    }

    /// One row per scored query, for diffing runs.
    pub fn per_query_tsv(&self, query_ids: Option<&[String]>) -> String {
        let mut out = format!("query\tR\tAP\tAP@{k}\tP@{k}\n", k = self.k);
        for m in &self.per_query {
            let id = query_ids.and_then(|ids| ids.get(m.query)).cloned().unwrap_or_else(|| m.query.to_string());
            writeln!(out, "{id}\t{}\t{}\t{}\t{}", m.total_relevant, m.ap, m.ap_at_k, m.p_at_k).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&flags(&[1, 1, 1]), 3).unwrap(), 1.0);
        assert_eq!(average_precision(&flags(&[0, 0, 0]), 3).unwrap(), 0.0);
        let hand = (1.0 + 2.0 / 3.0) / 2.0;
        assert!((average_precision(&flags(&[1, 0, 1]), 2).unwrap() - hand).abs() < 1e-15);
        assert!(matches!(
            average_precision(&flags(&[1, 1]), 1),
            Err(MetricsError::RelevantOverflow { .. })
        ));
    }

    #[test]
    fn ap_at_k_examples() {
        assert_eq!(ap_at_k(&flags(&[1, 1, 1, 1]), 10, 4).unwrap(), 1.0);
        assert_eq!(ap_at_k(&flags(&[1, 0]), 1, 2).unwrap(), 1.0);
        assert_eq!(ap_at_k(&flags(&[0, 1]), 5, 2).unwrap(), 0.25);
        assert_eq!(ap_at_k(&[], 1, 0), Err(MetricsError::InvalidK));
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_k(&flags(&[1, 1, 0, 0]), 4).unwrap(), 0.5);
        assert_eq!(precision_at_k(&flags(&[1, 1, 1]), 200).unwrap(), 3.0 / 200.0);
    }

    #[test]
    fn mean_of_two_queries() {
        // a's only match sits at rank 5, b's two at ranks 1 and 4
        let gallery = ["x", "a", "b", "b", "y"];
        let rankings = vec![vec![0, 4, 2, 3, 1], vec![2, 0, 1, 3, 4]];
        let r = evaluate(&rankings, &["a", "b"], &gallery, 200).unwrap();
        let ap_a = 1.0 / 5.0;
        let ap_b = (1.0 + 2.0 / 4.0) / 2.0;
        assert!((r.map_full - (ap_a + ap_b) / 2.0).abs() < 1e-15);
        assert_eq!(r.query_count, 2);
    }

    #[test]
    fn absent_class_is_excluded() {
        let r = evaluate(&[vec![0], vec![0]], &["a", "zzz"], &["a"], 1).unwrap();
        assert_eq!((r.query_count, r.excluded), (1, 1));
        assert_eq!(r.map_full, 1.0);
        assert!(matches!(
            evaluate(&[vec![0]], &["zzz"], &["a"], 1),
            Err(MetricsError::NoQueries { excluded: 1 })
        ));
    }

    #[test]
    fn report_formats() {
        let r = evaluate(&[vec![1, 0]], &["a"], &["b", "a"], 2).unwrap();
        let tsv = r.to_tsv();
        assert!(tsv.contains("mAP\t1\n") && tsv.contains("P@2\t0.5\n"));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["K"], 2);
    }
}
