//! Ranking metrics: precision at rank, average precision, mAP and
//! Accuracy@K, all over binary label-level relevance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary relevance of each rank plus the query's total relevant count R_q.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceVector {
    rel: Vec<bool>,
    num_relevant: usize,
}

impl RelevanceVector {
    /// `num_relevant` may exceed the hits in `rel` when the list is truncated.
    pub fn new(rel: Vec<bool>, num_relevant: usize) -> Result<Self> {
        let hits = rel.iter().filter(|&&r| r).count();
        if num_relevant < hits {
            return Err(Error::arg(format!(
                "R_q = {num_relevant} but the list holds {hits} relevant items"
            )));
        }
        Ok(Self { rel, num_relevant })
    }

    /// Relevance over a fully ranked database, so R_q is the hit count.
    pub fn full(rel: Vec<bool>) -> Self {
        let num_relevant = rel.iter().filter(|&&r| r).count();
        Self { rel, num_relevant }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self::full(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn rel(&self) -> &[bool] {
        &self.rel
    }

    pub fn num_relevant(&self) -> usize {
        self.num_relevant
    }

    pub fn len(&self) -> usize {
        self.rel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rel.is_empty()
    }
}

/// Fraction of relevant items among the first `i` ranks (1-based).
pub fn precision_at(i: usize, rel: &RelevanceVector) -> Result<f64> {
    if i == 0 || i > rel.len() {
        return Err(Error::arg(format!(
            "rank {i} outside 1..={} of the list",
            rel.len()
        )));
    }
    let hits = rel.rel[..i].iter().filter(|&&r| r).count();
    Ok(hits as f64 / i as f64)
}

/// `(1/R_q) Σ_i P(i)·rel(i)` over the whole list.
pub fn average_precision(rel: &RelevanceVector) -> Result<f64> {
    if rel.num_relevant == 0 {
        return Err(Error::UndefinedAp);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in rel.rel.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / rel.num_relevant as f64)
}

/// Whether any of the first `k` ranks is relevant.
pub fn acc_at_k(rel: &RelevanceVector, k: usize) -> Result<bool> {
    if k == 0 {
        return Err(Error::arg("Accuracy@K needs K ≥ 1"));
    }
    Ok(rel.rel.iter().take(k).any(|&r| r))
}

fn answerable(rels: &[RelevanceVector]) -> Result<Vec<&RelevanceVector>> {
    if rels.is_empty() {
        return Err(Error::arg("no queries to evaluate"));
    }
    let kept: Vec<&RelevanceVector> = rels.iter().filter(|r| r.num_relevant > 0).collect();
    let skipped = rels.len() - kept.len();
    if skipped > 0 {
        log::warn!("skipping {skipped} queries with no relevant items");
    }
    if kept.is_empty() {
        return Err(Error::arg("no query has any relevant item"));
    }
    Ok(kept)
}

/// Mean AP over queries; queries with R_q = 0 are skipped.
pub fn mean_ap(rels: &[RelevanceVector]) -> Result<f64> {
    let kept = answerable(rels)?;
    let mut sum = 0.0;
    for r in &kept {
        sum += average_precision(r)?;
    }
    Ok(sum / kept.len() as f64)
}

/// Fraction of queries with a relevant item in the top `k`; queries with
/// R_q = 0 are skipped.
pub fn accuracy_at_k(rels: &[RelevanceVector], k: usize) -> Result<f64> {
    let kept = answerable(rels)?;
    let mut hits = 0usize;
    for r in &kept {
        hits += usize::from(acc_at_k(r, k)?);
    }
    Ok(hits as f64 / kept.len() as f64)
}

pub const DEFAULT_CUTOFFS: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyAt {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map: f64,
    pub accuracy: Vec<AccuracyAt>,
    pub queries: usize,
    pub skipped: usize,
}

impl MetricReport {
    pub fn accuracy_at(&self, k: usize) -> Option<f64> {
        self.accuracy.iter().find(|a| a.k == k).map(|a| a.value)
    }
}

pub fn evaluate(rels: &[RelevanceVector], cutoffs: &[usize]) -> Result<MetricReport> {
    let kept = answerable(rels)?.len();
    let accuracy = cutoffs
        .iter()
        .map(|&k| {
            Ok(AccuracyAt {
                k,
                value: accuracy_at_k(rels, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        map: mean_ap(rels)?,
        accuracy,
        queries: kept,
        skipped: rels.len() - kept,
    })
}

/// Mean and sample (n−1) standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::arg("cannot summarize an empty set"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(Summary { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(b: &[u8]) -> RelevanceVector {
        RelevanceVector::from_bits(b)
    }

    #[test]
    fn precision_examples() {
        assert!((precision_at(3, &bits(&[1, 0, 1])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        for i in 1..=3 {
            assert_eq!(precision_at(i, &bits(&[1, 1, 1])).unwrap(), 1.0);
        }
        assert_eq!(precision_at(1, &bits(&[0, 1])).unwrap(), 0.0);
        assert!(matches!(precision_at(0, &bits(&[1])), Err(Error::Argument(_))));
        assert!(matches!(precision_at(2, &bits(&[1])), Err(Error::Argument(_))));
    }

    #[test]
    fn average_precision_examples() {
        let ap = average_precision(&bits(&[1, 0, 1])).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&bits(&[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(average_precision(&bits(&[0, 1])).unwrap(), 0.5);
        assert!(matches!(average_precision(&bits(&[0, 0])), Err(Error::UndefinedAp)));
    }

    #[test]
    fn truncated_list_uses_declared_r() {
        // Two relevant items exist but only one is in the top 2.
        let r = RelevanceVector::new(vec![true, false], 2).unwrap();
        assert_eq!(average_precision(&r).unwrap(), 0.5);
        assert!(RelevanceVector::new(vec![true, true], 1).is_err());
    }

    #[test]
    fn mean_ap_examples() {
        let rels = [bits(&[1, 0]), bits(&[0, 1])];
        assert_eq!(mean_ap(&rels).unwrap(), 0.75);
        assert_eq!(mean_ap(&rels[1..]).unwrap(), 0.5);
        assert!(matches!(mean_ap(&[]), Err(Error::Argument(_))));
        // R_q = 0 queries are skipped.
        let with_empty = [bits(&[1, 0]), bits(&[0, 0])];
        assert_eq!(mean_ap(&with_empty).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_examples() {
        let r = bits(&[0, 0, 1]);
        assert!(!acc_at_k(&r, 2).unwrap());
        assert!(acc_at_k(&r, 3).unwrap());
        assert!(acc_at_k(&r, 50).unwrap());
        assert!(matches!(acc_at_k(&r, 0), Err(Error::Argument(_))));

        let rels = [bits(&[1, 0]), bits(&[0, 1]), bits(&[1]), bits(&[1, 1])];
        assert_eq!(accuracy_at_k(&rels, 1).unwrap(), 0.75);
    }

    #[test]
    fn summary_matches_hand_computation() {
        let s = summarize(&[83.8, 84.5, 82.4, 78.6, 79.3]).unwrap();
        assert!((s.mean - 81.72).abs() < 1e-9);
        // Σ(x−mean)² = 28.108, /4 = 7.027
        assert!((s.std - 7.027f64.sqrt()).abs() < 1e-9);
        assert_eq!(summarize(&[2.0]).unwrap().std, 0.0);
    }
}
