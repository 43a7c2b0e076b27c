use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::PredictionRanking;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub acc_at_1: f64,
    pub acc_at_10: f64,
    pub mrr: f64,
    pub ndcg_at_5: f64,
    pub ndcg_at_10: f64,
    pub samples: usize,
}

/// Binary-relevance NDCG@k for a single relevant item at 1-based `rank`.
pub fn ndcg_single(rank: usize, k: usize) -> f64 {
    if rank == 0 || rank > k {
        0.0
    } else {
        1.0 / ((rank + 1) as f64).log2()
    }
}

/// Metrics from the 1-based rank of the true location in each sample.
pub fn ranking_metrics_from_ranks(ranks: &[usize]) -> Result<RankingMetrics> {
    if ranks.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    if ranks.contains(&0) {
        return Err(Error::invalid("ranks are 1-based"));
    }
    let n = ranks.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n;
    Ok(RankingMetrics {
        acc_at_1: mean(&|r| f64::from(u8::from(r <= 1))),
        acc_at_10: mean(&|r| f64::from(u8::from(r <= 10))),
        mrr: mean(&|r| 1.0 / r as f64),
        ndcg_at_5: mean(&|r| ndcg_single(r, 5)),
        ndcg_at_10: mean(&|r| ndcg_single(r, 10)),
        samples: ranks.len(),
    })
}

pub fn compute_ranking_metrics(rankings: &[PredictionRanking], truth: &[u32]) -> Result<RankingMetrics> {
    if rankings.len() != truth.len() {
        return Err(Error::Dimension {
            expected: rankings.len(),
            actual: truth.len(),
        });
    }
    let ranks = rankings
        .iter()
        .zip(truth)
        .map(|(r, &t)| {
            r.rank_of(t)
                .ok_or_else(|| Error::invalid(format!("location {t} missing from ranking")))
        })
        .collect::<Result<Vec<_>>>()?;
    ranking_metrics_from_ranks(&ranks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImmobilityMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Some ratio had a zero denominator and was set to 0.
    pub zero_denominator: bool,
}

/// P/R/F1 of the positive (immobile) class.
pub fn compute_immobility_prf(predicted: &[bool], truth: &[bool]) -> Result<ImmobilityMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::Dimension {
            expected: predicted.len(),
            actual: truth.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let mut zero = false;
    let mut ratio = |num: f64, den: f64| {
        if den == 0.0 {
            zero = true;
            0.0
        } else {
            num / den
        }
    };
    let precision = ratio(tp as f64, (tp + fp) as f64);
    let recall = ratio(tp as f64, (tp + fn_) as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Ok(ImmobilityMetrics {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        zero_denominator: zero,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionMetrics {
    pub accuracy: f64,
    /// Computed on the immobility class; all zero without one.
    pub immobility: ImmobilityMetrics,
    pub samples: usize,
}

pub fn compute_intention_metrics(
    predicted: &[usize],
    truth: &[usize],
    immobility_class: Option<usize>,
) -> Result<IntentionMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::Dimension {
            expected: predicted.len(),
            actual: truth.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::invalid("no intention samples"));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    let is_imm = |v: &[usize]| v.iter().map(|&c| Some(c) == immobility_class).collect::<Vec<_>>();
    Ok(IntentionMetrics {
        accuracy: hits as f64 / predicted.len() as f64,
        immobility: compute_immobility_prf(&is_imm(predicted), &is_imm(truth))?,
        samples: predicted.len(),
    })
}

/// Mean of Acc@10 and F1@Immob.
pub fn composite_score(ranking: &RankingMetrics, immobility: &ImmobilityMetrics) -> f64 {
    (ranking.acc_at_10 + immobility.f1) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn rank_one_is_perfect() {
        let m = ranking_metrics_from_ranks(&[1]).unwrap();
        assert_eq!((m.acc_at_1, m.acc_at_10, m.mrr, m.ndcg_at_5, m.ndcg_at_10), (1.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn rank_two_by_hand() {
        let m = ranking_metrics_from_ranks(&[2]).unwrap();
        assert_eq!((m.acc_at_1, m.acc_at_10, m.mrr), (0.0, 1.0, 0.5));
        assert!(close(m.ndcg_at_5, 1.0 / 3f64.log2()));
        assert!((m.ndcg_at_5 - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn mean_reciprocal_rank() {
        let m = ranking_metrics_from_ranks(&[1, 3]).unwrap();
        assert!(close(m.mrr, 2.0 / 3.0));
    }

    #[test]
    fn cutoffs() {
        let m = ranking_metrics_from_ranks(&[6, 11]).unwrap();
        assert_eq!((m.ndcg_at_5, m.acc_at_10), (0.0, 0.5));
        assert!(close(m.ndcg_at_10, 0.5 / 7f64.log2()));
    }

    #[test]
    fn empty_rejected() {
        assert!(ranking_metrics_from_ranks(&[]).is_err());
    }

    #[test]
    fn from_rankings() {
        let r = PredictionRanking::from_logits(0, &[0.0, 2.0, 1.0]);
        let m = compute_ranking_metrics(&[r.clone(), r], &[1, 0]).unwrap();
        assert!(close(m.mrr, (1.0 + 1.0 / 3.0) / 2.0));
    }

    #[test]
    fn prf_by_hand() {
        let p = [true, true, true, false, false];
        let t = [true, true, false, true, true];
        let m = compute_immobility_prf(&p, &t).unwrap();
        assert!(close(m.precision, 2.0 / 3.0));
        assert!(close(m.recall, 0.5));
        assert!(close(m.f1, 4.0 / 7.0));
        assert!(!m.zero_denominator);
    }

    #[test]
    fn prf_conventions() {
        let all = compute_immobility_prf(&[true; 3], &[true; 3]).unwrap();
        assert_eq!((all.precision, all.recall, all.f1), (1.0, 1.0, 1.0));
        let none = compute_immobility_prf(&[false; 3], &[false; 3]).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        assert!(none.zero_denominator);
    }

    #[test]
    fn intention_counts() {
        let same = compute_intention_metrics(&[1, 2, 8], &[1, 2, 8], Some(8)).unwrap();
        assert_eq!(same.accuracy, 1.0);
        let disjoint = compute_intention_metrics(&[0, 0], &[1, 1], Some(8)).unwrap();
        assert_eq!(disjoint.accuracy, 0.0);
        // One immobility hit, one immobility miss, two ordinary hits.
        let m = compute_intention_metrics(&[8, 1, 2, 3], &[8, 8, 2, 3], Some(8)).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.immobility.recall, 0.5);
        assert!(compute_intention_metrics(&[1], &[1, 2], None).is_err());
    }
}
