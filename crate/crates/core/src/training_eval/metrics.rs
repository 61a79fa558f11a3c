use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Filtered rank of `gold`: one plus the number of unfiltered competitors
/// scoring at least as high. Ties count against the gold entity.
pub fn filtered_rank(scores: &[f64], gold: usize, filtered: &[bool]) -> Result<usize> {
    if gold >= scores.len() || filtered.len() != scores.len() {
        return Err(Error::Input(format!(
            "gold {gold} with {} scores and {} filter flags",
            scores.len(),
            filtered.len()
        )));
    }
    let g = scores[gold];
    Ok(1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != gold && !filtered[j] && s >= g)
        .count())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingMetrics {
    pub mr: f64,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub queries: usize,
}

impl RankingMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Input("no ranking queries to evaluate".into()));
        }
        let n = ranks.len() as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(Self {
            mr: ranks.iter().sum::<usize>() as f64 / n,
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            hits1: hits(1),
            hits3: hits(3),
            hits10: hits(10),
            queries: ranks.len(),
        })
    }
}

/// Precision, recall and their harmonic mean; precision is 0 with no predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

/// Micro-averaged scores over class predictions. Predictions or gold labels
/// equal to `null` do not count as positives.
pub fn micro_f1(pred: &[usize], gold: &[usize], null: Option<usize>) -> Result<Prf> {
    if pred.len() != gold.len() {
        return Err(Error::Input(format!("{} predictions for {} gold labels", pred.len(), gold.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gold) {
        let p_pos = Some(p) != null;
        let g_pos = Some(g) != null;
        if p == g {
            if p_pos {
                tp += 1;
            }
        } else {
            if p_pos {
                fp += 1;
            }
            if g_pos {
                fn_ += 1;
            }
        }
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// `(start, end_exclusive, type)`.
pub type Span = (usize, usize, String);

/// Exact-match span scores summed over sentences.
pub fn span_f1(pred: &[Vec<Span>], gold: &[Vec<Span>]) -> Result<Prf> {
    if pred.len() != gold.len() {
        return Err(Error::Input(format!("{} predicted sentences for {} gold", pred.len(), gold.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let p: BTreeSet<&Span> = p.iter().collect();
        let g: BTreeSet<&Span> = g.iter().collect();
        let hit = p.intersection(&g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank_examples() {
        let m = RankingMetrics::from_ranks(&[1, 1]).unwrap();
        assert_eq!((m.mr, m.hits1), (1.0, 1.0));
        let m = RankingMetrics::from_ranks(&[2, 5, 8]).unwrap();
        assert_eq!(m.mr, 5.0);
        assert!((m.hits3 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.hits10, 1.0);
        assert!(RankingMetrics::from_ranks(&[]).is_err());
    }

    #[test]
    fn ties_are_pessimistic_and_filter_applies() {
        let s = [0.5, 0.5, 0.9, 0.1];
        assert_eq!(filtered_rank(&s, 0, &[false; 4]).unwrap(), 3);
        assert_eq!(filtered_rank(&s, 0, &[false, false, true, false]).unwrap(), 2);
        assert!(filtered_rank(&s, 4, &[false; 4]).is_err());
    }

    #[test]
    fn f1_examples() {
        let p = micro_f1(&[0, 1, 2], &[0, 1, 2], None).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = span_f1(&[vec![]], &[vec![(0, 1, "PER".into())]]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        let gold = vec![(0, 1, "A".to_string()), (2, 3, "B".into()), (4, 6, "A".into())];
        let pred = vec![(0, 1, "A".to_string()), (2, 3, "B".into()), (7, 8, "A".into())];
        let p = span_f1(&[pred], &[gold]).unwrap();
        for v in [p.precision, p.recall, p.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
        assert!(micro_f1(&[0], &[], None).is_err());
    }

    #[test]
    fn null_class_excluded() {
        // gold: null, A, B; pred: A, A, null
        let p = micro_f1(&[1, 1, 0], &[0, 1, 2], Some(0)).unwrap();
        assert_eq!((p.tp, p.fp, p.fn_), (1, 1, 1));
    }

    proptest! {
        #[test]
        fn shift_invariant_and_hits_monotone(scores in prop::collection::vec(-5.0f64..5.0, 2..20), c in -3.0f64..3.0, gold_seed in 0usize..100) {
            let gold = gold_seed % scores.len();
            let flt = vec![false; scores.len()];
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            let r1 = filtered_rank(&scores, gold, &flt).unwrap();
            // exact shift keeps order unless rounding merges values; use an exactly representable shift
            let r2 = filtered_rank(&scores.iter().map(|s| s * 2.0).collect::<Vec<_>>(), gold, &flt).unwrap();
            prop_assert_eq!(r1, r2);
            prop_assert!(filtered_rank(&shifted, gold, &flt).unwrap() >= 1);
            let m = RankingMetrics::from_ranks(&[r1, r2, 1 + gold_seed % 12]).unwrap();
            prop_assert!(m.hits1 <= m.hits3 && m.hits3 <= m.hits10);
            prop_assert!(m.mr >= 1.0);
        }

        #[test]
        fn f1_is_harmonic_mean(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
            let p = Prf::from_counts(tp, fp, fn_);
            let expect = if p.precision + p.recall == 0.0 { 0.0 } else { 2.0 * p.precision * p.recall / (p.precision + p.recall) };
            prop_assert!((p.f1 - expect).abs() <= 1e-12);
        }
    }
}
