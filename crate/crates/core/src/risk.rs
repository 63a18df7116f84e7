//! Evidence-space probabilities, Bayes risk and MBR reranking.
//!
//! The Bayes risk of a candidate `y` under an evidence space `E` is
//! `R(y) = sum_{y' in E} delta(y, y') * p(y' | x)`, where `p` is a softmax over
//! the average log-probabilities of the evidences.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::ngram_bleu::{batch_bleu_block, bleu_discrepancy, NGramIndex};
use crate::{Error, Result, TokenId, TokenSeq};

/// A discrepancy function between two token sequences.
pub trait Discrepancy: Sync {
    fn pair(&self, y: &[TokenId], other: &[TokenId]) -> Result<f64>;

    /// Row-major `rows.len() x cols.len()` matrix of discrepancies.
    fn matrix(&self, rows: &[&[TokenId]], cols: &[&[TokenId]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for r in rows {
            for c in cols {
                out.push(self.pair(r, c)?);
            }
        }
        Ok(out)
    }
}

/// `1 - smoothed BLEU`; matrices go through the batch n-gram kernel.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactBleu;

impl Discrepancy for ExactBleu {
    fn pair(&self, y: &[TokenId], other: &[TokenId]) -> Result<f64> {
        bleu_discrepancy(y, other)
    }

    fn matrix(&self, rows: &[&[TokenId]], cols: &[&[TokenId]]) -> Result<Vec<f64>> {
        if rows.is_empty() || cols.is_empty() {
            return Ok(Vec::new());
        }
        let all: Vec<&[TokenId]> = rows.iter().chain(cols).copied().collect();
        let index = NGramIndex::build(&all)?;
        let row_ids: Vec<usize> = (0..rows.len()).collect();
        let col_ids: Vec<usize> = (rows.len()..all.len()).collect();
        Ok(batch_bleu_block(&index, &row_ids, &col_ids).into_discrepancy())
    }
}

/// Same values as [`ExactBleu`], but matrices are filled by pairwise calls.
#[derive(Debug, Clone, Copy, Default)]
pub struct PairwiseBleu;

impl Discrepancy for PairwiseBleu {
    fn pair(&self, y: &[TokenId], other: &[TokenId]) -> Result<f64> {
        bleu_discrepancy(y, other)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub seq: TokenSeq,
    pub avg_logprob: f64,
}

impl Evidence {
    pub fn new(seq: TokenSeq, avg_logprob: f64) -> Self {
        Evidence { seq, avg_logprob }
    }
}

/// Softmax over average log-probabilities.
pub fn evidence_probs(avg_logprobs: &[f64]) -> Result<Vec<f64>> {
    if avg_logprobs.is_empty() {
        return Err(Error::invalid("evidence_probs: empty evidence list"));
    }
    if avg_logprobs.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("evidence_probs: non-finite avg_logprob"));
    }
    let max = avg_logprobs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = avg_logprobs.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceSpace {
    evidences: Vec<Evidence>,
    probs: Vec<f64>,
}

impl EvidenceSpace {
    pub fn new(evidences: Vec<Evidence>) -> Result<Self> {
        let lp: Vec<f64> = evidences.iter().map(|e| e.avg_logprob).collect();
        let probs = evidence_probs(&lp)?;
        Ok(EvidenceSpace { evidences, probs })
    }

    pub fn evidences(&self) -> &[Evidence] {
        &self.evidences
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.evidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.evidences.is_empty()
    }

    fn seqs(&self) -> Vec<&[TokenId]> {
        self.evidences.iter().map(|e| e.seq.as_slice()).collect()
    }
}

pub fn bayes_risk(y: &[TokenId], space: &EvidenceSpace, delta: &dyn Discrepancy) -> Result<f64> {
    let mut risk = 0.0;
    for (e, p) in space.evidences.iter().zip(&space.probs) {
        risk += delta.pair(y, &e.seq)? * p;
    }
    Ok(risk)
}

/// Bayes risks of many sequences from one discrepancy matrix.
pub fn batch_risks(
    seqs: &[&[TokenId]],
    space: &EvidenceSpace,
    delta: &dyn Discrepancy,
) -> Result<Vec<f64>> {
    let cols = space.seqs();
    let matrix = delta.matrix(seqs, &cols)?;
    Ok(matrix
        .chunks(cols.len().max(1))
        .take(seqs.len())
        .map(|row| row.iter().zip(&space.probs).fold(0.0, |acc, (d, p)| acc + d * p))
        .collect())
}

/// Per-candidate risks and the induced ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub risks: Vec<f64>,
    /// Candidate indices, best (lowest risk) first.
    pub ranking: Vec<usize>,
    /// `partial[i]` is set when the risk of candidate `i` was not fully
    /// accumulated; its entry in `risks` is then a lower bound.
    pub partial: Vec<bool>,
}

impl RiskReport {
    pub fn best(&self) -> usize {
        self.ranking[0]
    }
}

fn rank_order(risks: &[f64], candidates: &[Evidence], a: usize, b: usize) -> Ordering {
    risks[a]
        .total_cmp(&risks[b])
        .then_with(|| candidates[b].avg_logprob.total_cmp(&candidates[a].avg_logprob))
        .then_with(|| a.cmp(&b))
}

/// MBR reranking with one batch discrepancy matrix.
pub fn mbr_rerank(
    candidates: &[Evidence],
    space: &EvidenceSpace,
    delta: &dyn Discrepancy,
) -> Result<RiskReport> {
    if candidates.is_empty() {
        return Err(Error::invalid("mbr_rerank: no candidates"));
    }
    let seqs: Vec<&[TokenId]> = candidates.iter().map(|c| c.seq.as_slice()).collect();
    let risks = batch_risks(&seqs, space, delta)?;
    let mut ranking: Vec<usize> = (0..candidates.len()).collect();
    ranking.sort_by(|&a, &b| rank_order(&risks, candidates, a, b));
    Ok(RiskReport {
        partial: vec![false; risks.len()],
        risks,
        ranking,
    })
}

/// Pairwise reranker that stops accumulating a candidate's risk as soon as
/// it exceeds the lowest complete risk seen so far.
///
/// Complete candidates are ranked first, followed by pruned ones ordered by
/// their lower bounds. The rank-1 candidate and its risk equal those of
/// [`mbr_rerank`].
pub fn naive_rerank_early_stop(
    candidates: &[Evidence],
    space: &EvidenceSpace,
    delta: &dyn Discrepancy,
) -> Result<RiskReport> {
    if candidates.is_empty() {
        return Err(Error::invalid("naive_rerank_early_stop: no candidates"));
    }
    let mut risks = Vec::with_capacity(candidates.len());
    let mut partial = Vec::with_capacity(candidates.len());
    let mut incumbent = f64::INFINITY;
    for cand in candidates {
        let mut sum = 0.0;
        let mut pruned = false;
        for (e, p) in space.evidences.iter().zip(&space.probs) {
            sum += delta.pair(&cand.seq, &e.seq)? * p;
            if sum > incumbent {
                pruned = true;
                break;
            }
        }
        if !pruned {
            incumbent = incumbent.min(sum);
        }
        risks.push(sum);
        partial.push(pruned);
    }
    let mut ranking: Vec<usize> = (0..candidates.len()).collect();
    ranking.sort_by(|&a, &b| {
        partial[a]
            .cmp(&partial[b])
            .then_with(|| rank_order(&risks, candidates, a, b))
    });
    Ok(RiskReport {
        risks,
        ranking,
        partial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(tokens: &[u32], lp: f64) -> Evidence {
        Evidence::new(TokenSeq::new(tokens.to_vec()).unwrap(), lp)
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(evidence_probs(&[-3.0]).unwrap(), vec![1.0]);
        assert_eq!(evidence_probs(&[-2.0, -2.0]).unwrap(), vec![0.5, 0.5]);
        let p = evidence_probs(&[-1.0, -2.0]).unwrap();
        let z = (-1.0f64).exp() + (-2.0f64).exp();
        assert!((p[0] - (-1.0f64).exp() / z).abs() < 1e-15);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        assert!(evidence_probs(&[]).is_err());
        assert!(evidence_probs(&[f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn risk_of_the_single_evidence_is_zero() {
        let space = EvidenceSpace::new(vec![ev(&[1, 2, 3, 4], -0.7)]).unwrap();
        assert_eq!(bayes_risk(&[1, 2, 3, 4], &space, &ExactBleu).unwrap(), 0.0);
        let y = [4, 3, 9];
        assert_eq!(
            bayes_risk(&y, &space, &ExactBleu).unwrap(),
            bleu_discrepancy(&y, &[1, 2, 3, 4]).unwrap()
        );
    }

    #[test]
    fn uniform_space_gives_mean_discrepancy() {
        let space = EvidenceSpace::new(vec![ev(&[1, 2, 3], -1.0), ev(&[3, 2, 1, 1], -1.0)]).unwrap();
        let y = [1, 2, 1];
        let d0 = bleu_discrepancy(&y, &[1, 2, 3]).unwrap();
        let d1 = bleu_discrepancy(&y, &[3, 2, 1, 1]).unwrap();
        let r = bayes_risk(&y, &space, &ExactBleu).unwrap();
        assert!((r - 0.5 * (d0 + d1)).abs() < 1e-15);
        let batch = batch_risks(&[&y], &space, &ExactBleu).unwrap();
        assert!((batch[0] - r).abs() < 1e-15);
    }

    #[test]
    fn singleton_rerank() {
        let c = vec![ev(&[5, 6], -0.2)];
        let space = EvidenceSpace::new(c.clone()).unwrap();
        for report in [
            mbr_rerank(&c, &space, &ExactBleu).unwrap(),
            naive_rerank_early_stop(&c, &space, &ExactBleu).unwrap(),
        ] {
            assert_eq!(report.ranking, vec![0]);
            assert_eq!(report.risks, vec![0.0]);
        }
    }

    #[test]
    fn ties_prefer_higher_avg_logprob_then_index() {
        let c = vec![ev(&[1, 2], -2.0), ev(&[1, 2], -1.0), ev(&[1, 2], -1.0)];
        let space = EvidenceSpace::new(vec![ev(&[3, 4], 0.0)]).unwrap();
        let report = mbr_rerank(&c, &space, &ExactBleu).unwrap();
        assert_eq!(report.risks[0], report.risks[1]);
        assert_eq!(report.ranking, vec![1, 2, 0]);
    }

    #[test]
    fn bad_candidate_is_pruned_after_first_evidence() {
        // first candidate matches the dominant evidence exactly; the second
        // shares nothing with it
        let space =
            EvidenceSpace::new(vec![ev(&[1, 2, 3, 4], 0.0), ev(&[1, 2, 3, 5], -5.0)]).unwrap();
        let c = vec![ev(&[1, 2, 3, 4], 0.0), ev(&[9, 9, 9, 9], 0.0)];
        let report = naive_rerank_early_stop(&c, &space, &ExactBleu).unwrap();
        assert_eq!(report.partial, vec![false, true]);
        assert_eq!(report.best(), 0);
        let exact = mbr_rerank(&c, &space, &ExactBleu).unwrap();
        assert_eq!(exact.best(), 0);
        assert_eq!(exact.risks[0], report.risks[0]);
        assert!(report.risks[1] <= exact.risks[1]);
    }

    #[test]
    fn copy_risk_falls_as_its_probability_rises() {
        let y = [1, 2, 3, 4, 5];
        let mut last = f64::INFINITY;
        for lp in [-4.0, -2.0, -1.0, 0.0, 1.0] {
            let space = EvidenceSpace::new(vec![ev(&y, lp), ev(&[5, 4, 3], -1.0)]).unwrap();
            let r = bayes_risk(&y, &space, &ExactBleu).unwrap();
            assert!(r < last);
            last = r;
        }
    }

    fn instance() -> impl Strategy<Value = (Vec<(Vec<u32>, f64)>, Vec<(Vec<u32>, f64)>)> {
        let item = (prop::collection::vec(0u32..6, 1..8), -5.0f64..0.0);
        (
            prop::collection::vec(item.clone(), 1..8),
            prop::collection::vec(item, 1..8),
        )
    }

    fn to_evidence(items: &[(Vec<u32>, f64)]) -> Vec<Evidence> {
        items.iter().map(|(t, lp)| ev(t, *lp)).collect()
    }

    proptest! {
        #[test]
        fn rerankers_agree_on_rank_one((cands, evs) in instance()) {
            let cands = to_evidence(&cands);
            let space = EvidenceSpace::new(to_evidence(&evs)).unwrap();
            let fast = mbr_rerank(&cands, &space, &ExactBleu).unwrap();
            let naive = naive_rerank_early_stop(&cands, &space, &ExactBleu).unwrap();
            prop_assert_eq!(fast.best(), naive.best());
            prop_assert_eq!(fast.risks[fast.best()], naive.risks[naive.best()]);
            let dmax = cands.iter()
                .flat_map(|c| space.evidences().iter().map(move |e| bleu_discrepancy(&c.seq, &e.seq).unwrap()))
                .fold(0.0, f64::max);
            for (i, r) in fast.risks.iter().enumerate() {
                prop_assert!(*r >= 0.0 && *r <= dmax + 1e-12);
                if naive.partial[i] {
                    prop_assert!(naive.risks[i] <= *r + 1e-12);
                    prop_assert!(*r > fast.risks[fast.best()]);
                } else {
                    prop_assert_eq!(naive.risks[i], *r);
                }
            }
        }

        #[test]
        fn shift_invariance((cands, evs) in instance(), shift in -20.0f64..20.0) {
            let cands = to_evidence(&cands);
            let space = EvidenceSpace::new(to_evidence(&evs)).unwrap();
            let shifted: Vec<Evidence> = space.evidences().iter()
                .map(|e| Evidence::new(e.seq.clone(), e.avg_logprob + shift))
                .collect();
            let shifted = EvidenceSpace::new(shifted).unwrap();
            for (a, b) in space.probs().iter().zip(shifted.probs()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((shifted.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let r1 = mbr_rerank(&cands, &space, &ExactBleu).unwrap();
            let r2 = mbr_rerank(&cands, &shifted, &ExactBleu).unwrap();
            for (a, b) in r1.risks.iter().zip(&r2.risks) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert_eq!(r1.best(), r2.best());
        }

        #[test]
        fn batch_and_pairwise_discrepancy_paths_agree((cands, evs) in instance()) {
            let cands = to_evidence(&cands);
            let space = EvidenceSpace::new(to_evidence(&evs)).unwrap();
            let a = mbr_rerank(&cands, &space, &ExactBleu).unwrap();
            let b = mbr_rerank(&cands, &space, &PairwiseBleu).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
