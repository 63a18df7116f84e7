//! Smoothed sentence-level BLEU.
//!
//! Two routes compute the same quantity:
//!
//! - [`smoothed_bleu`] counts n-grams of one candidate/reference pair with
//!   hash maps. It is the pairwise reference used by the naive reranker.
//! - [`batch_bleu_matrix`] works on an [`NGramIndex`]: every candidate becomes
//!   a row of counts over the `M` unique n-grams of the whole candidate space,
//!   together with a vector giving the order of each n-gram. Clipped matches
//!   of a pair are then per-order sums of element-wise minima of two rows, so
//!   the full `N x N` matrix falls out of one pass over the count matrix.
//!
//! Both routes reduce to the same integer match statistics and share
//! [`bleu_from_matches`], so their results are bit-identical.
//!
//! Precision of order `n` is smoothed by adding one to numerator and
//! denominator; the denominator is clamped to at least one so sequences
//! shorter than four tokens are handled. The brevity term uses
//! `min(1 - |ref| / |cand|, 0)` with the row as candidate.

use std::collections::HashMap;
use std::ops::Range;

use rayon::prelude::*;

use crate::{Error, Result, TokenId};

pub const MAX_ORDER: usize = 4;

/// Clipped n-gram match counts for orders 1..=4.
pub type Matches = [u32; MAX_ORDER];

/// BLEU from clipped match counts and the two lengths.
#[inline]
pub fn bleu_from_matches(matches: &Matches, cand_len: usize, ref_len: usize) -> f64 {
    let mut log_precision = 0.0;
    for (i, &m) in matches.iter().enumerate() {
        let n = i + 1;
        let denom = (cand_len + 2).saturating_sub(n).max(1);
        log_precision += ((m as f64 + 1.0) / denom as f64).ln();
    }
    let brevity = (1.0 - ref_len as f64 / cand_len as f64).min(0.0);
    (brevity + log_precision / MAX_ORDER as f64).exp()
}

/// Smoothed BLEU of `candidate` against `reference`, in `(0, 1]`.
pub fn smoothed_bleu(candidate: &[TokenId], reference: &[TokenId]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::invalid("smoothed_bleu: empty sequence"));
    }
    let mut matches = [0u32; MAX_ORDER];
    for (i, m) in matches.iter_mut().enumerate() {
        let n = i + 1;
        if candidate.len() < n || reference.len() < n {
            continue;
        }
        let mut ref_counts: HashMap<&[TokenId], u32> = HashMap::new();
        for w in reference.windows(n) {
            *ref_counts.entry(w).or_default() += 1;
        }
        let mut cand_counts: HashMap<&[TokenId], u32> = HashMap::new();
        for w in candidate.windows(n) {
            *cand_counts.entry(w).or_default() += 1;
        }
        *m = cand_counts
            .iter()
            .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
    }
    Ok(bleu_from_matches(&matches, candidate.len(), reference.len()))
}

/// Discrepancy `1 - BLEU`.
pub fn bleu_discrepancy(candidate: &[TokenId], reference: &[TokenId]) -> Result<f64> {
    Ok(1.0 - smoothed_bleu(candidate, reference)?)
}

/// Count matrix over all unique n-grams (orders 1..=4) of a candidate list.
///
/// Columns are grouped by n-gram order; within one order they follow first
/// occurrence, scanning candidates in list order and positions left to right.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramIndex {
    num_candidates: usize,
    ngrams: Vec<Vec<TokenId>>,
    order: Vec<u8>,
    order_ranges: [Range<usize>; MAX_ORDER],
    counts: Vec<u32>,
    lengths: Vec<usize>,
    // Non-zero (column, count) entries per row, columns ascending.
    sparse_rows: Vec<Vec<(u32, u32)>>,
}

impl NGramIndex {
    pub fn build<S: AsRef<[TokenId]>>(candidates: &[S]) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::invalid("build_ngram_index: empty candidate list"));
        }
        if candidates.iter().any(|c| c.as_ref().is_empty()) {
            return Err(Error::invalid("build_ngram_index: empty candidate"));
        }

        let mut ngrams: Vec<Vec<TokenId>> = Vec::new();
        let mut order = Vec::new();
        let mut lookup: HashMap<&[TokenId], usize> = HashMap::new();
        let mut order_ranges: [Range<usize>; MAX_ORDER] = Default::default();
        for n in 1..=MAX_ORDER {
            let start = ngrams.len();
            for cand in candidates {
                for w in cand.as_ref().windows(n) {
                    lookup.entry(w).or_insert_with(|| {
                        ngrams.push(w.to_vec());
                        order.push(n as u8);
                        ngrams.len() - 1
                    });
                }
            }
            order_ranges[n - 1] = start..ngrams.len();
        }

        let m = ngrams.len();
        let mut counts = vec![0u32; candidates.len() * m];
        let mut sparse_rows = Vec::with_capacity(candidates.len());
        for (i, cand) in candidates.iter().enumerate() {
            let row = &mut counts[i * m..(i + 1) * m];
            for n in 1..=MAX_ORDER {
                for w in cand.as_ref().windows(n) {
                    row[lookup[w]] += 1;
                }
            }
            sparse_rows.push(
                row.iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(k, &c)| (k as u32, c))
                    .collect(),
            );
        }

        Ok(NGramIndex {
            num_candidates: candidates.len(),
            ngrams,
            order,
            order_ranges,
            counts,
            lengths: candidates.iter().map(|c| c.as_ref().len()).collect(),
            sparse_rows,
        })
    }

    pub fn num_candidates(&self) -> usize {
        self.num_candidates
    }

    pub fn num_ngrams(&self) -> usize {
        self.ngrams.len()
    }

    /// Counts of candidate `i` over all columns.
    pub fn counts(&self, i: usize) -> &[u32] {
        let m = self.num_ngrams();
        &self.counts[i * m..(i + 1) * m]
    }

    /// Order (1..=4) of each column.
    pub fn order(&self) -> &[u8] {
        &self.order
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn ngram(&self, k: usize) -> &[TokenId] {
        &self.ngrams[k]
    }

    /// Columns holding n-grams of order `n`.
    pub fn order_range(&self, n: usize) -> Range<usize> {
        self.order_ranges[n - 1].clone()
    }

    pub fn column_of(&self, ngram: &[TokenId]) -> Option<usize> {
        if ngram.is_empty() || ngram.len() > MAX_ORDER {
            return None;
        }
        self.order_range(ngram.len())
            .find(|&k| self.ngrams[k] == ngram)
    }

    /// Clipped matches of candidate `i` against candidate `j`:
    /// `sum_k I(g_k = n) * min(c_ik, c_jk)` for each order `n`.
    #[inline]
    pub fn matches(&self, i: usize, j: usize) -> Matches {
        let mut out = [0u32; MAX_ORDER];
        let other = self.counts(j);
        for &(k, c) in &self.sparse_rows[i] {
            let k = k as usize;
            out[self.order[k] as usize - 1] += c.min(other[k]);
        }
        out
    }
}

/// Count vector of `seq` over an explicit list of n-grams, together with
/// the order vector of that list.
pub fn count_vector(ngrams: &[Vec<TokenId>], seq: &[TokenId]) -> (Vec<u32>, Vec<u8>) {
    let counts = ngrams
        .iter()
        .map(|g| {
            if g.is_empty() || g.len() > seq.len() {
                0
            } else {
                seq.windows(g.len()).filter(|w| *w == g.as_slice()).count() as u32
            }
        })
        .collect();
    let order = ngrams.iter().map(|g| g.len() as u8).collect();
    (counts, order)
}

/// Dense row-major matrix of BLEU values; rows are candidates, columns
/// references.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl BleuMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Element-wise `1 - BLEU`.
    pub fn into_discrepancy(mut self) -> Vec<f64> {
        for v in &mut self.values {
            *v = 1.0 - *v;
        }
        self.values
    }
}

/// Full `N x N` BLEU matrix of an index.
pub fn batch_bleu_matrix(index: &NGramIndex) -> BleuMatrix {
    let all: Vec<usize> = (0..index.num_candidates()).collect();
    batch_bleu_block(index, &all, &all)
}

/// BLEU values for the given row and column subsets of an index.
///
/// Rows are computed in parallel; each entry is computed by the same
/// sequential code, so the result does not depend on the thread count.
pub fn batch_bleu_block(index: &NGramIndex, rows: &[usize], cols: &[usize]) -> BleuMatrix {
    let mut values = vec![0.0; rows.len() * cols.len()];
    if !cols.is_empty() {
        values
            .par_chunks_mut(cols.len())
            .zip(rows.par_iter())
            .for_each(|(out, &i)| {
                let len_i = index.lengths[i];
                for (slot, &j) in out.iter_mut().zip(cols) {
                    *slot = bleu_from_matches(&index.matches(i, j), len_i, index.lengths[j]);
                }
            });
    }
    BleuMatrix {
        rows: rows.len(),
        cols: cols.len(),
        values,
    }
}
