//! Slow, direct reference implementations for the test suites.
//!
//! Nothing here shares code with the paths it checks beyond the
//! [`SequenceModel`] being decoded.

use mbr_core::model::SequenceModel;
use mbr_core::TokenId;

/// Occurrences of `gram` in `seq`, by scanning every position.
fn occurrences(seq: &[TokenId], gram: &[TokenId]) -> u32 {
    if gram.len() > seq.len() {
        return 0;
    }
    (0..=seq.len() - gram.len())
        .filter(|&p| seq[p..p + gram.len()] == *gram)
        .count() as u32
}

/// Smoothed BLEU straight from the definition: clipped matches by scanning,
/// add-one smoothing with the denominator clamped at one, brevity term
/// `min(1 - |r|/|c|, 0)`.
pub fn brute_bleu(c: &[TokenId], r: &[TokenId]) -> f64 {
    assert!(!c.is_empty() && !r.is_empty());
    let mut sum_logs = 0.0;
    for n in 1..=4usize {
        let mut matches = 0u32;
        if c.len() >= n {
            for p in 0..=c.len() - n {
                let gram = &c[p..p + n];
                // count each distinct n-gram once: at its first position
                if (0..p).any(|q| c[q..q + n] == *gram) {
                    continue;
                }
                matches += occurrences(c, gram).min(occurrences(r, gram));
            }
        }
        let denom = if c.len() + 2 > n { (c.len() + 2 - n).max(1) } else { 1 };
        sum_logs += ((matches as f64 + 1.0) / denom as f64).ln();
    }
    let bp = (1.0 - r.len() as f64 / c.len() as f64).min(0.0);
    (bp + sum_logs / 4.0).exp()
}

/// Every complete output (ending in EOS) of at most `max_len` tokens with
/// its total log-probability, in depth-first order.
pub fn enumerate_outputs<M: SequenceModel>(
    model: &M,
    source: &[TokenId],
    max_len: usize,
) -> Vec<(Vec<TokenId>, f64)> {
    fn walk<M: SequenceModel>(
        model: &M,
        source: &[TokenId],
        max_len: usize,
        state: &M::State,
        prefix: &mut Vec<TokenId>,
        logprob: f64,
        out: &mut Vec<(Vec<TokenId>, f64)>,
    ) {
        let (dist, next) = model
            .step(source, state, prefix.last().copied())
            .expect("model step");
        for (tok, &lp) in dist.logprobs().iter().enumerate() {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let tok = tok as TokenId;
            prefix.push(tok);
            if tok == model.eos() {
                out.push((prefix.clone(), logprob + lp));
            } else if prefix.len() < max_len {
                walk(model, source, max_len, &next, prefix, logprob + lp, out);
            }
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    let init = model.initial_state(source).expect("initial state");
    walk(model, source, max_len, &init, &mut Vec::new(), 0.0, &mut out);
    out
}

#[derive(Clone, Debug)]
pub struct RefHyp<S> {
    pub tokens: Vec<TokenId>,
    pub total: f64,
    pub state: S,
}

pub type RefHyps<S> = Vec<RefHyp<S>>;

impl<S> RefHyp<S> {
    pub fn avg(&self) -> f64 {
        self.total / self.tokens.len() as f64
    }

    fn done(&self, eos: TokenId) -> bool {
        self.tokens.last() == Some(&eos)
    }

    /// Sequence compared by BLEU: drop a trailing EOS unless it is the only
    /// token.
    pub fn bleu_tokens(&self, eos: TokenId) -> &[TokenId] {
        if self.done(eos) && self.tokens.len() > 1 {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

fn children<M: SequenceModel>(
    model: &M,
    source: &[TokenId],
    h: &RefHyp<M::State>,
) -> Vec<RefHyp<M::State>> {
    let (dist, next) = model
        .step(source, &h.state, h.tokens.last().copied())
        .expect("model step");
    let mut out = Vec::new();
    for (tok, &lp) in dist.logprobs().iter().enumerate() {
        if lp.is_finite() {
            let mut tokens = h.tokens.clone();
            tokens.push(tok as TokenId);
            out.push(RefHyp {
                tokens,
                total: h.total + lp,
                state: next.clone(),
            });
        }
    }
    out
}

fn stable_sort_desc<T>(items: &mut [T], key: impl Fn(&T) -> f64) {
    items.sort_by(|a, b| key(b).total_cmp(&key(a)));
}

/// Beam search written out plainly: expand every token of every beam entry,
/// keep ranks `1..B`, record unfinished ranks `B+1..2B`.
pub fn reference_beam<M: SequenceModel>(
    model: &M,
    source: &[TokenId],
    b: usize,
    max_len: usize,
) -> (RefHyps<M::State>, RefHyps<M::State>) {
    let eos = model.eos();
    let mut beam = vec![RefHyp {
        tokens: vec![],
        total: 0.0,
        state: model.initial_state(source).unwrap(),
    }];
    let mut finished = Vec::new();
    let mut discarded = Vec::new();
    while !beam.is_empty() && finished.len() < b {
        let mut all = Vec::new();
        for h in &beam {
            all.extend(children(model, source, h));
        }
        stable_sort_desc(&mut all, |h| h.avg());
        let mut next = Vec::new();
        for (rank, h) in all.into_iter().enumerate() {
            if rank >= 2 * b {
                break;
            }
            let done = h.done(eos);
            if !done && h.tokens.len() >= max_len {
                continue;
            }
            if rank < b {
                if done {
                    finished.push(h);
                } else {
                    next.push(h);
                }
            } else if !done {
                discarded.push(h);
            }
        }
        beam = next;
    }
    stable_sort_desc(&mut finished, |h| h.avg());
    finished.truncate(b);
    (finished, discarded)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn risk_against<S>(y: &[TokenId], evidence: &[RefHyp<S>], eos: TokenId) -> f64 {
    let probs = softmax(&evidence.iter().map(|e| e.avg()).collect::<Vec<_>>());
    let mut r = 0.0;
    for (e, p) in evidence.iter().zip(&probs) {
        r += (1.0 - brute_bleu(y, e.bleu_tokens(eos))) * p;
    }
    r
}

/// Index of the minimum-risk member of `evidence`, ties to higher average
/// log-probability then lower index.
pub fn reference_mbr<S>(evidence: &[RefHyp<S>], eos: TokenId) -> usize {
    let risks: Vec<f64> = evidence
        .iter()
        .map(|y| risk_against(y.bleu_tokens(eos), evidence, eos))
        .collect();
    let mut best = 0;
    for i in 1..evidence.len() {
        let better = risks[i] < risks[best]
            || (risks[i] == risks[best] && evidence[i].avg() > evidence[best].avg());
        if better {
            best = i;
        }
    }
    best
}

/// Later-stage MBR decoding, one literal pass per extra step. Returns the
/// output tokens and the final evidence list.
#[allow(clippy::too_many_arguments)]
pub fn reference_later_mbr<M: SequenceModel>(
    model: &M,
    source: &[TokenId],
    b: usize,
    extra_steps: usize,
    alpha: f64,
    beta: f64,
    pool_factor: usize,
    max_len: usize,
) -> (Vec<TokenId>, Vec<Vec<TokenId>>) {
    let eos = model.eos();
    let (mut evidence, mut pool) = reference_beam(model, source, b, max_len);
    for t in 1..=extra_steps {
        if pool.is_empty() {
            continue;
        }
        // candidates: positions in the pool of the most probable entries
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.sort_by(|&i, &j| pool[j].avg().total_cmp(&pool[i].avg()));
        idx.truncate(pool_factor * b);
        let mut scored: Vec<(usize, f64)> = idx
            .iter()
            .map(|&i| {
                let h = &pool[i];
                let r = if evidence.is_empty() {
                    0.0
                } else {
                    risk_against(&h.tokens, &evidence, eos)
                };
                let l = ((extra_steps - t) * h.tokens.len()) as f64;
                (i, h.avg() - alpha * r - beta * l)
            })
            .collect();
        stable_sort_desc(&mut scored, |s| s.1);
        let chosen: Vec<usize> = scored.iter().take(b).map(|s| s.0).collect();
        let selected: Vec<RefHyp<M::State>> = chosen.iter().map(|&i| pool[i].clone()).collect();
        pool = pool
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .map(|(_, h)| h)
            .collect();
        for h in &selected {
            let mut kids = children(model, source, h);
            // top-B tokens by step log-probability, ties to lower id
            stable_sort_desc(&mut kids, |k| k.total);
            kids.truncate(b);
            for k in kids {
                if k.done(eos) {
                    if evidence.len() < b {
                        evidence.push(k);
                    } else {
                        // lowest avg, latest position among ties
                        let mut worst = 0;
                        for i in 1..evidence.len() {
                            if evidence[i].avg() <= evidence[worst].avg() {
                                worst = i;
                            }
                        }
                        if k.avg() > evidence[worst].avg() {
                            evidence.remove(worst);
                            evidence.push(k);
                        }
                    }
                } else if k.tokens.len() < max_len {
                    pool.push(k);
                }
            }
        }
    }
    let best = reference_mbr(&evidence, eos);
    (
        evidence[best].tokens.clone(),
        evidence.iter().map(|e| e.tokens.clone()).collect(),
    )
}

/// Central finite differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + eps;
            let up = f(&probe);
            probe[k] = x[k] - eps;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)`, or zero when both are below `floor`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < floor {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
