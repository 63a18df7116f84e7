//! Beam search and later-stage MBR decoding.
//!
//! Beam search keeps the top `B` expansions per step by average
//! log-probability and records the next `B` (ranks `B+1..2B`) as discarded
//! hypotheses. Later-stage decoding restarts from that discarded pool `H`:
//! for `T` extra steps it scores the most probable `pool_factor * B` members
//! of `H` with
//!
//! ```text
//! S(y) = avg_logprob(y) - alpha * R(y) - beta * (T - t) * |y|
//! ```
//!
//! where `R` is the Bayes risk against the current evidence space `E`,
//! expands the best `B` of them by their top `B` next tokens each, and
//! routes finished results into `E` (capped at `B`, lowest average
//! log-probability evicted) and the rest back into `H`. The output is the
//! minimum-risk member of the final `E`.

use std::io::Write;

use serde::Serialize;

use crate::model::SequenceModel;
use crate::risk::{batch_risks, mbr_rerank, Discrepancy, Evidence, EvidenceSpace, RiskReport};
use crate::{Error, Result, TokenId, TokenSeq};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis<S> {
    pub id: u64,
    /// Emitted tokens; a finished hypothesis ends with EOS.
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
    pub avg_logprob: f64,
    /// Model state to be fed the last token of `tokens`.
    pub state: S,
    pub finished: bool,
}

impl<S: Clone> Hypothesis<S> {
    fn root(state: S) -> Self {
        Hypothesis {
            id: 0,
            tokens: Vec::new(),
            logprob: 0.0,
            avg_logprob: 0.0,
            state,
            finished: false,
        }
    }

    fn child(&self, next_state: &S, token: TokenId, logprob: f64, eos: TokenId) -> Self {
        let mut tokens = Vec::with_capacity(self.tokens.len() + 1);
        tokens.extend_from_slice(&self.tokens);
        tokens.push(token);
        let total = self.logprob + logprob;
        Hypothesis {
            id: 0,
            avg_logprob: total / tokens.len() as f64,
            tokens,
            logprob: total,
            state: next_state.clone(),
            finished: token == eos,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens without the trailing EOS. A hypothesis consisting of EOS alone
    /// keeps it, so the sequence is never empty.
    pub fn content(&self) -> &[TokenId] {
        if self.finished && self.tokens.len() > 1 {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    pub fn to_evidence(&self) -> Evidence {
        Evidence::new(
            TokenSeq::new(self.content().to_vec()).expect("hypothesis has tokens"),
            self.avg_logprob,
        )
    }
}

fn expand<M: SequenceModel>(
    model: &M,
    source: &[TokenId],
    hyp: &Hypothesis<M::State>,
    keep: usize,
) -> Result<Vec<Hypothesis<M::State>>> {
    let (dist, next) = model.step(source, &hyp.state, hyp.tokens.last().copied())?;
    Ok(dist
        .ranked()
        .into_iter()
        .take(keep)
        .map(|(tok, lp)| hyp.child(&next, tok, lp, model.eos()))
        .collect())
}

fn sort_by_avg_desc<S>(hyps: &mut [Hypothesis<S>]) {
    hyps.sort_by(|a, b| b.avg_logprob.total_cmp(&a.avg_logprob));
}

#[derive(Debug, Clone)]
pub struct BeamOutput<S> {
    /// At most `B` finished hypotheses, best average log-probability first.
    pub finished: Vec<Hypothesis<S>>,
    /// Unfinished expansions ranked `B+1..2B` at each step, in step order.
    pub discarded: Vec<Hypothesis<S>>,
    /// Largest hypothesis id handed out.
    pub last_id: u64,
}

pub fn beam_search<M: SequenceModel>(
    model: &M,
    source: &[TokenId],
    beam_size: usize,
    max_length: usize,
) -> Result<BeamOutput<M::State>> {
    if beam_size == 0 || max_length == 0 {
        return Err(Error::invalid("beam size and max length must be >= 1"));
    }
    let mut next_id = 0u64;
    let mut beam = vec![Hypothesis::root(model.initial_state(source)?)];
    let mut finished = Vec::new();
    let mut discarded = Vec::new();

    while !beam.is_empty() && finished.len() < beam_size {
        let mut expansions = Vec::new();
        for hyp in &beam {
            expansions.extend(expand(model, source, hyp, 2 * beam_size)?);
        }
        sort_by_avg_desc(&mut expansions);
        expansions.truncate(2 * beam_size);
        let rest = expansions.split_off(beam_size.min(expansions.len()));

        beam.clear();
        for mut h in expansions {
            if !h.finished && h.len() >= max_length {
                continue;
            }
            next_id += 1;
            h.id = next_id;
            if h.finished {
                finished.push(h);
            } else {
                beam.push(h);
            }
        }
        for mut h in rest {
            if h.finished || h.len() >= max_length {
                continue;
            }
            next_id += 1;
            h.id = next_id;
            discarded.push(h);
        }
    }

    sort_by_avg_desc(&mut finished);
    finished.truncate(beam_size);
    Ok(BeamOutput {
        finished,
        discarded,
        last_id: next_id,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Extra steps `T`; `None` uses the number of source tokens.
    pub extra_steps: Option<usize>,
    pub alpha: f64,
    pub beta: f64,
    /// Only the `pool_factor * B` most probable members of `H` are scored.
    pub pool_factor: usize,
    pub max_length: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            extra_steps: None,
            alpha: 1.0,
            beta: 0.1,
            pool_factor: 3,
            max_length: 100,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_length == 0 || self.pool_factor == 0 {
            return Err(Error::invalid(
                "beam size, pool factor and max length must be >= 1",
            ));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("alpha and beta must be >= 0"));
        }
        Ok(())
    }

    pub fn extra_steps_for(&self, source: &[TokenId]) -> usize {
        self.extra_steps.unwrap_or(source.len())
    }
}

/// `avg_logprob - alpha * risk - beta * (T - t) * len`.
pub fn score_components(
    avg_logprob: f64,
    risk: f64,
    len: usize,
    t: usize,
    total_steps: usize,
    alpha: f64,
    beta: f64,
) -> f64 {
    let length_penalty = (total_steps - t) as f64 * len as f64;
    avg_logprob - alpha * risk - beta * length_penalty
}

pub fn score_hypothesis<S: Clone>(
    y: &Hypothesis<S>,
    space: &EvidenceSpace,
    delta: &dyn Discrepancy,
    t: usize,
    total_steps: usize,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    if t == 0 || t > total_steps {
        return Err(Error::invalid("score_hypothesis: need 1 <= t <= T"));
    }
    let risk = crate::risk::bayes_risk(y.content(), space, delta)?;
    Ok(score_components(
        y.avg_logprob,
        risk,
        y.len(),
        t,
        total_steps,
        alpha,
        beta,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceAction {
    /// Beam-search result placed in `E`.
    InitEvidence,
    /// Beam-search discard placed in `H`.
    InitPool,
    /// Scored member of the step's pool.
    Score,
    /// Pool member popped for expansion.
    Select,
    /// New finished hypothesis accepted into `E`.
    Evidence,
    /// Hypothesis removed from (or refused by) a full `E`.
    Evict,
    /// New unfinished hypothesis pushed to `H`.
    Requeue,
    /// Unfinished hypothesis at the length limit.
    Drop,
    /// `H` was empty; nothing to do this step.
    Idle,
    /// Final MBR choice.
    Output,
}

/// One line of the decoding trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub action: TraceAction,
    pub hyp: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_logprob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length_penalty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// `|H|` for `Score`/`Idle`, `|E|` for evidence records.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
}

impl TraceRecord {
    fn new(step: usize, action: TraceAction, hyp: u64) -> Self {
        TraceRecord {
            step,
            action,
            hyp,
            avg_logprob: None,
            risk: None,
            length_penalty: None,
            score: None,
            size: None,
        }
    }
}

/// Writes a trace as JSON lines.
pub fn write_trace<W: Write>(out: &mut W, trace: &[TraceRecord]) -> std::io::Result<()> {
    for rec in trace {
        serde_json::to_writer(&mut *out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Pool `H` and evidence list `E` of a later-stage decode.
#[derive(Debug, Clone)]
pub struct DecodeState<S> {
    pub pool: Vec<Hypothesis<S>>,
    pub evidence: Vec<Hypothesis<S>>,
    pub capacity: usize,
    pub trace: Vec<TraceRecord>,
    next_id: u64,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput<S> {
    pub output: Hypothesis<S>,
    pub evidence: Vec<Hypothesis<S>>,
    pub report: RiskReport,
    pub trace: Vec<TraceRecord>,
}

impl<S: Clone> DecodeState<S> {
    /// Seeds `H` with the beam-search discards and `E` with its finished
    /// hypotheses.
    pub fn from_beam(beam: BeamOutput<S>, capacity: usize) -> Self {
        let mut trace = Vec::new();
        for h in &beam.finished {
            let mut r = TraceRecord::new(0, TraceAction::InitEvidence, h.id);
            r.avg_logprob = Some(h.avg_logprob);
            trace.push(r);
        }
        for h in &beam.discarded {
            let mut r = TraceRecord::new(0, TraceAction::InitPool, h.id);
            r.avg_logprob = Some(h.avg_logprob);
            trace.push(r);
        }
        let mut evidence = beam.finished;
        evidence.truncate(capacity);
        DecodeState {
            pool: beam.discarded,
            evidence,
            capacity,
            trace,
            next_id: beam.last_id,
        }
    }

    pub fn evidence_space(&self) -> Result<Option<EvidenceSpace>> {
        if self.evidence.is_empty() {
            return Ok(None);
        }
        EvidenceSpace::new(self.evidence.iter().map(|h| h.to_evidence()).collect()).map(Some)
    }

    /// Inserts a finished hypothesis, evicting the lowest average
    /// log-probability member when `E` is full.
    fn push_evidence(&mut self, step: usize, hyp: Hypothesis<S>) {
        if self.evidence.len() < self.capacity {
            let mut r = TraceRecord::new(step, TraceAction::Evidence, hyp.id);
            r.avg_logprob = Some(hyp.avg_logprob);
            r.size = Some(self.evidence.len() + 1);
            self.trace.push(r);
            self.evidence.push(hyp);
            return;
        }
        let (worst, _) = self
            .evidence
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.avg_logprob.total_cmp(&b.1.avg_logprob).then(b.0.cmp(&a.0)))
            .expect("capacity >= 1");
        if hyp.avg_logprob > self.evidence[worst].avg_logprob {
            let old = self.evidence.remove(worst);
            let mut r = TraceRecord::new(step, TraceAction::Evict, old.id);
            r.avg_logprob = Some(old.avg_logprob);
            self.trace.push(r);
            let mut r = TraceRecord::new(step, TraceAction::Evidence, hyp.id);
            r.avg_logprob = Some(hyp.avg_logprob);
            r.size = Some(self.evidence.len() + 1);
            self.trace.push(r);
            self.evidence.push(hyp);
        } else {
            let mut r = TraceRecord::new(step, TraceAction::Evict, hyp.id);
            r.avg_logprob = Some(hyp.avg_logprob);
            self.trace.push(r);
        }
    }

    /// Runs the extra steps and the final reranking.
    pub fn run<M>(
        mut self,
        model: &M,
        source: &[TokenId],
        config: &DecodeConfig,
        delta: &dyn Discrepancy,
    ) -> Result<DecodeOutput<S>>
    where
        M: SequenceModel<State = S>,
    {
        config.validate()?;
        let b = config.beam_size;
        let total = config.extra_steps_for(source);

        for t in 1..=total {
            if self.pool.is_empty() {
                let mut r = TraceRecord::new(t, TraceAction::Idle, 0);
                r.size = Some(0);
                self.trace.push(r);
                continue;
            }

            // most probable members of H, stable in pool order
            let mut by_prob: Vec<usize> = (0..self.pool.len()).collect();
            by_prob.sort_by(|&i, &j| {
                self.pool[j].avg_logprob.total_cmp(&self.pool[i].avg_logprob)
            });
            by_prob.truncate(config.pool_factor * b);

            let risks = match self.evidence_space()? {
                Some(space) => {
                    let seqs: Vec<&[TokenId]> =
                        by_prob.iter().map(|&i| self.pool[i].content()).collect();
                    batch_risks(&seqs, &space, delta)?
                }
                None => vec![0.0; by_prob.len()],
            };
            let scored: Vec<(usize, f64, f64)> = by_prob
                .iter()
                .zip(&risks)
                .map(|(&i, &risk)| {
                    let h = &self.pool[i];
                    let s = score_components(
                        h.avg_logprob,
                        risk,
                        h.len(),
                        t,
                        total,
                        config.alpha,
                        config.beta,
                    );
                    (i, risk, s)
                })
                .collect();
            for &(i, risk, s) in &scored {
                let h = &self.pool[i];
                let mut r = TraceRecord::new(t, TraceAction::Score, h.id);
                r.avg_logprob = Some(h.avg_logprob);
                r.risk = Some(risk);
                r.length_penalty = Some(((total - t) * h.len()) as f64);
                r.score = Some(s);
                r.size = Some(self.pool.len());
                self.trace.push(r);
            }

            let mut order: Vec<usize> = (0..scored.len()).collect();
            order.sort_by(|&a, &b| scored[b].2.total_cmp(&scored[a].2));
            let picked: Vec<usize> = order.iter().take(b).map(|&k| scored[k].0).collect();
            let mut selected = Vec::with_capacity(picked.len());
            for &k in order.iter().take(b) {
                let h = &self.pool[scored[k].0];
                let mut r = TraceRecord::new(t, TraceAction::Select, h.id);
                r.score = Some(scored[k].2);
                self.trace.push(r);
                selected.push(h.clone());
            }
            let mut keep = vec![true; self.pool.len()];
            for i in picked {
                keep[i] = false;
            }
            let mut it = keep.iter();
            self.pool.retain(|_| *it.next().unwrap());

            for hyp in &selected {
                for mut child in expand(model, source, hyp, b)? {
                    self.next_id += 1;
                    child.id = self.next_id;
                    if child.finished {
                        self.push_evidence(t, child);
                    } else if child.len() >= config.max_length {
                        self.trace.push(TraceRecord::new(t, TraceAction::Drop, child.id));
                    } else {
                        let mut r = TraceRecord::new(t, TraceAction::Requeue, child.id);
                        r.avg_logprob = Some(child.avg_logprob);
                        self.trace.push(r);
                        self.pool.push(child);
                    }
                }
            }
        }

        let space = self
            .evidence_space()?
            .ok_or_else(|| Error::invalid("decoding produced no finished hypothesis"))?;
        let report = mbr_rerank(space.evidences(), &space, delta)?;
        let output = self.evidence[report.best()].clone();
        let mut r = TraceRecord::new(total + 1, TraceAction::Output, output.id);
        r.avg_logprob = Some(output.avg_logprob);
        r.risk = Some(report.risks[report.best()]);
        r.size = Some(self.evidence.len());
        self.trace.push(r);
        Ok(DecodeOutput {
            output,
            evidence: self.evidence,
            report,
            trace: self.trace,
        })
    }
}

/// Beam search followed by `T` later-stage MBR steps.
pub fn later_stage_mbr_decode<M: SequenceModel>(
    model: &M,
    source: &[TokenId],
    config: &DecodeConfig,
    delta: &dyn Discrepancy,
) -> Result<DecodeOutput<M::State>> {
    config.validate()?;
    let beam = beam_search(model, source, config.beam_size, config.max_length)?;
    DecodeState::from_beam(beam, config.beam_size).run(model, source, config, delta)
}

/// MBR reranking of the beam-search finished set against itself.
pub fn beam_mbr_rerank<M: SequenceModel>(
    model: &M,
    source: &[TokenId],
    config: &DecodeConfig,
    delta: &dyn Discrepancy,
) -> Result<DecodeOutput<M::State>> {
    let cfg = DecodeConfig {
        extra_steps: Some(0),
        ..*config
    };
    later_stage_mbr_decode(model, source, &cfg, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EstimateConfig, ParallelCorpus, ToyModel, EOS};
    use crate::risk::ExactBleu;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> ToyModel {
        let c = ParallelCorpus::parse("a b\tx y\nb\ty\na c\tx z z\nc\tz\n").unwrap();
        ToyModel::estimate(&c, EstimateConfig::default()).unwrap()
    }

    #[test]
    fn forced_eos_finishes_immediately() {
        let mut m = model();
        m.eos_schedule = vec![1.0];
        let out = beam_search(&m, &[1], 3, 10).unwrap();
        assert_eq!(out.finished.len(), 1);
        assert_eq!(out.finished[0].tokens, vec![EOS]);
        assert_eq!(out.finished[0].avg_logprob, 0.0);
        assert_eq!(out.finished[0].content(), &[EOS]);
        assert!(out.discarded.is_empty());
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let m = model();
        let src = [1, 2];
        let out = beam_search(&m, &src, 1, 20).unwrap();
        let mut state = m.initial_state(&src).unwrap();
        let mut last = None;
        let mut tokens = Vec::new();
        let mut runner_up = Vec::new();
        loop {
            let (d, s) = m.step(&src, &state, last).unwrap();
            let ranked = d.ranked();
            let (best, _) = ranked[0];
            if ranked.len() > 1 && ranked[1].0 != EOS {
                let mut alt = tokens.clone();
                alt.push(ranked[1].0);
                runner_up.push(alt);
            }
            tokens.push(best);
            if best == EOS {
                break;
            }
            state = s;
            last = Some(best);
        }
        assert_eq!(out.finished[0].tokens, tokens);
        let discarded: Vec<Vec<u32>> = out.discarded.iter().map(|h| h.tokens.clone()).collect();
        assert_eq!(discarded, runner_up);
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_components(-1.5, 0.3, 4, 1, 3, 0.0, 0.0), -1.5);
        assert_eq!(score_components(-1.5, 0.3, 4, 3, 3, 2.0, 7.0), -1.5 - 0.6);
        let s = score_components(-2.0, 0.5, 4, 1, 3, 1.0, 0.1);
        assert!((s - -3.3).abs() < 1e-12);
    }

    #[test]
    fn score_hypothesis_validates_step() {
        let m = model();
        let beam = beam_search(&m, &[1], 2, 10).unwrap();
        let space = EvidenceSpace::new(vec![beam.finished[0].to_evidence()]).unwrap();
        let h = &beam.finished[0];
        assert!(score_hypothesis(h, &space, &ExactBleu, 0, 2, 1.0, 0.1).is_err());
        assert!(score_hypothesis(h, &space, &ExactBleu, 3, 2, 1.0, 0.1).is_err());
        // the hypothesis is its own only evidence
        let s = score_hypothesis(h, &space, &ExactBleu, 2, 2, 1.0, 0.1).unwrap();
        assert_eq!(s, h.avg_logprob);
    }

    #[test]
    fn zero_extra_steps_is_beam_rerank() {
        let m = model();
        let cfg = DecodeConfig {
            beam_size: 3,
            extra_steps: Some(0),
            max_length: 20,
            ..Default::default()
        };
        let src = [1, 3];
        let out = later_stage_mbr_decode(&m, &src, &cfg, &ExactBleu).unwrap();
        let beam = beam_search(&m, &src, 3, 20).unwrap();
        let evs: Vec<Evidence> = beam.finished.iter().map(|h| h.to_evidence()).collect();
        let space = EvidenceSpace::new(evs.clone()).unwrap();
        let report = mbr_rerank(&evs, &space, &ExactBleu).unwrap();
        assert_eq!(out.output.tokens, beam.finished[report.best()].tokens);
        assert_eq!(out.evidence.len(), beam.finished.len());
    }

    #[test]
    fn evidence_stays_within_capacity_and_decode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = ToyModel::random(&mut rng, 5, 4, 25, EstimateConfig::default()).unwrap();
            let src = [1, 2, 3];
            for b in [1, 2, 4] {
                let cfg = DecodeConfig {
                    beam_size: b,
                    max_length: 12,
                    ..Default::default()
                };
                let out = later_stage_mbr_decode(&m, &src, &cfg, &ExactBleu).unwrap();
                assert!(out.evidence.len() <= b);
                assert!(out.evidence.iter().all(|h| h.finished));
                let again = later_stage_mbr_decode(&m, &src, &cfg, &ExactBleu).unwrap();
                assert_eq!(out.trace, again.trace);
                assert_eq!(out.output, again.output);
                let min = out
                    .report
                    .risks
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(out.report.risks[out.report.best()], min);
                for r in &out.trace {
                    if r.action == TraceAction::Evidence {
                        assert!(r.size.unwrap() <= b);
                    }
                }
            }
        }
    }

    #[test]
    fn trace_serializes_as_json_lines() {
        let m = model();
        let cfg = DecodeConfig {
            beam_size: 2,
            max_length: 10,
            ..Default::default()
        };
        let out = later_stage_mbr_decode(&m, &[1, 2], &cfg, &ExactBleu).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &out.trace).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), out.trace.len());
        let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert_eq!(last["action"], "output");
    }
}
