//! Learned approximation of the BLEU discrepancy.
//!
//! Both sequences are run through the same single-layer LSTM over one-hot
//! inputs, starting from a zero state. With final hidden states `h` and
//! `h'`, the pair is scored as
//!
//! ```text
//! delta(y, y') = h . h' + v . (h + h') + b
//! ```
//!
//! which is symmetric by construction. Token ids are local to one input:
//! the distinct tokens of a candidate space are renumbered densely from 0
//! ([`LocalVocab`]), so the one-hot width is a small fixed cap.
//!
//! Training regresses `0.1 * (1 - BLEU)` with MSE and Adam.
//! [`ApproxDiscrepancy`] divides predictions by the same factor.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ngram_bleu::smoothed_bleu;
use crate::risk::Discrepancy;
use crate::tensor_io::{self, Tensor};
use crate::{Error, Result, TokenId};

/// Factor applied to `1 - BLEU` to form training targets.
pub const TARGET_SCALE: f64 = 0.1;

/// Dense renumbering of the tokens of one candidate space, in first
/// occurrence order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalVocab {
    ids: HashMap<TokenId, u32>,
    tokens: Vec<TokenId>,
}

impl LocalVocab {
    pub fn from_sequences<S: AsRef<[TokenId]>>(seqs: &[S]) -> Self {
        let mut v = LocalVocab::default();
        for s in seqs {
            for &t in s.as_ref() {
                v.insert(t);
            }
        }
        v
    }

    pub fn insert(&mut self, token: TokenId) -> u32 {
        let next = self.tokens.len() as u32;
        *self.ids.entry(token).or_insert_with(|| {
            self.tokens.push(token);
            next
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, local: u32) -> TokenId {
        self.tokens[local as usize]
    }

    pub fn encode(&self, seq: &[TokenId]) -> Result<Vec<u32>> {
        seq.iter()
            .map(|t| {
                self.ids
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("token {t} not in local vocabulary")))
            })
            .collect()
    }
}

/// LSTM and output-layer parameters, stored flat.
///
/// Layout: `w` (4d x V, gate rows ordered input, forget, output, candidate),
/// `u` (4d x d), `b` (4d), `v` (d), `bias` (1).
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxParams {
    hidden: usize,
    vocab_cap: usize,
    pub data: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ApproxParams {
    pub fn zeros(hidden: usize, vocab_cap: usize) -> Self {
        assert!(hidden >= 1 && vocab_cap >= 1);
        let n = 4 * hidden * vocab_cap + 4 * hidden * hidden + 4 * hidden + hidden + 1;
        ApproxParams {
            hidden,
            vocab_cap,
            data: vec![0.0; n],
        }
    }

    /// Uniform in `[-0.08, 0.08]`.
    pub fn init(hidden: usize, vocab_cap: usize, seed: u64) -> Self {
        let mut p = Self::zeros(hidden, vocab_cap);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in &mut p.data {
            *x = rng.random_range(-0.08..=0.08);
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn vocab_cap(&self) -> usize {
        self.vocab_cap
    }

    fn offsets(&self) -> [usize; 5] {
        let d = self.hidden;
        let w = 0;
        let u = w + 4 * d * self.vocab_cap;
        let b = u + 4 * d * d;
        let v = b + 4 * d;
        let bias = v + d;
        [w, u, b, v, bias]
    }

    pub fn w(&self) -> &[f64] {
        let [w, u, ..] = self.offsets();
        &self.data[w..u]
    }

    pub fn u(&self) -> &[f64] {
        let [_, u, b, ..] = self.offsets();
        &self.data[u..b]
    }

    pub fn b(&self) -> &[f64] {
        let [_, _, b, v, _] = self.offsets();
        &self.data[b..v]
    }

    pub fn v(&self) -> &[f64] {
        let [.., v, bias] = self.offsets();
        &self.data[v..bias]
    }

    pub fn bias(&self) -> f64 {
        self.data[self.offsets()[4]]
    }

    pub fn v_mut(&mut self) -> &mut [f64] {
        let [.., v, bias] = self.offsets();
        &mut self.data[v..bias]
    }

    pub fn set_bias(&mut self, value: f64) {
        let i = self.offsets()[4];
        self.data[i] = value;
    }

    fn check(&self, seq: &[u32]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::invalid("approx: empty sequence"));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.vocab_cap) {
            return Err(Error::invalid(format!(
                "approx: local id {bad} exceeds vocabulary cap {}",
                self.vocab_cap
            )));
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let d = self.hidden;
        vec![
            Tensor::new("w", 4 * d, self.vocab_cap, self.w().to_vec()),
            Tensor::new("u", 4 * d, d, self.u().to_vec()),
            Tensor::new("b", 1, 4 * d, self.b().to_vec()),
            Tensor::new("v", 1, d, self.v().to_vec()),
            Tensor::new("bias", 1, 1, vec![self.bias()]),
        ]
    }

    pub fn from_tensors(mut tensors: Vec<Tensor>) -> Result<Self> {
        let (rows, cap) = tensors
            .iter()
            .find(|t| t.name == "w")
            .map(|t| (t.rows, t.cols))
            .ok_or_else(|| Error::invalid("checkpoint lacks tensor `w`"))?;
        if rows == 0 || rows % 4 != 0 || cap == 0 {
            return Err(Error::invalid("tensor `w` has an invalid shape"));
        }
        let d = rows / 4;
        let mut data = tensor_io::take(&mut tensors, "w", 4 * d, cap)?;
        data.extend(tensor_io::take(&mut tensors, "u", 4 * d, d)?);
        data.extend(tensor_io::take(&mut tensors, "b", 1, 4 * d)?);
        data.extend(tensor_io::take(&mut tensors, "v", 1, d)?);
        data.extend(tensor_io::take(&mut tensors, "bias", 1, 1)?);
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("checkpoint holds non-finite parameters"));
        }
        Ok(ApproxParams {
            hidden: d,
            vocab_cap: cap,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tensor_io::save(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(tensor_io::load(path)?)
    }
}

/// Activations of one forward pass, kept for backpropagation.
struct Trace {
    inputs: Vec<u32>,
    // per step: gates [i, f, o, g] (4d), cell c_t (d), hidden h_t (d)
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    hiddens: Vec<Vec<f64>>,
}

fn forward(params: &ApproxParams, seq: &[u32]) -> Trace {
    let d = params.hidden;
    let cap = params.vocab_cap;
    let (w, u, b) = (params.w(), params.u(), params.b());
    let mut h = vec![0.0; d];
    let mut c = vec![0.0; d];
    let mut trace = Trace {
        inputs: seq.to_vec(),
        gates: Vec::with_capacity(seq.len()),
        cells: Vec::with_capacity(seq.len()),
        hiddens: Vec::with_capacity(seq.len()),
    };
    for &x in seq {
        let mut a = vec![0.0; 4 * d];
        for (r, ar) in a.iter_mut().enumerate() {
            let urow = &u[r * d..(r + 1) * d];
            let mut s = b[r] + w[r * cap + x as usize];
            for (uk, hk) in urow.iter().zip(&h) {
                s += uk * hk;
            }
            *ar = s;
        }
        for k in 0..d {
            a[k] = sigmoid(a[k]);
            a[d + k] = sigmoid(a[d + k]);
            a[2 * d + k] = sigmoid(a[2 * d + k]);
            a[3 * d + k] = a[3 * d + k].tanh();
        }
        for k in 0..d {
            c[k] = a[d + k] * c[k] + a[k] * a[3 * d + k];
            h[k] = a[2 * d + k] * c[k].tanh();
        }
        trace.gates.push(a);
        trace.cells.push(c.clone());
        trace.hiddens.push(h.clone());
    }
    trace
}

/// Accumulates into `grad` the gradient of `dh . h_T` w.r.t. the LSTM
/// parameters.
fn backward(params: &ApproxParams, trace: &Trace, dh_final: &[f64], grad: &mut [f64]) {
    let d = params.hidden;
    let cap = params.vocab_cap;
    let [ow, ou, ob, ..] = params.offsets();
    let u = params.u();
    let mut dh = dh_final.to_vec();
    let mut dc = vec![0.0; d];
    let zero = vec![0.0; d];
    let mut da = vec![0.0; 4 * d];
    for t in (0..trace.inputs.len()).rev() {
        let g = &trace.gates[t];
        let c = &trace.cells[t];
        let c_prev = if t > 0 { &trace.cells[t - 1] } else { &zero };
        let h_prev = if t > 0 { &trace.hiddens[t - 1] } else { &zero };
        for k in 0..d {
            let (i, f, o, cand) = (g[k], g[d + k], g[2 * d + k], g[3 * d + k]);
            let tc = c[k].tanh();
            let d_o = dh[k] * tc;
            let dck = dc[k] + dh[k] * o * (1.0 - tc * tc);
            da[k] = dck * cand * i * (1.0 - i);
            da[d + k] = dck * c_prev[k] * f * (1.0 - f);
            da[2 * d + k] = d_o * o * (1.0 - o);
            da[3 * d + k] = dck * i * (1.0 - cand * cand);
            dc[k] = dck * f;
        }
        let x = trace.inputs[t] as usize;
        for (r, &dar) in da.iter().enumerate() {
            grad[ow + r * cap + x] += dar;
            grad[ob + r] += dar;
            let gu = &mut grad[ou + r * d..ou + (r + 1) * d];
            for (gk, hk) in gu.iter_mut().zip(h_prev.iter()) {
                *gk += dar * hk;
            }
        }
        for k in 0..d {
            let mut s = 0.0;
            for (r, &dar) in da.iter().enumerate() {
                s += u[r * d + k] * dar;
            }
            dh[k] = s;
        }
    }
}

/// Final hidden state of `seq` (local ids).
pub fn encode(params: &ApproxParams, seq: &[u32]) -> Result<Vec<f64>> {
    params.check(seq)?;
    Ok(forward(params, seq).hiddens.pop().expect("non-empty"))
}

fn pair_score(params: &ApproxParams, h: &[f64], h2: &[f64]) -> f64 {
    let mut s = params.bias();
    for ((a, b), v) in h.iter().zip(h2).zip(params.v()) {
        s += a * b + v * (a + b);
    }
    s
}

pub fn approx_discrepancy(params: &ApproxParams, y: &[u32], y2: &[u32]) -> Result<f64> {
    let h = encode(params, y)?;
    let h2 = encode(params, y2)?;
    Ok(pair_score(params, &h, &h2))
}

/// `rows.len() x cols.len()` matrix of approximate discrepancies; each
/// sequence is encoded once.
pub fn approx_cross_matrix(params: &ApproxParams, rows: &[&[u32]], cols: &[&[u32]]) -> Result<Vec<f64>> {
    let hr = rows.iter().map(|s| encode(params, s)).collect::<Result<Vec<_>>>()?;
    let hc = cols.iter().map(|s| encode(params, s)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for a in &hr {
        for b in &hc {
            out.push(pair_score(params, a, b));
        }
    }
    Ok(out)
}

/// `N x N` matrix over one candidate list.
pub fn approx_discrepancy_matrix(params: &ApproxParams, candidates: &[&[u32]]) -> Result<Vec<f64>> {
    let hs = candidates
        .iter()
        .map(|s| encode(params, s))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(hs.len() * hs.len());
    for a in &hs {
        for b in &hs {
            out.push(pair_score(params, a, b));
        }
    }
    Ok(out)
}

/// One training example: two local-id sequences and the scaled target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub y: Vec<u32>,
    pub y2: Vec<u32>,
    pub target: f64,
}

/// All ordered pairs `(i, j)` of a candidate space, re-numbered with the
/// space's local vocabulary, with targets `0.1 * (1 - BLEU(y_i, y_j))`.
pub fn pairs_from_candidates<S: AsRef<[TokenId]>>(candidates: &[S]) -> Result<Vec<TrainingPair>> {
    let vocab = LocalVocab::from_sequences(candidates);
    let local = candidates
        .iter()
        .map(|c| vocab.encode(c.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (i, a) in candidates.iter().enumerate() {
        for (j, b) in candidates.iter().enumerate() {
            out.push(TrainingPair {
                y: local[i].clone(),
                y2: local[j].clone(),
                target: TARGET_SCALE * (1.0 - smoothed_bleu(a.as_ref(), b.as_ref())?),
            });
        }
    }
    Ok(out)
}

/// Mean squared error over `pairs` and its gradient.
pub fn mse_and_grad(params: &ApproxParams, pairs: &[TrainingPair]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.data.len()];
    let [.., ov, obias] = params.offsets();
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    for p in pairs {
        params.check(&p.y)?;
        params.check(&p.y2)?;
        let t1 = forward(params, &p.y);
        let t2 = forward(params, &p.y2);
        let h1 = t1.hiddens.last().expect("non-empty");
        let h2 = t2.hiddens.last().expect("non-empty");
        let err = pair_score(params, h1, h2) - p.target;
        loss += err * err / n;
        let dpred = 2.0 * err / n;
        let v = params.v();
        let dh1: Vec<f64> = h2.iter().zip(v).map(|(b, v)| dpred * (b + v)).collect();
        let dh2: Vec<f64> = h1.iter().zip(v).map(|(a, v)| dpred * (a + v)).collect();
        for k in 0..params.hidden {
            grad[ov + k] += dpred * (h1[k] + h2[k]);
        }
        grad[obias] += dpred;
        backward(params, &t1, &dh1, &mut grad);
        backward(params, &t2, &dh2, &mut grad);
    }
    Ok((loss, grad))
}

pub fn mse(params: &ApproxParams, pairs: &[TrainingPair]) -> Result<f64> {
    let mut loss = 0.0;
    for p in pairs {
        let e = approx_discrepancy(params, &p.y, &p.y2)? - p.target;
        loss += e * e;
    }
    Ok(loss / pairs.len() as f64)
}

/// Which parameters the optimizer may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Trainable {
    #[default]
    All,
    BiasOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub hidden: usize,
    pub vocab_cap: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub trainable: Trainable,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 32,
            vocab_cap: 64,
            epochs: 50,
            learning_rate: 1e-4,
            batch_size: 64,
            seed: 0,
            trainable: Trainable::All,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ApproxParams,
    /// MSE over the whole training set before training and after each epoch.
    pub loss_curve: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, range: std::ops::Range<usize>) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for k in range {
            let g = grad[k];
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * g;
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * g * g;
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains from `init` (or a fresh uniform initialization) with mini-batch
/// Adam over a seeded shuffle of `pairs`.
pub fn train_approximator(
    pairs: &[TrainingPair],
    config: &TrainConfig,
    init: Option<ApproxParams>,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::invalid("train_approximator: no training pairs"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let mut params =
        init.unwrap_or_else(|| ApproxParams::init(config.hidden, config.vocab_cap, config.seed));
    let range = match config.trainable {
        Trainable::All => 0..params.data.len(),
        Trainable::BiasOnly => {
            let i = params.offsets()[4];
            i..i + 1
        }
    };
    let mut adam = Adam::new(params.data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut loss_curve = vec![mse(&params, pairs)?];
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| pairs[i].clone()));
            let (loss, grad) = mse_and_grad(&params, &batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite loss or gradient in epoch {epoch} (batch loss {loss})"
                )));
            }
            adam.step(&mut params.data, &grad, config.learning_rate, range.clone());
        }
        let loss = mse(&params, pairs)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss after epoch {epoch}")));
        }
        loss_curve.push(loss);
    }
    Ok(TrainOutcome { params, loss_curve })
}

/// Discrepancy backed by a trained approximator, for one candidate space.
///
/// Sequences are mapped through `vocab`; predictions are divided by
/// [`TARGET_SCALE`].
#[derive(Debug, Clone)]
pub struct ApproxDiscrepancy<'a> {
    params: &'a ApproxParams,
    vocab: LocalVocab,
}

impl<'a> ApproxDiscrepancy<'a> {
    pub fn new(params: &'a ApproxParams, vocab: LocalVocab) -> Result<Self> {
        if vocab.len() > params.vocab_cap() {
            return Err(Error::invalid(format!(
                "candidate space has {} distinct tokens, approximator cap is {}",
                vocab.len(),
                params.vocab_cap()
            )));
        }
        Ok(ApproxDiscrepancy { params, vocab })
    }
}

impl Discrepancy for ApproxDiscrepancy<'_> {
    fn pair(&self, y: &[TokenId], other: &[TokenId]) -> Result<f64> {
        let a = self.vocab.encode(y)?;
        let b = self.vocab.encode(other)?;
        Ok(approx_discrepancy(self.params, &a, &b)? / TARGET_SCALE)
    }

    fn matrix(&self, rows: &[&[TokenId]], cols: &[&[TokenId]]) -> Result<Vec<f64>> {
        let r = rows.iter().map(|s| self.vocab.encode(s)).collect::<Result<Vec<_>>>()?;
        let c = cols.iter().map(|s| self.vocab.encode(s)).collect::<Result<Vec<_>>>()?;
        let r: Vec<&[u32]> = r.iter().map(|s| s.as_slice()).collect();
        let c: Vec<&[u32]> = c.iter().map(|s| s.as_slice()).collect();
        let mut m = approx_cross_matrix(self.params, &r, &c)?;
        m.iter_mut().for_each(|x| *x /= TARGET_SCALE);
        Ok(m)
    }
}
