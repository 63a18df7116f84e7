//! Gaussian policy over the score weights `(alpha, beta)`.
//!
//! A shared tanh hidden layer feeds two linear heads: the mean `mu` and the
//! pre-softplus standard deviation, so `sigma = softplus(.) > 0`. A separate
//! two-layer network estimates the reward baseline. Updates follow
//! REINFORCE with a baseline:
//!
//! ```text
//! theta += lr * mean[(R - b(s)) * grad log pi(a | s)]
//! log pi(a | s) = sum_i -(a_i - mu_i)^2 / (2 sigma_i^2) - log sigma_i - log(2 pi) / 2
//! ```
//!
//! and the baseline descends the squared error `(b(s) - R)^2`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::SequenceModel;
use crate::risk::Discrepancy;
use crate::search::{beam_search, DecodeConfig, DecodeOutput, DecodeState};
use crate::tensor_io::{self, Tensor};
use crate::{Error, Result, TokenId};

pub const NUM_ACTIONS: usize = 2;
pub const HIDDEN_UNITS: usize = 100;
/// Length of [`InputFeatures`] produced by [`decode_features`].
pub const FEATURE_DIM: usize = 5;

/// Fixed-length description of one decoding instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InputFeatures(pub Vec<f64>);

/// Features available once beam search is done:
/// `[|x| / max_len, mean and std of the evidence avg log-probs,
///   |H| / (B |x|), B / beam_cap]`.
pub fn decode_features(
    source_len: usize,
    max_length: usize,
    evidence_avg_logprobs: &[f64],
    pool_len: usize,
    beam_size: usize,
    beam_cap: usize,
) -> InputFeatures {
    let n = evidence_avg_logprobs.len().max(1) as f64;
    let mean = evidence_avg_logprobs.iter().sum::<f64>() / n;
    let var = evidence_avg_logprobs
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    InputFeatures(vec![
        source_len as f64 / max_length as f64,
        mean,
        var.sqrt(),
        pool_len as f64 / (beam_size * source_len.max(1)) as f64,
        beam_size as f64 / beam_cap as f64,
    ])
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Parameter blocks, stored flat in this order.
///
/// Policy: `w1` (h x n), `b1` (h), `w_mu` (A x h), `b_mu` (A),
/// `w_sigma` (A x h), `b_sigma` (A).
/// Baseline: `bw1` (h x n), `bb1` (h), `bw2` (h), `bb2` (1).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    input_dim: usize,
    hidden: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w_mu: usize,
    b_mu: usize,
    w_sigma: usize,
    b_sigma: usize,
    bw1: usize,
    bb1: usize,
    bw2: usize,
    bb2: usize,
    end: usize,
}

impl PolicyParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        let mut p = PolicyParams {
            input_dim,
            hidden,
            data: Vec::new(),
        };
        p.data = vec![0.0; p.layout().end];
        p
    }

    /// Hidden weights uniform in `±1/sqrt(n)`, head weights in `±0.01`,
    /// biases zero.
    pub fn init(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(input_dim, hidden);
        let l = p.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input_dim as f64).sqrt();
        for r in [l.w1..l.b1, l.bw1..l.bb1] {
            for x in &mut p.data[r] {
                *x = rng.random_range(-scale..=scale);
            }
        }
        for r in [l.w_mu..l.b_mu, l.w_sigma..l.b_sigma, l.bw2..l.bb2] {
            for x in &mut p.data[r] {
                *x = rng.random_range(-0.01..=0.01);
            }
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn layout(&self) -> Layout {
        let (n, h, a) = (self.input_dim, self.hidden, NUM_ACTIONS);
        let w1 = 0;
        let b1 = w1 + h * n;
        let w_mu = b1 + h;
        let b_mu = w_mu + a * h;
        let w_sigma = b_mu + a;
        let b_sigma = w_sigma + a * h;
        let bw1 = b_sigma + a;
        let bb1 = bw1 + h * n;
        let bw2 = bb1 + h;
        let bb2 = bw2 + h;
        Layout {
            w1,
            b1,
            w_mu,
            b_mu,
            w_sigma,
            b_sigma,
            bw1,
            bb1,
            bw2,
            bb2,
            end: bb2 + 1,
        }
    }

    /// Range of `data` holding the policy (not baseline) parameters.
    pub fn policy_range(&self) -> std::ops::Range<usize> {
        0..self.layout().bw1
    }

    /// Mutable view of the `b_sigma` head bias.
    pub fn sigma_bias_mut(&mut self) -> &mut [f64] {
        let l = self.layout();
        &mut self.data[l.b_sigma..l.bw1]
    }

    /// Mutable view of the `b_mu` head bias.
    pub fn mu_bias_mut(&mut self) -> &mut [f64] {
        let l = self.layout();
        &mut self.data[l.b_mu..l.w_sigma]
    }

    fn check(&self, s: &InputFeatures) -> Result<()> {
        if s.0.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "policy expects {} features, got {}",
                self.input_dim,
                s.0.len()
            )));
        }
        if s.0.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite policy input"));
        }
        Ok(())
    }

    fn hidden_layer(&self, w: usize, b: usize, s: &[f64]) -> Vec<f64> {
        let n = self.input_dim;
        (0..self.hidden)
            .map(|j| {
                let row = &self.data[w + j * n..w + (j + 1) * n];
                let pre = self.data[b + j] + row.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                pre.tanh()
            })
            .collect()
    }

    fn head(&self, w: usize, b: usize, hidden: &[f64]) -> [f64; NUM_ACTIONS] {
        let h = self.hidden;
        let mut out = [0.0; NUM_ACTIONS];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[w + i * h..w + (i + 1) * h];
            *o = self.data[b + i] + row.iter().zip(hidden).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let l = self.layout();
        let (n, h, a) = (self.input_dim, self.hidden, NUM_ACTIONS);
        let t = |name: &str, r: usize, c: usize, s: usize| {
            Tensor::new(name, r, c, self.data[s..s + r * c].to_vec())
        };
        vec![
            t("w1", h, n, l.w1),
            t("b1", 1, h, l.b1),
            t("w_mu", a, h, l.w_mu),
            t("b_mu", 1, a, l.b_mu),
            t("w_sigma", a, h, l.w_sigma),
            t("b_sigma", 1, a, l.b_sigma),
            t("baseline_w1", h, n, l.bw1),
            t("baseline_b1", 1, h, l.bb1),
            t("baseline_w2", 1, h, l.bw2),
            t("baseline_b2", 1, 1, l.bb2),
        ]
    }

    pub fn from_tensors(mut tensors: Vec<Tensor>) -> Result<Self> {
        let (h, n) = tensors
            .iter()
            .find(|t| t.name == "w1")
            .map(|t| (t.rows, t.cols))
            .ok_or_else(|| Error::invalid("checkpoint lacks tensor `w1`"))?;
        let a = NUM_ACTIONS;
        let mut data = Vec::new();
        for (name, r, c) in [
            ("w1", h, n),
            ("b1", 1, h),
            ("w_mu", a, h),
            ("b_mu", 1, a),
            ("w_sigma", a, h),
            ("b_sigma", 1, a),
            ("baseline_w1", h, n),
            ("baseline_b1", 1, h),
            ("baseline_w2", 1, h),
            ("baseline_b2", 1, 1),
        ] {
            data.extend(tensor_io::take(&mut tensors, name, r, c)?);
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("checkpoint holds non-finite parameters"));
        }
        Ok(PolicyParams {
            input_dim: n,
            hidden: h,
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

/// Mean and standard deviation of the action distribution.
pub fn policy_forward(
    params: &PolicyParams,
    s: &InputFeatures,
) -> Result<([f64; NUM_ACTIONS], [f64; NUM_ACTIONS])> {
    params.check(s)?;
    let l = params.layout();
    let hidden = params.hidden_layer(l.w1, l.b1, &s.0);
    let mu = params.head(l.w_mu, l.b_mu, &hidden);
    let pre = params.head(l.w_sigma, l.b_sigma, &hidden);
    Ok((mu, pre.map(softplus)))
}

/// Reward baseline `b(s)`.
pub fn baseline(params: &PolicyParams, s: &InputFeatures) -> Result<f64> {
    params.check(s)?;
    let l = params.layout();
    let hidden = params.hidden_layer(l.bw1, l.bb1, &s.0);
    Ok(params.data[l.bb2]
        + params.data[l.bw2..l.bb2]
            .iter()
            .zip(&hidden)
            .map(|(a, b)| a * b)
            .sum::<f64>())
}

/// Log-density of `a` under independent Gaussians.
pub fn log_density(mu: &[f64], sigma: &[f64], a: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() || mu.len() != a.len() {
        return Err(Error::invalid("log_density: length mismatch"));
    }
    if sigma.iter().any(|&s| s.is_nan() || s <= 0.0) {
        return Err(Error::invalid("log_density: sigma must be positive"));
    }
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    Ok(mu
        .iter()
        .zip(sigma)
        .zip(a)
        .map(|((m, s), x)| -(x - m) * (x - m) / (2.0 * s * s) - s.ln() - half_log_2pi)
        .sum())
}

/// Gradient of `log pi(a | s)` w.r.t. all parameters (baseline entries are
/// zero).
pub fn grad_log_pi(params: &PolicyParams, s: &InputFeatures, a: &[f64]) -> Result<Vec<f64>> {
    params.check(s)?;
    if a.len() != NUM_ACTIONS {
        return Err(Error::invalid("action has the wrong dimension"));
    }
    let l = params.layout();
    let (n, h) = (params.input_dim, params.hidden);
    let hidden = params.hidden_layer(l.w1, l.b1, &s.0);
    let mu = params.head(l.w_mu, l.b_mu, &hidden);
    let pre = params.head(l.w_sigma, l.b_sigma, &hidden);

    let mut grad = vec![0.0; params.data.len()];
    let mut dhidden = vec![0.0; h];
    for i in 0..NUM_ACTIONS {
        let sigma = softplus(pre[i]);
        let diff = a[i] - mu[i];
        let dmu = diff / (sigma * sigma);
        let dsigma = diff * diff / (sigma * sigma * sigma) - 1.0 / sigma;
        let dpre = dsigma * sigmoid(pre[i]);
        for (head_w, head_b, d) in [(l.w_mu, l.b_mu, dmu), (l.w_sigma, l.b_sigma, dpre)] {
            grad[head_b + i] += d;
            for j in 0..h {
                grad[head_w + i * h + j] += d * hidden[j];
                dhidden[j] += d * params.data[head_w + i * h + j];
            }
        }
    }
    for j in 0..h {
        let dpre = dhidden[j] * (1.0 - hidden[j] * hidden[j]);
        grad[l.b1 + j] += dpre;
        for k in 0..n {
            grad[l.w1 + j * n + k] += dpre * s.0[k];
        }
    }
    Ok(grad)
}

/// Gradient of `b(s)` w.r.t. all parameters (policy entries are zero).
fn grad_baseline(params: &PolicyParams, s: &InputFeatures) -> Vec<f64> {
    let l = params.layout();
    let (n, h) = (params.input_dim, params.hidden);
    let hidden = params.hidden_layer(l.bw1, l.bb1, &s.0);
    let mut grad = vec![0.0; params.data.len()];
    grad[l.bb2] = 1.0;
    for j in 0..h {
        grad[l.bw2 + j] = hidden[j];
        let dpre = params.data[l.bw2 + j] * (1.0 - hidden[j] * hidden[j]);
        grad[l.bb1 + j] = dpre;
        for k in 0..n {
            grad[l.bw1 + j * n + k] = dpre * s.0[k];
        }
    }
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub features: InputFeatures,
    pub action: [f64; NUM_ACTIONS],
    pub reward: f64,
}

/// One REINFORCE step over a batch of episodes. The policy ascends
/// `mean[(R - b(s)) grad log pi]`; the baseline descends the mean squared
/// error against the rewards. Both use `learning_rate`.
pub fn reinforce_update(
    params: &PolicyParams,
    episodes: &[Episode],
    learning_rate: f64,
) -> Result<PolicyParams> {
    if episodes.is_empty() {
        return Err(Error::invalid("reinforce_update: no episodes"));
    }
    let n = episodes.len() as f64;
    let mut step = vec![0.0; params.data.len()];
    for ep in episodes {
        let b = baseline(params, &ep.features)?;
        let advantage = ep.reward - b;
        if advantage != 0.0 {
            let g = grad_log_pi(params, &ep.features, &ep.action)?;
            for (s, g) in step.iter_mut().zip(&g) {
                *s += advantage * g / n;
            }
            // descend (b - R)^2: step along -(b - R) grad b
            let gb = grad_baseline(params, &ep.features);
            for (s, g) in step.iter_mut().zip(&gb) {
                *s += 2.0 * advantage * g / n;
            }
        }
    }
    if step.iter().any(|x| !x.is_finite()) {
        let worst = step
            .iter()
            .position(|x| !x.is_finite())
            .expect("some entry is non-finite");
        return Err(Error::Training(format!(
            "non-finite policy gradient at parameter {worst}; update rejected"
        )));
    }
    let mut out = params.clone();
    for (p, s) in out.data.iter_mut().zip(&step) {
        *p += learning_rate * s;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Deterministic,
}

/// Raw action drawn from (or equal to the mean of) the policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub raw: [f64; NUM_ACTIONS],
}

impl Action {
    /// `(alpha, beta)` clamped to be non-negative.
    pub fn weights(&self) -> (f64, f64) {
        (self.raw[0].max(0.0), self.raw[1].max(0.0))
    }
}

pub fn act<R: Rng>(
    params: &PolicyParams,
    s: &InputFeatures,
    mode: ActMode,
    rng: &mut R,
) -> Result<Action> {
    let (mu, sigma) = policy_forward(params, s)?;
    let raw = match mode {
        ActMode::Deterministic => mu,
        ActMode::Sample => {
            let mut a = mu;
            for (x, s) in a.iter_mut().zip(sigma) {
                let z: f64 = StandardNormal.sample(rng);
                *x += s * z;
            }
            a
        }
    };
    Ok(Action { raw })
}

/// Result of a policy-weighted decode.
#[derive(Debug, Clone)]
pub struct PolicyDecode<S> {
    pub decode: DecodeOutput<S>,
    pub features: InputFeatures,
    pub action: Action,
}

/// Runs beam search, picks `(alpha, beta)` from the policy using the
/// beam-search features, then finishes later-stage decoding with them.
#[allow(clippy::too_many_arguments)]
pub fn decode_with_policy<M: SequenceModel, R: Rng>(
    model: &M,
    source: &[TokenId],
    config: &DecodeConfig,
    beam_cap: usize,
    params: &PolicyParams,
    mode: ActMode,
    rng: &mut R,
    delta: &dyn Discrepancy,
) -> Result<PolicyDecode<M::State>> {
    config.validate()?;
    let beam = beam_search(model, source, config.beam_size, config.max_length)?;
    let state = DecodeState::from_beam(beam, config.beam_size);
    let avg: Vec<f64> = state.evidence.iter().map(|h| h.avg_logprob).collect();
    let features = decode_features(
        source.len(),
        config.max_length,
        &avg,
        state.pool.len(),
        config.beam_size,
        beam_cap,
    );
    let action = act(params, &features, mode, rng)?;
    let (alpha, beta) = action.weights();
    let cfg = DecodeConfig {
        alpha,
        beta,
        ..*config
    };
    let decode = state.run(model, source, &cfg, delta)?;
    Ok(PolicyDecode {
        decode,
        features,
        action,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(v: &[f64]) -> InputFeatures {
        InputFeatures(v.to_vec())
    }

    #[test]
    fn softplus_of_zero_head() {
        let p = PolicyParams::zeros(3, 10);
        let (mu, sigma) = policy_forward(&p, &feats(&[0.3, -1.0, 2.0])).unwrap();
        assert_eq!(mu, [0.0, 0.0]);
        for s in sigma {
            assert!((s - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!(policy_forward(&p, &feats(&[1.0])).is_err());
    }

    #[test]
    fn log_density_examples() {
        let two_pi = 2.0 * std::f64::consts::PI;
        let v = log_density(&[0.4, -1.0], &[1.0, 1.0], &[0.4, -1.0]).unwrap();
        assert!((v + two_pi.ln()).abs() < 1e-14);
        let v = log_density(&[0.0], &[1.0], &[1.0]).unwrap();
        assert!((v - (-0.5 - 0.5 * two_pi.ln())).abs() < 1e-14);
        assert!((v + 1.4189).abs() < 1e-4);
        let a = log_density(&[1.0, 2.0], &[0.5, 0.7], &[1.0, 2.0]).unwrap();
        let b = log_density(&[1.0, 2.0], &[1.0, 1.4], &[1.0, 2.0]).unwrap();
        assert!((a - b - 2.0 * std::f64::consts::LN_2).abs() < 1e-14);
        assert!(log_density(&[0.0], &[0.0], &[0.0]).is_err());
        assert!(log_density(&[0.0], &[-1.0], &[0.0]).is_err());
    }

    #[test]
    fn zero_advantage_changes_nothing() {
        let p = PolicyParams::init(5, 100, 3);
        let s = feats(&[0.1, -0.2, 0.3, 0.0, 1.0]);
        let b = baseline(&p, &s).unwrap();
        let episodes: Vec<Episode> = (0..4)
            .map(|k| Episode {
                features: s.clone(),
                action: [k as f64, -(k as f64)],
                reward: b,
            })
            .collect();
        let q = reinforce_update(&p, &episodes, 0.5).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn deterministic_action_is_the_mean() {
        let mut p = PolicyParams::init(2, 8, 1);
        p.mu_bias_mut().copy_from_slice(&[-0.5, 0.25]);
        let s = feats(&[0.2, 0.7]);
        let (mu, _) = policy_forward(&p, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = act(&p, &s, ActMode::Deterministic, &mut rng).unwrap();
        assert_eq!(a.raw, mu);
        let (alpha, beta) = a.weights();
        assert_eq!(alpha, mu[0].max(0.0));
        assert_eq!(beta, mu[1].max(0.0));
    }

    #[test]
    fn sampling_is_seeded_and_collapses_with_sigma() {
        let mut p = PolicyParams::init(2, 8, 1);
        let s = feats(&[0.2, 0.7]);
        let draw = |p: &PolicyParams, seed| {
            act(p, &s, ActMode::Sample, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
        };
        assert_eq!(draw(&p, 4), draw(&p, 4));
        assert_ne!(draw(&p, 4), draw(&p, 5));
        p.sigma_bias_mut().copy_from_slice(&[-40.0, -40.0]);
        let (mu, sigma) = policy_forward(&p, &s).unwrap();
        assert!(sigma.iter().all(|&x| x > 0.0 && x < 1e-15));
        let a = draw(&p, 9);
        for i in 0..2 {
            assert!((a.raw[i] - mu[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn features_have_declared_length() {
        let f = decode_features(4, 13, &[-1.0, -3.0], 6, 2, 10);
        assert_eq!(f.0.len(), FEATURE_DIM);
        assert_eq!(f.0, vec![4.0 / 13.0, -2.0, 1.0, 0.75, 0.2]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = PolicyParams::init(5, 7, 11);
        let text = tensor_io::to_text(&p.to_tensors());
        assert_eq!(PolicyParams::from_tensors(tensor_io::from_text(&text).unwrap()).unwrap(), p);
    }
}
