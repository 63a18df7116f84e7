use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use mbr_core::approx::{pairs_from_candidates, train_approximator, TrainConfig, TrainingPair};
use mbr_core::model::{EstimateConfig, ParallelCorpus, ToyModel};
use mbr_core::ngram_bleu::smoothed_bleu;
use mbr_core::policy::{
    act, baseline, decode_with_policy, reinforce_update, ActMode, Episode, InputFeatures,
    PolicyParams, FEATURE_DIM, HIDDEN_UNITS,
};
use mbr_core::risk::ExactBleu;
use mbr_core::search::DecodeConfig;
use mbr_core::TokenId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::files::{self, Interner};
use crate::{usage, GlobalOpts};

#[derive(Debug, Args)]
pub struct TrainApproxArgs {
    /// Training pairs, one JSON record per line.
    #[arg(long, conflicts_with = "candidates")]
    pub pairs: Option<PathBuf>,
    /// Candidate file; all ordered pairs of each record are used.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Where to write the trained parameters.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Loss curve CSV (epoch, mse).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab_cap: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

pub fn read_pairs(text: &str) -> anyhow::Result<Vec<TrainingPair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let p: TrainingPair =
                serde_json::from_str(l).with_context(|| format!("line {}: malformed pair", i + 1))?;
            if p.y.is_empty() || p.y2.is_empty() || !p.target.is_finite() {
                bail!("line {}: empty sequence or non-finite target", i + 1);
            }
            Ok(p)
        })
        .collect()
}

pub fn run_approx(args: &TrainApproxArgs, global: &GlobalOpts) -> anyhow::Result<()> {
    let pairs = match (&args.pairs, &args.candidates) {
        (Some(p), None) => read_pairs(&files::read_text(p)?).with_context(|| format!("in {}", p.display()))?,
        (None, Some(c)) => {
            let mut pairs = Vec::new();
            for rec in files::read_candidate_file(c)? {
                let mut interner = Interner::default();
                let seqs: Vec<Vec<TokenId>> = interner
                    .evidences(&rec)
                    .into_iter()
                    .map(|e| e.seq.into_inner())
                    .collect();
                pairs.extend(pairs_from_candidates(&seqs)?);
            }
            pairs
        }
        _ => return Err(usage("give exactly one of --pairs and --candidates")),
    };
    if pairs.is_empty() {
        bail!("no training pairs");
    }
    let cfg = TrainConfig {
        hidden: args.hidden,
        vocab_cap: args.vocab_cap,
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        seed: global.seed,
        ..TrainConfig::default()
    };
    if cfg.hidden == 0 || cfg.vocab_cap == 0 || cfg.batch_size == 0 {
        return Err(usage("hidden, vocab-cap and batch-size must be >= 1"));
    }
    let outcome = train_approximator(&pairs, &cfg, None)?;
    outcome.params.save(&args.checkpoint)?;
    if let Some(path) = &args.log {
        let mut f = crate::open_output(Some(path))?;
        writeln!(f, "epoch,mse")?;
        for (e, l) in outcome.loss_curve.iter().enumerate() {
            writeln!(f, "{e},{l}")?;
        }
        f.flush()?;
    }
    let first = outcome.loss_curve[0];
    let last = outcome.loss_curve.last().copied().unwrap_or(first);
    eprintln!("trained on {} pairs: mse {first} -> {last}", pairs.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainPolicyArgs {
    /// Train on the quadratic bandit task instead of decoding.
    #[arg(long)]
    pub bandit: bool,
    #[arg(long, required_unless_present = "bandit")]
    pub model: Option<PathBuf>,
    /// Lines of `source<TAB>reference`.
    #[arg(long, required_unless_present = "bandit")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training log CSV (update, mean_reward, baseline_mse).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub updates: usize,
    /// Episodes per update.
    #[arg(long, default_value_t = 32)]
    pub episodes: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 5)]
    pub beam_size: usize,
    #[arg(long)]
    pub extra_steps: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub pool_factor: usize,
    #[arg(long, default_value_t = 100)]
    pub max_length: usize,
    /// Beam-size normalizer of the policy features.
    #[arg(long, default_value_t = 100)]
    pub beam_cap: usize,
}

/// Reward of the bandit task; its maximum is at (2, 0.5).
pub fn bandit_reward(a: &[f64; 2]) -> f64 {
    -(a[0] - 2.0).powi(2) - (a[1] - 0.5).powi(2)
}

pub fn bandit_state() -> InputFeatures {
    let mut s = vec![0.0; FEATURE_DIM];
    s[0] = 1.0;
    InputFeatures(s)
}

struct Task {
    model: ToyModel,
    sentences: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    config: DecodeConfig,
    beam_cap: usize,
}

fn collect_episodes(
    params: &PolicyParams,
    task: Option<&Task>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> anyhow::Result<Vec<Episode>> {
    let Some(task) = task else {
        let s = bandit_state();
        return (0..n)
            .map(|_| {
                let a = act(params, &s, ActMode::Sample, rng)?;
                Ok(Episode {
                    features: s.clone(),
                    action: a.raw,
                    reward: bandit_reward(&a.raw),
                })
            })
            .collect();
    };
    let jobs: Vec<(usize, u64)> = (0..n)
        .map(|_| (rng.random_range(0..task.sentences.len()), rng.random()))
        .collect();
    jobs.par_iter()
        .map(|&(i, seed)| {
            let (src, reference) = &task.sentences[i];
            let mut erng = ChaCha8Rng::seed_from_u64(seed);
            let d = decode_with_policy(
                &task.model,
                src,
                &task.config,
                task.beam_cap,
                params,
                ActMode::Sample,
                &mut erng,
                &ExactBleu,
            )
            .with_context(|| format!("sentence {}", i + 1))?;
            Ok(Episode {
                features: d.features,
                action: d.action.raw,
                reward: smoothed_bleu(d.decode.output.content(), reference)?,
            })
        })
        .collect()
}

fn load_task(args: &TrainPolicyArgs) -> anyhow::Result<Task> {
    let (Some(model_path), Some(input)) = (&args.model, &args.input) else {
        return Err(usage("--model and --input are required without --bandit"));
    };
    let model = files::load_model(model_path)?;
    let lines = files::parse_input(&files::read_text(input)?)
        .with_context(|| format!("in {}", input.display()))?;
    let mut sentences = Vec::with_capacity(lines.len());
    for (i, l) in lines.iter().enumerate() {
        let reference = match &l.reference {
            Some(r) if !r.is_empty() => files::reference_ids(&model, r),
            _ => bail!("{}: line {} has no reference", input.display(), i + 1),
        };
        sentences.push((files::source_ids(&model, &l.source), reference));
    }
    let config = DecodeConfig {
        beam_size: args.beam_size,
        extra_steps: args.extra_steps,
        pool_factor: args.pool_factor,
        max_length: args.max_length,
        ..DecodeConfig::default()
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(Task {
        model,
        sentences,
        config,
        beam_cap: args.beam_cap,
    })
}

pub fn run_policy(args: &TrainPolicyArgs, global: &GlobalOpts) -> anyhow::Result<()> {
    if args.episodes == 0 || args.beam_cap == 0 {
        return Err(usage("episodes and beam-cap must be >= 1"));
    }
    let task = if args.bandit { None } else { Some(load_task(args)?) };
    let mut params = PolicyParams::init(FEATURE_DIM, HIDDEN_UNITS, global.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(global.seed);
    let mut log = match &args.log {
        Some(p) => {
            let mut f = crate::open_output(Some(p))?;
            writeln!(f, "update,mean_reward,baseline_mse")?;
            Some(f)
        }
        None => None,
    };
    let mut first_reward = None;
    let mut last_reward = 0.0;
    for u in 0..args.updates {
        let episodes = collect_episodes(&params, task.as_ref(), args.episodes, &mut rng)?;
        let n = episodes.len() as f64;
        let mean_reward = episodes.iter().map(|e| e.reward).sum::<f64>() / n;
        let mut baseline_mse = 0.0;
        for e in &episodes {
            baseline_mse += (baseline(&params, &e.features)? - e.reward).powi(2) / n;
        }
        params = reinforce_update(&params, &episodes, args.learning_rate)
            .with_context(|| format!("update {u}"))?;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{u},{mean_reward},{baseline_mse}")?;
        }
        if global.verbose {
            eprintln!("update {u}: mean reward {mean_reward:.6}, baseline mse {baseline_mse:.6}");
        }
        first_reward.get_or_insert(mean_reward);
        last_reward = mean_reward;
    }
    if let Some(mut f) = log {
        f.flush()?;
    }
    params.save(&args.checkpoint)?;
    if let Some(first) = first_reward {
        eprintln!("mean reward {first} -> {last_reward} over {} updates", args.updates);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Lines of `source<TAB>target`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Target n-gram order (1..=3).
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    #[arg(long, default_value_t = 0.1)]
    pub add_k: f64,
    /// Weight of the lexical table against the n-gram LM.
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// Output length cap, end marker included (0 = none).
    #[arg(long, default_value_t = 0)]
    pub max_len_cap: usize,
}

pub fn run_estimate(args: &EstimateArgs, global: &GlobalOpts) -> anyhow::Result<()> {
    let text = files::read_text(&args.corpus)?;
    let corpus =
        ParallelCorpus::parse(&text).with_context(|| format!("in {}", args.corpus.display()))?;
    let cfg = EstimateConfig {
        order: args.order,
        add_k: args.add_k,
        lambda: args.lambda,
        max_len_cap: args.max_len_cap,
    };
    let model = ToyModel::estimate(&corpus, cfg).map_err(|e| match e {
        mbr_core::Error::InvalidInput(m) => usage(m),
        other => other.into(),
    })?;
    model.save(&args.output)?;
    if global.verbose {
        eprintln!(
            "{} pairs, {} source and {} target types",
            corpus.pairs.len(),
            model.source_vocab.len(),
            model.target_vocab.len()
        );
    }
    Ok(())
}
