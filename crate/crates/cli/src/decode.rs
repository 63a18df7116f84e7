use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, ValueEnum};
use mbr_core::model::ToyModel;
use mbr_core::policy::{decode_with_policy, ActMode, PolicyParams};
use mbr_core::risk::{Discrepancy, ExactBleu, PairwiseBleu};
use mbr_core::search::{
    beam_mbr_rerank, beam_search, later_stage_mbr_decode, DecodeConfig, Hypothesis, TraceRecord,
};
use mbr_core::model::ToyState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::files::{self, Candidate, CandidateRecord};
use crate::{usage, DeltaKind, GlobalOpts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    Beam,
    MbrRerank,
    LaterMbr,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// One source sentence per line; text after a TAB is ignored.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file (default stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Strategy::LaterMbr)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 5)]
    pub beam_size: usize,
    /// Extra steps T (default: source length).
    #[arg(long)]
    pub extra_steps: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 3)]
    pub pool_factor: usize,
    #[arg(long, default_value_t = 100)]
    pub max_length: usize,
    #[arg(long, value_enum, default_value_t = DeltaKind::Exact)]
    pub delta: DeltaKind,
    /// Policy checkpoint; later-mbr then takes (alpha, beta) from the policy.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Beam-size normalizer of the policy features.
    #[arg(long, default_value_t = 100)]
    pub beam_cap: usize,
    /// Write each sentence's final candidate list as a candidate file.
    #[arg(long)]
    pub nbest: Option<PathBuf>,
    /// Write the decoding trace as JSON lines.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Serialize)]
struct SentenceTrace<'a> {
    sentence: usize,
    #[serde(flatten)]
    record: &'a TraceRecord,
}

struct Decoded {
    output: Hypothesis<ToyState>,
    risk: Option<f64>,
    weights: Option<(f64, f64)>,
    candidates: Vec<Hypothesis<ToyState>>,
    trace: Vec<TraceRecord>,
}

impl DecodeArgs {
    pub fn config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            extra_steps: self.extra_steps,
            alpha: self.alpha,
            beta: self.beta,
            pool_factor: self.pool_factor,
            max_length: self.max_length,
        }
    }
}

fn decode_one(
    args: &DecodeArgs,
    model: &ToyModel,
    source: &[u32],
    policy: Option<&PolicyParams>,
    delta: &dyn Discrepancy,
) -> mbr_core::Result<Decoded> {
    let cfg = args.config();
    cfg.validate()?;
    if args.strategy == Strategy::Beam {
        let mut beam = beam_search(model, source, cfg.beam_size, cfg.max_length)?;
        if beam.finished.is_empty() {
            return Err(mbr_core::Error::InvalidInput(
                "beam search finished no hypothesis".into(),
            ));
        }
        return Ok(Decoded {
            output: beam.finished[0].clone(),
            risk: None,
            weights: None,
            candidates: std::mem::take(&mut beam.finished),
            trace: Vec::new(),
        });
    }
    let (out, weights) = match (args.strategy, policy) {
        (Strategy::LaterMbr, Some(p)) => {
            // deterministic actions: the generator is never drawn from
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let d = decode_with_policy(
                model,
                source,
                &cfg,
                args.beam_cap,
                p,
                ActMode::Deterministic,
                &mut rng,
                delta,
            )?;
            (d.decode, Some(d.action.weights()))
        }
        (Strategy::LaterMbr, None) => (later_stage_mbr_decode(model, source, &cfg, delta)?, None),
        _ => (beam_mbr_rerank(model, source, &cfg, delta)?, None),
    };
    Ok(Decoded {
        risk: Some(out.report.risks[out.report.best()]),
        output: out.output,
        weights,
        candidates: out.evidence,
        trace: out.trace,
    })
}

pub fn run(args: &DecodeArgs, global: &GlobalOpts) -> anyhow::Result<()> {
    let delta: &dyn Discrepancy = match args.delta {
        DeltaKind::Exact => &ExactBleu,
        DeltaKind::ExactNaive => &PairwiseBleu,
        DeltaKind::Approx => {
            return Err(usage("--delta approx is only available for rerank"));
        }
    };
    if args.checkpoint.is_some() && args.strategy != Strategy::LaterMbr {
        return Err(usage("--checkpoint (policy) requires --strategy later-mbr"));
    }
    args.config().validate().map_err(|e| usage(e.to_string()))?;
    let model = files::load_model(&args.model)?;
    let policy = match &args.checkpoint {
        Some(p) => Some(
            PolicyParams::load(p).with_context(|| format!("cannot load policy {}", p.display()))?,
        ),
        None => None,
    };
    let inputs = files::parse_input(&files::read_text(&args.input)?)
        .with_context(|| format!("in {}", args.input.display()))?;

    let results: Vec<Decoded> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, line)| {
            let src = files::source_ids(&model, &line.source);
            decode_one(args, &model, &src, policy.as_ref(), delta)
                .with_context(|| format!("sentence {}", i + 1))
        })
        .collect::<anyhow::Result<_>>()?;

    let mut out = crate::open_output(args.output.as_ref())?;
    for d in &results {
        let words = files::target_words(&model, content_tokens(&d.output));
        let mut line = words.join(" ");
        if global.verbose {
            line.push_str(&format!("\t{}", d.output.avg_logprob));
            if let Some(r) = d.risk {
                line.push_str(&format!("\t{r}"));
            }
            if let Some((a, b)) = d.weights {
                line.push_str(&format!("\t{a}\t{b}"));
            }
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;

    if let Some(path) = &args.nbest {
        let mut f = crate::open_output(Some(path))?;
        for (i, d) in results.iter().enumerate() {
            let rec = CandidateRecord {
                id: i as u64,
                candidates: d
                    .candidates
                    .iter()
                    .map(|h| Candidate {
                        tokens: files::target_words(&model, h.content()),
                        avg_logprob: h.avg_logprob,
                    })
                    .collect(),
            };
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        f.flush()?;
    }
    if let Some(path) = &args.trace {
        let mut f = crate::open_output(Some(path))?;
        for (i, d) in results.iter().enumerate() {
            for record in &d.trace {
                let line = serde_json::to_string(&SentenceTrace { sentence: i, record })?;
                writeln!(f, "{line}")?;
            }
        }
        f.flush()?;
    }
    Ok(())
}

/// Output tokens without the trailing end-of-sentence marker.
fn content_tokens(h: &Hypothesis<ToyState>) -> &[u32] {
    if h.finished {
        &h.tokens[..h.tokens.len() - 1]
    } else {
        &h.tokens
    }
}
