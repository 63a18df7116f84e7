//! Reranking speed as a function of the candidate count.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, ValueEnum};
use mbr_core::approx::{ApproxDiscrepancy, ApproxParams, LocalVocab};
use mbr_core::risk::{
    mbr_rerank, naive_rerank_early_stop, Evidence, EvidenceSpace, ExactBleu, PairwiseBleu,
};
use mbr_core::{TokenId, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::files::{self, Interner};
use crate::{usage, GlobalOpts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Method {
    Naive,
    Batch,
    Approx,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Batch => "batch",
            Method::Approx => "approx",
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Candidate counts N.
    #[arg(long, value_delimiter = ',', default_value = "1,10,50,100,200")]
    pub sizes: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "naive,batch,approx")]
    pub methods: Vec<Method>,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    /// Sentences per measurement.
    #[arg(long, default_value_t = 10)]
    pub sentences: usize,
    /// Candidate file to take the first N candidates from, instead of
    /// synthetic lists.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Approximator checkpoint (default: fresh random parameters).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// CSV destination (default stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub method: Method,
    pub seconds_per_sentence: f64,
    pub rep: usize,
}

/// Synthetic n-best list: noisy copies of a random reference sentence.
pub fn synthetic_nbest(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Vec<Evidence> {
    let len = rng.random_range(15..=30);
    let reference: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
    (0..n)
        .map(|_| {
            let mut seq = Vec::with_capacity(len + 4);
            for &t in &reference {
                let u: f64 = rng.random();
                if u < 0.08 {
                    continue;
                }
                if u < 0.2 {
                    seq.push(rng.random_range(0..vocab));
                } else {
                    seq.push(t);
                }
                if rng.random_bool(0.05) {
                    seq.push(rng.random_range(0..vocab));
                }
            }
            if seq.is_empty() {
                seq.push(reference[0]);
            }
            let lp = -rng.random_range(0.2..2.0);
            Evidence::new(TokenSeq::new(seq).expect("non-empty"), lp)
        })
        .collect()
}

fn time_method(
    method: Method,
    lists: &[Vec<Evidence>],
    params: &ApproxParams,
) -> anyhow::Result<f64> {
    let start = Instant::now();
    for cands in lists {
        let space = EvidenceSpace::new(cands.clone())?;
        let report = match method {
            Method::Naive => naive_rerank_early_stop(cands, &space, &PairwiseBleu)?,
            Method::Batch => mbr_rerank(cands, &space, &ExactBleu)?,
            Method::Approx => {
                let seqs: Vec<&[TokenId]> = cands.iter().map(|c| c.seq.as_slice()).collect();
                let d = ApproxDiscrepancy::new(params, LocalVocab::from_sequences(&seqs))?;
                mbr_rerank(cands, &space, &d)?
            }
        };
        std::hint::black_box(report.best());
    }
    Ok(start.elapsed().as_secs_f64() / lists.len() as f64)
}

/// Runs every (N, method, repetition) measurement; rows are ordered by
/// method, then N, then repetition.
pub fn bench(
    sizes: &[usize],
    methods: &[Method],
    repetitions: usize,
    data: &[Vec<Evidence>],
    params: &ApproxParams,
) -> anyhow::Result<Vec<BenchRow>> {
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    let mut rows = Vec::new();
    for rep in 0..repetitions {
        for &n in &sizes {
            let lists: Vec<Vec<Evidence>> =
                data.iter().map(|c| c[..n.min(c.len())].to_vec()).collect();
            for &m in methods {
                rows.push(BenchRow {
                    n,
                    method: m,
                    seconds_per_sentence: time_method(m, &lists, params)?,
                    rep,
                });
            }
        }
    }
    rows.sort_by_key(|r| (r.method, r.n, r.rep));
    Ok(rows)
}

pub fn write_csv<W: Write>(out: &mut W, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(out, "N,method,seconds_per_sentence,rep")?;
    for r in rows {
        writeln!(out, "{},{},{:.9},{}", r.n, r.method.name(), r.seconds_per_sentence, r.rep)?;
    }
    Ok(())
}

pub fn run(args: &BenchArgs, global: &GlobalOpts) -> anyhow::Result<()> {
    if args.sizes.contains(&0) || args.sentences == 0 || args.repetitions == 0 {
        return Err(usage("sizes, sentences and repetitions must be >= 1"));
    }
    let max_n = args.sizes.iter().copied().max().unwrap_or(1);
    let data: Vec<Vec<Evidence>> = match &args.input {
        Some(path) => {
            let mut interner = Interner::default();
            files::read_candidate_file(path)?
                .iter()
                .take(args.sentences)
                .map(|r| interner.evidences(r))
                .collect()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(global.seed);
            (0..args.sentences)
                .map(|_| synthetic_nbest(&mut rng, max_n, 40))
                .collect()
        }
    };
    let vocab_needed = data
        .iter()
        .map(|c| {
            let seqs: Vec<&[TokenId]> = c.iter().map(|e| e.seq.as_slice()).collect();
            LocalVocab::from_sequences(&seqs).len()
        })
        .max()
        .unwrap_or(1);
    let params = match &args.checkpoint {
        Some(p) => ApproxParams::load(p)
            .with_context(|| format!("cannot load checkpoint {}", p.display()))?,
        None => ApproxParams::init(32, vocab_needed.max(64), global.seed),
    };
    let rows = bench(&args.sizes, &args.methods, args.repetitions, &data, &params)?;
    let mut out = crate::open_output(args.output.as_ref())?;
    write_csv(&mut out, &rows)?;
    out.flush()?;
    if global.verbose {
        eprintln!("{} measurements over {} sentences", rows.len(), data.len());
    }
    Ok(())
}
