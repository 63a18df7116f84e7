use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use mbr_core::approx::{ApproxDiscrepancy, ApproxParams, LocalVocab};
use mbr_core::risk::{
    mbr_rerank, naive_rerank_early_stop, Evidence, EvidenceSpace, ExactBleu, PairwiseBleu,
    RiskReport,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::files::{self, CandidateRecord, Interner};
use crate::{usage, DeltaKind, GlobalOpts};

#[derive(Debug, Args)]
pub struct RerankArgs {
    /// Candidate file (JSON lines).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DeltaKind::Exact)]
    pub delta: DeltaKind,
    /// Approximator checkpoint for --delta approx.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also rerank with the other exact method and report rank-1 agreement.
    #[arg(long)]
    pub cross_check: bool,
}

/// One reranked sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRecord {
    pub id: u64,
    pub best: usize,
    pub tokens: Vec<String>,
    #[serde(flatten)]
    pub report: RiskReport,
    /// Rank-1 index under the comparison reranker, when one ran.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reference_best: Option<usize>,
}

pub fn rerank_record(
    rec: &CandidateRecord,
    delta: DeltaKind,
    params: Option<&ApproxParams>,
    compare: bool,
) -> mbr_core::Result<RerankRecord> {
    let mut interner = Interner::default();
    let cands: Vec<Evidence> = interner.evidences(rec);
    let space = EvidenceSpace::new(cands.clone())?;
    let exact = || mbr_rerank(&cands, &space, &ExactBleu);
    let naive = || naive_rerank_early_stop(&cands, &space, &PairwiseBleu);
    let (report, reference) = match delta {
        DeltaKind::Exact => (exact()?, if compare { Some(naive()?) } else { None }),
        DeltaKind::ExactNaive => (naive()?, if compare { Some(exact()?) } else { None }),
        DeltaKind::Approx => {
            let params = params.expect("checked by caller");
            let seqs: Vec<&[u32]> = cands.iter().map(|c| c.seq.as_slice()).collect();
            let d = ApproxDiscrepancy::new(params, LocalVocab::from_sequences(&seqs))?;
            (mbr_rerank(&cands, &space, &d)?, Some(exact()?))
        }
    };
    let best = report.best();
    Ok(RerankRecord {
        id: rec.id,
        best,
        tokens: rec.candidates[best].tokens.clone(),
        reference_best: reference.map(|r| r.best()),
        report,
    })
}

pub fn run(args: &RerankArgs, global: &GlobalOpts) -> anyhow::Result<()> {
    let params = match (args.delta, &args.checkpoint) {
        (DeltaKind::Approx, Some(p)) => Some(
            ApproxParams::load(p)
                .with_context(|| format!("cannot load checkpoint {}", p.display()))?,
        ),
        (DeltaKind::Approx, None) => return Err(usage("--delta approx needs --checkpoint")),
        (_, Some(_)) => return Err(usage("--checkpoint is only used with --delta approx")),
        _ => None,
    };
    let records = files::read_candidate_file(&args.input)?;
    let out_records: Vec<RerankRecord> = records
        .par_iter()
        .map(|r| {
            rerank_record(r, args.delta, params.as_ref(), args.cross_check)
                .with_context(|| format!("record {}", r.id))
        })
        .collect::<anyhow::Result<_>>()?;

    let mut out = crate::open_output(args.output.as_ref())?;
    for r in &out_records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;

    let compared: Vec<&RerankRecord> =
        out_records.iter().filter(|r| r.reference_best.is_some()).collect();
    if !compared.is_empty() {
        let agree = compared
            .iter()
            .filter(|r| r.reference_best == Some(r.best))
            .count();
        let against = match args.delta {
            DeltaKind::Exact => "exact-naive",
            _ => "exact",
        };
        eprintln!(
            "rank-1 agreement with {against}: {agree}/{} ({:.2}%)",
            compared.len(),
            100.0 * agree as f64 / compared.len() as f64
        );
    } else if global.verbose {
        eprintln!("reranked {} sentences", out_records.len());
    }
    Ok(())
}
