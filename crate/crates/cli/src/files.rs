//! File formats shared by the subcommands.
//!
//! A candidate file holds one JSON record per line:
//!
//! ```text
//! {"id":0,"candidates":[{"tokens":["a","b"],"avg_logprob":-0.4}, ...]}
//! ```

use std::collections::{HashMap, HashSet};
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use mbr_core::model::ToyModel;
use mbr_core::risk::Evidence;
use mbr_core::{TokenId, TokenSeq};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<String>,
    pub avg_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: u64,
    pub candidates: Vec<Candidate>,
}

pub fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

pub fn parse_candidate_file(text: &str) -> anyhow::Result<Vec<CandidateRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CandidateRecord =
            serde_json::from_str(line).with_context(|| format!("line {}: malformed record", i + 1))?;
        if rec.candidates.is_empty() {
            bail!("line {}: record {} has no candidates", i + 1, rec.id);
        }
        if let Some(c) = rec.candidates.iter().find(|c| c.tokens.is_empty()) {
            bail!("line {}: empty token sequence (avg_logprob {})", i + 1, c.avg_logprob);
        }
        if rec.candidates.iter().any(|c| !c.avg_logprob.is_finite()) {
            bail!("line {}: non-finite avg_logprob", i + 1);
        }
        if !seen.insert(rec.id) {
            bail!("line {}: duplicate id {}", i + 1, rec.id);
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_candidate_file(path: &Path) -> anyhow::Result<Vec<CandidateRecord>> {
    parse_candidate_file(&read_text(path)?).with_context(|| format!("in {}", path.display()))
}

/// Maps token strings to ids, growing as new strings appear.
#[derive(Debug, Default)]
pub struct Interner {
    ids: HashMap<String, TokenId>,
    names: Vec<String>,
}

impl Interner {
    pub fn id(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.names.len() as TokenId;
        self.ids.insert(token.to_string(), id);
        self.names.push(token.to_string());
        id
    }

    pub fn name(&self, id: TokenId) -> &str {
        &self.names[id as usize]
    }

    pub fn evidences(&mut self, rec: &CandidateRecord) -> Vec<Evidence> {
        rec.candidates
            .iter()
            .map(|c| {
                let ids = c.tokens.iter().map(|t| self.id(t)).collect();
                Evidence::new(TokenSeq::new(ids).expect("checked non-empty"), c.avg_logprob)
            })
            .collect()
    }
}

/// One input line: the source, and a reference when the line is
/// `source<TAB>reference`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputLine {
    pub source: Vec<String>,
    pub reference: Option<Vec<String>>,
}

fn split_tokens(s: &str) -> Vec<String> {
    s.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

pub fn parse_input(text: &str) -> anyhow::Result<Vec<InputLine>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let (src, reference) = match line.split_once('\t') {
                Some((s, r)) => (s, Some(split_tokens(r))),
                None => (line, None),
            };
            let source = split_tokens(src);
            if source.is_empty() {
                return Err(anyhow!("line {}: empty source sentence", i + 1));
            }
            Ok(InputLine { source, reference })
        })
        .collect()
}

pub fn load_model(path: &Path) -> anyhow::Result<ToyModel> {
    ToyModel::load(path).with_context(|| format!("cannot load model {}", path.display()))
}

/// Source ids; unknown words map to `<unk>`.
pub fn source_ids(model: &ToyModel, tokens: &[String]) -> Vec<TokenId> {
    tokens.iter().map(|t| model.source_id(t)).collect()
}

/// Target ids of a reference; words outside the model vocabulary get ids
/// past its end, so they never match an output.
pub fn reference_ids(model: &ToyModel, tokens: &[String]) -> Vec<TokenId> {
    let unknown = model.target_vocab.len() as TokenId;
    tokens
        .iter()
        .map(|t| {
            model
                .target_vocab
                .iter()
                .position(|w| w == t)
                .map_or(unknown, |i| i as TokenId)
        })
        .collect()
}

pub fn target_words(model: &ToyModel, ids: &[TokenId]) -> Vec<String> {
    ids.iter().map(|&t| model.target_token(t).to_string()).collect()
}
