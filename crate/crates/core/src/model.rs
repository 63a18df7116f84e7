//! Conditional sequence models.
//!
//! [`SequenceModel`] is the interface the decoders run against. [`ToyModel`]
//! is a small statistical translation model: a lexical table `t(w | s)`
//! averaged over source tokens, interpolated with a target n-gram LM, and an
//! end-of-sequence hazard schedule over output length. It is small enough
//! that every output sequence can be enumerated exactly in tests.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::path::Path;

use rand::Rng;

use crate::{Error, Result, TokenId};

/// Target-side end-of-sequence id. Also used as the sentence-start marker in
/// LM histories.
pub const EOS: TokenId = 0;
/// Source-side unknown-word id.
pub const SRC_UNK: TokenId = 0;

const EOS_NAME: &str = "</s>";
const BOS_NAME: &str = "<s>";
const UNK_NAME: &str = "<unk>";

/// Log-probabilities over the target vocabulary, EOS included.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    logprobs: Vec<f64>,
}

impl StepDistribution {
    pub fn new(logprobs: Vec<f64>) -> Self {
        StepDistribution { logprobs }
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn logprob(&self, token: TokenId) -> f64 {
        self.logprobs[token as usize]
    }

    /// Tokens with finite log-probability, best first. Ties keep id order.
    pub fn ranked(&self) -> Vec<(TokenId, f64)> {
        let mut out: Vec<(TokenId, f64)> = self
            .logprobs
            .iter()
            .enumerate()
            .filter(|(_, lp)| lp.is_finite())
            .map(|(t, &lp)| (t as TokenId, lp))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        out
    }
}

pub trait SequenceModel: Sync {
    type State: Clone + PartialEq + fmt::Debug + Send + Sync;

    fn target_vocab_size(&self) -> usize;

    fn eos(&self) -> TokenId {
        EOS
    }

    fn initial_state(&self, source: &[TokenId]) -> Result<Self::State>;

    /// Feeds `last_token` (none at the start) and returns the next-token
    /// distribution together with the updated state.
    fn step(
        &self,
        source: &[TokenId],
        state: &Self::State,
        last_token: Option<TokenId>,
    ) -> Result<(StepDistribution, Self::State)>;
}

/// Decoder state of the toy model: the last `order - 1` target tokens
/// (sentence start padded with [`EOS`]) and the number of emitted tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ToyState {
    pub history: Vec<TokenId>,
    pub emitted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmContext {
    /// Log-probability of any word not listed in `seen`.
    pub unseen_logprob: f64,
    pub seen: BTreeMap<TokenId, f64>,
}

/// Add-k smoothed target n-gram model over word ids `1..num_words + 1`.
///
/// Histories not observed in training back off by dropping their oldest
/// token; the empty history is always present.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramLm {
    pub order: usize,
    pub add_k: f64,
    pub num_words: usize,
    pub contexts: BTreeMap<Vec<TokenId>, LmContext>,
}

impl NGramLm {
    pub fn estimate(targets: &[&[TokenId]], order: usize, add_k: f64, num_words: usize) -> Self {
        let mut counts: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>> = BTreeMap::new();
        for tgt in targets {
            let mut padded = vec![EOS; order - 1];
            padded.extend_from_slice(tgt);
            for pos in order - 1..padded.len() {
                let w = padded[pos];
                for k in 0..order {
                    let h = padded[pos - k..pos].to_vec();
                    *counts.entry(h).or_default().entry(w).or_default() += 1;
                }
            }
            // the final history is observed even though no word follows it
            let end = padded.len();
            for k in 0..order {
                counts.entry(padded[end - k..].to_vec()).or_default();
            }
        }
        counts.entry(Vec::new()).or_default();

        let v = num_words as f64;
        let contexts = counts
            .into_iter()
            .map(|(h, row)| {
                let total = row.values().sum::<u64>() as f64;
                let denom = total + add_k * v;
                let ctx = if denom > 0.0 {
                    LmContext {
                        unseen_logprob: (add_k / denom).ln(),
                        seen: row
                            .into_iter()
                            .map(|(w, c)| (w, ((c as f64 + add_k) / denom).ln()))
                            .collect(),
                    }
                } else {
                    LmContext {
                        unseen_logprob: (1.0 / v).ln(),
                        seen: BTreeMap::new(),
                    }
                };
                (h, ctx)
            })
            .collect();
        NGramLm {
            order,
            add_k,
            num_words,
            contexts,
        }
    }

    /// Probabilities of words `1..=num_words` after `history` (index 0 of the
    /// returned vector is word id 1).
    pub fn continuation(&self, history: &[TokenId]) -> Vec<f64> {
        let start = history.len().saturating_sub(self.order - 1);
        let mut h = &history[start..];
        let ctx = loop {
            if let Some(ctx) = self.contexts.get(h) {
                break ctx;
            }
            h = &h[1..];
        };
        let mut out = vec![ctx.unseen_logprob.exp(); self.num_words];
        for (&w, &lp) in &ctx.seen {
            out[w as usize - 1] = lp.exp();
        }
        out
    }
}

/// Settings for [`ToyModel::estimate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateConfig {
    pub order: usize,
    pub add_k: f64,
    pub lambda: f64,
    /// Upper bound on output length (EOS included); 0 means none.
    pub max_len_cap: usize,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            order: 2,
            add_k: 0.1,
            lambda: 0.5,
            max_len_cap: 0,
        }
    }
}

/// Sentence pairs over dense vocabularies. Source id 0 is `<unk>`, target
/// id 0 is `</s>`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub source_vocab: Vec<String>,
    pub target_vocab: Vec<String>,
    pub pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>,
}

impl ParallelCorpus {
    /// Parses one `source<TAB>target` pair per line, tokens separated by
    /// single spaces. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut src_ids: HashMap<String, TokenId> = HashMap::new();
        let mut tgt_ids: HashMap<String, TokenId> = HashMap::new();
        let mut corpus = ParallelCorpus {
            source_vocab: vec![UNK_NAME.to_string()],
            target_vocab: vec![EOS_NAME.to_string()],
            pairs: Vec::new(),
        };
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (src, tgt) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(lineno + 1, "expected source<TAB>target"))?;
            if tgt.split(' ').any(|t| t == EOS_NAME || t == BOS_NAME) {
                return Err(Error::parse(lineno + 1, "reserved token in target sentence"));
            }
            let src = intern(src, &mut src_ids, &mut corpus.source_vocab, lineno + 1)?;
            let tgt = intern(tgt, &mut tgt_ids, &mut corpus.target_vocab, lineno + 1)?;
            corpus.pairs.push((src, tgt));
        }
        if corpus.pairs.is_empty() {
            return Err(Error::invalid("empty corpus"));
        }
        Ok(corpus)
    }

    /// Wraps id pairs with generated token names (`s1`, `t1`, ...).
    pub fn from_ids(
        pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>,
        source_words: usize,
        target_words: usize,
    ) -> Result<Self> {
        for (s, t) in &pairs {
            if s.is_empty() || t.is_empty() {
                return Err(Error::invalid("corpus sentences must be non-empty"));
            }
            if s.iter().any(|&x| x == 0 || x as usize > source_words)
                || t.iter().any(|&x| x == 0 || x as usize > target_words)
            {
                return Err(Error::invalid("corpus token id out of range"));
            }
        }
        let mut source_vocab = vec![UNK_NAME.to_string()];
        source_vocab.extend((1..=source_words).map(|i| format!("s{i}")));
        let mut target_vocab = vec![EOS_NAME.to_string()];
        target_vocab.extend((1..=target_words).map(|i| format!("t{i}")));
        Ok(ParallelCorpus {
            source_vocab,
            target_vocab,
            pairs,
        })
    }
}

fn intern(
    sentence: &str,
    ids: &mut HashMap<String, TokenId>,
    vocab: &mut Vec<String>,
    line: usize,
) -> Result<Vec<TokenId>> {
    let toks: Vec<&str> = sentence.split(' ').filter(|t| !t.is_empty()).collect();
    if toks.is_empty() {
        return Err(Error::parse(line, "empty sentence"));
    }
    Ok(toks
        .into_iter()
        .map(|t| {
            *ids.entry(t.to_string()).or_insert_with(|| {
                vocab.push(t.to_string());
                (vocab.len() - 1) as TokenId
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub source_vocab: Vec<String>,
    pub target_vocab: Vec<String>,
    /// `lexical[s][w] = t(w | s)`; column 0 (EOS) is always zero.
    pub lexical: Vec<Vec<f64>>,
    pub lm: NGramLm,
    pub lambda: f64,
    /// `eos_schedule[n]`: EOS probability after `n` emitted tokens; the last
    /// entry applies to all longer prefixes.
    pub eos_schedule: Vec<f64>,
    pub max_len_cap: usize,
}

impl ToyModel {
    pub fn estimate(corpus: &ParallelCorpus, config: EstimateConfig) -> Result<Self> {
        if corpus.pairs.is_empty() {
            return Err(Error::invalid("estimate_toy_model: empty corpus"));
        }
        if !(1..=3).contains(&config.order) {
            return Err(Error::invalid("LM order must be 1, 2 or 3"));
        }
        if !(0.0..=1.0).contains(&config.lambda) || config.add_k.is_nan() || config.add_k < 0.0 {
            return Err(Error::invalid("lambda must lie in [0, 1] and add_k be >= 0"));
        }
        let sv = corpus.source_vocab.len();
        let tv = corpus.target_vocab.len();
        let words = tv - 1;
        if words == 0 {
            return Err(Error::invalid("target vocabulary has no words"));
        }

        let mut cooc = vec![vec![0u64; tv]; sv];
        for (src, tgt) in &corpus.pairs {
            for &s in src {
                for &w in tgt {
                    cooc[s as usize][w as usize] += 1;
                }
            }
        }
        let lexical = cooc
            .into_iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                let mut out: Vec<f64> = if total == 0 {
                    vec![1.0 / words as f64; tv]
                } else {
                    row.iter().map(|&c| c as f64 / total as f64).collect()
                };
                out[EOS as usize] = 0.0;
                out
            })
            .collect();

        let targets: Vec<&[TokenId]> = corpus.pairs.iter().map(|(_, t)| t.as_slice()).collect();
        let lm = NGramLm::estimate(&targets, config.order, config.add_k, words);

        let max_len = targets.iter().map(|t| t.len()).max().unwrap_or(0);
        let k = config.add_k;
        let eos_schedule = (0..=max_len)
            .map(|n| {
                let reach = targets.iter().filter(|t| t.len() >= n).count() as f64;
                let end = targets.iter().filter(|t| t.len() == n).count() as f64;
                if reach + 2.0 * k > 0.0 {
                    (end + k) / (reach + 2.0 * k)
                } else {
                    1.0
                }
            })
            .collect();

        let model = ToyModel {
            source_vocab: corpus.source_vocab.clone(),
            target_vocab: corpus.target_vocab.clone(),
            lexical,
            lm,
            lambda: config.lambda,
            eos_schedule,
            max_len_cap: config.max_len_cap,
        };
        model.validate()?;
        Ok(model)
    }

    /// Estimates a model from a random parallel corpus: each source word has
    /// a preferred target word, emitted with some noise.
    pub fn random<R: Rng>(
        rng: &mut R,
        source_words: usize,
        target_words: usize,
        sentences: usize,
        config: EstimateConfig,
    ) -> Result<Self> {
        let dict: Vec<TokenId> = (0..source_words)
            .map(|_| rng.random_range(1..=target_words as TokenId))
            .collect();
        let pairs = (0..sentences)
            .map(|_| {
                let len = rng.random_range(1..=4);
                let src: Vec<TokenId> = (0..len)
                    .map(|_| rng.random_range(1..=source_words as TokenId))
                    .collect();
                let mut tgt: Vec<TokenId> = src
                    .iter()
                    .filter_map(|&s| {
                        let u: f64 = rng.random();
                        if u < 0.6 {
                            Some(dict[s as usize - 1])
                        } else if u < 0.85 {
                            Some(rng.random_range(1..=target_words as TokenId))
                        } else {
                            None
                        }
                    })
                    .collect();
                if tgt.is_empty() || rng.random_bool(0.2) {
                    tgt.push(rng.random_range(1..=target_words as TokenId));
                }
                (src, tgt)
            })
            .collect();
        let corpus = ParallelCorpus::from_ids(pairs, source_words, target_words)?;
        ToyModel::estimate(&corpus, config)
    }

    pub fn source_vocab_size(&self) -> usize {
        self.source_vocab.len()
    }

    /// Longest output (EOS included) the model can produce for `source`.
    pub fn max_target_len(&self, source: &[TokenId]) -> usize {
        let natural = 2 * source.len() + 5;
        if self.max_len_cap > 0 {
            natural.min(self.max_len_cap)
        } else {
            natural
        }
    }

    pub fn source_id(&self, token: &str) -> TokenId {
        self.source_vocab
            .iter()
            .position(|t| t == token)
            .map_or(SRC_UNK, |i| i as TokenId)
    }

    pub fn target_token(&self, id: TokenId) -> &str {
        &self.target_vocab[id as usize]
    }

    pub fn validate(&self) -> Result<()> {
        let tv = self.target_vocab.len();
        if self.source_vocab.is_empty() || tv < 2 {
            return Err(Error::invalid("vocabularies too small"));
        }
        if self.lexical.len() != self.source_vocab.len() {
            return Err(Error::invalid("lexical table row count mismatch"));
        }
        for (s, row) in self.lexical.iter().enumerate() {
            if row.len() != tv {
                return Err(Error::invalid(format!("lexical row {s} has wrong width")));
            }
            let total: f64 = row.iter().sum();
            if row[EOS as usize] != 0.0 || (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("lexical row {s} is not normalized")));
            }
        }
        if self.lm.num_words != tv - 1 || !(1..=3).contains(&self.lm.order) {
            return Err(Error::invalid("LM does not match the target vocabulary"));
        }
        if !self.lm.contexts.contains_key(&Vec::new()) {
            return Err(Error::invalid("LM lacks the empty-history context"));
        }
        for h in self.lm.contexts.keys() {
            let total: f64 = self.lm.continuation(h).iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("LM context {h:?} is not normalized")));
            }
        }
        if self.eos_schedule.is_empty()
            || self.eos_schedule.iter().any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::invalid("invalid EOS schedule"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda outside [0, 1]"));
        }
        Ok(())
    }

    fn check_source(&self, source: &[TokenId]) -> Result<()> {
        if source.is_empty() {
            return Err(Error::invalid("empty source"));
        }
        if let Some(&bad) = source.iter().find(|&&s| s as usize >= self.source_vocab.len()) {
            return Err(Error::invalid(format!("source token {bad} out of vocabulary")));
        }
        Ok(())
    }

    /// Mean of the lexical rows of the source tokens.
    pub fn lexical_mixture(&self, source: &[TokenId]) -> Vec<f64> {
        let mut out = vec![0.0; self.target_vocab.len()];
        for &s in source {
            for (o, t) in out.iter_mut().zip(&self.lexical[s as usize]) {
                *o += t;
            }
        }
        let n = source.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    pub fn eos_prob(&self, source: &[TokenId], emitted: usize) -> f64 {
        if emitted + 1 >= self.max_target_len(source) {
            1.0
        } else {
            self.eos_schedule[emitted.min(self.eos_schedule.len() - 1)]
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    fn history_names(&self, h: &[TokenId]) -> Vec<&str> {
        h.iter()
            .map(|&t| if t == EOS { BOS_NAME } else { self.target_token(t) })
            .collect()
    }

    /// Plain-text serialization; floats are written in shortest round-trip
    /// form so `from_text(to_text(m)) == m` exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "toymodel 1");
        let _ = writeln!(out, "order {}", self.lm.order);
        let _ = writeln!(out, "add_k {}", self.lm.add_k);
        let _ = writeln!(out, "lambda {}", self.lambda);
        let _ = writeln!(out, "max_len_cap {}", self.max_len_cap);
        let _ = writeln!(out, "\\source_vocab {}", self.source_vocab.len());
        for t in &self.source_vocab {
            let _ = writeln!(out, "{t}");
        }
        let _ = writeln!(out, "\\target_vocab {}", self.target_vocab.len());
        for t in &self.target_vocab {
            let _ = writeln!(out, "{t}");
        }
        let _ = writeln!(out, "\\lexical");
        for (s, row) in self.source_vocab.iter().zip(&self.lexical) {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{s}\t{}", vals.join(" "));
        }
        let vals: Vec<String> = self.eos_schedule.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "\\eos_schedule\t{}", vals.join(" "));
        let _ = writeln!(out, "\\lm {}", self.lm.contexts.len());
        for (h, ctx) in &self.lm.contexts {
            let names = self.history_names(h);
            let _ = writeln!(out, "\\context\t{}\t{}", ctx.unseen_logprob, names.join(" "));
            for (&w, lp) in &ctx.seen {
                let mut gram = names.clone();
                gram.push(self.target_token(w));
                let _ = writeln!(out, "{lp}\t{}", gram.join(" "));
            }
        }
        let _ = writeln!(out, "\\end");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        ModelParser::new(text).parse()
    }
}

struct ModelParser<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> ModelParser<'a> {
    fn new(text: &'a str) -> Self {
        ModelParser {
            lines: text.lines().enumerate(),
            line: 0,
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => Err(Error::parse(self.line + 1, "unexpected end of file")),
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.line, msg)
    }

    fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let l = self.next()?;
        l.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| self.err(format!("expected `{key} <value>`")))
    }

    fn float(&self, s: &str) -> Result<f64> {
        s.parse().map_err(|_| self.err(format!("bad number `{s}`")))
    }

    fn vocab(&mut self, key: &str) -> Result<Vec<String>> {
        let n: usize = self.keyed(key)?;
        (0..n)
            .map(|_| {
                let t = self.next()?;
                if t.is_empty() || t.contains(char::is_whitespace) {
                    return Err(self.err("bad vocabulary entry"));
                }
                Ok(t.to_string())
            })
            .collect()
    }

    fn parse(mut self) -> Result<ToyModel> {
        if self.next()? != "toymodel 1" {
            return Err(self.err("missing `toymodel 1` header"));
        }
        let order: usize = self.keyed("order")?;
        let add_k: f64 = self.keyed("add_k")?;
        let lambda: f64 = self.keyed("lambda")?;
        let max_len_cap: usize = self.keyed("max_len_cap")?;
        let source_vocab = self.vocab("\\source_vocab")?;
        let target_vocab = self.vocab("\\target_vocab")?;
        if target_vocab.len() < 2 || source_vocab.is_empty() {
            return Err(self.err("vocabularies too small"));
        }
        let target_ids: HashMap<&str, TokenId> = target_vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as TokenId))
            .collect();

        if self.next()? != "\\lexical" {
            return Err(self.err("expected `\\lexical`"));
        }
        let mut lexical = Vec::with_capacity(source_vocab.len());
        for name in &source_vocab {
            let l = self.next()?;
            let (s, vals) = l.split_once('\t').ok_or_else(|| self.err("bad lexical row"))?;
            if s != name {
                return Err(self.err(format!("expected lexical row for `{name}`")));
            }
            let row = vals
                .split(' ')
                .map(|v| self.float(v))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != target_vocab.len() {
                return Err(self.err("lexical row has wrong width"));
            }
            lexical.push(row);
        }

        let l = self.next()?;
        let vals = l
            .strip_prefix("\\eos_schedule\t")
            .ok_or_else(|| self.err("expected `\\eos_schedule`"))?;
        let eos_schedule = vals
            .split(' ')
            .map(|v| self.float(v))
            .collect::<Result<Vec<f64>>>()?;

        let n_ctx: usize = self.keyed("\\lm")?;
        let mut contexts = BTreeMap::new();
        let mut pending = self.next()?;
        for _ in 0..n_ctx {
            let rest = pending
                .strip_prefix("\\context\t")
                .ok_or_else(|| self.err("expected `\\context`"))?;
            let (unseen, hist) = rest.split_once('\t').ok_or_else(|| self.err("bad context"))?;
            let unseen_logprob = self.float(unseen)?;
            let history = hist
                .split(' ')
                .filter(|t| !t.is_empty())
                .map(|t| self.history_token(t, &target_ids))
                .collect::<Result<Vec<TokenId>>>()?;
            let mut seen = BTreeMap::new();
            loop {
                pending = self.next()?;
                if pending.starts_with('\\') {
                    break;
                }
                let (lp, gram) = pending.split_once('\t').ok_or_else(|| self.err("bad n-gram line"))?;
                let lp = self.float(lp)?;
                let toks: Vec<&str> = gram.split(' ').collect();
                let (word, hist) = toks.split_last().ok_or_else(|| self.err("empty n-gram"))?;
                let hist = hist
                    .iter()
                    .map(|t| self.history_token(t, &target_ids))
                    .collect::<Result<Vec<TokenId>>>()?;
                if hist != history {
                    return Err(self.err("n-gram history does not match its context"));
                }
                let w = match target_ids.get(word) {
                    Some(&w) if w != EOS => w,
                    _ => return Err(self.err(format!("unknown word `{word}`"))),
                };
                seen.insert(w, lp);
            }
            contexts.insert(
                history,
                LmContext {
                    unseen_logprob,
                    seen,
                },
            );
        }
        if pending != "\\end" {
            return Err(self.err("expected `\\end`"));
        }

        let model = ToyModel {
            lm: NGramLm {
                order,
                add_k,
                num_words: target_vocab.len() - 1,
                contexts,
            },
            source_vocab,
            target_vocab,
            lexical,
            lambda,
            eos_schedule,
            max_len_cap,
        };
        model.validate().map_err(|e| self.err(e.to_string()))?;
        Ok(model)
    }

    fn history_token(&self, t: &str, ids: &HashMap<&str, TokenId>) -> Result<TokenId> {
        if t == BOS_NAME {
            return Ok(EOS);
        }
        match ids.get(t) {
            Some(&id) if id != EOS => Ok(id),
            _ => Err(self.err(format!("unknown history token `{t}`"))),
        }
    }
}

impl SequenceModel for ToyModel {
    type State = ToyState;

    fn target_vocab_size(&self) -> usize {
        self.target_vocab.len()
    }

    fn initial_state(&self, source: &[TokenId]) -> Result<ToyState> {
        self.check_source(source)?;
        Ok(ToyState {
            history: vec![EOS; self.lm.order - 1],
            emitted: 0,
        })
    }

    fn step(
        &self,
        source: &[TokenId],
        state: &ToyState,
        last_token: Option<TokenId>,
    ) -> Result<(StepDistribution, ToyState)> {
        self.check_source(source)?;
        let mut next = state.clone();
        if let Some(tok) = last_token {
            if tok == EOS || tok as usize >= self.target_vocab.len() {
                return Err(Error::invalid(format!("cannot continue after token {tok}")));
            }
            if !next.history.is_empty() {
                next.history.remove(0);
                next.history.push(tok);
            }
            next.emitted += 1;
        }

        let eos = self.eos_prob(source, next.emitted);
        let lex = self.lexical_mixture(source);
        let lm = self.lm.continuation(&next.history);
        let mut logprobs = Vec::with_capacity(self.target_vocab.len());
        logprobs.push(eos.ln());
        for (w, lm_p) in lm.iter().enumerate() {
            let mix = self.lambda * lex[w + 1] + (1.0 - self.lambda) * lm_p;
            logprobs.push(((1.0 - eos) * mix).ln());
        }
        Ok((StepDistribution::new(logprobs), next))
    }
}
