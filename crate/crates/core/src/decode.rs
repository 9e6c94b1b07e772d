//! CTC decoding, character n-gram language model and word error rate.
//!
//! Log-probability tables are `[T, vocab]` with column 0 the blank and
//! columns `1..vocab` the character ids of [`CharVocab`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::compute::{ctc, Tensor};
use crate::textpipe::CharVocab;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("n-gram order must be at least 1")]
    Order,
    #[error("smoothing constant must be positive, got {0}")]
    Smoothing(f64),
    #[error("language model corpus is empty")]
    EmptyCorpus,
    #[error("token {token} outside vocabulary of {vocab}")]
    Token { token: usize, vocab: usize },
    #[error("beam must be at least 1")]
    Beam,
    #[error("reference is empty")]
    EmptyReference,
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}

const BLANK: usize = 0;

fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-frame argmax, repeats collapsed, blanks dropped.
pub fn greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for t in 0..log_probs.rows() {
        let k = argmax(log_probs.row(t));
        if k != BLANK && k != prev {
            out.push(k);
        }
        prev = k;
    }
    out
}

/// Character n-gram model with add-k smoothing interpolated toward the next
/// lower order. Token 0 stands for `<s>` and `vocab + 1` for `</s>`; ids
/// `1..=vocab` are characters.
#[derive(Clone, Debug, PartialEq)]
pub struct NGramLM {
    order: usize,
    vocab: usize,
    k: f64,
    /// Natural-log probabilities keyed by `context ++ [token]`.
    probs: BTreeMap<Vec<usize>, f64>,
    /// Natural-log backoff weights of observed contexts.
    backoff: BTreeMap<Vec<usize>, f64>,
}

impl NGramLM {
    pub const BOS: usize = 0;

    pub fn eos(&self) -> usize {
        self.vocab + 1
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Trains on character-id sentences.
    pub fn train(corpus: &[Vec<usize>], vocab: usize, order: usize, k: f64) -> Result<Self, DecodeError> {
        if order == 0 {
            return Err(DecodeError::Order);
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(DecodeError::Smoothing(k));
        }
        if corpus.is_empty() {
            return Err(DecodeError::EmptyCorpus);
        }
        let eos = vocab + 1;
        // counts[j] maps a length-j context to its continuation counts.
        let mut counts: Vec<HashMap<Vec<usize>, BTreeMap<usize, u64>>> = vec![HashMap::new(); order];
        for sentence in corpus {
            if let Some(&token) = sentence.iter().find(|&&t| t == 0 || t > vocab) {
                return Err(DecodeError::Token { token, vocab });
            }
            let mut padded = vec![Self::BOS; order - 1];
            padded.extend_from_slice(sentence);
            padded.push(eos);
            for i in order - 1..padded.len() {
                for (j, table) in counts.iter_mut().enumerate() {
                    let ctx = padded[i - j..i].to_vec();
                    *table.entry(ctx).or_default().entry(padded[i]).or_default() += 1;
                }
            }
        }
        let mut lm = Self {
            order,
            vocab,
            k,
            probs: BTreeMap::new(),
            backoff: BTreeMap::new(),
        };
        let outcomes = (vocab + 1) as f64;
        for (j, table) in counts.iter().enumerate() {
            let mut contexts: Vec<&Vec<usize>> = table.keys().collect();
            contexts.sort();
            let mut new_probs = Vec::new();
            for ctx in contexts {
                let next = &table[ctx];
                let total: u64 = next.values().sum();
                let denom = total as f64 + k * outcomes;
                if j == 0 {
                    for w in 1..=eos {
                        let c = next.get(&w).copied().unwrap_or(0) as f64;
                        new_probs.push((vec![w], ((c + k) / denom).ln()));
                    }
                    continue;
                }
                for (&w, &c) in next {
                    let lower = lm.log_prob_context(&ctx[1..], w).exp();
                    let mut key = ctx.clone();
                    key.push(w);
                    new_probs.push((key, ((c as f64 + k * outcomes * lower) / denom).ln()));
                }
                lm.backoff.insert(ctx.clone(), (k * outcomes / denom).ln());
            }
            lm.probs.extend(new_probs);
        }
        Ok(lm)
    }

    /// `ln p(token | context)` where `context` already has the right length
    /// or less.
    fn log_prob_context(&self, context: &[usize], token: usize) -> f64 {
        let mut acc = 0.0;
        let mut ctx = context;
        loop {
            let mut key = ctx.to_vec();
            key.push(token);
            if let Some(&p) = self.probs.get(&key) {
                return acc + p;
            }
            if ctx.is_empty() {
                return f64::NEG_INFINITY;
            }
            acc += self.backoff.get(ctx).copied().unwrap_or(0.0);
            ctx = &ctx[1..];
        }
    }

    /// `ln p(token | history)`, padding the history with `<s>`.
    pub fn log_prob(&self, history: &[usize], token: usize) -> f64 {
        let n = self.order - 1;
        let mut ctx = vec![Self::BOS; n.saturating_sub(history.len())];
        ctx.extend_from_slice(&history[history.len().saturating_sub(n)..]);
        self.log_prob_context(&ctx, token)
    }

    /// Log-probability of the characters without the end marker.
    pub fn prefix_log_prob(&self, tokens: &[usize]) -> f64 {
        (0..tokens.len()).map(|i| self.log_prob(&tokens[..i], tokens[i])).sum()
    }

    /// Log-probability of a full sentence including `</s>`.
    pub fn sentence_log_prob(&self, tokens: &[usize]) -> f64 {
        self.prefix_log_prob(tokens) + self.log_prob(tokens, self.eos())
    }

    /// Per-token perplexity over a corpus, counting `</s>`.
    pub fn perplexity(&self, corpus: &[Vec<usize>]) -> f64 {
        let tokens: usize = corpus.iter().map(|s| s.len() + 1).sum();
        let lp: f64 = corpus.iter().map(|s| self.sentence_log_prob(s)).sum();
        (-lp / tokens as f64).exp()
    }

    fn token_name(&self, chars: &CharVocab, t: usize) -> String {
        match t {
            Self::BOS => "<s>".into(),
            t if t == self.eos() => "</s>".into(),
            t => match chars.decode(&[t]).as_str() {
                " " => "<sp>".into(),
                s => s.into(),
            },
        }
    }

    fn parse_token(name: &str, chars: &CharVocab, vocab: usize) -> Option<usize> {
        match name {
            "<s>" => Some(Self::BOS),
            "</s>" => Some(vocab + 1),
            "<sp>" => chars.id(' '),
            s => {
                let mut it = s.chars();
                let c = it.next()?;
                it.next().is_none().then(|| chars.id(c)).flatten()
            }
        }
    }

    /// ARPA-like text form:
    ///
    /// ```text
    /// \data\
    /// order <n>
    /// vocab <V>
    /// k <k>
    /// ngram <j>=<count>        one line per order
    ///
    /// \<j>-grams:
    /// <ln p><TAB><tokens><TAB><ln backoff>    backoff column optional
    /// \end\
    /// ```
    ///
    /// Tokens are single characters separated by spaces, with `<sp>` for
    /// the space character and `<s>`, `</s>` for the sentence markers.
    pub fn to_text(&self, chars: &CharVocab) -> String {
        let mut by_order: Vec<Vec<(&Vec<usize>, f64)>> = vec![Vec::new(); self.order];
        for (key, &p) in &self.probs {
            by_order[key.len() - 1].push((key, p));
        }
        let mut out = format!("\\data\\\norder {}\nvocab {}\nk {}\n", self.order, self.vocab, self.k);
        for (j, entries) in by_order.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", j + 1, entries.len());
        }
        for (j, entries) in by_order.iter().enumerate() {
            let _ = write!(out, "\n\\{}-grams:\n", j + 1);
            for (key, p) in entries {
                let names: Vec<String> = key.iter().map(|&t| self.token_name(chars, t)).collect();
                let _ = write!(out, "{p}\t{}", names.join(" "));
                if let Some(b) = self.backoff.get(*key) {
                    let _ = write!(out, "\t{b}");
                }
                out.push('\n');
            }
        }
        // Contexts ending in <s> never appear as n-grams; list them apart.
        let starts: Vec<_> = self.backoff.iter().filter(|(k, _)| k.last() == Some(&Self::BOS)).collect();
        if !starts.is_empty() {
            out.push_str("\n\\contexts:\n");
            for (key, b) in starts {
                let names: Vec<String> = key.iter().map(|&t| self.token_name(chars, t)).collect();
                let _ = writeln!(out, "{b}\t{}", names.join(" "));
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn parse(text: &str, chars: &CharVocab) -> Result<Self, DecodeError> {
        let err = |line: usize, msg: &str| DecodeError::Format { line, msg: msg.into() };
        let mut order = None;
        let mut vocab = None;
        let mut k = None;
        let mut section = "";
        let mut probs = BTreeMap::new();
        let mut backoff = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim_end();
            if l.is_empty() {
                continue;
            }
            if l.starts_with('\\') {
                section = l;
                continue;
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(line, "bad number"));
            if section == "\\data\\" {
                let (key, value) = l.split_once(' ').ok_or_else(|| err(line, "expected `key value`"))?;
                match key {
                    "order" => order = Some(value.parse::<usize>().map_err(|_| err(line, "bad order"))?),
                    "vocab" => vocab = Some(value.parse::<usize>().map_err(|_| err(line, "bad vocab"))?),
                    "k" => k = Some(num(value)?),
                    "ngram" => {}
                    _ => return Err(err(line, "unknown header key")),
                }
                continue;
            }
            let v = vocab.ok_or_else(|| err(line, "vocab missing from header"))?;
            let cols: Vec<&str> = l.split('\t').collect();
            let tokens = |s: &str| {
                s.split(' ')
                    .map(|t| Self::parse_token(t, chars, v).ok_or_else(|| err(line, "unknown token")))
                    .collect::<Result<Vec<usize>, _>>()
            };
            if section == "\\contexts:" {
                if cols.len() != 2 {
                    return Err(err(line, "expected two columns"));
                }
                backoff.insert(tokens(cols[1])?, num(cols[0])?);
                continue;
            }
            if !(2..=3).contains(&cols.len()) {
                return Err(err(line, "expected two or three columns"));
            }
            let key = tokens(cols[1])?;
            probs.insert(key.clone(), num(cols[0])?);
            if let Some(b) = cols.get(2) {
                backoff.insert(key, num(b)?);
            }
        }
        let order = order.ok_or_else(|| err(0, "order missing"))?;
        if order == 0 {
            return Err(DecodeError::Order);
        }
        Ok(Self {
            order,
            vocab: vocab.ok_or_else(|| err(0, "vocab missing"))?,
            k: k.ok_or_else(|| err(0, "k missing"))?,
            probs,
            backoff,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Language-model weight.
    pub w1: f64,
    /// Per-character length bonus.
    pub w2: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 16, w1: 0.0, w2: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// `ctc + w1 * lm + w2 * len`.
    pub score: f64,
    pub ctc: f64,
    /// Sentence log-probability including `</s>`; 0 without a model.
    pub lm: f64,
}

/// Fused score of one complete hypothesis.
pub fn score_hypothesis(log_probs: &Tensor, lm: Option<&NGramLM>, cfg: &DecodeConfig, tokens: &[usize]) -> Hypothesis {
    let ctc = ctc::log_likelihood(log_probs, tokens, BLANK);
    let lm_score = lm.map_or(0.0, |m| m.sentence_log_prob(tokens));
    Hypothesis {
        tokens: tokens.to_vec(),
        score: fuse(ctc, lm_score, tokens.len(), lm.is_some(), cfg),
        ctc,
        lm: lm_score,
    }
}

fn fuse(ctc: f64, lm: f64, len: usize, with_lm: bool, cfg: &DecodeConfig) -> f64 {
    let lm_term = if with_lm && cfg.w1 != 0.0 { cfg.w1 * lm } else { 0.0 };
    ctc + lm_term + cfg.w2 * len as f64
}

/// Higher score first; equal scores go to the lexicographically smaller
/// token sequence.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

#[derive(Clone, Copy)]
struct Beam {
    blank: f64,
    non_blank: f64,
    lm: f64,
}

impl Beam {
    fn total(&self) -> f64 {
        lse(self.blank, self.non_blank)
    }
}

/// CTC prefix beam search with shallow fusion.
pub fn beam_decode(log_probs: &Tensor, lm: Option<&NGramLM>, cfg: &DecodeConfig) -> Result<Hypothesis, DecodeError> {
    if cfg.beam == 0 {
        return Err(DecodeError::Beam);
    }
    let vocab = log_probs.cols();
    if let Some(m) = lm {
        if m.vocab() + 1 != vocab {
            return Err(DecodeError::Token { token: vocab, vocab: m.vocab() + 1 });
        }
    }
    let ninf = f64::NEG_INFINITY;
    let lm_step = |prefix: &[usize], c: usize| lm.map_or(0.0, |m| m.log_prob(prefix, c));
    let mut beams: BTreeMap<Vec<usize>, Beam> = BTreeMap::new();
    beams.insert(
        Vec::new(),
        Beam {
            blank: 0.0,
            non_blank: ninf,
            lm: 0.0,
        },
    );
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut next: BTreeMap<Vec<usize>, Beam> = BTreeMap::new();
        for (prefix, beam) in &beams {
            let total = beam.total();
            let entry = next.entry(prefix.clone()).or_insert(Beam {
                blank: ninf,
                non_blank: ninf,
                lm: beam.lm,
            });
            entry.blank = lse(entry.blank, total + row[BLANK]);
            let last = prefix.last().copied();
            if let Some(c) = last {
                entry.non_blank = lse(entry.non_blank, beam.non_blank + row[c]);
            }
            for (c, &p) in row.iter().enumerate().skip(1) {
                let mut extended = prefix.clone();
                extended.push(c);
                let from = if Some(c) == last { beam.blank } else { total };
                let e = next.entry(extended).or_insert_with(|| Beam {
                    blank: ninf,
                    non_blank: ninf,
                    lm: beam.lm + lm_step(prefix, c),
                });
                e.non_blank = lse(e.non_blank, from + p);
            }
        }
        let mut ranked: Vec<(Vec<usize>, Beam)> = next.into_iter().filter(|(_, b)| b.total() > ninf).collect();
        let score = |p: &[usize], b: &Beam| fuse(b.total(), b.lm, p.len(), lm.is_some(), cfg);
        ranked.sort_by(|(pa, ba), (pb, bb)| rank((score(pa, ba), pa), (score(pb, bb), pb)));
        ranked.truncate(cfg.beam);
        beams = ranked.into_iter().collect();
    }
    let mut finals: Vec<Hypothesis> = beams
        .iter()
        .map(|(p, b)| {
            let lm_score = lm.map_or(0.0, |m| b.lm + m.log_prob(p, m.eos()));
            Hypothesis {
                tokens: p.clone(),
                score: fuse(b.total(), lm_score, p.len(), lm.is_some(), cfg),
                ctc: b.total(),
                lm: lm_score,
            }
        })
        .collect();
    finals.sort_by(|a, b| rank((a.score, &a.tokens), (b.score, &b.tokens)));
    Ok(finals.swap_remove(0))
}

/// Best complete hypothesis by enumerating every label sequence of length
/// at most `T` over `vocab - 1` characters. Only for tiny instances.
pub fn exhaustive_decode(log_probs: &Tensor, lm: Option<&NGramLM>, cfg: &DecodeConfig) -> Hypothesis {
    let chars = log_probs.cols() - 1;
    let mut best = score_hypothesis(log_probs, lm, cfg, &[]);
    let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
    while let Some(seq) = stack.pop() {
        if seq.len() == log_probs.rows() {
            continue;
        }
        for c in 1..=chars {
            let mut s = seq.clone();
            s.push(c);
            let h = score_hypothesis(log_probs, lm, cfg, &s);
            if rank((h.score, &h.tokens), (best.score, &best.tokens)) == Ordering::Less {
                best = h;
            }
            stack.push(s);
        }
    }
    best
}

/// Levenshtein distance between two sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word edit distance divided by reference length.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64, DecodeError> {
    if reference.is_empty() {
        return Err(DecodeError::EmptyReference);
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Total word edits over total reference words.
pub fn corpus_wer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<f64, DecodeError> {
    let (mut edits, mut words) = (0, 0);
    for (hyp, reference) in pairs {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        edits += edit_distance(&h, &r);
        words += r.len();
    }
    if words == 0 {
        return Err(DecodeError::EmptyReference);
    }
    Ok(edits as f64 / words as f64)
}

/// `utt<TAB>hypothesis` lines.
pub fn write_hypotheses<'a>(items: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    items.into_iter().map(|(u, h)| format!("{u}\t{h}\n")).collect()
}

pub fn parse_hypotheses(text: &str) -> Result<BTreeMap<String, String>, DecodeError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (u, h) = line.split_once('\t').ok_or(DecodeError::Format {
            line: i + 1,
            msg: "expected `utt<TAB>text`".into(),
        })?;
        out.insert(u.to_string(), h.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(rows: &[&[f64]]) -> Tensor {
        let data = rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect::<Vec<Vec<f64>>>();
        Tensor::from_rows(&data).unwrap()
    }

    #[test]
    fn greedy_collapses_and_drops_blanks() {
        let a = [0.1, 0.8, 0.1];
        let b = [0.1, 0.1, 0.8];
        let blank = [0.8, 0.1, 0.1];
        assert_eq!(greedy_decode(&lp(&[&a, &a, &blank, &b])), vec![1, 2]);
        assert_eq!(greedy_decode(&lp(&[&blank, &blank])), Vec::<usize>::new());
        assert_eq!(greedy_decode(&lp(&[&a, &blank, &a])), vec![1, 1]);
    }

    #[test]
    fn unigram_on_single_char_corpus() {
        let lm = NGramLM::train(&[vec![1, 1, 1, 1]], 3, 1, 0.01).unwrap();
        let p = lm.log_prob(&[], 1).exp();
        assert!((p - 4.01 / 5.04).abs() < 1e-12);
        assert!(lm.log_prob(&[1], 3).exp() > 0.0);
        assert_eq!(NGramLM::train(&[vec![1]], 3, 0, 0.1), Err(DecodeError::Order));
        assert!(NGramLM::train(&[], 3, 2, 0.1).is_err());
        assert!(NGramLM::train(&[vec![1]], 3, 2, 0.0).is_err());
    }

    fn contexts(alphabet: usize, len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for _ in 0..len {
            out = out
                .into_iter()
                .flat_map(|c| {
                    (0..=alphabet).map(move |t| {
                        let mut c = c.clone();
                        c.push(t);
                        c
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn conditionals_sum_to_one_by_enumeration() {
        let corpus = vec![vec![1, 2, 1], vec![2, 2], vec![1, 3, 3, 1], vec![3]];
        for order in 1..=3 {
            let lm = NGramLM::train(&corpus, 3, order, 0.1).unwrap();
            for ctx in contexts(3, order - 1) {
                let total: f64 = (1..=lm.eos()).map(|w| lm.log_prob_context(&ctx, w).exp()).sum();
                assert!(total <= 1.0 + 1e-6 && total > 1.0 - 1e-9, "order {order} ctx {ctx:?} sum {total}");
            }
        }
    }

    #[test]
    fn training_perplexity_beats_uniform() {
        let corpus = vec![vec![1, 2, 1, 2], vec![1, 2], vec![2, 1, 2, 1, 2]];
        let lm = NGramLM::train(&corpus, 4, 3, 0.1).unwrap();
        let uniform = (lm.vocab() + 1) as f64;
        assert!(lm.perplexity(&corpus) < uniform);
    }

    #[test]
    fn lm_text_round_trip() {
        let chars = CharVocab::default();
        let corpus: Vec<Vec<usize>> = ["THE CAT", "A CAT'S HAT", "THAT"].iter().map(|s| chars.encode(s).unwrap()).collect();
        let lm = NGramLM::train(&corpus, chars.len(), 3, 0.1).unwrap();
        let text = lm.to_text(&chars);
        let back = NGramLM::parse(&text, &chars).unwrap();
        assert_eq!(back, lm);
        assert!(text.contains("<sp>"));
        assert!(NGramLM::parse("\\data\\\norder x\n", &chars).is_err());
    }

    /// All sequences of length ≤ T over `chars` characters.
    fn all_sequences(chars: usize, t: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        let mut frontier = vec![Vec::new()];
        for _ in 0..t {
            let mut next = Vec::new();
            for s in &frontier {
                for c in 1..=chars {
                    let mut s2: Vec<usize> = s.clone();
                    s2.push(c);
                    next.push(s2);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    /// Path-sum CTC probability by enumerating every frame labelling.
    fn path_prob(probs: &[Vec<f64>], target: &[usize]) -> f64 {
        let v = probs[0].len();
        let t = probs.len();
        let mut total = 0.0;
        for code in 0..v.pow(t as u32) {
            let mut path = Vec::with_capacity(t);
            let mut c = code;
            for _ in 0..t {
                path.push(c % v);
                c /= v;
            }
            if crate::losses::collapse(&path) == target {
                total += path.iter().enumerate().map(|(i, &k)| probs[i][k]).product::<f64>();
            }
        }
        total
    }

    #[test]
    fn wide_beam_matches_exhaustive_search() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cfg = DecodeConfig { beam: 1000, w1: 0.0, w2: 0.0 };
        for _ in 0..40 {
            let t = rng.random_range(1..=4);
            let probs: Vec<Vec<f64>> = (0..t)
                .map(|_| {
                    let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|x| x / s).collect()
                })
                .collect();
            let table = Tensor::from_rows(&probs.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect::<Vec<_>>()).unwrap();
            let mut best: (f64, Vec<usize>) = (-1.0, Vec::new());
            for s in all_sequences(2, t) {
                let p = path_prob(&probs, &s);
                if p > best.0 + 1e-12 || ((p - best.0).abs() <= 1e-12 && s < best.1) {
                    best = (p, s);
                }
            }
            let got = beam_decode(&table, None, &cfg).unwrap();
            assert!((got.score.exp() - best.0).abs() < 1e-9);
            assert_eq!(got.tokens, best.1);
            assert_eq!(exhaustive_decode(&table, None, &cfg).tokens, best.1);
        }
    }

    #[test]
    fn length_bonus_favours_longer_hypotheses() {
        let table = lp(&[&[0.5, 0.5, 0.0], &[0.5, 0.0, 0.5]]);
        let plain = beam_decode(&table, None, &DecodeConfig { beam: 10, w1: 0.0, w2: 0.0 }).unwrap();
        assert_eq!(plain.tokens, Vec::<usize>::new());
        let long = beam_decode(&table, None, &DecodeConfig { beam: 10, w1: 0.0, w2: 1.0 }).unwrap();
        assert_eq!(long.tokens, vec![1, 2]);
    }

    #[test]
    fn beam_one_follows_greedy_without_merges() {
        let table = lp(&[&[0.1, 0.7, 0.2], &[0.6, 0.3, 0.1], &[0.2, 0.1, 0.7]]);
        let got = beam_decode(&table, None, &DecodeConfig { beam: 1, w1: 0.0, w2: 0.0 }).unwrap();
        assert_eq!(got.tokens, greedy_decode(&table));
    }

    #[test]
    fn lm_fusion_score_matches_rescoring() {
        let lm = NGramLM::train(&[vec![1, 2], vec![2, 2, 1]], 2, 2, 0.5).unwrap();
        let table = lp(&[&[0.2, 0.5, 0.3], &[0.4, 0.2, 0.4], &[0.3, 0.3, 0.4]]);
        let cfg = DecodeConfig { beam: 1000, w1: 0.7, w2: 0.3 };
        let got = beam_decode(&table, Some(&lm), &cfg).unwrap();
        let rescored = score_hypothesis(&table, Some(&lm), &cfg, &got.tokens);
        assert!((got.score - rescored.score).abs() < 1e-9);
        let best = exhaustive_decode(&table, Some(&lm), &cfg);
        assert_eq!(got.tokens, best.tokens);
    }

    #[test]
    fn wer_examples() {
        let r = ["A", "B", "C", "D"];
        assert_eq!(wer(&r, &r).unwrap(), 0.0);
        assert_eq!(wer(&["A", "X", "C", "D"], &r).unwrap(), 0.25);
        assert_eq!(wer::<&str>(&[], &r).unwrap(), 1.0);
        assert_eq!(wer(&["A"], &[]), Err(DecodeError::EmptyReference));
        assert_eq!(corpus_wer([("A B", "A B C"), ("X", "Y")]).unwrap(), 0.5);
    }

    #[test]
    fn hypothesis_file_round_trip() {
        let text = write_hypotheses([("u1", "THE CAT"), ("u2", "")]);
        let back = parse_hypotheses(&text).unwrap();
        assert_eq!(back["u1"], "THE CAT");
        assert_eq!(back["u2"], "");
    }
}
