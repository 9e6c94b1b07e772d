//! Text side of the data pipeline: lexicon lookup, SIL insertion, phoneme
//! duration statistics and duration-based up-sampling.
//!
//! Phoneme id 0 is always `SIL`; the remaining ids follow the sorted
//! phoneme names found in the lexicon.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

pub const SIL: &str = "SIL";
pub const SIL_ID: usize = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TextError {
    #[error("empty text after normalization")]
    Empty,
    #[error("word `{0}` not in lexicon")]
    OutOfVocabulary(String),
    #[error("lexicon line {line}: {detail}")]
    LexiconFormat { line: usize, detail: String },
    #[error("SIL must not appear inside lexicon entry `{0}`")]
    SilInEntry(String),
    #[error("unknown phoneme `{0}`")]
    UnknownPhoneme(String),
    #[error("character {0:?} has no id")]
    UnknownChar(char),
    #[error("no alignments to estimate durations from")]
    NoAlignments,
    #[error("cutoff {0} outside (0, 1]")]
    Cutoff(f64),
    #[error("rate {0} outside [0, 1]")]
    Rate(f64),
    #[error("duration model line {line}: {detail}")]
    DurationFormat { line: usize, detail: String },
    #[error("phoneme id {0} has no duration distribution")]
    NoDistribution(usize),
}

/// Phoneme names with `SIL` at id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inventory {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Inventory {
    /// `SIL` followed by the given names in sorted order, deduplicated.
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        let set: BTreeSet<String> = names.into_iter().map(Into::into).filter(|n| n != SIL).collect();
        let names: Vec<String> = std::iter::once(SIL.to_string()).chain(set).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Pronunciation lexicon, one phoneme sequence per word.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<usize>>,
    inventory: Inventory,
}

impl Lexicon {
    pub fn from_entries<I, W, P>(entries: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = (W, Vec<P>)>,
        W: Into<String>,
        P: Into<String>,
    {
        let raw: Vec<(String, Vec<String>)> = entries
            .into_iter()
            .map(|(w, ps)| (w.into().to_uppercase(), ps.into_iter().map(Into::into).collect()))
            .collect();
        for (w, ps) in &raw {
            if ps.iter().any(|p| p == SIL) {
                return Err(TextError::SilInEntry(w.clone()));
            }
        }
        let inventory = Inventory::new(raw.iter().flat_map(|(_, ps)| ps.iter().cloned()));
        let entries = raw
            .into_iter()
            .map(|(w, ps)| {
                let ids = ps.iter().map(|p| inventory.id(p).expect("collected above")).collect();
                (w, ids)
            })
            .collect();
        Ok(Self { entries, inventory })
    }

    /// Parses `WORD<TAB>PH1 PH2 ...` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, TextError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, phones) = line.split_once('\t').ok_or_else(|| TextError::LexiconFormat {
                line: n + 1,
                detail: "expected WORD<TAB>PHONEMES".into(),
            })?;
            let phones: Vec<String> = phones.split_whitespace().map(str::to_string).collect();
            if word.trim().is_empty() || phones.is_empty() {
                return Err(TextError::LexiconFormat {
                    line: n + 1,
                    detail: "empty word or pronunciation".into(),
                });
            }
            entries.push((word.trim().to_string(), phones));
        }
        Self::from_entries(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (w, ids) in &self.entries {
            let phones: Vec<&str> = ids.iter().map(|&i| self.inventory.name(i).expect("valid id")).collect();
            let _ = writeln!(out, "{w}\t{}", phones.join(" "));
        }
        out
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn get(&self, word: &str) -> Option<&[usize]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }
}

/// Uppercases, turns hyphens into spaces and drops everything except
/// letters, apostrophes and whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| if c == '-' { ' ' } else { c })
        .filter(|c| c.is_alphabetic() || *c == '\'' || c.is_whitespace())
        .flat_map(char::to_uppercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// What to do with a word missing from the lexicon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OovPolicy {
    /// Fail, so the caller drops the utterance.
    #[default]
    Skip,
    /// Spell the word letter by letter using single-letter lexicon entries.
    SpellOut,
}

impl std::str::FromStr for OovPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "skip" => Ok(OovPolicy::Skip),
            "spell" => Ok(OovPolicy::SpellOut),
            other => Err(format!("unknown OOV policy `{other}` (skip | spell)")),
        }
    }
}

impl std::fmt::Display for OovPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OovPolicy::Skip => "skip",
            OovPolicy::SpellOut => "spell",
        })
    }
}

/// A phoneme sequence with word-group boundaries. `boundaries` holds the
/// index of the last phoneme of every word except the final one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemizedText {
    pub phonemes: Vec<usize>,
    pub boundaries: Vec<usize>,
}

pub fn phonemize(text: &str, lexicon: &Lexicon, policy: OovPolicy) -> Result<PhonemizedText, TextError> {
    let words = normalize(text);
    if words.is_empty() {
        return Err(TextError::Empty);
    }
    let mut phonemes = Vec::new();
    let mut boundaries = Vec::new();
    for (i, word) in words.iter().enumerate() {
        match (lexicon.get(word), policy) {
            (Some(p), _) => phonemes.extend_from_slice(p),
            (None, OovPolicy::SpellOut) => {
                for c in word.chars().filter(|c| c.is_alphabetic()) {
                    let letter = lexicon
                        .get(&c.to_string())
                        .ok_or_else(|| TextError::OutOfVocabulary(word.clone()))?;
                    phonemes.extend_from_slice(letter);
                }
            }
            (None, OovPolicy::Skip) => return Err(TextError::OutOfVocabulary(word.clone())),
        }
        if i + 1 < words.len() {
            boundaries.push(phonemes.len() - 1);
        }
    }
    Ok(PhonemizedText { phonemes, boundaries })
}

/// Adds `SIL` at both ends and at each word boundary with probability `rate`.
/// Boundaries in the result still point at the last phoneme of each word.
pub fn insert_sil<R: Rng + ?Sized>(text: &PhonemizedText, rate: f64, rng: &mut R) -> Result<PhonemizedText, TextError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(TextError::Rate(rate));
    }
    let mut out = Vec::with_capacity(text.phonemes.len() + 2 + text.boundaries.len());
    let mut boundaries = Vec::with_capacity(text.boundaries.len());
    out.push(SIL_ID);
    let mut next = text.boundaries.iter().peekable();
    for (i, &p) in text.phonemes.iter().enumerate() {
        out.push(p);
        if next.peek() == Some(&&i) {
            next.next();
            boundaries.push(out.len() - 1);
            if rng.random::<f64>() < rate {
                out.push(SIL_ID);
            }
        }
    }
    out.push(SIL_ID);
    Ok(PhonemizedText {
        phonemes: out,
        boundaries,
    })
}

/// Truncated distribution over run lengths, ascending by length.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthDistribution {
    entries: Vec<(usize, f64)>,
}

impl LengthDistribution {
    /// Builds from `(length, probability)` pairs; probabilities are
    /// renormalized unless they already sum to one.
    pub fn new(mut entries: Vec<(usize, f64)>) -> Option<Self> {
        entries.retain(|&(_, p)| p > 0.0);
        entries.sort_by_key(|&(l, _)| l);
        let total: f64 = entries.iter().map(|&(_, p)| p).sum();
        if entries.is_empty() || entries[0].0 == 0 || !total.is_finite() {
            return None;
        }
        if (total - 1.0).abs() > 1e-12 {
            entries.iter_mut().for_each(|(_, p)| *p /= total);
        }
        Some(Self { entries })
    }

    pub fn point(length: usize) -> Self {
        Self {
            entries: vec![(length, 1.0)],
        }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn probability(&self, length: usize) -> f64 {
        self.entries.iter().find(|&&(l, _)| l == length).map_or(0.0, |&(_, p)| p)
    }

    pub fn max_length(&self) -> usize {
        self.entries.last().map_or(0, |&(l, _)| l)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(l, p) in &self.entries {
            acc += p;
            if u < acc {
                return l;
            }
        }
        self.max_length()
    }
}

/// Keeps lengths in ascending order up to and including the first one at
/// which the cumulative share reaches `cutoff`, then renormalizes.
pub fn truncate_counts(counts: &BTreeMap<usize, u64>, cutoff: f64) -> Option<LengthDistribution> {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return None;
    }
    let mut kept = Vec::new();
    let mut cum = 0u64;
    for (&len, &c) in counts {
        if c == 0 {
            continue;
        }
        kept.push((len, c as f64));
        cum += c;
        if cum as f64 >= cutoff * total as f64 {
            break;
        }
    }
    LengthDistribution::new(kept)
}

/// Per-phoneme run-length distributions estimated from frame alignments.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationModel {
    per_phoneme: BTreeMap<usize, LengthDistribution>,
    pooled: LengthDistribution,
    /// Phonemes that were never observed and use the pooled distribution.
    pub fallback: BTreeSet<usize>,
}

/// Maximal runs of equal labels, as `(label, length)`.
pub fn runs(labels: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &l in labels {
        match out.last_mut() {
            Some((prev, n)) if *prev == l => *n += 1,
            _ => out.push((l, 1)),
        }
    }
    out
}

pub fn estimate_duration_model(
    alignments: &[Vec<usize>],
    inventory_size: usize,
    cutoff: f64,
) -> Result<DurationModel, TextError> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(TextError::Cutoff(cutoff));
    }
    let mut counts: BTreeMap<usize, BTreeMap<usize, u64>> = BTreeMap::new();
    let mut pooled: BTreeMap<usize, u64> = BTreeMap::new();
    for alignment in alignments {
        for (ph, len) in runs(alignment) {
            *counts.entry(ph).or_default().entry(len).or_default() += 1;
            *pooled.entry(len).or_default() += 1;
        }
    }
    let pooled = truncate_counts(&pooled, cutoff).ok_or(TextError::NoAlignments)?;
    let per_phoneme: BTreeMap<usize, LengthDistribution> = counts
        .iter()
        .filter_map(|(&ph, c)| truncate_counts(c, cutoff).map(|d| (ph, d)))
        .collect();
    let fallback = (0..inventory_size).filter(|p| !per_phoneme.contains_key(p)).collect();
    Ok(DurationModel {
        per_phoneme,
        pooled,
        fallback,
    })
}

impl DurationModel {
    pub fn from_parts(per_phoneme: BTreeMap<usize, LengthDistribution>, pooled: LengthDistribution) -> Self {
        Self {
            per_phoneme,
            pooled,
            fallback: BTreeSet::new(),
        }
    }

    /// Distribution for `phoneme` and whether the pooled fallback was used.
    pub fn distribution(&self, phoneme: usize) -> (&LengthDistribution, bool) {
        match self.per_phoneme.get(&phoneme) {
            Some(d) => (d, false),
            None => (&self.pooled, true),
        }
    }

    pub fn observed(&self) -> impl Iterator<Item = (&usize, &LengthDistribution)> {
        self.per_phoneme.iter()
    }

    pub fn pooled(&self) -> &LengthDistribution {
        &self.pooled
    }

    /// Longest retained run length over all distributions.
    pub fn max_retained_length(&self) -> usize {
        self.per_phoneme
            .values()
            .map(LengthDistribution::max_length)
            .chain(std::iter::once(self.pooled.max_length()))
            .max()
            .unwrap_or(0)
    }

    /// `PHONEME<TAB>len:prob,len:prob,...` per observed phoneme in id order,
    /// then a `<pooled>` line.
    pub fn to_text(&self, inventory: &Inventory) -> String {
        let fmt = |d: &LengthDistribution| {
            d.entries.iter().map(|(l, p)| format!("{l}:{p}")).collect::<Vec<_>>().join(",")
        };
        let mut out = String::new();
        for (&ph, d) in &self.per_phoneme {
            let name = inventory.name(ph).map(str::to_string).unwrap_or_else(|| format!("#{ph}"));
            let _ = writeln!(out, "{name}\t{}", fmt(d));
        }
        let _ = writeln!(out, "<pooled>\t{}", fmt(&self.pooled));
        out
    }

    pub fn parse(text: &str, inventory: &Inventory) -> Result<Self, TextError> {
        let mut per_phoneme = BTreeMap::new();
        let mut pooled = None;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |detail: &str| TextError::DurationFormat {
                line: n + 1,
                detail: detail.to_string(),
            };
            let (name, body) = line.split_once('\t').ok_or_else(|| err("expected PHONEME<TAB>pairs"))?;
            let mut entries = Vec::new();
            for pair in body.split(',') {
                let (l, p) = pair.split_once(':').ok_or_else(|| err("expected length:prob"))?;
                let l: usize = l.trim().parse().map_err(|_| err("bad length"))?;
                let p: f64 = p.trim().parse().map_err(|_| err("bad probability"))?;
                entries.push((l, p));
            }
            let dist = LengthDistribution::new(entries).ok_or_else(|| err("empty or zero-length distribution"))?;
            if name == "<pooled>" {
                pooled = Some(dist);
            } else {
                let id = inventory.id(name).ok_or_else(|| TextError::UnknownPhoneme(name.to_string()))?;
                per_phoneme.insert(id, dist);
            }
        }
        let pooled = pooled.ok_or(TextError::DurationFormat {
            line: 0,
            detail: "missing <pooled> line".into(),
        })?;
        let fallback = (0..inventory.len()).filter(|p| !per_phoneme.contains_key(p)).collect();
        Ok(Self {
            per_phoneme,
            pooled,
            fallback,
        })
    }
}

/// Frame-level phoneme sequence with the spans each source token covers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpsampledText {
    pub frames: Vec<usize>,
    /// Frame index after which each word ends (excluding the last word).
    pub word_boundaries: Vec<usize>,
    pub source: Vec<usize>,
    /// `(start, end)` frame range per source token, end exclusive.
    pub spans: Vec<(usize, usize)>,
    /// Source positions whose length came from the pooled fallback.
    pub fallback_positions: Vec<usize>,
}

impl UpsampledText {
    /// Rebuilds the source token sequence from spans.
    pub fn source_from_spans(&self) -> Vec<usize> {
        self.spans.iter().map(|&(s, _)| self.frames[s]).collect()
    }
}

/// Repeats every token by a length drawn from its duration distribution.
pub fn upsample<R: Rng + ?Sized>(text: &PhonemizedText, model: &DurationModel, rng: &mut R) -> UpsampledText {
    let mut frames = Vec::new();
    let mut spans = Vec::with_capacity(text.phonemes.len());
    let mut fallback_positions = Vec::new();
    for (i, &p) in text.phonemes.iter().enumerate() {
        let (dist, fallback) = model.distribution(p);
        if fallback {
            fallback_positions.push(i);
        }
        let n = dist.sample(rng);
        let start = frames.len();
        frames.extend(std::iter::repeat_n(p, n));
        spans.push((start, frames.len()));
    }
    let word_boundaries = text.boundaries.iter().map(|&b| spans[b].1 - 1).collect();
    UpsampledText {
        frames,
        word_boundaries,
        source: text.phonemes.clone(),
        spans,
        fallback_positions,
    }
}

/// Character ids for CTC targets. Id 0 is the blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
}

impl Default for CharVocab {
    fn default() -> Self {
        let mut chars = vec![' '];
        chars.extend('A'..='Z');
        chars.push('\'');
        Self { chars }
    }
}

impl CharVocab {
    pub const BLANK: usize = 0;

    /// Characters excluding the blank.
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + 1)
    }

    /// Encodes normalized words joined by single spaces.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, TextError> {
        normalize(text)
            .join(" ")
            .chars()
            .map(|c| self.id(c).ok_or(TextError::UnknownChar(c)))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != Self::BLANK)
            .filter_map(|&i| self.chars.get(i - 1))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn lex() -> Lexicon {
        Lexicon::parse("A\tAH\nTHE\tDH AH\nCAT\tK AE T\nC\tS IY\nT\tT IY\n").unwrap()
    }

    fn ids(l: &Lexicon, names: &[&str]) -> Vec<usize> {
        names.iter().map(|n| l.inventory().id(n).unwrap()).collect()
    }

    #[test]
    fn inventory_reserves_sil() {
        let l = lex();
        assert_eq!(l.inventory().id(SIL), Some(SIL_ID));
        assert_eq!(l.inventory().name(0), Some("SIL"));
        assert!(Lexicon::parse("X\tSIL AH\n").is_err());
        assert!(Lexicon::parse("X AH\n").is_err());
    }

    #[test]
    fn lexicon_text_round_trip() {
        let l = lex();
        assert_eq!(Lexicon::parse(&l.to_text()).unwrap(), l);
    }

    #[test]
    fn phonemize_examples() {
        let l = lex();
        let one = phonemize("A", &l, OovPolicy::Skip).unwrap();
        assert_eq!(one.phonemes, ids(&l, &["AH"]));
        assert!(one.boundaries.is_empty());
        let two = phonemize("the cat.", &l, OovPolicy::Skip).unwrap();
        assert_eq!(two.phonemes, ids(&l, &["DH", "AH", "K", "AE", "T"]));
        assert_eq!(two.boundaries, vec![1]);
        assert_eq!(phonemize("", &l, OovPolicy::Skip), Err(TextError::Empty));
        assert_eq!(phonemize("?!", &l, OovPolicy::Skip), Err(TextError::Empty));
    }

    #[test]
    fn oov_policies() {
        let l = lex();
        assert_eq!(
            phonemize("the ct", &l, OovPolicy::Skip),
            Err(TextError::OutOfVocabulary("CT".into()))
        );
        let spelled = phonemize("the ct", &l, OovPolicy::SpellOut).unwrap();
        assert_eq!(spelled.phonemes, ids(&l, &["DH", "AH", "S", "IY", "T", "IY"]));
        assert!(phonemize("the dog", &l, OovPolicy::SpellOut).is_err());
    }

    #[test]
    fn sil_at_rate_zero_and_one() {
        let l = lex();
        let text = phonemize("THE CAT", &l, OovPolicy::Skip).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = insert_sil(&text, 0.0, &mut rng).unwrap();
        assert_eq!(none.phonemes, ids(&l, &["SIL", "DH", "AH", "K", "AE", "T", "SIL"]));
        let all = insert_sil(&text, 1.0, &mut rng).unwrap();
        assert_eq!(all.phonemes, ids(&l, &["SIL", "DH", "AH", "SIL", "K", "AE", "T", "SIL"]));
        assert_eq!(all.boundaries, vec![2]);
        assert!(insert_sil(&text, 1.5, &mut rng).is_err());
    }

    #[test]
    fn truncation_rule_worked_example() {
        let counts: BTreeMap<usize, u64> = [(1, 50), (2, 30), (3, 15), (4, 4), (5, 1)].into();
        let d = truncate_counts(&counts, 0.98).unwrap();
        let expected = [(1, 50.0 / 99.0), (2, 30.0 / 99.0), (3, 15.0 / 99.0), (4, 4.0 / 99.0)];
        assert_eq!(d.entries().len(), 4);
        for ((l, p), (el, ep)) in d.entries().iter().zip(expected) {
            assert_eq!(*l, el);
            assert!((p - ep).abs() < 1e-12);
        }
        assert!((d.probability(1) - 0.50505).abs() < 1e-5);
        assert!((d.probability(4) - 0.04040).abs() < 1e-5);
        let single: BTreeMap<usize, u64> = [(3, 100)].into();
        assert_eq!(truncate_counts(&single, 0.98).unwrap().entries(), &[(3, 1.0)]);
        let full = truncate_counts(&counts, 1.0).unwrap();
        assert_eq!(full.entries().len(), 5);
        assert!((full.probability(5) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn estimate_from_alignments_with_fallback() {
        // phoneme 1 runs: 2, 2, 3 ; SIL runs: 1, 4 ; phoneme 2 unseen
        let al = vec![vec![0, 1, 1, 0, 0, 0, 0], vec![1, 1, 1, 1, 1]];
        let al = {
            let mut a = al;
            a[1] = vec![1, 1, 1, 0, 1, 1];
            a
        };
        let m = estimate_duration_model(&al, 3, 1.0).unwrap();
        let (d1, fb) = m.distribution(1);
        assert!(!fb);
        assert!((d1.probability(2) - 2.0 / 3.0).abs() < 1e-12);
        assert!((d1.probability(3) - 1.0 / 3.0).abs() < 1e-12);
        let (_, fb2) = m.distribution(2);
        assert!(fb2);
        assert!(m.fallback.contains(&2));
        for (_, d) in m.observed() {
            let s: f64 = d.entries().iter().map(|e| e.1).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(estimate_duration_model(&[], 3, 0.98).is_err());
        assert!(estimate_duration_model(&al, 3, 0.0).is_err());
    }

    #[test]
    fn duration_file_round_trip() {
        let l = lex();
        let al = vec![vec![0, 0, 1, 1, 1, 2, 0], vec![3, 3, 0]];
        let m = estimate_duration_model(&al, l.inventory().len(), 0.98).unwrap();
        let text = m.to_text(l.inventory());
        let back = DurationModel::parse(&text, l.inventory()).unwrap();
        assert_eq!(back.to_text(l.inventory()), text);
        for (p, d) in m.observed() {
            assert_eq!(back.distribution(*p).0, d);
        }
    }

    #[test]
    fn upsample_identity_and_doubling() {
        let ones = DurationModel::from_parts(BTreeMap::new(), LengthDistribution::point(1));
        let twos = DurationModel::from_parts(BTreeMap::new(), LengthDistribution::point(2));
        let text = PhonemizedText {
            phonemes: vec![3, 5],
            boundaries: vec![0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(upsample(&text, &ones, &mut rng).frames, vec![3, 5]);
        let up = upsample(&text, &twos, &mut rng);
        assert_eq!(up.frames, vec![3, 3, 5, 5]);
        assert_eq!(up.spans, vec![(0, 2), (2, 4)]);
        assert_eq!(up.word_boundaries, vec![1]);
    }

    #[test]
    fn spans_recover_source_even_with_equal_neighbours() {
        let mut per = BTreeMap::new();
        per.insert(0, LengthDistribution::new(vec![(1, 0.5), (3, 0.5)]).unwrap());
        per.insert(4, LengthDistribution::new(vec![(2, 0.2), (5, 0.8)]).unwrap());
        let m = DurationModel::from_parts(per, LengthDistribution::point(2));
        let text = PhonemizedText {
            phonemes: vec![0, 4, 4, 0, 7, 0],
            boundaries: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let up = upsample(&text, &m, &mut rng);
            assert_eq!(up.source_from_spans(), text.phonemes);
            let mut cursor = 0;
            for (i, &(s, e)) in up.spans.iter().enumerate() {
                assert_eq!(s, cursor);
                assert!(e > s);
                assert!(m.distribution(text.phonemes[i]).0.probability(e - s) > 0.0);
                cursor = e;
            }
            assert_eq!(cursor, up.frames.len());
            assert_eq!(up.fallback_positions, vec![4]);
        }
    }

    #[test]
    fn char_vocab_round_trip() {
        let v = CharVocab::default();
        assert_eq!(v.len(), 28);
        let ids = v.encode("the cat's").unwrap();
        assert!(!ids.contains(&CharVocab::BLANK));
        assert_eq!(v.decode(&ids), "THE CAT'S");
        assert_eq!(v.encode("naïve"), Err(TextError::UnknownChar('Ï')));
    }
}
