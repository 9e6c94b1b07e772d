//! Paired speech/text data: forced alignments and representation swapping.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::compute::{ComputeError, Graph, NodeId, Tensor};
use crate::masking::Mask;
use crate::textpipe::Inventory;

pub const DEFAULT_SWAP_PROBABILITY: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PairedError {
    #[error("alignment has no spans")]
    Empty,
    #[error("span {index} is empty ({start}..{end})")]
    EmptySpan { index: usize, start: usize, end: usize },
    #[error("span {index} starts at {start}, expected {expected}")]
    Gap { index: usize, start: usize, expected: usize },
    #[error("alignment line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error("unknown phoneme `{0}`")]
    UnknownPhoneme(String),
    #[error("swap probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Compute(#[from] ComputeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub phoneme: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Contiguous phoneme spans covering `[0, frames)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    spans: Vec<Span>,
}

impl Alignment {
    pub fn new(spans: Vec<Span>) -> Result<Self, PairedError> {
        if spans.is_empty() {
            return Err(PairedError::Empty);
        }
        let mut expected = 0;
        for (index, s) in spans.iter().enumerate() {
            if s.start != expected {
                return Err(PairedError::Gap {
                    index,
                    start: s.start,
                    expected,
                });
            }
            if s.is_empty() {
                return Err(PairedError::EmptySpan {
                    index,
                    start: s.start,
                    end: s.end,
                });
            }
            expected = s.end;
        }
        Ok(Self { spans })
    }

    /// Spans from maximal runs of a frame-level label sequence.
    pub fn from_frames(frames: &[usize]) -> Result<Self, PairedError> {
        let mut spans: Vec<Span> = Vec::new();
        for (t, &p) in frames.iter().enumerate() {
            match spans.last_mut() {
                Some(s) if s.phoneme == p => s.end = t + 1,
                _ => spans.push(Span {
                    phoneme: p,
                    start: t,
                    end: t + 1,
                }),
            }
        }
        Self::new(spans)
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn frames(&self) -> usize {
        self.spans.last().map_or(0, |s| s.end)
    }
}

pub fn frame_phonemes(alignment: &Alignment) -> Vec<usize> {
    alignment
        .spans
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.phoneme, s.len()))
        .collect()
}

/// Parses `utt<TAB>PHONEME<TAB>start<TAB>end` lines, grouped by utterance.
pub fn parse_alignments(text: &str, inventory: &Inventory) -> Result<BTreeMap<String, Alignment>, PairedError> {
    let mut raw: BTreeMap<String, Vec<Span>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: &str| PairedError::Format {
            line: n + 1,
            detail: detail.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err("expected 4 tab-separated fields"));
        }
        let phoneme = inventory
            .id(fields[1])
            .ok_or_else(|| PairedError::UnknownPhoneme(fields[1].to_string()))?;
        let start = fields[2].parse().map_err(|_| err("bad start frame"))?;
        let end = fields[3].parse().map_err(|_| err("bad end frame"))?;
        raw.entry(fields[0].to_string()).or_default().push(Span { phoneme, start, end });
    }
    raw.into_iter().map(|(utt, spans)| Ok((utt, Alignment::new(spans)?))).collect()
}

pub fn write_alignments<'a>(
    alignments: impl IntoIterator<Item = (&'a String, &'a Alignment)>,
    inventory: &Inventory,
) -> String {
    let mut out = String::new();
    for (utt, a) in alignments {
        for s in &a.spans {
            let name = inventory.name(s.phoneme).unwrap_or("?");
            let _ = writeln!(out, "{utt}\t{name}\t{}\t{}", s.start, s.end);
        }
    }
    out
}

/// Which spans get text representations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwapPlan {
    pub selected: Vec<usize>,
    /// Per frame: true when the frame comes from the text side.
    pub from_text: Vec<bool>,
}

impl SwapPlan {
    pub fn none(frames: usize) -> Self {
        Self {
            selected: Vec::new(),
            from_text: vec![false; frames],
        }
    }

    pub fn swapped_frames(&self) -> usize {
        self.from_text.iter().filter(|&&b| b).count()
    }
}

/// Selects each span lying entirely in unmasked frames with probability `p`.
pub fn plan_swap<R: Rng + ?Sized>(
    alignment: &Alignment,
    mask: &Mask,
    p: f64,
    rng: &mut R,
) -> Result<SwapPlan, PairedError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(PairedError::Probability(p));
    }
    if mask.len() != alignment.frames() {
        return Err(PairedError::Shape(format!(
            "mask covers {} frames, alignment {}",
            mask.len(),
            alignment.frames()
        )));
    }
    let mut plan = SwapPlan::none(alignment.frames());
    for (i, s) in alignment.spans.iter().enumerate() {
        if (s.start..s.end).any(|t| mask.is_masked(t)) {
            continue;
        }
        if rng.random::<f64>() < p {
            plan.selected.push(i);
            plan.from_text[s.start..s.end].iter_mut().for_each(|f| *f = true);
        }
    }
    Ok(plan)
}

fn check_pair(speech: &Tensor, text: &Tensor, plan: &SwapPlan) -> Result<(), PairedError> {
    if speech.shape() != text.shape() || speech.rows() != plan.from_text.len() {
        return Err(PairedError::Shape(format!(
            "speech {:?}, text {:?}, plan {} frames",
            speech.shape(),
            text.shape(),
            plan.from_text.len()
        )));
    }
    Ok(())
}

/// Copies text rows into the speech representation where the plan says so.
pub fn swap_representations(speech: &Tensor, text: &Tensor, plan: &SwapPlan) -> Result<Tensor, PairedError> {
    check_pair(speech, text, plan)?;
    let mut out = speech.clone();
    for (t, _) in plan.from_text.iter().enumerate().filter(|(_, &b)| b) {
        out.row_mut(t).copy_from_slice(text.row(t));
    }
    Ok(out)
}

/// Graph version of [`swap_representations`]; gradients flow to both sides.
pub fn swap_nodes(g: &mut Graph, speech: NodeId, text: NodeId, plan: &SwapPlan) -> Result<NodeId, PairedError> {
    check_pair(g.value(speech), g.value(text), plan)?;
    Ok(g.select_rows(speech, text, plan.from_text.clone())?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn span(phoneme: usize, start: usize, end: usize) -> Span {
        Span { phoneme, start, end }
    }

    #[test]
    fn frame_expansion() {
        assert_eq!(frame_phonemes(&Alignment::new(vec![span(4, 0, 3)]).unwrap()), vec![4, 4, 4]);
        let a = Alignment::new(vec![span(2, 0, 1), span(1, 1, 3)]).unwrap();
        assert_eq!(frame_phonemes(&a), vec![2, 1, 1]);
        assert_eq!(Alignment::from_frames(&[2, 1, 1]).unwrap(), a);
        assert!(matches!(
            Alignment::new(vec![span(2, 0, 1), span(1, 2, 3)]),
            Err(PairedError::Gap { .. })
        ));
        assert!(Alignment::new(vec![span(2, 0, 0)]).is_err());
        assert!(Alignment::new(vec![]).is_err());
    }

    #[test]
    fn alignment_file_round_trip() {
        let inv = Inventory::new(["AH", "K"]);
        let text = "u1\tK\t0\t2\nu1\tAH\t2\t5\nu2\tSIL\t0\t1\n";
        let parsed = parse_alignments(text, &inv).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(write_alignments(&parsed, &inv), text);
        assert!(parse_alignments("u1\tK\t0\t2\nu1\tAH\t3\t5\n", &inv).is_err());
        assert!(parse_alignments("u1\tZZ\t0\t2\n", &inv).is_err());
    }

    #[test]
    fn plan_extremes() {
        let a = Alignment::new(vec![span(1, 0, 2), span(2, 2, 5), span(3, 5, 6)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = plan_swap(&a, &Mask::empty(6), 0.0, &mut rng).unwrap();
        assert!(none.selected.is_empty());
        let all = plan_swap(&a, &Mask::empty(6), 1.0, &mut rng).unwrap();
        assert_eq!(all.selected, vec![0, 1, 2]);
        assert!(all.from_text.iter().all(|&b| b));
        assert!(plan_swap(&a, &Mask::empty(6), 1.1, &mut rng).is_err());
    }

    #[test]
    fn spans_touching_mask_never_selected() {
        let a = Alignment::new(vec![span(1, 0, 2), span(2, 2, 5), span(3, 5, 6)]).unwrap();
        let mask = Mask::from_indices(6, &[4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hits = [0usize; 3];
        for _ in 0..10_000 {
            let plan = plan_swap(&a, &mask, 0.5, &mut rng).unwrap();
            plan.selected.iter().for_each(|&i| hits[i] += 1);
            assert!(!plan.from_text[4]);
        }
        assert_eq!(hits[1], 0);
        assert!(hits[0] > 4500 && hits[2] > 4500);
    }

    #[test]
    fn swap_rows() {
        let speech = Tensor::from_rows(&(0..5).map(|i| vec![i as f64, 0.5]).collect::<Vec<_>>()).unwrap();
        let text = speech.map(|v| -v - 1.0);
        let a = Alignment::new(vec![span(1, 0, 2), span(2, 2, 4), span(3, 4, 5)]).unwrap();
        assert_eq!(swap_representations(&speech, &text, &SwapPlan::none(5)).unwrap(), speech);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let full = plan_swap(&a, &Mask::empty(5), 1.0, &mut rng).unwrap();
        assert_eq!(swap_representations(&speech, &text, &full).unwrap(), text);
        let mut plan = SwapPlan::none(5);
        plan.selected = vec![1];
        plan.from_text[2] = true;
        plan.from_text[3] = true;
        let out = swap_representations(&speech, &text, &plan).unwrap();
        for t in 0..5 {
            let src = if t == 2 || t == 3 { &text } else { &speech };
            assert_eq!(out.row(t), src.row(t));
        }
        let twice = swap_representations(&out, &text, &plan).unwrap();
        assert_eq!(twice, out);

        let mut g = Graph::new();
        let s = g.input("s", speech.clone()).unwrap();
        let x = g.input("t", text.clone()).unwrap();
        let node = swap_nodes(&mut g, s, x, &plan).unwrap();
        assert_eq!(g.value(node), &out);
        assert!(swap_representations(&speech, &Tensor::zeros(&[4, 2]), &plan).is_err());
    }
}
