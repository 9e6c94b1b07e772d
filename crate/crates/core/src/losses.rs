//! Training objectives built as graph nodes: masked codeword prediction,
//! masked phoneme prediction, character CTC and the cross-entropy alignment
//! alternative.
//!
//! Every loss returns a [`LossTerm`]; a loss with no contributing positions
//! is the constant 0 with count 0.

use thiserror::Error;

use crate::compute::{ComputeError, Graph, NodeId, Tensor};
use crate::masking::Mask;

/// CTC blank id.
pub const BLANK: usize = 0;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("brute-force CTC limited to T <= 8 and vocab <= 4, got T={frames} vocab={vocab}")]
    TooLarge { frames: usize, vocab: usize },
}

/// A scalar loss node and the number of positions that contributed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerm {
    pub node: NodeId,
    pub count: usize,
}

fn zero(g: &mut Graph) -> LossTerm {
    LossTerm {
        node: g.constant(Tensor::scalar(0.0)),
        count: 0,
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), LossError> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(LossError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Mean of `-log_probs[t, labels[t]]` over `positions`.
fn masked_nll(g: &mut Graph, log_probs: NodeId, labels: &[usize], positions: &[usize]) -> Result<LossTerm, LossError> {
    if positions.is_empty() {
        return Ok(zero(g));
    }
    let rows = g.gather_rows(log_probs, positions)?;
    let cols: Vec<usize> = positions.iter().map(|&t| labels[t]).collect();
    let picked = g.pick(rows, &cols)?;
    let total = g.sum(picked)?;
    let node = g.scale(total, -1.0 / positions.len() as f64)?;
    Ok(LossTerm {
        node,
        count: positions.len(),
    })
}

fn check_mask(mask: &Mask, frames: usize) -> Result<(), LossError> {
    if mask.len() != frames {
        return Err(LossError::LengthMismatch {
            left: mask.len(),
            right: frames,
        });
    }
    Ok(())
}

/// Scales every row to unit length.
pub fn normalize_rows(g: &mut Graph, x: NodeId) -> Result<NodeId, ComputeError> {
    let sq = g.mul(x, x)?;
    let norm2 = g.sum_rows(sq)?;
    let eps = g.constant(Tensor::matrix(1, 1, vec![NORM_EPS])?);
    let norm2 = g.add(norm2, eps)?;
    let norm = g.sqrt(norm2)?;
    g.div(x, norm)
}

/// `cos(h W, e_c) / τ` for every frame and codeword, shape `[T, C]`.
pub fn codeword_logits(
    g: &mut Graph,
    h: NodeId,
    projection: NodeId,
    codewords: NodeId,
    temperature: f64,
) -> Result<NodeId, LossError> {
    if !(temperature > 0.0) {
        return Err(LossError::Temperature(temperature));
    }
    let projected = g.matmul(h, projection)?;
    let a = normalize_rows(g, projected)?;
    let e = normalize_rows(g, codewords)?;
    let cos = g.matmul_nt(a, e)?;
    Ok(g.scale(cos, 1.0 / temperature)?)
}

#[derive(Clone, Copy, Debug)]
pub struct HubertOutput {
    pub term: LossTerm,
    /// Per-frame log-probabilities over codewords, `[T, C]`.
    pub log_probs: NodeId,
}

/// Masked codeword prediction on shared-encoder states `h` (`[T, d]`).
pub fn hubert_loss(
    g: &mut Graph,
    h: NodeId,
    projection: NodeId,
    codewords: NodeId,
    temperature: f64,
    labels: &[usize],
    mask: &Mask,
) -> Result<HubertOutput, LossError> {
    let frames = g.value(h).rows();
    if labels.len() != frames {
        return Err(LossError::LengthMismatch {
            left: labels.len(),
            right: frames,
        });
    }
    check_mask(mask, frames)?;
    check_labels(labels, g.value(codewords).rows())?;
    let logits = codeword_logits(g, h, projection, codewords, temperature)?;
    let log_probs = g.log_softmax(logits)?;
    let term = masked_nll(g, log_probs, labels, &mask.indices())?;
    Ok(HubertOutput { term, log_probs })
}

/// Cross-entropy of phoneme `logits` (`[T, V]`) at masked positions only.
pub fn mlm_loss(g: &mut Graph, logits: NodeId, targets: &[usize], mask: &Mask) -> Result<LossTerm, LossError> {
    let frames = g.value(logits).rows();
    if targets.len() != frames {
        return Err(LossError::LengthMismatch {
            left: targets.len(),
            right: frames,
        });
    }
    check_mask(mask, frames)?;
    check_labels(targets, g.value(logits).cols())?;
    let log_probs = g.log_softmax(logits)?;
    masked_nll(g, log_probs, targets, &mask.indices())
}

/// Same as [`mlm_loss`] over an explicit position list.
pub fn mlm_loss_at(g: &mut Graph, logits: NodeId, targets: &[usize], positions: &[usize]) -> Result<LossTerm, LossError> {
    check_labels(targets, g.value(logits).cols())?;
    let log_probs = g.log_softmax(logits)?;
    masked_nll(g, log_probs, targets, positions)
}

/// CTC negative log-likelihood of `target` given unnormalized `logits`
/// (`[T, vocab]`, blank at 0). Infeasible targets give `+inf` with zero
/// gradient.
pub fn ctc_loss(g: &mut Graph, logits: NodeId, target: &[usize]) -> Result<LossTerm, LossError> {
    let vocab = g.value(logits).cols();
    check_labels(target, vocab)?;
    if let Some(&label) = target.iter().find(|&&c| c == BLANK) {
        return Err(LossError::LabelOutOfRange { label, classes: vocab });
    }
    let log_probs = g.log_softmax(logits)?;
    let node = g.ctc(log_probs, target.to_vec(), BLANK)?;
    Ok(LossTerm { node, count: 1 })
}

/// Whether `target` fits into `frames` CTC frames.
pub fn ctc_feasible(target: &[usize], frames: usize) -> bool {
    crate::compute::ctc::min_frames(target) <= frames
}

/// CTC negative log-likelihood by explicit enumeration of every path.
/// `probs` holds per-frame probabilities; returns `+inf` when no path
/// collapses to `target`.
pub fn ctc_brute_force(probs: &Tensor, target: &[usize]) -> Result<f64, LossError> {
    let (frames, vocab) = (probs.rows(), probs.cols());
    if frames > 8 || vocab > 4 {
        return Err(LossError::TooLarge { frames, vocab });
    }
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    let paths = vocab.pow(frames as u32);
    for code in 0..paths {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % vocab;
            c /= vocab;
        }
        if collapse(&path) == target {
            total += path.iter().enumerate().map(|(t, &k)| probs.get(t, k)).product::<f64>();
        }
    }
    Ok(if total > 0.0 { -total.ln() } else { f64::INFINITY })
}

/// Merges repeats, then drops blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Cross-entropy between softmax-normalized text states (target) and
/// speech states at the listed frames, averaged over frames.
pub fn ce_alignment_loss(g: &mut Graph, h_speech: NodeId, h_text: NodeId, unmasked: &[usize]) -> Result<LossTerm, LossError> {
    let (ts, tt) = (g.value(h_speech).rows(), g.value(h_text).rows());
    if ts != tt {
        return Err(LossError::LengthMismatch { left: ts, right: tt });
    }
    if unmasked.is_empty() {
        return Ok(zero(g));
    }
    let s = g.gather_rows(h_speech, unmasked)?;
    let t = g.gather_rows(h_text, unmasked)?;
    let target = g.softmax(t)?;
    let log_q = g.log_softmax(s)?;
    let prod = g.mul(target, log_q)?;
    let total = g.sum(prod)?;
    let node = g.scale(total, -1.0 / unmasked.len() as f64)?;
    Ok(LossTerm {
        node,
        count: unmasked.len(),
    })
}

/// Loss values of one step. `None` means the objective was not computed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub hubert: Option<f64>,
    pub mlm: Option<f64>,
    pub ctc: Option<f64>,
    pub alignment: Option<f64>,
    pub hubert_count: usize,
    pub mlm_count: usize,
    pub ctc_count: usize,
    pub alignment_count: usize,
}

impl LossBundle {
    pub fn total(&self) -> f64 {
        [self.hubert, self.mlm, self.ctc, self.alignment].iter().flatten().sum()
    }

    pub fn is_finite(&self) -> bool {
        [self.hubert, self.mlm, self.ctc, self.alignment]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::compute::{finite_diff_check, Tensor};

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    fn eye(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        (0..n).for_each(|i| d[i * n + i] = 1.0);
        Tensor::matrix(n, n, d).unwrap()
    }

    #[test]
    fn single_codeword_gives_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let h = g.input("h", rand_matrix(&mut rng, 4, 3)).unwrap();
        let w = g.input("w", rand_matrix(&mut rng, 3, 2)).unwrap();
        let e = g.input("e", rand_matrix(&mut rng, 1, 2)).unwrap();
        let out = hubert_loss(&mut g, h, w, e, 0.1, &[0; 4], &Mask::full(4)).unwrap();
        assert!(g.value(out.term.node).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn cosine_gap_one_closed_form() {
        // projected frame (1, 0); codewords (1, 0) and (0, 1): cosines 1 and 0
        let mut g = Graph::new();
        let h = g.input("h", Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let w = g.input("w", eye(2)).unwrap();
        let e = g.input("e", eye(2)).unwrap();
        let out = hubert_loss(&mut g, h, w, e, 0.1, &[0], &Mask::full(1)).unwrap();
        let p = g.value(out.log_probs).get(0, 0).exp();
        let expected = 10f64.exp() / (10f64.exp() + 1.0);
        assert!((p - expected).abs() < 1e-9);
        assert!((p - 0.9999546).abs() < 1e-7);
        assert!((g.value(out.term.node).item().unwrap() - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn empty_mask_contributes_nothing() {
        let mut g = Graph::new();
        let h = g.input("h", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let w = g.input("w", eye(2)).unwrap();
        let e = g.input("e", eye(2)).unwrap();
        let out = hubert_loss(&mut g, h, w, e, 0.1, &[0, 1], &Mask::empty(2)).unwrap();
        assert_eq!(out.term.count, 0);
        assert_eq!(g.value(out.term.node).item().unwrap(), 0.0);
        assert!(hubert_loss(&mut g, h, w, e, 0.1, &[0, 2], &Mask::full(2)).is_err());
    }

    #[test]
    fn codeword_probabilities_sum_to_one_and_ignore_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hv = rand_matrix(&mut rng, 6, 4);
        let wv = rand_matrix(&mut rng, 4, 3);
        let ev = rand_matrix(&mut rng, 5, 3);
        let labels = [0, 1, 2, 3, 4, 0];
        let mask = Mask::from_indices(6, &[1, 2, 5]).unwrap();
        let run = |ev: Tensor| {
            let mut g = Graph::new();
            let h = g.input("h", hv.clone()).unwrap();
            let w = g.input("w", wv.clone()).unwrap();
            let e = g.input("e", ev).unwrap();
            let out = hubert_loss(&mut g, h, w, e, 0.1, &labels, &mask).unwrap();
            for row in g.value(out.log_probs).to_rows() {
                let s: f64 = row.iter().map(|v| v.exp()).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
            g.value(out.term.node).item().unwrap()
        };
        let base = run(ev.clone());
        let mut scaled = ev.clone();
        scaled.row_mut(2).iter_mut().for_each(|v| *v *= 7.5);
        assert!((run(scaled) - base).abs() < 1e-10);
    }

    #[test]
    fn mlm_uniform_and_confident() {
        let mut g = Graph::new();
        let logits = g.input("l", Tensor::zeros(&[3, 5])).unwrap();
        let t = mlm_loss(&mut g, logits, &[1, 2, 3], &Mask::full(3)).unwrap();
        assert!((g.value(t.node).item().unwrap() - 5f64.ln()).abs() < 1e-12);
        let mut data = vec![0.0; 15];
        data[1] = 50.0;
        data[5 + 2] = 50.0;
        data[10 + 3] = 50.0;
        let sharp = g.input("s", Tensor::matrix(3, 5, data).unwrap()).unwrap();
        let t = mlm_loss(&mut g, sharp, &[1, 2, 3], &Mask::full(3)).unwrap();
        assert!(g.value(t.node).item().unwrap() < 1e-15);
        assert!(mlm_loss(&mut g, sharp, &[1, 2, 5], &Mask::full(3)).is_err());
    }

    #[test]
    fn mlm_only_reads_masked_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lv = rand_matrix(&mut rng, 5, 4);
        let targets = [0, 1, 2, 3, 1];
        let mut g = Graph::new();
        let l = g.input("l", lv.clone().with_grad()).unwrap();
        let masked = mlm_loss(&mut g, l, &targets, &Mask::from_indices(5, &[1, 3]).unwrap()).unwrap();
        let wider = mlm_loss_at(&mut g, l, &targets, &[0, 1, 3]).unwrap();
        // direct recomputation
        let nll = |t: usize| {
            let row = lv.row(t);
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[targets[t]]
        };
        assert!((g.value(masked.node).item().unwrap() - (nll(1) + nll(3)) / 2.0).abs() < 1e-12);
        assert!((g.value(masked.node).item().unwrap() - g.value(wider.node).item().unwrap()).abs() > 1e-6);
        let grads = g.backward(masked.node).unwrap();
        let gl = grads.get(l).unwrap();
        for t in [0, 2, 4] {
            assert!(gl.row(t).iter().all(|&v| v == 0.0));
        }
    }

    fn log_tensor(p: &Tensor) -> Tensor {
        p.map(f64::ln)
    }

    #[test]
    fn ctc_worked_examples() {
        let mut g = Graph::new();
        // T=1, vocab {blank, a}: p(a) = 0.6
        let l1 = g.input("a", log_tensor(&Tensor::matrix(1, 2, vec![0.4, 0.6]).unwrap())).unwrap();
        let t = ctc_loss(&mut g, l1, &[1]).unwrap();
        assert!((g.value(t.node).item().unwrap() + 0.6f64.ln()).abs() < 1e-12);
        let l2 = g.input("b", Tensor::zeros(&[2, 2])).unwrap();
        let t = ctc_loss(&mut g, l2, &[1]).unwrap();
        assert!((g.value(t.node).item().unwrap() + 0.75f64.ln()).abs() < 1e-12);
        let l3 = g.input("c", Tensor::matrix(2, 2, vec![60.0, 0.0, 60.0, 0.0]).unwrap()).unwrap();
        let t = ctc_loss(&mut g, l3, &[]).unwrap();
        assert!(g.value(t.node).item().unwrap() < 1e-20);
        let t = ctc_loss(&mut g, l3, &[1, 1]).unwrap();
        assert!(g.value(t.node).item().unwrap().is_infinite());
        assert!(!ctc_feasible(&[1, 1], 2));
        assert!(ctc_feasible(&[1, 1], 3));
    }

    #[test]
    fn brute_force_matches_forward_algorithm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for frames in 1..=4 {
            let logits = rand_matrix(&mut rng, frames, 3);
            let mut g = Graph::new();
            let l = g.input("l", logits).unwrap();
            let lp = g.log_softmax(l).unwrap();
            let probs = g.value(lp).map(f64::exp);
            for target in [vec![], vec![1], vec![2, 1], vec![1, 1], vec![1, 2, 1]] {
                let bf = ctc_brute_force(&probs, &target).unwrap();
                let t = ctc_loss(&mut g, l, &target).unwrap();
                let v = g.value(t.node).item().unwrap();
                if bf.is_infinite() {
                    assert!(v.is_infinite());
                } else {
                    assert!((bf - v).abs() < 1e-9, "T={frames} {target:?}: {bf} vs {v}");
                }
            }
        }
        assert!(ctc_brute_force(&Tensor::zeros(&[9, 2]), &[]).is_err());
        let p = Tensor::matrix(1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        assert!((ctc_brute_force(&p, &[2]).unwrap() + 0.3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_alignment_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = rand_matrix(&mut rng, 4, 3);
        let b = rand_matrix(&mut rng, 4, 3);
        let mut g = Graph::new();
        let na = g.input("a", a.clone()).unwrap();
        let nb = g.input("b", b).unwrap();
        let same = ce_alignment_loss(&mut g, na, na, &[0, 1, 2, 3]).unwrap();
        let entropy: f64 = a
            .to_rows()
            .iter()
            .map(|r| {
                let z: f64 = r.iter().map(|v| v.exp()).sum();
                -r.iter().map(|v| (v.exp() / z) * (v - z.ln())).sum::<f64>()
            })
            .sum::<f64>()
            / 4.0;
        assert!((g.value(same.node).item().unwrap() - entropy).abs() < 1e-12);
        let ab = ce_alignment_loss(&mut g, na, nb, &[0, 2]).unwrap();
        let ba = ce_alignment_loss(&mut g, nb, na, &[0, 2]).unwrap();
        assert!((g.value(ab.node).item().unwrap() - g.value(ba.node).item().unwrap()).abs() > 1e-6);
        let none = ce_alignment_loss(&mut g, na, nb, &[]).unwrap();
        assert_eq!((g.value(none.node).item().unwrap(), none.count), (0.0, 0));
        let short = g.input("c", Tensor::zeros(&[3, 3])).unwrap();
        assert!(ce_alignment_loss(&mut g, na, short, &[0]).is_err());
    }

    #[test]
    fn losses_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mask = Mask::from_indices(5, &[0, 2, 3]).unwrap();

        let mut g = Graph::new();
        let h = g.input("h", rand_matrix(&mut rng, 5, 4).with_grad()).unwrap();
        let w = g.input("w", rand_matrix(&mut rng, 4, 3).with_grad()).unwrap();
        let e = g.input("e", rand_matrix(&mut rng, 3, 3).with_grad()).unwrap();
        let out = hubert_loss(&mut g, h, w, e, 0.5, &[0, 1, 2, 1, 0], &mask).unwrap();
        assert!(finite_diff_check(&mut g, out.term.node, 1e-4, 1e-3).unwrap().passed());

        let mut g = Graph::new();
        let l = g.input("l", rand_matrix(&mut rng, 5, 4).with_grad()).unwrap();
        let t = mlm_loss(&mut g, l, &[3, 1, 2, 0, 1], &mask).unwrap();
        assert!(finite_diff_check(&mut g, t.node, 1e-4, 1e-3).unwrap().passed());

        let mut g = Graph::new();
        let l = g.input("l", rand_matrix(&mut rng, 6, 4).with_grad()).unwrap();
        let t = ctc_loss(&mut g, l, &[1, 3, 3]).unwrap();
        assert!(finite_diff_check(&mut g, t.node, 1e-4, 1e-3).unwrap().passed());

        let mut g = Graph::new();
        let s = g.input("s", rand_matrix(&mut rng, 5, 3).with_grad()).unwrap();
        let x = g.input("t", rand_matrix(&mut rng, 5, 3).with_grad()).unwrap();
        let t = ce_alignment_loss(&mut g, s, x, &[1, 4]).unwrap();
        assert!(finite_diff_check(&mut g, t.node, 1e-4, 1e-3).unwrap().passed());
    }
}
