//! Log-space CTC forward-backward recursions.
//!
//! Labels are extended with blanks as `[b, y1, b, y2, ..., yL, b]`. Both
//! recursions include the emission at their own frame, so the occupancy of
//! state `s` at frame `t` is `alpha + beta - emission`.

use super::Tensor;

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

/// Fewest frames able to emit `target`: one per label plus one blank
/// between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub(crate) fn validate(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<(), String> {
    if log_probs.rank() != 2 {
        return Err(format!("ctc needs [T, vocab] log-probabilities, got {:?}", log_probs.shape()));
    }
    let vocab = log_probs.cols();
    if blank >= vocab {
        return Err(format!("blank {blank} outside vocabulary of {vocab}"));
    }
    if let Some(&bad) = target.iter().find(|&&y| y >= vocab || y == blank) {
        return Err(format!("target label {bad} is blank or outside vocabulary of {vocab}"));
    }
    Ok(())
}

fn alphas(lp: &Tensor, ext: &[usize]) -> Vec<f64> {
    let (t_len, s_len) = (lp.rows(), ext.len());
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[0] = lp.get(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp.get(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if s >= 2 && ext[s] != ext[0] && ext[s] != ext[s - 2] {
                a = lse2(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == f64::NEG_INFINITY {
                a
            } else {
                a + lp.get(t, ext[s])
            };
        }
    }
    alpha
}

fn betas(lp: &Tensor, ext: &[usize]) -> Vec<f64> {
    let (t_len, s_len) = (lp.rows(), ext.len());
    let mut beta = vec![f64::NEG_INFINITY; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp.get(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp.get(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = lse2(b, next[s + 1]);
            }
            if s + 2 < s_len && ext[s] != ext[0] && ext[s + 2] != ext[s] {
                b = lse2(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == f64::NEG_INFINITY {
                b
            } else {
                b + lp.get(t, ext[s])
            };
        }
    }
    beta
}

/// `log p(target | log_probs)`; `-inf` when no alignment exists.
pub fn log_likelihood(log_probs: &Tensor, target: &[usize], blank: usize) -> f64 {
    let ext = extended(target, blank);
    let s_len = ext.len();
    let t_len = log_probs.rows();
    let alpha = alphas(log_probs, &ext);
    let end = &alpha[(t_len - 1) * s_len..];
    if s_len > 1 {
        lse2(end[s_len - 1], end[s_len - 2])
    } else {
        end[0]
    }
}

/// Negative log-likelihood; `+inf` for infeasible targets.
pub fn neg_log_likelihood(log_probs: &Tensor, target: &[usize], blank: usize) -> f64 {
    -log_likelihood(log_probs, target, blank)
}

/// NLL and its gradient with respect to every log-probability entry.
/// Infeasible targets give `+inf` with a zero gradient.
pub fn neg_log_likelihood_grad(log_probs: &Tensor, target: &[usize], blank: usize) -> (f64, Vec<f64>) {
    let ext = extended(target, blank);
    let (t_len, s_len, vocab) = (log_probs.rows(), ext.len(), log_probs.cols());
    let alpha = alphas(log_probs, &ext);
    let beta = betas(log_probs, &ext);
    let end = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len > 1 {
        lse2(end[s_len - 1], end[s_len - 2])
    } else {
        end[0]
    };
    let mut grad = vec![0.0; t_len * vocab];
    if log_p == f64::NEG_INFINITY {
        return (f64::INFINITY, grad);
    }
    let mut occupancy = vec![f64::NEG_INFINITY; vocab];
    for t in 0..t_len {
        occupancy.iter_mut().for_each(|o| *o = f64::NEG_INFINITY);
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            let k = ext[s];
            occupancy[k] = lse2(occupancy[k], a + b - log_probs.get(t, k));
        }
        for k in 0..vocab {
            if occupancy[k] > f64::NEG_INFINITY {
                grad[t * vocab + k] = -(occupancy[k] - log_p).exp();
            }
        }
    }
    (-log_p, grad)
}

/// Posterior state occupancy summed per frame; each row sums to one for a
/// feasible target. Exposed for tests.
pub fn frame_posteriors(log_probs: &Tensor, target: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let (_, grad) = neg_log_likelihood_grad(log_probs, target, blank);
    grad.chunks(log_probs.cols()).map(|r| r.iter().map(|g| -g).collect()).collect()
}
