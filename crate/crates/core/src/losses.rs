//! The five training objectives: two L1 mel losses, the log-duration L2
//! loss, the CTC recognizer loss, and the guided-attention loss.

use crate::alignment::{AlignmentMatrix, Durations};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Per-term and total loss values for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1_ar: f64,
    pub l1_ff: f64,
    pub l2_dur: f64,
    pub ctc: f64,
    pub guided: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 5] {
        [self.l1_ar, self.l1_ff, self.l2_dur, self.ctc, self.guided]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

/// Scaling constant for each loss term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1_ar: f64,
    pub l1_ff: f64,
    pub l2_dur: f64,
    pub ctc: f64,
    pub guided: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1_ar: 1.0, l1_ff: 1.0, l2_dur: 1.0, ctc: 1.0, guided: 1.0 }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.l1_ar, self.l1_ff, self.l2_dur, self.ctc, self.guided]
    }

    /// Only the duration term switched on.
    pub fn duration_only() -> Self {
        LossWeights { l1_ar: 0.0, l1_ff: 0.0, l2_dur: 1.0, ctc: 0.0, guided: 0.0 }
    }
}

/// Combines the five terms into a breakdown with a weighted total.
pub fn total_loss(parts: [f64; 5], weights: &LossWeights) -> LossBreakdown {
    let total = parts.iter().zip(weights.as_array()).map(|(p, w)| p * w).sum();
    LossBreakdown {
        l1_ar: parts[0],
        l1_ff: parts[1],
        l2_dur: parts[2],
        ctc: parts[3],
        guided: parts[4],
        total,
    }
}

/// Diagonal penalty `W[t,n] = 1 − exp(−(n/N − t/T)² / 2σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidedAttentionMask {
    weights: Tensor,
    sigma: f64,
}

impl GuidedAttentionMask {
    pub fn new(frames: usize, phonemes: usize, sigma: f64) -> Result<Self> {
        if frames == 0 || phonemes == 0 {
            return Err(Error::arg("guided-attention mask needs positive extents"));
        }
        if !(sigma > 0.0) {
            return Err(Error::arg(format!("guided-attention sigma {sigma} must be positive")));
        }
        let mut data = Vec::with_capacity(frames * phonemes);
        for t in 0..frames {
            for n in 0..phonemes {
                let gap = n as f64 / phonemes as f64 - t as f64 / frames as f64;
                data.push(1.0 - (-gap * gap / (2.0 * sigma * sigma)).exp());
            }
        }
        Ok(GuidedAttentionMask { weights: Tensor::from_parts(vec![frames, phonemes], data), sigma })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Mean absolute error over every element of two equal-shape mel matrices.
pub fn l1_mel(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    if y.shape() != y_hat.shape() {
        return Err(Error::shape(format!("mel {:?} vs {:?}", y.shape(), y_hat.shape())));
    }
    let s: f64 = y.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / y.numel() as f64)
}

pub fn l1_mel_var(tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var> {
    tape.mean_abs_diff(y_hat, y)
}

/// Log-domain duration target `ln(d + 1)`.
pub fn log_duration_target(d: &Durations) -> Tensor {
    Tensor::vector(d.as_slice().iter().map(|&v| (v as f64 + 1.0).ln()).collect())
}

/// Mean squared error between predicted log-durations and `ln(d_ref + 1)`
/// over the phonemes not marked in `pad_mask`.
pub fn l2_log_duration(d_ref: &Durations, d_pred_log: &[f64], pad_mask: &[bool]) -> Result<f64> {
    if d_ref.len() != d_pred_log.len() || pad_mask.len() != d_pred_log.len() {
        return Err(Error::shape("duration, prediction and mask lengths differ"));
    }
    let mut total = 0.0;
    let mut count = 0;
    for ((&d, &p), &pad) in d_ref.as_slice().iter().zip(d_pred_log).zip(pad_mask) {
        if !pad {
            total += (p - (d as f64 + 1.0).ln()).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::arg("every phoneme is padded"));
    }
    Ok(total / count as f64)
}

/// Differentiable log-duration loss; `d_ref` is a constant.
pub fn l2_log_duration_var(tape: &mut Tape, d_pred_log: Var, d_ref: &Durations) -> Result<Var> {
    let target = tape.constant(log_duration_target(d_ref));
    tape.mean_sq_diff(d_pred_log, target)
}

pub fn guided_attention_loss(alpha: &AlignmentMatrix, mask: &GuidedAttentionMask) -> Result<f64> {
    if alpha.weights().shape() != mask.weights.shape() {
        return Err(Error::shape(format!(
            "alignment {:?} vs mask {:?}",
            alpha.weights().shape(),
            mask.weights.shape()
        )));
    }
    let s: f64 = alpha.weights().data().iter().zip(mask.weights.data()).map(|(a, w)| a * w).sum();
    Ok(s / mask.weights.numel() as f64)
}

/// Mean of `α̂ ⊙ W`, differentiable in `α̂`.
pub fn guided_attention_var(tape: &mut Tape, alpha: Var, mask: &GuidedAttentionMask) -> Result<Var> {
    let weighted = tape.mul_const(alpha, mask.weights.clone())?;
    Ok(tape.mean(weighted))
}

/// Frames needed to emit `target` under CTC rules: one per label plus one
/// blank between each pair of equal neighbours.
pub fn ctc_required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// CTC negative log-likelihood and its gradient with respect to the
/// unnormalized `logits: [T×C]`, via the log-space forward-backward
/// recursions over the blank-interleaved label sequence.
pub fn ctc_forward_backward(logits: &Tensor, target: &[usize], blank: usize) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!("CTC logits must be a matrix, got {:?}", logits.shape())));
    }
    let (frames, classes) = (logits.rows(), logits.cols());
    if blank >= classes {
        return Err(Error::arg(format!("blank {blank} outside {classes} classes")));
    }
    if let Some(&bad) = target.iter().find(|&&l| l >= classes || l == blank) {
        return Err(Error::arg(format!("CTC label {bad} is blank or out of range")));
    }
    let required = ctc_required_frames(target);
    if frames < required {
        return Err(Error::CtcTooShort { frames, target_len: target.len(), required });
    }

    let mut logp = vec![0.0; frames * classes];
    for t in 0..frames {
        let row = logits.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (c, v) in row.iter().enumerate() {
            logp[t * classes + c] = v - lse;
        }
    }
    let states = 2 * target.len() + 1;
    let label = |s: usize| if s.is_multiple_of(2) { blank } else { target[s / 2] };
    let can_skip = |s: usize| s >= 2 && label(s) != blank && label(s) != label(s - 2);

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * states];
    alpha[0] = logp[blank];
    if states > 1 {
        alpha[1] = logp[label(1)];
    }
    for t in 1..frames {
        for s in 0..states {
            let prev = &alpha[(t - 1) * states..t * states];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * states + s] = if acc == ninf { ninf } else { acc + logp[t * classes + label(s)] };
        }
    }
    let last = &alpha[(frames - 1) * states..];
    let mut log_lik = last[states - 1];
    if states > 1 {
        log_lik = log_add(log_lik, last[states - 2]);
    }
    if !log_lik.is_finite() {
        return Err(Error::Numerical("CTC likelihood underflowed".into()));
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![ninf; frames * states];
    beta[(frames - 1) * states + states - 1] = 0.0;
    if states > 1 {
        beta[(frames - 1) * states + states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let next = |s2: usize| beta[(t + 1) * states + s2] + logp[(t + 1) * classes + label(s2)];
            let mut acc = next(s);
            if s + 1 < states {
                acc = log_add(acc, next(s + 1));
            }
            if s + 2 < states && can_skip(s + 2) {
                acc = log_add(acc, next(s + 2));
            }
            beta[t * states + s] = acc;
        }
    }

    let mut grad = vec![0.0; frames * classes];
    let mut occupancy = vec![ninf; classes];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|o| *o = ninf);
        for s in 0..states {
            let v = alpha[t * states + s] + beta[t * states + s];
            occupancy[label(s)] = log_add(occupancy[label(s)], v);
        }
        for c in 0..classes {
            let p = logp[t * classes + c].exp();
            grad[t * classes + c] = p - (occupancy[c] - log_lik).exp();
        }
    }
    // Rounding can push a certain path's likelihood a hair above 1.
    Ok(((-log_lik).max(0.0), Tensor::from_parts(vec![frames, classes], grad)))
}

/// CTC loss with the blank at the last class index.
pub fn ctc_loss(logits: &Tensor, target: &[usize]) -> Result<f64> {
    let blank = logits.cols().saturating_sub(1);
    ctc_forward_backward(logits, target, blank).map(|(nll, _)| nll)
}
