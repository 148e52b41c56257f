//! The joint training step.
//!
//! Every utterance in a batch is run unpadded on its own tape: padding never
//! reaches attention, the losses or duration extraction. Per-utterance
//! gradients are averaged over the batch before clipping and the update.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{extract_durations, AlignmentMatrix, Durations};
use crate::error::{Error, Result};
use crate::losses::{
    guided_attention_var, l1_mel_var, l2_log_duration_var, total_loss, GuidedAttentionMask, LossBreakdown,
};
use crate::numerics::{Tensor, Var};
use crate::params::ParamGrads;

use super::network::JditModel;
use super::optim::{radam_noam_update, NoamSchedule, OptimizerState, RadamHyper};

/// One utterance: phoneme ids and its normalized `[T×D]` mel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub mel: Tensor,
}

/// Utterances padded to a common phoneme and frame count, with true lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub phonemes: Vec<Vec<usize>>,
    pub mel: Vec<Tensor>,
    pub phoneme_lens: Vec<usize>,
    pub frame_lens: Vec<usize>,
}

impl Batch {
    pub fn new(items: Vec<BatchItem>) -> Result<Self> {
        Batch::with_padding(items, 0, 0)
    }

    /// Pads to at least `min_phonemes` × `min_frames`; padding is id 0 and
    /// all-zero frames.
    pub fn with_padding(items: Vec<BatchItem>, min_phonemes: usize, min_frames: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let mel_dim = items[0].mel.cols();
        let max_n = items.iter().map(|u| u.phonemes.len()).max().unwrap_or(0).max(min_phonemes);
        let max_t = items.iter().map(|u| u.mel.rows()).max().unwrap_or(0).max(min_frames);
        let mut batch = Batch {
            ids: Vec::new(),
            phonemes: Vec::new(),
            mel: Vec::new(),
            phoneme_lens: Vec::new(),
            frame_lens: Vec::new(),
        };
        for item in items {
            if item.phonemes.is_empty() || item.mel.rank() != 2 || item.mel.rows() == 0 {
                return Err(Error::arg(format!("utterance {} is empty", item.id)));
            }
            if item.mel.cols() != mel_dim {
                return Err(Error::shape(format!("utterance {} has {} mel bins, expected {mel_dim}", item.id, item.mel.cols())));
            }
            let (n, t) = (item.phonemes.len(), item.mel.rows());
            let mut ids = item.phonemes;
            ids.resize(max_n, 0);
            let mut data = item.mel.into_data();
            data.resize(max_t * mel_dim, 0.0);
            batch.ids.push(item.id);
            batch.phonemes.push(ids);
            batch.mel.push(Tensor::new(vec![max_t, mel_dim], data)?);
            batch.phoneme_lens.push(n);
            batch.frame_lens.push(t);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The unpadded phonemes and mel of entry `i`.
    pub fn item(&self, i: usize) -> (&[usize], Tensor) {
        let (n, t) = (self.phoneme_lens[i], self.frame_lens[i]);
        let dim = self.mel[i].cols();
        let mel = Tensor::new(vec![t, dim], self.mel[i].data()[..t * dim].to_vec()).expect("valid prefix");
        (&self.phonemes[i][..n], mel)
    }
}

#[derive(Clone, Debug)]
pub struct TrainStepReport {
    pub step: u64,
    pub losses: LossBreakdown,
    pub extracted_durations: Vec<Durations>,
    /// Alignment of the first utterance in the batch.
    pub alignment_snapshot: Option<AlignmentMatrix>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// Batch-averaged losses and gradients, before any update.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub losses: LossBreakdown,
    pub grads: ParamGrads,
    pub durations: Vec<Durations>,
    pub alignment: Option<AlignmentMatrix>,
}

/// Dropout stream for one utterance of one step.
pub fn dropout_rng(seed: u64, step: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(1 << 20).wrapping_add(index as u64));
    rng
}

/// Makes sure at least one frame is assigned: an all-zero extraction gives
/// every frame to the phoneme with the largest total alignment mass.
pub fn repair_durations(d: Durations, alpha: &Tensor) -> Durations {
    if d.total() > 0 {
        return d;
    }
    let mut mass = vec![0.0; alpha.cols()];
    for t in 0..alpha.rows() {
        for (m, v) in mass.iter_mut().zip(alpha.row(t)) {
            *m += v;
        }
    }
    let best = (0..mass.len()).fold(0, |b, n| if mass[n] > mass[b] { n } else { b });
    let mut out = vec![0; alpha.cols()];
    out[best] = alpha.rows();
    Durations(out)
}

struct UtteranceResult {
    parts: [f64; 5],
    grads: ParamGrads,
    durations: Durations,
    alignment: Tensor,
}

fn utterance_pass(
    model: &JditModel,
    id: &str,
    phonemes: &[usize],
    mel: &Tensor,
    rng: ChaCha8Rng,
) -> Result<UtteranceResult> {
    let cfg = model.config();
    let weights = cfg.loss_weights.as_array();
    let mut g = model.graph(rng, true);
    let target = g.tape.constant(mel.clone());

    let h = model.encode(&mut g, phonemes)?;
    let ar = model.autoregressive(&mut g, h, mel)?;
    let alpha = g.value(ar.alignment).clone();
    let durations = repair_durations(extract_durations(&AlignmentMatrix::from_tensor_unchecked(alpha.clone())), &alpha);
    let y_ff = model.feed_forward(&mut g, h, &durations)?;
    let log_d = model.predict_durations(&mut g, h)?;

    let mut terms: Vec<Option<Var>> = vec![
        Some(l1_mel_var(&mut g.tape, target, ar.mel)?),
        Some(l1_mel_var(&mut g.tape, target, y_ff)?),
        Some(l2_log_duration_var(&mut g.tape, log_d, &durations)?),
    ];
    let blank = cfg.vocab_size;
    terms.push(match g.tape.ctc_loss(ar.ctc_logits, phonemes, blank) {
        Ok(nll) => Some(g.tape.scale(nll, 1.0 / phonemes.len() as f64)),
        Err(e @ Error::CtcTooShort { .. }) => {
            warn!("{id}: skipping CTC term: {e}");
            None
        }
        Err(e) => return Err(e),
    });
    let mask = GuidedAttentionMask::new(mel.rows(), phonemes.len(), cfg.guided_sigma)?;
    terms.push(Some(guided_attention_var(&mut g.tape, ar.alignment, &mask)?));

    let mut parts = [0.0; 5];
    let mut total: Option<Var> = None;
    for (k, term) in terms.into_iter().enumerate() {
        let Some(v) = term else { continue };
        parts[k] = g.value(v).item();
        if weights[k] == 0.0 {
            continue;
        }
        let weighted = g.tape.scale(v, weights[k]);
        total = Some(match total {
            Some(t) => g.tape.add(t, weighted)?,
            None => weighted,
        });
    }
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("utterance {id}: non-finite loss components {parts:?}")));
    }
    let grads = match total {
        Some(t) => g.param_grads(t)?,
        None => ParamGrads::zeros(model.params()),
    };
    Ok(UtteranceResult { parts, grads, durations, alignment: alpha })
}

/// Forward and backward passes over a batch with dropout streams derived
/// from `(seed, step)`; parameters are left untouched.
pub fn compute_gradients(model: &JditModel, batch: &Batch, seed: u64, step: u64) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = ParamGrads::zeros(model.params());
    let mut parts = [0.0; 5];
    let mut durations = Vec::with_capacity(batch.len());
    let mut alignment = None;
    for i in 0..batch.len() {
        let (phonemes, mel) = batch.item(i);
        let id = &batch.ids[i];
        let r = utterance_pass(model, id, phonemes, &mel, dropout_rng(seed, step, i))
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("step {step}: {msg}")),
                other => other,
            })?;
        if !r.grads.is_finite() {
            return Err(Error::Numerical(format!(
                "step {step}: utterance {id}: non-finite gradient; losses {:?}",
                r.parts
            )));
        }
        grads.accumulate(&r.grads, scale);
        for (p, v) in parts.iter_mut().zip(r.parts) {
            *p += scale * v;
        }
        if i == 0 {
            alignment = Some(AlignmentMatrix::from_tensor_unchecked(r.alignment));
        }
        durations.push(r.durations);
    }
    let losses = total_loss(parts, &model.config().loss_weights);
    Ok(BatchGradients { losses, grads, durations, alignment })
}

/// One optimisation step at `state.step + 1`: gradients, global-norm
/// clipping, then the RAdam update under the warmup schedule.
pub fn train_step(model: &mut JditModel, batch: &Batch, state: &mut OptimizerState, seed: u64) -> Result<TrainStepReport> {
    let step = state.step + 1;
    let BatchGradients { losses, mut grads, durations, alignment } = compute_gradients(model, batch, seed, step)?;
    let cfg = model.config().clone();
    let grad_norm = grads.global_norm();
    if grad_norm > cfg.grad_clip {
        grads.scale(cfg.grad_clip / grad_norm);
    }
    let hyper = RadamHyper { beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps };
    let schedule = NoamSchedule { model_dim: cfg.model_dim, warmup: cfg.warmup_steps, scale: cfg.lr_scale };
    let lr = radam_noam_update(model.params_mut(), &grads, state, &hyper, &schedule);
    Ok(TrainStepReport { step, losses, extracted_durations: durations, alignment_snapshot: alignment, grad_norm, lr })
}

/// Eval-mode teacher-forced alignment of one utterance. The decoder
/// pre-net keeps its dropout, drawn from a stream fixed by `seed`.
pub fn teacher_forced_alignment(model: &JditModel, phonemes: &[usize], mel: &Tensor, seed: u64) -> Result<AlignmentMatrix> {
    let mut g = model.graph(dropout_rng(seed, 0, 0), false);
    let h = model.encode(&mut g, phonemes)?;
    let ar = model.autoregressive(&mut g, h, mel)?;
    Ok(AlignmentMatrix::from_tensor_unchecked(g.value(ar.alignment).clone()))
}

/// Durations read off [`teacher_forced_alignment`].
pub fn extract_utterance_durations(model: &JditModel, phonemes: &[usize], mel: &Tensor, seed: u64) -> Result<Durations> {
    let alpha = teacher_forced_alignment(model, phonemes, mel, seed)?;
    Ok(repair_durations(extract_durations(&alpha), alpha.weights()))
}

/// Eval-mode linear-domain predicted durations, before rounding.
pub fn predicted_durations(model: &JditModel, phonemes: &[usize]) -> Result<Vec<f64>> {
    let mut g = model.graph(dropout_rng(0, 0, 0), false);
    let h = model.encode(&mut g, phonemes)?;
    let log_d = model.predict_durations(&mut g, h)?;
    Ok(g.value(log_d).data().iter().map(|v| v.exp() - 1.0).collect())
}
