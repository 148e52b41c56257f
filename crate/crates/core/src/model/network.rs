use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{length_regulate_var, Durations};
use crate::error::{Error, Result};
use crate::layers::{
    Conv1d, DecoderBlock, DecoderBlockParams, DecoderPrenet, EncoderPrenet, FftBlock, FftBlockParams, LayerNorm,
    Linear, ScaledPositionalEncoding,
};
use crate::numerics::{Tensor, Var};
use crate::params::{init, Graph, ParamId, ParamStore};

use super::config::JditConfig;

/// Per-phoneme log-duration head: `layers ×` (conv, ReLU, layer norm,
/// dropout) and a linear map to one scalar per phoneme.
pub struct DurationPredictor {
    convs: Vec<(Conv1d, LayerNorm)>,
    head: Linear,
    dropout: f64,
}

impl DurationPredictor {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        layers: usize,
        ksize: usize,
        dropout: f64,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(layers);
        for i in 0..layers {
            let conv = Conv1d::new(store, rng, &format!("{name}.conv.{i}"), ksize, dim, dim)?;
            convs.push((conv, LayerNorm::new(store, &format!("{name}.norm.{i}"), dim)));
        }
        let head = Linear::new(store, rng, &format!("{name}.head"), dim, 1);
        Ok(DurationPredictor { convs, head, dropout })
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// `h: [N×dim]` (already detached by the caller) to `[N]` log-durations,
    /// zero at padded positions.
    pub fn forward(&self, g: &mut Graph, h: Var, pad_mask: &[bool]) -> Result<Var> {
        let n = g.value(h).rows();
        if pad_mask.len() != n {
            return Err(Error::shape(format!("pad mask of {} for {n} phonemes", pad_mask.len())));
        }
        let mut x = h;
        for (conv, norm) in &self.convs {
            x = conv.forward(g, x)?;
            x = g.tape.relu(x);
            x = norm.forward(g, x)?;
            x = g.dropout(x, self.dropout)?;
        }
        let out = self.head.forward(g, x)?;
        let out = g.tape.reshape(out, &[n])?;
        if pad_mask.iter().any(|&p| p) {
            let keep = Tensor::vector(pad_mask.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect());
            return g.tape.mul_const(out, keep);
        }
        Ok(out)
    }
}

/// Tape outputs of the teacher-forced autoregressive branch.
pub struct ArOutputs {
    pub mel: Var,
    pub alignment: Var,
    /// Content-attention weights before the forward recursion.
    pub raw_attention: Var,
    pub ctc_logits: Var,
}

/// Shared phoneme encoder, feed-forward mel decoder, autoregressive
/// alignment learner and duration predictor.
pub struct JditModel {
    config: JditConfig,
    params: ParamStore,
    embedding: ParamId,
    encoder_prenet: EncoderPrenet,
    encoder_pe: ScaledPositionalEncoding,
    encoder_blocks: Vec<FftBlock>,
    mel_pe: ScaledPositionalEncoding,
    mel_blocks: Vec<FftBlock>,
    mel_head: Linear,
    decoder_prenet: DecoderPrenet,
    decoder_pe: ScaledPositionalEncoding,
    decoder: DecoderBlock,
    ar_mel_head: Linear,
    ctc_head: Linear,
    duration: DurationPredictor,
    ar_calls: AtomicUsize,
}

impl JditModel {
    /// Builds a freshly initialised model; weights depend only on `seed`.
    pub fn new(config: JditConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let fft = FftBlockParams {
            num_heads: config.num_heads,
            model_dim: d,
            conv_kernel: config.conv_kernel,
            dropout_rate: config.dropout,
        };
        let embedding = store.add("embedding", init::normal(&mut rng, &[config.vocab_size, d], 1.0));
        let encoder_prenet = EncoderPrenet::new(
            &mut store,
            &mut rng,
            "encoder.prenet",
            d,
            d,
            config.prenet_layers,
            config.prenet_kernel,
            config.prenet_dropout,
        )?;
        let encoder_pe = ScaledPositionalEncoding::new(&mut store, "encoder.pe");
        let encoder_blocks = (0..config.num_fft_blocks)
            .map(|i| FftBlock::new(&mut store, &mut rng, &format!("encoder.block.{i}"), fft))
            .collect::<Result<Vec<_>>>()?;
        let mel_pe = ScaledPositionalEncoding::new(&mut store, "mel.pe");
        let mel_blocks = (0..config.num_fft_blocks)
            .map(|i| FftBlock::new(&mut store, &mut rng, &format!("mel.block.{i}"), fft))
            .collect::<Result<Vec<_>>>()?;
        let mel_head = Linear::new(&mut store, &mut rng, "mel.head", d, config.mel_dim);
        let decoder_prenet =
            DecoderPrenet::new(&mut store, &mut rng, "ar.prenet", config.mel_dim, d, config.prenet_dropout, true);
        let decoder_pe = ScaledPositionalEncoding::new(&mut store, "ar.pe");
        let decoder = DecoderBlock::new(
            &mut store,
            &mut rng,
            "ar.decoder",
            DecoderBlockParams { num_heads: config.num_heads, model_dim: d, ffn_dim: config.ffn_dim, dropout_rate: config.dropout },
        )?;
        let ar_mel_head = Linear::new(&mut store, &mut rng, "ar.mel_head", d, config.mel_dim);
        let ctc_head = Linear::new(&mut store, &mut rng, "ar.ctc_head", d, config.vocab_size + 1);
        let duration = DurationPredictor::new(
            &mut store,
            &mut rng,
            "duration",
            d,
            config.duration_conv_layers,
            config.duration_kernel,
            config.duration_dropout,
        )?;
        Ok(JditModel {
            config,
            params: store,
            embedding,
            encoder_prenet,
            encoder_pe,
            encoder_blocks,
            mel_pe,
            mel_blocks,
            mel_head,
            decoder_prenet,
            decoder_pe,
            decoder,
            ar_mel_head,
            ctc_head,
            duration,
            ar_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &JditConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn duration_predictor(&self) -> &DurationPredictor {
        &self.duration
    }

    /// How many times the autoregressive branch has run on this instance.
    pub fn ar_invocations(&self) -> usize {
        self.ar_calls.load(Ordering::Relaxed)
    }

    /// True for parameters of the shared phoneme-side encoder.
    pub fn is_encoder_param(name: &str) -> bool {
        name == "embedding" || name.starts_with("encoder.")
    }

    pub fn is_duration_param(name: &str) -> bool {
        name.starts_with("duration.")
    }

    pub fn graph(&self, rng: ChaCha8Rng, train: bool) -> Graph<'_> {
        Graph::new(&self.params, rng, train)
    }

    pub fn check_phonemes(&self, phonemes: &[usize]) -> Result<()> {
        if phonemes.is_empty() {
            return Err(Error::arg("empty phoneme sequence"));
        }
        if let Some(&bad) = phonemes.iter().find(|&&p| p >= self.config.vocab_size) {
            return Err(Error::arg(format!("phoneme id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Shared encoder: `[N]` ids to `[N×dim]` states.
    pub fn encode(&self, g: &mut Graph, phonemes: &[usize]) -> Result<Var> {
        self.check_phonemes(phonemes)?;
        let table = g.param(self.embedding);
        let x = g.tape.embedding(table, phonemes)?;
        let x = self.encoder_prenet.forward(g, x)?;
        let mut x = self.encoder_pe.forward(g, x)?;
        let pad = vec![false; phonemes.len()];
        for block in &self.encoder_blocks {
            x = block.forward(g, x, &pad)?;
        }
        Ok(x)
    }

    /// Teacher-forced autoregressive branch over reference `mel: [T×D]`.
    pub fn autoregressive(&self, g: &mut Graph, h: Var, mel: &Tensor) -> Result<ArOutputs> {
        self.ar_calls.fetch_add(1, Ordering::Relaxed);
        let input = g.tape.constant(shift_right(mel)?);
        let x = self.decoder_prenet.forward(g, input)?;
        let x = self.decoder_pe.forward(g, x)?;
        let out = self.decoder.forward(g, x, h)?;
        let mel = self.ar_mel_head.forward(g, out.states)?;
        let ctc_logits = self.ctc_head.forward(g, out.states)?;
        Ok(ArOutputs { mel, alignment: out.alignment, raw_attention: out.raw_attention, ctc_logits })
    }

    /// Feed-forward branch: expand `h` by `d`, then decode every frame in
    /// parallel.
    pub fn feed_forward(&self, g: &mut Graph, h: Var, d: &Durations) -> Result<Var> {
        let x = length_regulate_var(&mut g.tape, h, d)?;
        let mut x = self.mel_pe.forward(g, x)?;
        let pad = vec![false; d.total()];
        for block in &self.mel_blocks {
            x = block.forward(g, x, &pad)?;
        }
        self.mel_head.forward(g, x)
    }

    /// Log-domain durations from the detached encoder output.
    pub fn predict_durations(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let h = g.tape.detach(h);
        let pad = vec![false; g.value(h).rows()];
        self.duration.forward(g, h, &pad)
    }

    /// Eval-mode synthesis from phonemes alone.
    ///
    /// Durations are `max(0, round(exp(d′) − 1))`; an all-zero result gets
    /// one frame at the largest prediction.
    pub fn synthesize(&self, phonemes: &[usize]) -> Result<(Tensor, Durations)> {
        let mut g = self.graph(ChaCha8Rng::seed_from_u64(0), false);
        let h = self.encode(&mut g, phonemes)?;
        let log_d = self.predict_durations(&mut g, h)?;
        let d = durations_from_log(g.value(log_d).data());
        let mel = self.feed_forward(&mut g, h, &d)?;
        Ok((g.value(mel).clone(), d))
    }
}

/// Rounds log-domain predictions back to frame counts.
pub fn durations_from_log(log_d: &[f64]) -> Durations {
    let mut d: Vec<usize> = log_d.iter().map(|&v| (v.exp() - 1.0).round().max(0.0) as usize).collect();
    if d.iter().all(|&v| v == 0) && !d.is_empty() {
        let mut best = 0;
        for (i, &v) in log_d.iter().enumerate() {
            if v > log_d[best] {
                best = i;
            }
        }
        d[best] = 1;
    }
    Durations(d)
}

/// Prepends a zero "go" frame and drops the last frame.
fn shift_right(mel: &Tensor) -> Result<Tensor> {
    if mel.rank() != 2 || mel.rows() == 0 {
        return Err(Error::shape(format!("reference mel {:?}", mel.shape())));
    }
    let (t, dim) = (mel.rows(), mel.cols());
    let mut data = vec![0.0; t * dim];
    data[dim..].copy_from_slice(&mel.data()[..(t - 1) * dim]);
    Tensor::new(vec![t, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> JditConfig {
        JditConfig {
            vocab_size: 6,
            mel_dim: 3,
            model_dim: 8,
            ffn_dim: 16,
            num_fft_blocks: 1,
            num_heads: 2,
            conv_kernel: 3,
            prenet_layers: 1,
            prenet_kernel: 3,
            ..JditConfig::desk()
        }
    }

    fn set_duration_head(model: &mut JditModel, bias: f64) {
        let w = model.duration.head.weight();
        let shape = model.params.get(w).shape().to_vec();
        *model.params.get_mut(w) = Tensor::zeros(&shape);
        let b = model.duration.head.bias().unwrap();
        *model.params.get_mut(b) = Tensor::vector(vec![bias]);
    }

    #[test]
    fn shift_right_inserts_go_frame() {
        let mel = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(shift_right(&mel).unwrap().data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn durations_from_log_inverts_target() {
        assert_eq!(durations_from_log(&[4f64.ln(), 1f64.ln(), 2.5f64.ln()]).0, vec![3, 0, 2]);
        assert_eq!(durations_from_log(&[-9.0, -3.0, -7.0]).0, vec![0, 1, 0]);
    }

    #[test]
    fn synthesize_uses_predicted_lengths() {
        let mut model = JditModel::new(tiny(), 1).unwrap();
        set_duration_head(&mut model, 4f64.ln());
        let (mel, d) = model.synthesize(&[0, 1, 2, 3]).unwrap();
        assert_eq!(d.0, vec![3; 4]);
        assert_eq!(mel.shape(), &[12, 3]);
        set_duration_head(&mut model, -20.0);
        let (mel, d) = model.synthesize(&[0, 1, 2, 3]).unwrap();
        assert_eq!(d.total(), 1);
        assert_eq!(mel.rows(), 1);
        assert_eq!(model.ar_invocations(), 0);
    }

    #[test]
    fn synthesize_is_deterministic() {
        let model = JditModel::new(tiny(), 2).unwrap();
        let a = model.synthesize(&[5, 4, 3]).unwrap();
        let b = model.synthesize(&[5, 4, 3]).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(model.synthesize(&[]).is_err());
        assert!(model.synthesize(&[6]).is_err());
    }

    #[test]
    fn duration_predictor_shapes_and_zero_weights() {
        let mut model = JditModel::new(tiny(), 3).unwrap();
        set_duration_head(&mut model, 0.7);
        for n in [1, 4, 50] {
            let mut g = model.graph(ChaCha8Rng::seed_from_u64(0), false);
            let h = g.tape.constant(init::normal(&mut ChaCha8Rng::seed_from_u64(n as u64), &[n, 8], 1.0));
            let out = model.duration.forward(&mut g, h, &vec![false; n]).unwrap();
            assert_eq!(g.value(out).shape(), &[n]);
            assert!(g.value(out).data().iter().all(|&v| v == 0.7));
        }
        let mut g = model.graph(ChaCha8Rng::seed_from_u64(0), false);
        let h = g.tape.constant(Tensor::zeros(&[3, 8]));
        let out = model.duration.forward(&mut g, h, &[false, false, true]).unwrap();
        assert_eq!(g.value(out).data(), &[0.7, 0.7, 0.0]);
    }

    #[test]
    fn encoder_params_are_named_by_role() {
        let model = JditModel::new(tiny(), 4).unwrap();
        let enc = model.params.iter().filter(|(n, _)| JditModel::is_encoder_param(n)).count();
        let dur = model.params.iter().filter(|(n, _)| JditModel::is_duration_param(n)).count();
        assert!(enc > 5 && dur > 3);
    }
}
