//! Network building blocks: linear/conv/norm layers, multi-head attention,
//! the FFT block, the autoregressive decoder block, both pre-nets and the
//! scaled positional encoding.

use rand_chacha::ChaCha8Rng;

use crate::alignment::content_attention_var;
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::params::{init, Graph, ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init::xavier(rng, &[inputs, outputs], inputs, outputs));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])));
        Linear { weight, bias }
    }

    pub fn without_bias(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init::xavier(rng, &[inputs, outputs], inputs, outputs));
        Linear { weight, bias: None }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization over the feature axis with a learned affine map.
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.tape.layer_norm(x, gain, bias, 1, LAYER_NORM_EPS)
    }
}

/// Same-padded 1-D convolution over the time axis.
pub struct Conv1d {
    kernel: ParamId,
    bias: ParamId,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ksize: usize,
        inputs: usize,
        outputs: usize,
    ) -> Result<Self> {
        if ksize.is_multiple_of(2) {
            return Err(Error::arg(format!("{name}: kernel size {ksize} must be odd")));
        }
        let kernel = init::xavier(rng, &[ksize, inputs, outputs], ksize * inputs, ksize * outputs);
        Ok(Conv1d {
            kernel: store.add(format!("{name}.kernel"), kernel),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        })
    }

    pub fn kernel(&self) -> ParamId {
        self.kernel
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (k, b) = (g.param(self.kernel), g.param(self.bias));
        g.tape.conv1d(x, k, b)
    }
}

/// `allowed[i·keys + j]` is true when query `i` may attend key `j`.
pub fn key_padding_mask(queries: usize, pad_mask: &[bool]) -> Vec<bool> {
    let mut allowed = Vec::with_capacity(queries * pad_mask.len());
    for _ in 0..queries {
        allowed.extend(pad_mask.iter().map(|&p| !p));
    }
    allowed
}

/// Lower-triangular mask: position `i` sees keys `0..=i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len).flat_map(|i| (0..len).map(move |j| j <= i)).collect()
}

pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::arg(format!("model dim {dim} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim),
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim),
            heads,
        })
    }

    pub fn output(&self) -> &Linear {
        &self.output
    }

    /// Scaled dot-product attention of `x` over `memory`; returns the
    /// projected output and each head's attention matrix.
    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, allowed: &[bool]) -> Result<(Var, Vec<Var>)> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let dim = g.value(q).cols();
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = g.tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = g.tape.slice_cols(v, h * head_dim, head_dim)?;
            let logits = g.tape.matmul_bt(qh, kh)?;
            let logits = g.tape.scale(logits, scale);
            let w = g.tape.masked_softmax_rows(logits, allowed)?;
            outs.push(g.tape.matmul(w, vh)?);
            weights.push(w);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.tape.concat_cols(&outs)? };
        Ok((self.output.forward(g, joined)?, weights))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FftBlockParams {
    pub num_heads: usize,
    pub model_dim: usize,
    pub conv_kernel: usize,
    pub dropout_rate: f64,
}

impl FftBlockParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::arg(format!(
                "model dim {} must be a positive multiple of {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::arg(format!("conv kernel {} must be odd", self.conv_kernel)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::arg(format!("dropout {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Self-attention and a single 1-D convolution, each wrapped in
/// residual + dropout + layer normalization (post-norm).
pub struct FftBlock {
    params: FftBlockParams,
    attn: MultiHeadAttention,
    attn_norm: LayerNorm,
    conv: Conv1d,
    conv_norm: LayerNorm,
}

impl FftBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, params: FftBlockParams) -> Result<Self> {
        params.validate()?;
        let d = params.model_dim;
        Ok(FftBlock {
            params,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, params.num_heads)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            conv: Conv1d::new(store, rng, &format!("{name}.conv"), params.conv_kernel, d, d)?,
            conv_norm: LayerNorm::new(store, &format!("{name}.conv_norm"), d),
        })
    }

    pub fn conv(&self) -> &Conv1d {
        &self.conv
    }

    pub fn forward(&self, g: &mut Graph, x: Var, pad_mask: &[bool]) -> Result<Var> {
        self.forward_with_attention(g, x, pad_mask).map(|(y, _)| y)
    }

    /// Like [`FftBlock::forward`], also returning each head's attention.
    pub fn forward_with_attention(&self, g: &mut Graph, x: Var, pad_mask: &[bool]) -> Result<(Var, Vec<Var>)> {
        let len = g.value(x).rows();
        if pad_mask.len() != len {
            return Err(Error::shape(format!("pad mask of {} for {len} positions", pad_mask.len())));
        }
        if pad_mask.iter().all(|&p| p) {
            return Err(Error::arg("every position is padded"));
        }
        let allowed = key_padding_mask(len, pad_mask);
        let (a, weights) = self.attn.forward(g, x, x, &allowed)?;
        let a = g.dropout(a, self.params.dropout_rate)?;
        let r = g.tape.add(x, a)?;
        let mut h = self.attn_norm.forward(g, r)?;
        if pad_mask.iter().any(|&p| p) {
            // keep padded rows from leaking into valid ones through the conv
            let keep: Vec<f64> = pad_mask.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
            let keep = g.tape.constant(Tensor::vector(keep));
            h = g.tape.mul_axis(h, keep, 0)?;
        }
        let c = self.conv.forward(g, h)?;
        let c = g.tape.relu(c);
        let c = g.dropout(c, self.params.dropout_rate)?;
        let r = g.tape.add(h, c)?;
        Ok((self.conv_norm.forward(g, r)?, weights))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderBlockParams {
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
}

/// Outputs of one decoder pass.
pub struct DecoderOutput {
    /// Decoder states `s`, one row per frame.
    pub states: Var,
    /// Forward-attention alignment `α̂` over encoder positions.
    pub alignment: Var,
    /// Raw content-attention weights `w` before the recursion.
    pub raw_attention: Var,
    /// Context rows `c_t = Σ α̂_t(n) h_n`.
    pub context: Var,
}

/// Causal self-attention, single-head content attention refined by forward
/// attention, and a position-wise feed-forward network; post-norm residuals.
pub struct DecoderBlock {
    params: DecoderBlockParams,
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    query: Linear,
    key: Linear,
    context_proj: Linear,
    context_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: LayerNorm,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, params: DecoderBlockParams) -> Result<Self> {
        let d = params.model_dim;
        Ok(DecoderBlock {
            params,
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), d, params.num_heads)?,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d),
            query: Linear::without_bias(store, rng, &format!("{name}.enc_attn.query"), d, d),
            key: Linear::without_bias(store, rng, &format!("{name}.enc_attn.key"), d, d),
            context_proj: Linear::new(store, rng, &format!("{name}.enc_attn.output"), d, d),
            context_norm: LayerNorm::new(store, &format!("{name}.context_norm"), d),
            ffn_in: Linear::new(store, rng, &format!("{name}.ffn.0"), d, params.ffn_dim),
            ffn_out: Linear::new(store, rng, &format!("{name}.ffn.1"), params.ffn_dim, d),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
        })
    }

    pub fn query(&self) -> &Linear {
        &self.query
    }

    pub fn key(&self) -> &Linear {
        &self.key
    }

    /// `y_in: [T×dim]` is the pre-netted, position-encoded, right-shifted
    /// reference; `h: [N×dim]` the encoder states.
    pub fn forward(&self, g: &mut Graph, y_in: Var, h: Var) -> Result<DecoderOutput> {
        let (frames, phonemes) = (g.value(y_in).rows(), g.value(h).rows());
        if frames == 0 || phonemes == 0 {
            return Err(Error::arg("decoder needs at least one frame and one phoneme"));
        }
        let p = self.params.dropout_rate;
        let (a, _) = self.self_attn.forward(g, y_in, y_in, &causal_mask(frames))?;
        let a = g.dropout(a, p)?;
        let r = g.tape.add(y_in, a)?;
        let s1 = self.self_norm.forward(g, r)?;

        let (wq, wk) = (g.param(self.query.weight()), g.param(self.key.weight()));
        let raw = content_attention_var(&mut g.tape, h, s1, wq, wk)?;
        let alignment = g.tape.forward_attention(raw)?;
        let context = g.tape.matmul(alignment, h)?;
        let c = self.context_proj.forward(g, context)?;
        let c = g.dropout(c, p)?;
        let r = g.tape.add(s1, c)?;
        let s2 = self.context_norm.forward(g, r)?;

        let f = self.ffn_in.forward(g, s2)?;
        let f = g.tape.relu(f);
        let f = self.ffn_out.forward(g, f)?;
        let f = g.dropout(f, p)?;
        let r = g.tape.add(s2, f)?;
        let states = self.ffn_norm.forward(g, r)?;
        Ok(DecoderOutput { states, alignment, raw_attention: raw, context })
    }
}

/// Sinusoidal table: `PE[pos, 2i] = sin(pos / 10000^(2i/dim))`,
/// `PE[pos, 2i+1] = cos(...)`.
pub fn positional_table(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for j in 0..dim {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / dim as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_parts(vec![len, dim], data)
}

/// `x + alpha · PE` with a trainable scalar `alpha` (initialised to 1).
pub struct ScaledPositionalEncoding {
    alpha: ParamId,
}

impl ScaledPositionalEncoding {
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        ScaledPositionalEncoding { alpha: store.add(format!("{name}.alpha"), Tensor::scalar(1.0)) }
    }

    pub fn alpha(&self) -> ParamId {
        self.alpha
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (len, dim) = (g.value(x).rows(), g.value(x).cols());
        let pe = g.tape.constant(positional_table(len, dim));
        let alpha = g.param(self.alpha);
        let scaled = g.tape.scale_by(pe, alpha)?;
        g.tape.add(x, scaled)
    }
}

/// Convolutional pre-net on phoneme embeddings: `layers ×` (conv, per-feature
/// normalization over time, ReLU, dropout) and a final linear projection.
pub struct EncoderPrenet {
    convs: Vec<(Conv1d, ParamId, ParamId)>,
    projection: Linear,
    dropout: f64,
}

impl EncoderPrenet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        emb_dim: usize,
        model_dim: usize,
        layers: usize,
        ksize: usize,
        dropout: f64,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(layers);
        for i in 0..layers {
            let inputs = if i == 0 { emb_dim } else { model_dim };
            let conv = Conv1d::new(store, rng, &format!("{name}.conv.{i}"), ksize, inputs, model_dim)?;
            let gain = store.add(format!("{name}.norm.{i}.gain"), Tensor::full(&[model_dim], 1.0));
            let bias = store.add(format!("{name}.norm.{i}.bias"), Tensor::zeros(&[model_dim]));
            convs.push((conv, gain, bias));
        }
        let projection = Linear::new(store, rng, &format!("{name}.projection"), model_dim, model_dim);
        Ok(EncoderPrenet { convs, projection, dropout })
    }

    pub fn forward(&self, g: &mut Graph, emb: Var) -> Result<Var> {
        let mut x = emb;
        for (conv, gain, bias) in &self.convs {
            x = conv.forward(g, x)?;
            x = g.tape.normalize(x, 0, LAYER_NORM_EPS)?;
            let (gain, bias) = (g.param(*gain), g.param(*bias));
            x = g.tape.mul_axis(x, gain, 1)?;
            x = g.tape.add_axis(x, bias, 1)?;
            x = g.tape.relu(x);
            x = g.dropout(x, self.dropout)?;
        }
        self.projection.forward(g, x)
    }
}

/// Two fully connected ReLU layers with dropout, then a projection.
///
/// Dropout here stays active outside training, as in Tacotron-style
/// pre-nets; use `always_dropout = false` to follow the graph's mode instead.
pub struct DecoderPrenet {
    fc1: Linear,
    fc2: Linear,
    projection: Linear,
    dropout: f64,
    always_dropout: bool,
}

impl DecoderPrenet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        mel_dim: usize,
        model_dim: usize,
        dropout: f64,
        always_dropout: bool,
    ) -> Self {
        DecoderPrenet {
            fc1: Linear::new(store, rng, &format!("{name}.fc.0"), mel_dim, model_dim),
            fc2: Linear::new(store, rng, &format!("{name}.fc.1"), model_dim, model_dim),
            projection: Linear::new(store, rng, &format!("{name}.projection"), model_dim, model_dim),
            dropout,
            always_dropout,
        }
    }

    /// Output of the two ReLU layers, before the projection.
    pub fn hidden(&self, g: &mut Graph, mel: Var) -> Result<Var> {
        let active = g.train || self.always_dropout;
        let mut x = mel;
        for fc in [&self.fc1, &self.fc2] {
            x = fc.forward(g, x)?;
            x = g.tape.relu(x);
            x = g.tape.dropout(x, self.dropout, active, &mut g.rng)?;
        }
        Ok(x)
    }

    pub fn forward(&self, g: &mut Graph, mel: Var) -> Result<Var> {
        let x = self.hidden(g, mel)?;
        self.projection.forward(g, x)
    }
}
