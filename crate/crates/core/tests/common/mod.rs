//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::Path;

use jdit::alignment::Durations;
use jdit::data::{self, SyntheticSpec};
use jdit::layers::{DecoderBlock, DecoderBlockParams, FftBlock, FftBlockParams};
use jdit::losses::{guided_attention_var, l1_mel_var, l2_log_duration_var, GuidedAttentionMask};
use jdit::model::{DurationPredictor, JditConfig};
use jdit::numerics::{grad_check, GradCheckReport, Tape, Tensor, Var};
use jdit::params::{grad_check_params, init, ParamStore};
use jdit::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_EPS: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(seed: u64, shape: &[usize]) -> Tensor {
    init::normal(&mut rng(seed), shape, 1.0)
}

/// Random values at least `margin` away from zero, for kinked functions.
pub fn randn_away_from_zero(seed: u64, shape: &[usize], margin: f64) -> Tensor {
    randn(seed, shape).map(|v| if v.abs() < margin { v.signum() * margin + v } else { v })
}

pub fn positive(seed: u64, shape: &[usize]) -> Tensor {
    randn(seed, shape).map(|v| 0.1 + v.abs())
}

/// `Σ out ⊙ C` for a fixed random `C`, so every output element matters.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let c = randn(seed, tape.value(out).shape());
    let w = tape.mul_const(out, c)?;
    Ok(tape.sum(w))
}

pub fn tiny_config() -> JditConfig {
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
        warmup_steps: 20,
        ..JditConfig::desk()
    }
}

type Case = (&'static str, Box<dyn Fn() -> Result<GradCheckReport>>);

fn tape_case<F>(name: &'static str, inputs: Vec<Tensor>, f: F) -> Case
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    (name, Box::new(move || grad_check(&f, &inputs, GRAD_EPS, GRAD_TOL)))
}

/// Every tape primitive.
pub fn primitive_cases() -> Vec<Case> {
    let m = |s| randn(s, &[3, 4]);
    let mut mask = vec![true; 12];
    mask[1] = false;
    mask[6] = false;
    vec![
        tape_case("add", vec![m(1), m(2)], |t, v| {
            let o = t.add(v[0], v[1])?;
            project(t, o, 99)
        }),
        tape_case("sub", vec![m(1), m(2)], |t, v| {
            let o = t.sub(v[0], v[1])?;
            project(t, o, 99)
        }),
        tape_case("mul", vec![m(1), m(2)], |t, v| {
            let o = t.mul(v[0], v[1])?;
            project(t, o, 99)
        }),
        tape_case("add_axis", vec![m(3), randn(4, &[4]), randn(5, &[3])], |t, v| {
            let a = t.add_axis(v[0], v[1], 1)?;
            let o = t.add_axis(a, v[2], 0)?;
            project(t, o, 99)
        }),
        tape_case("mul_axis", vec![m(3), randn(4, &[4]), randn(5, &[3])], |t, v| {
            let a = t.mul_axis(v[0], v[1], 1)?;
            let o = t.mul_axis(a, v[2], 0)?;
            project(t, o, 99)
        }),
        tape_case("scale", vec![m(6)], |t, v| {
            let o = t.scale(v[0], -1.7);
            project(t, o, 99)
        }),
        tape_case("scale_by", vec![m(6), Tensor::scalar(0.8)], |t, v| {
            let o = t.scale_by(v[0], v[1])?;
            project(t, o, 99)
        }),
        tape_case("mul_const", vec![m(6)], |t, v| {
            let o = t.mul_const(v[0], randn(7, &[3, 4]))?;
            project(t, o, 99)
        }),
        tape_case("matmul", vec![m(8), randn(9, &[4, 2])], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            project(t, o, 99)
        }),
        tape_case("matmul_bt", vec![m(8), randn(9, &[5, 4])], |t, v| {
            let o = t.matmul_bt(v[0], v[1])?;
            project(t, o, 99)
        }),
        tape_case("relu", vec![randn_away_from_zero(10, &[3, 4], 0.05)], |t, v| {
            let o = t.relu(v[0]);
            project(t, o, 99)
        }),
        tape_case("softmax", vec![m(11)], |t, v| {
            let a = t.softmax(v[0], 1)?;
            let b = t.softmax(v[0], 0)?;
            let o = t.add(a, b)?;
            project(t, o, 99)
        }),
        tape_case("masked_softmax_rows", vec![m(12)], move |t, v| {
            let o = t.masked_softmax_rows(v[0], &mask)?;
            project(t, o, 99)
        }),
        tape_case("masked_fill", vec![m(13)], |t, v| {
            let o = t.masked_fill(v[0], &[true, false, false, true, false, false, false, false, true, false, false, false], -3.0)?;
            project(t, o, 99)
        }),
        tape_case("normalize", vec![m(14)], |t, v| {
            let a = t.normalize(v[0], 0, 1e-5)?;
            let b = t.normalize(v[0], 1, 1e-5)?;
            let o = t.add(a, b)?;
            project(t, o, 99)
        }),
        tape_case("layer_norm", vec![m(15), randn(16, &[4]), randn(17, &[4])], |t, v| {
            let o = t.layer_norm(v[0], v[1], v[2], 1, 1e-5)?;
            project(t, o, 99)
        }),
        tape_case("conv1d", vec![randn(18, &[5, 2]), randn(19, &[3, 2, 3]), randn(20, &[3])], |t, v| {
            let o = t.conv1d(v[0], v[1], v[2])?;
            project(t, o, 99)
        }),
        tape_case("index_rows", vec![m(21)], |t, v| {
            let o = t.embedding(v[0], &[2, 0, 2, 2])?;
            project(t, o, 99)
        }),
        tape_case("concat_and_slice", vec![m(22), randn(23, &[3, 2]), randn(24, &[1, 4])], |t, v| {
            let c = t.concat_cols(&[v[0], v[1]])?;
            let s = t.slice_cols(c, 1, 4)?;
            let r = t.concat_rows(&[s, v[2]])?;
            let r = t.slice_rows(r, 1, 3)?;
            let o = t.reshape(r, &[12])?;
            project(t, o, 99)
        }),
        tape_case("sum_and_mean", vec![m(25)], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let a = t.sum(sq);
            let b = t.mean(v[0]);
            let b = t.scale(b, 3.0);
            t.add(a, b)
        }),
        tape_case("mean_abs_diff", vec![m(26), m(27).map(|v| v + 0.5)], |t, v| t.mean_abs_diff(v[0], v[1])),
        tape_case("mean_sq_diff", vec![m(26), m(27)], |t, v| t.mean_sq_diff(v[0], v[1])),
        tape_case("dropout", vec![m(28)], |t, v| {
            let o = t.dropout(v[0], 0.5, true, &mut rng(5))?;
            project(t, o, 99)
        }),
        tape_case("forward_attention", vec![randn(29, &[4, 3])], |t, v| {
            let w = t.softmax(v[0], 1)?;
            let o = t.forward_attention(w)?;
            project(t, o, 99)
        }),
        tape_case("ctc", vec![randn(30, &[6, 4])], |t, v| t.ctc_loss(v[0], &[0, 2, 2], 3)),
    ]
}

fn block_case<F>(name: &'static str, store: ParamStore, f: F) -> Case
where
    F: Fn(&mut jdit::params::Graph) -> Result<Var> + 'static,
{
    (name, Box::new(move || grad_check_params(&store, &f, GRAD_EPS, GRAD_TOL)))
}

/// The FFT block, the decoder block (through forward attention) and the
/// duration predictor, with their inputs registered as parameters.
pub fn module_cases() -> Vec<Case> {
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    let params = FftBlockParams { num_heads: 2, model_dim: 4, conv_kernel: 3, dropout_rate: 0.1 };
    let block = FftBlock::new(&mut store, &mut rng(40), "fft", params).unwrap();
    let x = store.add("input", randn(41, &[3, 4]));
    cases.push(block_case("fft_block", store, move |g| {
        let xv = g.param(x);
        let y = block.forward(g, xv, &[false, false, false])?;
        project(&mut g.tape, y, 99)
    }));

    let mut store = ParamStore::new();
    let params = DecoderBlockParams { num_heads: 2, model_dim: 4, ffn_dim: 8, dropout_rate: 0.1 };
    let block = DecoderBlock::new(&mut store, &mut rng(42), "dec", params).unwrap();
    let y_in = store.add("y_in", randn(43, &[3, 4]));
    let h = store.add("h", randn(44, &[2, 4]));
    cases.push(block_case("decoder_block", store, move |g| {
        let (yv, hv) = (g.param(y_in), g.param(h));
        let out = block.forward(g, yv, hv)?;
        let a = project(&mut g.tape, out.states, 98)?;
        let b = project(&mut g.tape, out.alignment, 97)?;
        g.tape.add(a, b)
    }));

    let mut store = ParamStore::new();
    let predictor = DurationPredictor::new(&mut store, &mut rng(45), "dur", 4, 2, 3, 0.1).unwrap();
    let h = store.add("h", randn(46, &[5, 4]));
    cases.push(block_case("duration_predictor", store, move |g| {
        let hv = g.param(h);
        let out = predictor.forward(g, hv, &[false; 5])?;
        project(&mut g.tape, out, 99)
    }));
    cases
}

/// All five training objectives.
pub fn loss_cases() -> Vec<Case> {
    let d = Durations(vec![2, 0, 1, 4]);
    let mask = GuidedAttentionMask::new(5, 3, 0.2).unwrap();
    vec![
        tape_case("l1_mel", vec![randn(50, &[4, 3]), randn(51, &[4, 3])], |t, v| l1_mel_var(t, v[0], v[1])),
        tape_case("l2_log_duration", vec![randn(52, &[4])], move |t, v| l2_log_duration_var(t, v[0], &d)),
        tape_case("ctc_loss", vec![randn(53, &[7, 4])], |t, v| t.ctc_loss(v[0], &[1, 1, 0], 3)),
        tape_case("guided_attention", vec![randn(54, &[5, 3])], move |t, v| {
            let w = t.softmax(v[0], 1)?;
            let alpha = t.forward_attention(w)?;
            guided_attention_var(t, alpha, &mask)
        }),
        tape_case("total_loss", vec![randn(55, &[4, 3]), randn(56, &[4, 3]), randn(57, &[3, 4])], |t, v| {
            let a = l1_mel_var(t, v[0], v[1])?;
            let c = t.ctc_loss(v[2], &[0, 1], 3)?;
            let c = t.scale(c, 0.5);
            t.add(a, c)
        }),
    ]
}

pub fn run_cases(cases: Vec<Case>) -> Vec<(&'static str, GradCheckReport)> {
    cases.into_iter().map(|(name, f)| (name, f().unwrap_or_else(|e| panic!("{name}: {e}")))).collect()
}

pub fn small_synthetic(dir: &Path, count: usize, seed: u64, mel_dim: usize) {
    let spec = SyntheticSpec { seed, count, mel_dim, ..SyntheticSpec::default() };
    data::save_corpus(dir, &data::gen_synthetic_corpus(&spec).unwrap()).unwrap();
}

pub fn random_row_stochastic(r: &mut ChaCha8Rng, frames: usize, phonemes: usize) -> Tensor {
    let mut rows = Vec::with_capacity(frames);
    for _ in 0..frames {
        let raw: Vec<f64> = (0..phonemes).map(|_| r.random::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        rows.push(raw.into_iter().map(|v| v / s).collect::<Vec<_>>());
    }
    Tensor::from_rows(&rows).unwrap()
}
