//! Model-level behaviour: batching, branch isolation, the optimizer and
//! short optimization runs.

mod common;

use common::tiny_config;
use jdit::data::{self, SyntheticSpec, Utterance};
use jdit::losses::LossWeights;
use jdit::model::{
    compute_gradients, radam_noam_update, train_step, Batch, BatchItem, JditConfig, JditModel, NoamSchedule,
    OptimizerState, RadamHyper,
};
use jdit::numerics::Tensor;
use jdit::params::{Graph, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus_for(cfg: &JditConfig, seed: u64, count: usize, max_phonemes: usize) -> Vec<Utterance> {
    let spec = SyntheticSpec {
        seed,
        count,
        vocab_size: cfg.vocab_size,
        mel_dim: cfg.mel_dim,
        min_phonemes: 4,
        max_phonemes,
        ..SyntheticSpec::default()
    };
    let corpus = data::gen_synthetic_corpus(&spec).unwrap();
    let stats = data::compute_norm_stats(&corpus).unwrap();
    corpus
        .into_iter()
        .map(|u| Utterance { mel: stats.normalize(&u.mel).unwrap(), ..u })
        .collect()
}

fn items(corpus: &[Utterance]) -> Vec<BatchItem> {
    corpus.iter().map(|u| BatchItem { id: u.id.clone(), phonemes: u.phonemes.clone(), mel: u.mel.clone() }).collect()
}

fn no_dropout(cfg: JditConfig) -> JditConfig {
    JditConfig { dropout: 0.0, prenet_dropout: 0.0, duration_dropout: 0.0, ..cfg }
}

#[test]
fn padding_changes_no_loss_component() {
    let cfg = tiny_config();
    let model = JditModel::new(cfg.clone(), 3).unwrap();
    let corpus = corpus_for(&cfg, 3, 3, 10);
    let plain = compute_gradients(&model, &Batch::new(items(&corpus)).unwrap(), 9, 1).unwrap();
    let padded = Batch::with_padding(items(&corpus), 16, 120).unwrap();
    assert!(padded.phonemes.iter().all(|p| p.len() == 16));
    let padded = compute_gradients(&model, &padded, 9, 1).unwrap();
    for (a, b) in plain.losses.components().iter().zip(padded.losses.components()) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
    assert_eq!(plain.durations, padded.durations);
}

#[test]
fn extracted_durations_cover_every_frame() {
    let cfg = tiny_config();
    let mut model = JditModel::new(cfg.clone(), 5).unwrap();
    let corpus = corpus_for(&cfg, 5, 4, 10);
    let batch = Batch::new(items(&corpus)).unwrap();
    let mut state = OptimizerState::new(model.params());
    for _ in 0..3 {
        let report = train_step(&mut model, &batch, &mut state, 5).unwrap();
        for (d, u) in report.extracted_durations.iter().zip(&corpus) {
            assert_eq!(d.total(), u.frames());
            assert_eq!(d.len(), u.phonemes.len());
        }
        assert!(report.losses.is_finite());
    }
    assert_eq!(state.step, 3);
}

fn grads_by_prefix(cfg: JditConfig, prefixes: &[&str]) -> Vec<(String, f64)> {
    let model = JditModel::new(cfg.clone(), 6).unwrap();
    let out = compute_gradients(&model, &Batch::new(items(&corpus_for(&cfg, 6, 2, 8))).unwrap(), 6, 1).unwrap();
    model
        .params()
        .ids()
        .filter(|&id| prefixes.iter().any(|p| model.params().name(id).starts_with(p)))
        .map(|id| (model.params().name(id).to_string(), out.grads.get(id).data().iter().map(|v| v.abs()).sum()))
        .collect()
}

#[test]
fn feed_forward_loss_never_reaches_the_decoder() {
    let only_ff = LossWeights { l1_ar: 0.0, l1_ff: 1.0, l2_dur: 0.0, ctc: 0.0, guided: 0.0 };
    let grads = grads_by_prefix(JditConfig { loss_weights: only_ff, ..tiny_config() }, &["ar.", "duration."]);
    assert!(!grads.is_empty());
    assert!(grads.iter().all(|(_, g)| *g == 0.0), "{grads:?}");
    let mel = grads_by_prefix(JditConfig { loss_weights: only_ff, ..tiny_config() }, &["mel."]);
    assert!(mel.iter().any(|(_, g)| *g > 0.0));
}

#[test]
fn autoregressive_losses_never_reach_the_feed_forward_branch() {
    let ar_only = LossWeights { l1_ar: 1.0, l1_ff: 0.0, l2_dur: 0.0, ctc: 1.0, guided: 1.0 };
    let grads = grads_by_prefix(JditConfig { loss_weights: ar_only, ..tiny_config() }, &["mel.", "duration."]);
    assert!(grads.iter().all(|(_, g)| *g == 0.0), "{grads:?}");
    let ar = grads_by_prefix(JditConfig { loss_weights: ar_only, ..tiny_config() }, &["ar."]);
    assert!(ar.iter().any(|(_, g)| *g > 0.0));
}

/// Straight transcription of the update rule for one scalar.
struct ScalarRadam {
    theta: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarRadam {
    fn step(&mut self, g: f64, lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.98f64, 1e-9);
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let m_hat = self.m / (1.0 - b1.powi(self.t));
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho = rho_inf - 2.0 * self.t as f64 * b2.powi(self.t) / (1.0 - b2.powi(self.t));
        if rho > 4.0 {
            let v_hat = (self.v / (1.0 - b2.powi(self.t))).sqrt();
            let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
            self.theta -= lr * r * m_hat / (v_hat + eps);
        } else {
            self.theta -= lr * m_hat;
        }
    }
}

#[test]
fn radam_matches_hand_rolled_scalar_reference() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::scalar(0.5));
    let mut state = OptimizerState::new(&store);
    let schedule = NoamSchedule { model_dim: 64, warmup: 4, scale: 1.0 };
    let mut reference = ScalarRadam { theta: 0.5, m: 0.0, v: 0.0, t: 0 };
    // two steps on the un-rectified branch, then onto the rectified one
    for step in 1..=12u64 {
        let grads = {
            let mut g = Graph::new(&store, ChaCha8Rng::seed_from_u64(0), false);
            let w = g.param(id);
            let loss = g.tape.sum(w);
            g.param_grads(loss).unwrap()
        };
        let lr = radam_noam_update(&mut store, &grads, &mut state, &RadamHyper::default(), &schedule);
        reference.step(1.0, schedule.lr(step));
        assert_eq!(lr, schedule.lr(step));
        let got = store.get(id).item();
        assert!((got - reference.theta).abs() < 1e-15, "step {step}: {got} vs {}", reference.theta);
        assert!((state.m[0].item() - reference.m).abs() < 1e-15);
        assert!((state.v[0].item() - reference.v).abs() < 1e-15);
    }
}

#[test]
fn loss_on_a_fixed_batch_goes_down_without_dropout() {
    let cfg = no_dropout(JditConfig::desk());
    let corpus = corpus_for(&cfg, 11, 2, 8);
    let batch = Batch::new(items(&corpus)).unwrap();
    let mut improved = 0;
    let seeds = 10;
    for seed in 0..seeds {
        let mut model = JditModel::new(cfg.clone(), seed).unwrap();
        let mut state = OptimizerState::new(model.params());
        let first = compute_gradients(&model, &batch, seed, 1).unwrap().losses.total;
        for _ in 0..50 {
            train_step(&mut model, &batch, &mut state, seed).unwrap();
        }
        let last = compute_gradients(&model, &batch, seed, 51).unwrap().losses.total;
        improved += usize::from(last <= first);
    }
    assert!(improved * 10 >= seeds as usize * 9, "{improved}/{seeds} seeds improved");
}

#[test]
fn short_desk_run_lowers_the_total_loss() {
    use jdit::cli::{train, RunConfig};
    use jdit::model::Profile;
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { seed: 12, count: 4, mel_dim: JditConfig::desk().mel_dim, ..SyntheticSpec::default() };
    data::save_corpus(&tmp.path().join("corpus"), &data::gen_synthetic_corpus(&spec).unwrap()).unwrap();
    let run = RunConfig {
        seed: 12,
        max_steps: 300,
        checkpoint_interval: 300,
        snapshot_interval: 300,
        corpus_dir: tmp.path().join("corpus"),
        out_dir: tmp.path().join("run"),
        ..RunConfig::for_profile(Profile::Desk)
    };
    let summary = train(&run, None).unwrap();
    let (first, last) = (summary.metrics.first().unwrap(), summary.metrics.last().unwrap());
    assert_eq!(last.step, 300);
    assert!(last.losses.total < first.losses.total, "{} -> {}", first.losses.total, last.losses.total);
}
