//! End-to-end acceptance suite. Each test prints one `PASS`/`FAIL` line
//! straight to stdout, so the verdicts show up even when libtest captures
//! output, and then asserts.
//!
//! The tests share one lock so the timed training run never competes with
//! the others for the CPU.

mod common;

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use jdit::alignment::{extract_durations, forward_attention, length_regulate, AlignmentMatrix};
use jdit::cli::{self, evaluate_durations, read_metrics, RunConfig, METRICS_FILE};
use jdit::data::{self, SyntheticSpec, Utterance};
use jdit::losses::{ctc_loss, LossWeights};
use jdit::model::{
    compute_gradients, durations_from_log, Batch, BatchItem, JditConfig, JditModel, NoamSchedule, Profile,
};
use jdit::numerics::Tensor;
use jdit::Error;
use rand::Rng;

use common::{loss_cases, module_cases, primitive_cases, random_row_stochastic, rng, run_cases, tiny_config};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: u32, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "acceptance {criterion}: {verdict} | {detail}").expect("stdout");
}

// ---------------------------------------------------------------------------
// 1. forward attention against a direct recursion

fn recursion_oracle(w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = w[0].len();
    let mut prev = vec![0.0; n];
    prev[0] = 1.0;
    let mut out = Vec::with_capacity(w.len());
    for row in w {
        let raw: Vec<f64> = (0..n).map(|j| (prev[j] + if j > 0 { prev[j - 1] } else { 0.0 }) * row[j]).collect();
        let total: f64 = raw.iter().sum();
        // no surviving path: the mass is spread evenly
        let next: Vec<f64> = if total == 0.0 { vec![1.0 / n as f64; n] } else { raw.iter().map(|v| v / total).collect() };
        out.push(next.clone());
        prev = next;
    }
    out
}

/// Every way of splitting four quarters over `n` cells.
fn quarter_rows(n: usize) -> Vec<Vec<f64>> {
    fn fill(n: usize, left: usize, cur: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if cur.len() == n - 1 {
            cur.push(left as f64 * 0.25);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k as f64 * 0.25);
            fill(n, left - k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    fill(n, 4, &mut Vec::new(), &mut out);
    out
}

struct OracleTally {
    cases: usize,
    worst_sum: f64,
    worst_diff: f64,
}

impl OracleTally {
    fn check(&mut self, rows: &[Vec<f64>]) {
        let w = AlignmentMatrix::new(Tensor::from_rows(rows).unwrap()).unwrap();
        let h = Tensor::zeros(&[w.phonemes(), 1]);
        let (alpha, _) = forward_attention(&w, &h).unwrap();
        let expected = recursion_oracle(rows);
        for (t, row) in expected.iter().enumerate() {
            let got = alpha.row(t);
            self.worst_sum = self.worst_sum.max((got.iter().sum::<f64>() - 1.0).abs());
            for (a, b) in got.iter().zip(row) {
                self.worst_diff = self.worst_diff.max((a - b).abs());
            }
        }
        self.cases += 1;
    }
}

#[test]
fn criterion_1_forward_attention_oracle() {
    let _guard = serial();
    let started = Instant::now();
    let mut tally = OracleTally { cases: 0, worst_sum: 0.0, worst_diff: 0.0 };
    for n in 1..=4 {
        let rows = quarter_rows(n);
        for t in 1..=4 {
            let mut pick = vec![0usize; t];
            loop {
                let w: Vec<Vec<f64>> = pick.iter().map(|&i| rows[i].clone()).collect();
                tally.check(&w);
                // odometer over row choices
                let mut k = 0;
                while k < t {
                    pick[k] += 1;
                    if pick[k] < rows.len() {
                        break;
                    }
                    pick[k] = 0;
                    k += 1;
                }
                if k == t {
                    break;
                }
            }
        }
    }
    let grid_cases = tally.cases;
    let mut r = rng(1);
    for _ in 0..10_000 {
        let (t, n) = (r.random_range(1..=16), r.random_range(1..=16));
        let w = random_row_stochastic(&mut r, t, n);
        let rows: Vec<Vec<f64>> = (0..t).map(|i| w.row(i).to_vec()).collect();
        tally.check(&rows);
    }

    let hand = AlignmentMatrix::new(Tensor::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap()).unwrap();
    let (alpha, _) = forward_attention(&hand, &Tensor::zeros(&[2, 1])).unwrap();
    let hand_ok = alpha.row(1) == [1.0 / 3.0, 2.0 / 3.0];

    let seconds = started.elapsed().as_secs_f64();
    let passed = tally.worst_sum <= 1e-6 && tally.worst_diff <= 1e-12 && hand_ok && seconds < 10.0;
    report(
        1,
        passed,
        &format!(
            "{grid_cases} grid + 10000 random matrices, max |row sum - 1| {:.1e}, max diff vs oracle {:.1e}, \
             2x2 hand case {:?}, {seconds:.2}s",
            tally.worst_sum,
            tally.worst_diff,
            alpha.row(1)
        ),
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// 2. CTC against an explicit sum over every frame labelling

fn brute_force_ctc(logits: &Tensor, target: &[usize]) -> f64 {
    let (frames, classes) = (logits.rows(), logits.cols());
    let blank = classes - 1;
    let log_softmax: Vec<Vec<f64>> = (0..frames)
        .map(|t| {
            let row = logits.row(t);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(|v| v - z.ln()).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    loop {
        let mut collapsed = Vec::new();
        let mut last = None;
        for &c in &path {
            if Some(c) != last && c != blank {
                collapsed.push(c);
            }
            last = Some(c);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &c)| log_softmax[t][c]).sum::<f64>().exp();
        }
        let mut k = 0;
        while k < frames {
            path[k] += 1;
            if path[k] < classes {
                break;
            }
            path[k] = 0;
            k += 1;
        }
        if k == frames {
            break;
        }
    }
    -total.ln()
}

#[test]
fn criterion_2_ctc_matches_brute_force() {
    let _guard = serial();
    let started = Instant::now();
    let mut r = rng(2);
    let (mut worst, mut infeasible, mut mismatched) = (0.0f64, 0, 0);
    for _ in 0..1000 {
        let frames = r.random_range(1..=6);
        let vocab = r.random_range(1..=3);
        let len = r.random_range(0..=3);
        let target: Vec<usize> = (0..len).map(|_| r.random_range(0..vocab)).collect();
        let logits = Tensor::matrix(frames, vocab + 1, (0..frames * (vocab + 1)).map(|_| r.random_range(-3.0..3.0)).collect())
            .unwrap();
        let expected = brute_force_ctc(&logits, &target);
        match ctc_loss(&logits, &target) {
            Ok(v) if expected.is_finite() => worst = worst.max((v - expected).abs()),
            Err(Error::CtcTooShort { .. }) if expected.is_infinite() => infeasible += 1,
            _ => mismatched += 1,
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    let passed = worst <= 1e-9 && mismatched == 0 && seconds < 30.0;
    report(
        2,
        passed,
        &format!(
            "1000 cases ({infeasible} with no valid path), max |loss - brute force| {worst:.1e}, \
             {mismatched} disagreements, {seconds:.2}s"
        ),
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// 3. finite-difference gradient suite

#[test]
fn criterion_3_gradient_suite() {
    let _guard = serial();
    let started = Instant::now();
    let mut results = run_cases(primitive_cases());
    results.extend(run_cases(module_cases()));
    results.extend(run_cases(loss_cases()));
    let seconds = started.elapsed().as_secs_f64();
    let failed: Vec<&str> = results.iter().filter(|(_, r)| !r.passed).map(|(name, _)| *name).collect();
    let worst = results.iter().map(|(_, r)| r.max_rel_diff).fold(0.0, f64::max);
    let passed = failed.is_empty() && seconds < 120.0;
    report(
        3,
        passed,
        &format!("{} checks, worst relative error {worst:.1e}, failed {failed:?}, {seconds:.2}s", results.len()),
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// 4. the duration loss does not reach the encoder

fn tiny_corpus(seed: u64, count: usize) -> Vec<Utterance> {
    let cfg = tiny_config();
    let spec = SyntheticSpec {
        seed,
        count,
        vocab_size: cfg.vocab_size,
        mel_dim: cfg.mel_dim,
        max_phonemes: 10,
        ..SyntheticSpec::default()
    };
    data::gen_synthetic_corpus(&spec).unwrap()
}

fn batch_of(corpus: &[Utterance]) -> Batch {
    Batch::new(
        corpus.iter().map(|u| BatchItem { id: u.id.clone(), phonemes: u.phonemes.clone(), mel: u.mel.clone() }).collect(),
    )
    .unwrap()
}

#[test]
fn criterion_4_duration_loss_stops_at_the_encoder() {
    let _guard = serial();
    let config = JditConfig { loss_weights: LossWeights::duration_only(), ..tiny_config() };
    let model = JditModel::new(config, 4).unwrap();
    let out = compute_gradients(&model, &batch_of(&tiny_corpus(4, 3)), 4, 1).unwrap();
    let (mut encoder_max, mut encoder_count, mut duration_norm, mut duration_zero) = (0.0f64, 0, 0.0, Vec::new());
    for id in model.params().ids() {
        let name = model.params().name(id);
        let g = out.grads.get(id);
        if JditModel::is_encoder_param(name) {
            encoder_count += 1;
            encoder_max = g.data().iter().fold(encoder_max, |m, v| m.max(v.abs()));
        } else if JditModel::is_duration_param(name) {
            let sq: f64 = g.data().iter().map(|v| v * v).sum();
            if sq == 0.0 {
                duration_zero.push(name.to_string());
            }
            duration_norm += sq;
        }
    }
    let duration_norm = duration_norm.sqrt();
    let passed = encoder_count > 0 && encoder_max == 0.0 && duration_norm > 0.0;
    report(
        4,
        passed,
        &format!(
            "{encoder_count} encoder tensors, max |grad| {encoder_max:e}; duration predictor grad norm {duration_norm:.3e} \
             (zero tensors: {duration_zero:?})"
        ),
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// 5. frame conservation

#[test]
fn criterion_5_durations_conserve_frames() {
    let _guard = serial();
    let mut r = rng(5);
    let (mut bad_sum, mut bad_len) = (0, 0);
    for i in 0..10_000 {
        let (t, n) = (r.random_range(1..=64), r.random_range(1..=32));
        let mut w = random_row_stochastic(&mut r, t, n);
        if i % 2 == 1 {
            // sharpen every other matrix so ties and one-hot rows show up
            w = w.map(|v| if v > 0.5 / n as f64 { v * v } else { 0.0 });
            for row in 0..t {
                let s: f64 = w.row(row).iter().sum();
                let fix: Vec<f64> = if s > 0.0 { w.row(row).iter().map(|v| v / s).collect() } else { vec![1.0 / n as f64; n] };
                w.row_mut(row).copy_from_slice(&fix);
            }
        }
        let d = extract_durations(&AlignmentMatrix::new(w).unwrap());
        bad_sum += usize::from(d.total() != t);
        let h = Tensor::zeros(&[n, 2]);
        let expanded = length_regulate(&h, &d).unwrap();
        bad_len += usize::from(expanded.rows() != d.total());
    }
    let passed = bad_sum == 0 && bad_len == 0;
    report(5, passed, &format!("10000 alignments, {bad_sum} with sum(d) != T, {bad_len} with |LR(h, d)| != sum(d)"));
    assert!(passed);
}

// ---------------------------------------------------------------------------
// 6 and 7. joint training at desk scale, then synthesis from the result

const DESK_SEED: u64 = 1;
const DESK_UTTERANCES: usize = 16;
const DESK_STEPS: u64 = 3000;
const DESK_BUDGET_SECONDS: f64 = 20.0 * 60.0;

fn desk_corpus(dir: &Path) -> Vec<Utterance> {
    let spec = SyntheticSpec {
        seed: DESK_SEED,
        count: DESK_UTTERANCES,
        mel_dim: JditConfig::desk().mel_dim,
        ..SyntheticSpec::default()
    };
    let corpus = data::gen_synthetic_corpus(&spec).unwrap();
    data::save_corpus(dir, &corpus).unwrap();
    corpus
}

#[test]
fn criterion_6_and_7_desk_training_and_synthesis() {
    let _guard = serial();
    let tmp = tempfile::tempdir().unwrap();
    let corpus_dir = tmp.path().join("corpus");
    let corpus = desk_corpus(&corpus_dir);
    let run = RunConfig {
        seed: DESK_SEED,
        max_steps: DESK_STEPS,
        checkpoint_interval: DESK_STEPS,
        snapshot_interval: 500,
        corpus_dir,
        out_dir: tmp.path().join("run"),
        ..RunConfig::for_profile(Profile::Desk)
    };
    let outcome = cli::train(&run, None);
    let no_nan = !matches!(outcome, Err(Error::Numerical(_)) | Err(Error::NonFinite { .. }));
    let summary = match outcome {
        Ok(s) => s,
        Err(e) => {
            report(6, false, &format!("training aborted: {e}"));
            report(7, false, "no trained model");
            panic!("training aborted: {e}");
        }
    };
    let metrics = read_metrics(&run.out_dir.join(METRICS_FILE)).unwrap();
    let at = |step: u64| metrics.iter().find(|m| m.step == step).unwrap().losses;
    let (early, last) = (at(10), metrics.last().unwrap().losses);
    let (model, stats) = cli::load_model(&summary.last_checkpoint).unwrap();
    let stats = stats.unwrap();
    let eval = evaluate_durations(&model, &stats, &corpus, DESK_SEED).unwrap();

    let a = last.l1_ff < 0.5 * early.l1_ff;
    let b = eval.extracted_mae <= 1.0 && eval.within_one >= 0.70;
    let c = eval.predicted_mae <= 2.0;
    let d = last.guided < early.guided;
    let in_budget = summary.seconds <= DESK_BUDGET_SECONDS && summary.final_step <= DESK_STEPS;
    let six = a && b && c && d && no_nan && in_budget;
    report(
        6,
        six,
        &format!(
            "{} steps in {:.0}s; (a) l1_ff {:.4} -> {:.4} [{}]; (b) extracted MAE {:.3}, within +-1 {:.1}% [{}]; \
             (c) predictor MAE {:.3} [{}]; (d) guided {:.5} -> {:.5} [{}]; (e) no NaN [{}]",
            summary.final_step,
            summary.seconds,
            early.l1_ff,
            last.l1_ff,
            verdict(a),
            eval.extracted_mae,
            100.0 * eval.within_one,
            verdict(b),
            eval.predicted_mae,
            verdict(c),
            early.guided,
            last.guided,
            verdict(d),
            verdict(no_nan),
        ),
    );

    let phonemes = &corpus[0].phonemes;
    let calls_before = model.ar_invocations();
    let (mel, durations) = model.synthesize(phonemes).unwrap();
    let (again, durations_again) = model.synthesize(phonemes).unwrap();
    let calls_after = model.ar_invocations();
    let log_d = predicted_log_durations(&model, phonemes);
    let expected = durations_from_log(&log_d);
    let length_ok = mel.rows() == expected.total() && durations == expected;
    let deterministic = mel == again && durations == durations_again;
    let no_ar = calls_after == calls_before;
    let seven = length_ok && deterministic && no_ar;
    report(
        7,
        seven,
        &format!(
            "{} phonemes -> {} frames, sum of predicted durations {} [{}]; repeat identical [{}]; \
             autoregressive calls {calls_before} -> {calls_after} [{}]",
            phonemes.len(),
            mel.rows(),
            expected.total(),
            verdict(length_ok),
            verdict(deterministic),
            verdict(no_ar),
        ),
    );
    assert!(six, "desk training run missed its targets");
    assert!(seven, "synthesis contract violated");
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "MISSED"
    }
}

/// Log-domain predictor output, computed through the public building blocks.
fn predicted_log_durations(model: &JditModel, phonemes: &[usize]) -> Vec<f64> {
    use rand::SeedableRng;
    let mut g = model.graph(rand_chacha::ChaCha8Rng::seed_from_u64(0), false);
    let h = model.encode(&mut g, phonemes).unwrap();
    let log_d = model.predict_durations(&mut g, h).unwrap();
    g.value(log_d).data().to_vec()
}

// ---------------------------------------------------------------------------
// 8. determinism and resumption

fn small_run(tmp: &Path, name: &str, max_steps: u64) -> RunConfig {
    let model = JditConfig {
        mel_dim: 8,
        model_dim: 16,
        ffn_dim: 32,
        num_fft_blocks: 1,
        num_heads: 2,
        prenet_layers: 1,
        warmup_steps: 40,
        ..JditConfig::desk()
    };
    RunConfig {
        model,
        seed: 8,
        batch_size: 4,
        max_steps,
        checkpoint_interval: 50,
        snapshot_interval: 50,
        corpus_dir: tmp.join("corpus"),
        out_dir: tmp.join(name),
        ..RunConfig::for_profile(Profile::Desk)
    }
}

#[test]
fn criterion_8_determinism_and_resume() {
    let _guard = serial();
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { seed: 8, count: 6, mel_dim: 8, max_phonemes: 12, ..SyntheticSpec::default() };
    data::save_corpus(&tmp.path().join("corpus"), &data::gen_synthetic_corpus(&spec).unwrap()).unwrap();

    let first = small_run(tmp.path(), "first", 150);
    let second = small_run(tmp.path(), "second", 150);
    cli::train(&first, None).unwrap();
    cli::train(&second, None).unwrap();
    let read = |run: &RunConfig, file: &str| std::fs::read(run.out_dir.join(file)).unwrap();
    let same_metrics = read(&first, METRICS_FILE) == read(&second, METRICS_FILE);

    // interrupted at 100, then resumed from that checkpoint to 150
    let interrupted = small_run(tmp.path(), "resumed", 100);
    cli::train(&interrupted, None).unwrap();
    let resumed = small_run(tmp.path(), "resumed", 150);
    let ckpt = resumed.out_dir.join("checkpoints").join("step_000100.jdit");
    cli::train(&resumed, Some(&ckpt)).unwrap();
    let resume_metrics = read(&first, METRICS_FILE) == read(&resumed, METRICS_FILE);
    let resume_weights = read(&first, cli::LAST_CHECKPOINT) == read(&resumed, cli::LAST_CHECKPOINT);

    let passed = same_metrics && resume_metrics && resume_weights;
    report(
        8,
        passed,
        &format!(
            "identical metrics across seeded runs [{}]; resumed metrics [{}] and final checkpoint bytes [{}] match \
             the uninterrupted run",
            verdict(same_metrics),
            verdict(resume_metrics),
            verdict(resume_weights),
        ),
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// 9. warmup schedule

#[test]
fn criterion_9_learning_rate_schedule() {
    let _guard = serial();
    let mut worst = 0.0f64;
    let mut ratios = Vec::new();
    for cfg in [JditConfig::desk(), JditConfig::default()] {
        let schedule = NoamSchedule { model_dim: cfg.model_dim, warmup: cfg.warmup_steps, scale: cfg.lr_scale };
        let (d, w) = (cfg.model_dim as f64, cfg.warmup_steps as f64);
        let closed = |s: f64| cfg.lr_scale / d.sqrt() * (1.0 / s.sqrt()).min(s / (w * w.sqrt()));
        for s in [1, cfg.warmup_steps, 2 * cfg.warmup_steps] {
            worst = worst.max((schedule.lr(s) - closed(s as f64)).abs());
        }
        ratios.push(schedule.lr(2 * cfg.warmup_steps) / schedule.lr(cfg.warmup_steps));
    }
    let ratio_err = ratios.iter().map(|r| (r - 0.5f64.sqrt()).abs()).fold(0.0, f64::max);
    let passed = worst <= 1e-12 && ratio_err <= 1e-12;
    report(
        9,
        passed,
        &format!("max |lr - closed form| {worst:.1e} at steps 1, w, 2w; lr(2w)/lr(w) = {ratios:?} (error {ratio_err:.1e})"),
    );
    assert!(passed);
}
