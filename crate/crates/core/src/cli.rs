//! Command-line entry points and the training driver behind them.
//!
//! Exit codes: 0 on success, 2 for usage or input errors, 3 when training
//! hits a non-finite value.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{debug, info};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::Durations;
use crate::data::{self, NormStats, SyntheticSpec, Utterance};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{
    durations_from_log, extract_utterance_durations, parse_pairs, teacher_forced_alignment, train_step, Batch,
    BatchItem, Checkpoint, JditConfig, JditModel, OptimizerState, Profile,
};
use crate::numerics::Tensor;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,l1_ar,l1_ff,l2_dur,ctc,guided,total,grad_norm,lr";
pub const LAST_CHECKPOINT: &str = "last.jdit";
pub const NAN_DUMP: &str = "nan_dump.txt";
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

#[derive(Debug, Parser)]
#[command(name = "jdit", version, about = "Jointly trained duration-informed text-to-speech acoustic model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with known phoneme durations.
    GenCorpus(GenCorpusArgs),
    /// Train the joint model on a corpus.
    Train(TrainArgs),
    /// Synthesize a mel spectrogram from phoneme ids.
    Synthesize(SynthesizeArgs),
    /// Compare extracted and predicted durations with the ground truth.
    EvalDurations(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "desk")]
    pub profile: Profile,
    /// Mel bins; defaults to the profile's value.
    #[arg(long)]
    pub mel_dim: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub noise_sigma: f64,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// File of key=value lines; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Space-separated phoneme ids, e.g. "3 17 5".
    #[arg(long)]
    pub phonemes: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Per-phoneme CSV; defaults to `durations.csv` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Everything a training run needs besides the corpus contents.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: JditConfig,
    pub profile: Profile,
    pub seed: u64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub checkpoint_interval: u64,
    pub snapshot_interval: u64,
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (max_steps, checkpoint_interval) = match profile {
            Profile::Paper => (300_000, 1000),
            Profile::Desk => (3000, 100),
        };
        RunConfig {
            model: JditConfig::for_profile(profile),
            profile,
            seed: 0,
            batch_size: 16,
            max_steps,
            checkpoint_interval,
            snapshot_interval: 100,
            corpus_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
        }
    }

    /// Profile defaults, then the config file, then flags.
    pub fn resolve(args: &TrainArgs) -> Result<Self> {
        let file_pairs = match &args.config {
            Some(path) => parse_pairs(&fs::read_to_string(path)?)?,
            None => Vec::new(),
        };
        let file_profile = file_pairs.iter().find(|(k, _)| k == "profile").map(|(_, v)| v.parse()).transpose()?;
        let profile = args.profile.or(file_profile).unwrap_or(Profile::Desk);
        let mut run = RunConfig::for_profile(profile);
        for (k, v) in &file_pairs {
            run.set_key(k, v)?;
        }
        if let Some(v) = args.seed {
            run.seed = v;
        }
        if let Some(v) = &args.corpus {
            run.corpus_dir = v.clone();
        }
        if let Some(v) = &args.out {
            run.out_dir = v.clone();
        }
        if let Some(v) = args.max_steps {
            run.max_steps = v;
        }
        if let Some(v) = args.batch_size {
            run.batch_size = v;
        }
        if let Some(v) = args.checkpoint_interval {
            run.checkpoint_interval = v;
        }
        if let Some(v) = args.warmup_steps {
            run.model.warmup_steps = v;
        }
        run.validate()?;
        Ok(run)
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::arg(format!("config key {key}: cannot parse {value:?}"));
        match key {
            "profile" => {}
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad())?,
            "max_steps" => self.max_steps = value.parse().map_err(|_| bad())?,
            "checkpoint_interval" => self.checkpoint_interval = value.parse().map_err(|_| bad())?,
            "snapshot_interval" => self.snapshot_interval = value.parse().map_err(|_| bad())?,
            "corpus_dir" => self.corpus_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => self.model.apply_pairs([(key, value)])?,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.max_steps == 0 || self.checkpoint_interval == 0 || self.snapshot_interval == 0 {
            return Err(Error::arg("batch_size, max_steps and the intervals must be positive"));
        }
        if self.corpus_dir.as_os_str().is_empty() || !self.corpus_dir.is_dir() {
            return Err(Error::arg(format!("corpus directory {:?} not found", self.corpus_dir)));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::arg("an output directory is required"));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub losses: LossBreakdown,
    pub grad_norm: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, l.l1_ar, l.l1_ff, l.l2_dur, l.ctc, l.guided, l.total, self.grad_norm, self.lr
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let bad = || Error::arg(format!("bad metrics line {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(MetricsRow {
            step: f[0].parse().map_err(|_| bad())?,
            losses: LossBreakdown {
                l1_ar: num(1)?,
                l1_ff: num(2)?,
                l2_dur: num(3)?,
                ctc: num(4)?,
                guided: num(5)?,
                total: num(6)?,
            },
            grad_norm: num(7)?,
            lr: num(8)?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    fs::read_to_string(path)?.lines().skip(1).filter(|l| !l.is_empty()).map(MetricsRow::from_csv).collect()
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub final_step: u64,
    /// Rows written by this invocation.
    pub metrics: Vec<MetricsRow>,
    pub last_checkpoint: PathBuf,
    pub seconds: f64,
}

/// Loads a corpus and checks it against the model vocabulary and mel size.
fn load_training_corpus(run: &RunConfig) -> Result<Vec<Utterance>> {
    let corpus = data::load_corpus(&run.corpus_dir)?;
    if corpus.is_empty() {
        return Err(Error::arg(format!("corpus {} has no utterances", run.corpus_dir.display())));
    }
    for u in &corpus {
        if u.mel.cols() != run.model.mel_dim {
            return Err(Error::arg(format!("{}: {} mel bins, config expects {}", u.id, u.mel.cols(), run.model.mel_dim)));
        }
        if let Some(&p) = u.phonemes.iter().find(|&&p| p >= run.model.vocab_size) {
            return Err(Error::arg(format!("{}: phoneme id {p} outside vocabulary", u.id)));
        }
    }
    Ok(corpus)
}

/// Indices of the utterances used at `step`: the whole corpus when it fits
/// in one batch, otherwise a draw without replacement fixed by `(seed, step)`.
pub fn batch_indices(corpus_len: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    if batch_size >= corpus_len {
        return (0..corpus_len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c);
    rng.set_stream(step);
    let mut idx = sample(&mut rng, corpus_len, batch_size).into_vec();
    idx.sort_unstable();
    idx
}

fn normalized_items(corpus: &[Utterance], stats: &NormStats) -> Result<Vec<BatchItem>> {
    corpus
        .iter()
        .map(|u| {
            Ok(BatchItem { id: u.id.clone(), phonemes: u.phonemes.clone(), mel: stats.normalize(&u.mel)? })
        })
        .collect()
}

fn checkpoint_with_extras(model: &JditModel, state: &OptimizerState, run: &RunConfig, stats: &NormStats) -> Checkpoint {
    let mut ck = Checkpoint::capture(model, Some(state));
    ck.set_meta("seed", run.seed);
    ck.set_meta("batch_size", run.batch_size);
    ck.tensors.push((NORM_MEAN.into(), Tensor::vector(stats.mean.clone())));
    ck.tensors.push((NORM_STD.into(), Tensor::vector(stats.std.clone())));
    ck
}

/// Normalization statistics stored alongside the weights, if any.
pub fn checkpoint_norm_stats(ck: &Checkpoint) -> Option<NormStats> {
    let (mean, std) = (ck.tensor(NORM_MEAN)?, ck.tensor(NORM_STD)?);
    Some(NormStats { mean: mean.data().to_vec(), std: std.data().to_vec() })
}

/// Keeps the header and the rows up to `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let mut kept = format!("{METRICS_HEADER}\n");
    if path.exists() {
        for line in fs::read_to_string(path)?.lines().skip(1).filter(|l| !l.is_empty()) {
            if MetricsRow::from_csv(line)?.step <= step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Runs the training loop described by `run`, optionally resuming from a
/// checkpoint written by an earlier run with the same settings.
pub fn train(run: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    run.validate()?;
    let started = Instant::now();
    let corpus = load_training_corpus(run)?;
    let stats = data::compute_norm_stats(&corpus)?;
    let items = normalized_items(&corpus, &stats)?;
    fs::create_dir_all(&run.out_dir)?;
    stats.write(&run.out_dir.join(data::NORM_FILE))?;

    let (mut model, mut state) = match resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            if ck.meta("seed") != Some(run.seed.to_string().as_str()) {
                return Err(Error::arg(format!("checkpoint was trained with seed {:?}", ck.meta("seed"))));
            }
            let (model, state) = ck.restore(Some(&run.model))?;
            let state = state.ok_or_else(|| Error::Checkpoint("no optimizer state to resume from".into()))?;
            (model, state)
        }
        None => {
            let model = JditModel::new(run.model.clone(), run.seed)?;
            let state = OptimizerState::new(model.params());
            (model, state)
        }
    };
    let metrics_path = run.out_dir.join(METRICS_FILE);
    truncate_metrics(&metrics_path, state.step)?;
    let ckpt_dir = run.out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    info!(
        "training {} parameters on {} utterances from step {}",
        model.params().numel(),
        corpus.len(),
        state.step + 1
    );

    let mut rows = Vec::new();
    let mut metrics_text = String::new();
    let flush = |text: &mut String| -> Result<()> {
        use std::io::Write;
        let mut f = fs::OpenOptions::new().append(true).open(&metrics_path)?;
        f.write_all(text.as_bytes())?;
        text.clear();
        Ok(())
    };
    while state.step < run.max_steps {
        let step = state.step + 1;
        let idx = batch_indices(items.len(), run.batch_size, run.seed, step);
        let batch = Batch::new(idx.iter().map(|&i| items[i].clone()).collect())?;
        let report = match train_step(&mut model, &batch, &mut state, run.seed) {
            Ok(r) => r,
            Err(e @ (Error::Numerical(_) | Error::NonFinite { .. })) => {
                let msg = match e {
                    Error::Numerical(msg) => msg,
                    other => format!("step {step}: {other}"),
                };
                flush(&mut metrics_text)?;
                let dump = run.out_dir.join(NAN_DUMP);
                fs::write(&dump, format!("{msg}\n"))?;
                return Err(Error::Numerical(format!("{msg} (diagnostics in {})", dump.display())));
            }
            Err(e) => return Err(e),
        };
        let row = MetricsRow { step, losses: report.losses, grad_norm: report.grad_norm, lr: report.lr };
        writeln!(metrics_text, "{}", row.to_csv()).expect("string write");
        rows.push(row);
        debug!("{}", row.to_csv());
        if step % 10 == 0 {
            info!(
                "step {step}: total {:.4} (ar {:.4} ff {:.4} dur {:.4} ctc {:.4} guided {:.4})",
                row.losses.total, row.losses.l1_ar, row.losses.l1_ff, row.losses.l2_dur, row.losses.ctc, row.losses.guided
            );
        }
        if step % run.snapshot_interval == 0 {
            let alpha = teacher_forced_alignment(&model, &items[0].phonemes, &items[0].mel, run.seed)?;
            alpha.write_pgm(&run.out_dir.join(format!("alignment_{step:06}.pgm")))?;
        }
        if step % run.checkpoint_interval == 0 || step == run.max_steps {
            flush(&mut metrics_text)?;
            let ck = checkpoint_with_extras(&model, &state, run, &stats);
            ck.write(&ckpt_dir.join(format!("step_{step:06}.jdit")))?;
            ck.write(&run.out_dir.join(LAST_CHECKPOINT))?;
        }
    }
    flush(&mut metrics_text)?;
    let last = run.out_dir.join(LAST_CHECKPOINT);
    if !last.exists() {
        checkpoint_with_extras(&model, &state, run, &stats).write(&last)?;
    }
    Ok(TrainSummary {
        final_step: state.step,
        metrics: rows,
        last_checkpoint: last,
        seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn parse_phonemes(text: &str) -> Result<Vec<usize>> {
    let ids = text
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| Error::arg(format!("bad phoneme id {v:?}"))))
        .collect::<Result<Vec<usize>>>()?;
    if ids.is_empty() {
        return Err(Error::arg("no phoneme ids given"));
    }
    Ok(ids)
}

/// Loads a checkpoint for inference.
pub fn load_model(path: &Path) -> Result<(JditModel, Option<NormStats>)> {
    let ck = Checkpoint::read(path)?;
    let stats = checkpoint_norm_stats(&ck);
    let (model, _) = ck.restore(None)?;
    Ok((model, stats))
}

/// Synthesizes a raw-scale mel and returns it with the durations used.
pub fn synthesize_to_file(ckpt: &Path, phonemes: &[usize], out: &Path) -> Result<(Tensor, Durations)> {
    let (model, stats) = load_model(ckpt)?;
    let (mel, d) = model.synthesize(phonemes)?;
    let mel = match stats {
        Some(s) => s.denormalize(&mel)?,
        None => mel,
    };
    data::write_mel(out, &mel)?;
    Ok((mel, d))
}

/// Duration accuracy over a corpus with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationEval {
    pub phonemes: usize,
    /// Mean absolute frame error of the alignment-extracted durations.
    pub extracted_mae: f64,
    /// Fraction of phonemes whose extracted duration is within one frame.
    pub within_one: f64,
    /// Mean absolute frame error of the predictor's rounded durations.
    pub predicted_mae: f64,
    pub csv: String,
}

pub fn evaluate_durations(model: &JditModel, stats: &NormStats, corpus: &[Utterance], seed: u64) -> Result<DurationEval> {
    let mut csv = String::from("id,n,true,extracted,predicted\n");
    let (mut count, mut ext_err, mut within, mut pred_err) = (0usize, 0.0, 0usize, 0.0);
    for u in corpus {
        let truth = u
            .true_durations
            .as_ref()
            .ok_or_else(|| Error::arg(format!("utterance {} has no ground-truth durations", u.id)))?;
        let mel = stats.normalize(&u.mel)?;
        let extracted = extract_utterance_durations(model, &u.phonemes, &mel, seed)?;
        let mut g = model.graph(ChaCha8Rng::seed_from_u64(seed), false);
        let h = model.encode(&mut g, &u.phonemes)?;
        let log_d = model.predict_durations(&mut g, h)?;
        let predicted = durations_from_log(g.value(log_d).data());
        for n in 0..truth.len() {
            let (t, e, p) = (truth[n], extracted.0[n], predicted.0[n]);
            writeln!(csv, "{},{n},{t},{e},{p}", u.id).expect("string write");
            ext_err += t.abs_diff(e) as f64;
            pred_err += t.abs_diff(p) as f64;
            within += usize::from(t.abs_diff(e) <= 1);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::arg("corpus has no phonemes to evaluate"));
    }
    let c = count as f64;
    Ok(DurationEval {
        phonemes: count,
        extracted_mae: ext_err / c,
        within_one: within as f64 / c,
        predicted_mae: pred_err / c,
        csv,
    })
}

fn cmd_gen_corpus(args: &GenCorpusArgs) -> Result<()> {
    if args.count == 0 {
        return Err(Error::arg("--count must be at least 1"));
    }
    let spec = SyntheticSpec {
        seed: args.seed,
        count: args.count,
        mel_dim: args.mel_dim.unwrap_or(JditConfig::for_profile(args.profile).mel_dim),
        noise_sigma: args.noise_sigma,
        ..SyntheticSpec::default()
    };
    let corpus = data::gen_synthetic_corpus(&spec)?;
    data::save_corpus(&args.out, &corpus)?;
    data::compute_norm_stats(&corpus)?.write(&args.out.join(data::NORM_FILE))?;
    let frames: usize = corpus.iter().map(Utterance::frames).sum();
    println!("wrote {} utterances, {frames} frames, to {}", corpus.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let run = RunConfig::resolve(args)?;
    let summary = train(&run, args.ckpt.as_deref())?;
    if let Some(last) = summary.metrics.last() {
        println!("step {}: total loss {}", last.step, last.losses.total);
    }
    println!("checkpoint: {} ({:.1}s)", summary.last_checkpoint.display(), summary.seconds);
    Ok(())
}

fn cmd_synthesize(args: &SynthesizeArgs) -> Result<()> {
    let phonemes = parse_phonemes(&args.phonemes)?;
    let (mel, d) = synthesize_to_file(&args.ckpt, &phonemes, &args.out)?;
    let d: Vec<String> = d.as_slice().iter().map(usize::to_string).collect();
    println!("durations: {}", d.join(" "));
    println!("wrote {} frames to {}", mel.rows(), args.out.display());
    Ok(())
}

fn cmd_eval_durations(args: &EvalArgs) -> Result<()> {
    let (model, stats) = load_model(&args.ckpt)?;
    let corpus = data::load_corpus(&args.corpus)?;
    let stats = match stats {
        Some(s) => s,
        None => NormStats::read(&args.corpus.join(data::NORM_FILE))?,
    };
    let eval = evaluate_durations(&model, &stats, &corpus, args.seed)?;
    let out = args.out.clone().unwrap_or_else(|| args.ckpt.with_file_name("durations.csv"));
    fs::write(&out, &eval.csv)?;
    println!("phonemes: {}", eval.phonemes);
    println!("extracted MAE: {:.4} frames", eval.extracted_mae);
    println!("extracted within ±1 frame: {:.2}%", 100.0 * eval.within_one);
    println!("predicted MAE: {:.4} frames", eval.predicted_mae);
    println!("per-phoneme table: {}", out.display());
    Ok(())
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numerical(_) | Error::NonFinite { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Runs a parsed command line and maps the outcome to an exit code.
pub fn run(cli: Cli) -> ExitCode {
    let result = match &cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::Train(a) => cmd_train(a),
        Command::Synthesize(a) => cmd_synthesize(a),
        Command::EvalDurations(a) => cmd_eval_durations(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
