//! Corpus storage, per-dimension mel normalization and the synthetic corpus
//! generator.
//!
//! A corpus directory holds `meta.tsv` and one `<id>.mel` per utterance:
//!
//! ```text
//! meta.tsv:  id \t n \t t \t phoneme ids (space separated) \t durations (optional)
//! <id>.mel:  "MEL0" | T u32 | D u32 | T·D f64, little-endian, row-major
//! norm.tsv:  dimension \t mean \t std
//! ```

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const META_FILE: &str = "meta.tsv";
pub const NORM_FILE: &str = "norm.tsv";
pub const MEL_MAGIC: &[u8; 4] = b"MEL0";
const META_HEADER: &str = "id\tn\tt\tphonemes\tdurations";

/// Smallest standard deviation used for normalization.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub phonemes: Vec<usize>,
    /// Raw `[T×D]` mel frames.
    pub mel: Tensor,
    /// Ground-truth frames per phoneme, known only for synthetic data.
    pub true_durations: Option<Vec<usize>>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.mel.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['\t', '\n', '/']) {
            return Err(Error::arg(format!("invalid utterance id {:?}", self.id)));
        }
        if self.phonemes.is_empty() || self.mel.rank() != 2 || self.mel.rows() == 0 {
            return Err(Error::arg(format!("utterance {} is empty", self.id)));
        }
        if let Some(d) = &self.true_durations {
            if d.len() != self.phonemes.len() || d.iter().sum::<usize>() != self.frames() {
                return Err(Error::arg(format!(
                    "utterance {}: durations do not cover {} phonemes and {} frames",
                    self.id,
                    self.phonemes.len(),
                    self.frames()
                )));
            }
        }
        Ok(())
    }
}

/// Per-dimension mean and standard deviation of the training mels.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, mel: &Tensor) -> Result<Tensor> {
        self.check(mel)?;
        let d = self.dim();
        let data = mel.data().iter().enumerate().map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d]).collect();
        Tensor::new(mel.shape().to_vec(), data)
    }

    pub fn denormalize(&self, mel: &Tensor) -> Result<Tensor> {
        self.check(mel)?;
        let d = self.dim();
        let data = mel.data().iter().enumerate().map(|(i, v)| v * self.std[i % d] + self.mean[i % d]).collect();
        Tensor::new(mel.shape().to_vec(), data)
    }

    fn check(&self, mel: &Tensor) -> Result<()> {
        if mel.rank() != 2 || mel.cols() != self.dim() {
            return Err(Error::shape(format!("mel {:?} for {}-dim statistics", mel.shape(), self.dim())));
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("dimension\tmean\tstd\n");
        for (i, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            out.push_str(&format!("{i}\t{m}\t{s}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut stats = NormStats { mean: Vec::new(), std: Vec::new() };
        for (offset, line) in lines_with_offsets(text).skip(1) {
            let err = |message: String| Error::Parse { path: path.to_path_buf(), offset, message };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, got {}", fields.len())));
            }
            let dim: usize = fields[0].parse().map_err(|_| err(format!("bad dimension {:?}", fields[0])))?;
            if dim != stats.mean.len() {
                return Err(err(format!("dimension {dim} out of order")));
            }
            let mean: f64 = fields[1].parse().map_err(|_| err(format!("bad mean {:?}", fields[1])))?;
            let std: f64 = fields[2].parse().map_err(|_| err(format!("bad std {:?}", fields[2])))?;
            if !(std > 0.0) {
                return Err(err(format!("std must be positive, got {std}")));
            }
            stats.mean.push(mean);
            stats.std.push(std);
        }
        if stats.mean.is_empty() {
            return Err(Error::Parse { path: path.to_path_buf(), offset: 0, message: "no dimensions".into() });
        }
        Ok(stats)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        NormStats::from_tsv(&fs::read_to_string(path)?, path)
    }
}

/// Population mean and standard deviation per mel dimension, pooled over
/// every frame of `train`.
pub fn compute_norm_stats(train: &[Utterance]) -> Result<NormStats> {
    let first = train.first().ok_or_else(|| Error::arg("cannot compute statistics of an empty split"))?;
    let d = first.mel.cols();
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for u in train {
        if u.mel.cols() != d {
            return Err(Error::shape(format!("utterance {} has {} mel bins, expected {d}", u.id, u.mel.cols())));
        }
        for t in 0..u.frames() {
            for (s, v) in sum.iter_mut().zip(u.mel.row(t)) {
                *s += v;
            }
        }
        count += u.frames();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; d];
    for u in train {
        for t in 0..u.frames() {
            for ((s, v), m) in sq.iter_mut().zip(u.mel.row(t)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std = sq.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
    Ok(NormStats { mean, std })
}

/// Settings of the synthetic corpus generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub count: usize,
    pub vocab_size: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub mel_dim: usize,
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            count: 16,
            vocab_size: 40,
            min_phonemes: 8,
            max_phonemes: 32,
            min_duration: 1,
            max_duration: 8,
            mel_dim: 80,
            noise_sigma: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.mel_dim == 0 {
            return Err(Error::arg("synthetic corpus needs at least 2 symbols and 1 mel bin"));
        }
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes {
            return Err(Error::arg(format!("bad phoneme range {}..={}", self.min_phonemes, self.max_phonemes)));
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return Err(Error::arg(format!("bad duration range {}..={}", self.min_duration, self.max_duration)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::arg("noise sigma must be non-negative"));
        }
        Ok(())
    }
}

/// The fixed per-seed codebook `E: [V×D]` and ramp direction `r: [D]`.
///
/// `r` is shrunk when needed so that its norm stays below half the smallest
/// distance between codebook rows; every noiseless frame `E[p] + ρ·r`,
/// `0 ≤ ρ < 1`, is then nearest to its own row `E[p]`.
pub fn synthetic_codebook(seed: u64, vocab_size: usize, mel_dim: usize) -> (Tensor, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let codebook: Vec<f64> = (0..vocab_size * mel_dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut ramp: Vec<f64> = (0..mel_dim).map(|_| rng.sample(StandardNormal)).collect();
    let codebook = Tensor::from_parts(vec![vocab_size, mel_dim], codebook);
    let mut min_dist = f64::INFINITY;
    for a in 0..vocab_size {
        for b in a + 1..vocab_size {
            let d: f64 = codebook.row(a).iter().zip(codebook.row(b)).map(|(x, y)| (x - y) * (x - y)).sum();
            min_dist = min_dist.min(d.sqrt());
        }
    }
    let norm = ramp.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm >= 0.5 * min_dist {
        let factor = 0.45 * min_dist / norm;
        ramp.iter_mut().for_each(|v| *v *= factor);
    }
    (codebook, ramp)
}

/// Generates utterances whose frame `k` (of `d`) for phoneme `p` is
/// `E[p] + (k/d)·r + noise`. Fully determined by `spec.seed`.
pub fn gen_synthetic_corpus(spec: &SyntheticSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let (codebook, ramp) = synthetic_codebook(spec.seed, spec.vocab_size, spec.mel_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::arg(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let n = rng.random_range(spec.min_phonemes..=spec.max_phonemes);
        let phonemes: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.vocab_size)).collect();
        let durations: Vec<usize> = (0..n).map(|_| rng.random_range(spec.min_duration..=spec.max_duration)).collect();
        let frames: usize = durations.iter().sum();
        let mut data = Vec::with_capacity(frames * spec.mel_dim);
        for (&p, &d) in phonemes.iter().zip(&durations) {
            for k in 0..d {
                let rho = k as f64 / d as f64;
                for (e, r) in codebook.row(p).iter().zip(&ramp) {
                    let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push(e + rho * r + eps);
                }
            }
        }
        out.push(Utterance {
            id: format!("utt{i:05}"),
            phonemes,
            mel: Tensor::from_parts(vec![frames, spec.mel_dim], data),
            true_durations: Some(durations),
        });
    }
    Ok(out)
}

pub fn mel_to_bytes(mel: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * mel.numel());
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&(mel.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(mel.cols() as u32).to_le_bytes());
    for v in mel.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn mel_from_bytes(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let err = |offset: usize, message: String| Error::Parse { path: path.to_path_buf(), offset: offset as u64, message };
    if bytes.len() < 12 {
        return Err(err(bytes.len(), format!("truncated header ({} of 12 bytes)", bytes.len())));
    }
    if &bytes[..4] != MEL_MAGIC {
        return Err(err(0, "bad magic, expected MEL0".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if t == 0 || d == 0 {
        return Err(err(4, format!("empty mel {t}×{d}")));
    }
    let expected = t.checked_mul(d).and_then(|n| n.checked_mul(8)).and_then(|n| n.checked_add(12));
    if expected != Some(bytes.len()) {
        let offset = bytes.len().min(expected.unwrap_or(usize::MAX));
        return Err(err(offset, format!("payload of {} bytes does not match {t}×{d} frames", bytes.len() - 12)));
    }
    let data = bytes[12..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(vec![t, d], data)
}

pub fn write_mel(path: &Path, mel: &Tensor) -> Result<()> {
    fs::write(path, mel_to_bytes(mel))?;
    Ok(())
}

pub fn read_mel(path: &Path) -> Result<Tensor> {
    mel_from_bytes(&fs::read(path)?, path)
}

pub fn mel_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.mel"))
}

/// Writes `meta.tsv` and every `<id>.mel` into `dir`, creating it.
pub fn save_corpus(dir: &Path, utterances: &[Utterance]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = format!("{META_HEADER}\n");
    for u in utterances {
        u.validate()?;
        let ids: Vec<String> = u.phonemes.iter().map(usize::to_string).collect();
        let durs = u
            .true_durations
            .as_ref()
            .map(|d| d.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        meta.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", u.id, u.phonemes.len(), u.frames(), ids.join(" "), durs));
        write_mel(&mel_path(dir, &u.id), &u.mel)?;
    }
    fs::write(dir.join(META_FILE), meta)?;
    Ok(())
}

/// Reads a corpus written by [`save_corpus`]. A directory without
/// `meta.tsv` holds no utterances.
pub fn load_corpus(dir: &Path) -> Result<Vec<Utterance>> {
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            ErrorKind::NotFound,
            format!("corpus directory {} not found", dir.display()),
        )));
    }
    let meta_path = dir.join(META_FILE);
    let text = match fs::read_to_string(&meta_path) {
        Ok(t) => t,
        Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    let mut lines = lines_with_offsets(&text);
    match lines.next() {
        Some((_, header)) if header == META_HEADER => {}
        _ => {
            return Err(Error::Parse { path: meta_path, offset: 0, message: "missing meta.tsv header".into() });
        }
    }
    for (offset, line) in lines {
        let err = |message: String| Error::Parse { path: meta_path.clone(), offset, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, got {}", fields.len())));
        }
        let parse_list = |s: &str, what: &str| -> Result<Vec<usize>> {
            s.split_whitespace().map(|v| v.parse().map_err(|_| err(format!("bad {what} {v:?}")))).collect()
        };
        let n: usize = fields[1].parse().map_err(|_| err(format!("bad phoneme count {:?}", fields[1])))?;
        let t: usize = fields[2].parse().map_err(|_| err(format!("bad frame count {:?}", fields[2])))?;
        let phonemes = parse_list(fields[3], "phoneme id")?;
        let durations = parse_list(fields[4], "duration")?;
        if phonemes.len() != n {
            return Err(err(format!("{} phoneme ids for n = {n}", phonemes.len())));
        }
        let mel = read_mel(&mel_path(dir, fields[0]))?;
        if mel.rows() != t {
            return Err(err(format!("mel file has {} frames, meta says {t}", mel.rows())));
        }
        let u = Utterance {
            id: fields[0].to_string(),
            phonemes,
            mel,
            true_durations: (!durations.is_empty()).then_some(durations),
        };
        u.validate().map_err(|e| err(e.to_string()))?;
        out.push(u);
    }
    Ok(out)
}

/// Non-empty lines with the byte offset at which each starts.
fn lines_with_offsets(text: &str) -> impl Iterator<Item = (u64, &str)> {
    let mut offset = 0u64;
    text.split_inclusive('\n').filter_map(move |raw| {
        let start = offset;
        offset += raw.len() as u64;
        let line = raw.trim_end_matches(['\n', '\r']);
        (!line.is_empty()).then_some((start, line))
    })
}
