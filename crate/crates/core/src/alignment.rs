//! Forward attention, duration extraction, and the length regulator.
//!
//! The forward-attention recursion keeps alignment mass on monotonic paths:
//! each frame may either stay on the previous frame's phoneme or advance by
//! exactly one.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{matmul, Tape, Tensor, Var};

/// Row sums below this are lifted by adding the floor to every entry.
pub const UNDERFLOW_FLOOR: f64 = 1e-20;

/// Largest allowed deviation of an input attention row sum from 1.
const ROW_SUM_TOLERANCE: f64 = 1e-3;

/// `T×N` row-stochastic matrix between mel frames (rows) and phonemes (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix(Tensor);

impl AlignmentMatrix {
    /// Wraps `weights` after checking every row is a probability distribution.
    pub fn new(weights: Tensor) -> Result<Self> {
        check_row_stochastic(&weights)?;
        Ok(AlignmentMatrix(weights))
    }

    pub(crate) fn from_tensor_unchecked(weights: Tensor) -> Self {
        AlignmentMatrix(weights)
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn phonemes(&self) -> usize {
        self.0.cols()
    }

    pub fn weights(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    /// Plain-text CSV, one line per frame.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for t in 0..self.frames() {
            let line: Vec<String> = self.row(t).iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Binary 8-bit grayscale PGM: frames top to bottom, phonemes left to
    /// right, pixel = round(255 · weight).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.phonemes(), self.frames()).into_bytes();
        out.extend(self.0.data().iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn check_row_stochastic(w: &Tensor) -> Result<()> {
    if w.rank() != 2 {
        return Err(Error::shape(format!("alignment must be a matrix, got {:?}", w.shape())));
    }
    for t in 0..w.rows() {
        let row = w.row(t);
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::arg(format!("alignment row {t} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::arg(format!("alignment row {t} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Per-phoneme frame counts. Reference durations are integers that sum to
/// the number of frames they were extracted from.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Durations(pub Vec<usize>);

impl Durations {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Frame-to-phoneme index map: phoneme `n` repeated `d[n]` times.
    pub fn expand_indices(&self) -> Vec<usize> {
        self.0.iter().enumerate().flat_map(|(n, &d)| std::iter::repeat_n(n, d)).collect()
    }
}

/// Runs the forward-attention recursion on raw weights `w: [T×N]`.
///
/// Returns the normalized alignment and the per-row sums used for
/// normalization (after the underflow floor, if it was applied).
pub(crate) fn forward_attention_values(w: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    check_row_stochastic(w)?;
    let (t_len, n_len) = (w.rows(), w.cols());
    let mut alpha = vec![0.0; t_len * n_len];
    let mut sums = Vec::with_capacity(t_len);
    let mut prev = vec![0.0; n_len];
    prev[0] = 1.0;
    for t in 0..t_len {
        let wt = w.row(t);
        let row = &mut alpha[t * n_len..(t + 1) * n_len];
        let mut s = 0.0;
        for n in 0..n_len {
            let shifted = if n == 0 { 0.0 } else { prev[n - 1] };
            row[n] = (prev[n] + shifted) * wt[n];
            s += row[n];
        }
        if s < UNDERFLOW_FLOOR {
            row.iter_mut().for_each(|v| *v += UNDERFLOW_FLOOR);
            s = row.iter().sum();
        }
        row.iter_mut().for_each(|v| *v /= s);
        sums.push(s);
        prev.copy_from_slice(row);
    }
    Ok((Tensor::from_parts(vec![t_len, n_len], alpha), sums))
}

/// Gradient of the forward-attention recursion with respect to `w`, given
/// the upstream gradient `g` on the normalized alignment.
pub(crate) fn forward_attention_backward(w: &Tensor, alpha: &Tensor, sums: &[f64], g: &Tensor) -> Tensor {
    let (t_len, n_len) = (w.rows(), w.cols());
    let mut g_alpha = g.data().to_vec();
    let mut dw = vec![0.0; t_len * n_len];
    let mut g_pre = vec![0.0; n_len];
    let mut first = vec![0.0; n_len];
    first[0] = 1.0;
    for t in (0..t_len).rev() {
        let a_t = alpha.row(t);
        let ga = &g_alpha[t * n_len..(t + 1) * n_len];
        let dot: f64 = ga.iter().zip(a_t).map(|(x, y)| x * y).sum();
        for n in 0..n_len {
            g_pre[n] = (ga[n] - dot) / sums[t];
        }
        let prev: &[f64] = if t == 0 { &first } else { alpha.row(t - 1) };
        let wt = w.row(t);
        for n in 0..n_len {
            let shifted = if n == 0 { 0.0 } else { prev[n - 1] };
            dw[t * n_len + n] = g_pre[n] * (prev[n] + shifted);
        }
        if t > 0 {
            let dst = &mut g_alpha[(t - 1) * n_len..t * n_len];
            for n in 0..n_len {
                let stay = g_pre[n] * wt[n];
                let advance = if n + 1 < n_len { g_pre[n + 1] * wt[n + 1] } else { 0.0 };
                dst[n] += stay + advance;
            }
        }
    }
    Tensor::from_parts(vec![t_len, n_len], dw)
}

/// Forward attention over raw attention rows `w` and encoder states `h`.
///
/// Returns the normalized alignment `α̂` and the context rows
/// `c_t = Σ_n α̂_t(n) h_n`.
pub fn forward_attention(w: &AlignmentMatrix, h: &Tensor) -> Result<(AlignmentMatrix, Tensor)> {
    if h.rank() != 2 || h.rows() != w.phonemes() {
        return Err(Error::shape(format!(
            "encoder states {:?} for {} phonemes",
            h.shape(),
            w.phonemes()
        )));
    }
    let (alpha, _) = forward_attention_values(w.weights())?;
    let context = matmul(&alpha, h)?;
    Ok((AlignmentMatrix(alpha), context))
}

/// Counts, for each phoneme, the frames whose alignment row peaks on it.
/// Ties go to the smaller phoneme index.
pub fn extract_durations(alpha: &AlignmentMatrix) -> Durations {
    let mut d = vec![0; alpha.phonemes()];
    for t in 0..alpha.frames() {
        let row = alpha.row(t);
        let mut best = 0;
        for (n, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = n;
            }
        }
        d[best] += 1;
    }
    Durations(d)
}

fn check_durations(rows: usize, d: &Durations) -> Result<()> {
    if d.len() != rows {
        return Err(Error::shape(format!("{} durations for {rows} rows", d.len())));
    }
    if d.total() == 0 {
        return Err(Error::arg("durations sum to zero"));
    }
    Ok(())
}

/// Repeats row `n` of `h` `d[n]` times, in order.
pub fn length_regulate(h: &Tensor, d: &Durations) -> Result<Tensor> {
    if h.rank() != 2 {
        return Err(Error::shape(format!("length regulator input {:?}", h.shape())));
    }
    check_durations(h.rows(), d)?;
    let mut data = Vec::with_capacity(d.total() * h.cols());
    for n in d.expand_indices() {
        data.extend_from_slice(h.row(n));
    }
    Tensor::new(vec![d.total(), h.cols()], data)
}

/// Differentiable length regulator: gradients of repeated rows are summed
/// back into their source row.
pub fn length_regulate_var(tape: &mut Tape, h: Var, d: &Durations) -> Result<Var> {
    check_durations(tape.value(h).rows(), d)?;
    tape.index_rows(h, &d.expand_indices())
}

/// Single-head content attention logits `(s·Wq)(h·Wk)ᵀ / √d_k`, softmaxed
/// over phonemes.
pub fn content_attention_var(tape: &mut Tape, h: Var, s: Var, wq: Var, wk: Var) -> Result<Var> {
    let q = tape.matmul(s, wq)?;
    let k = tape.matmul(h, wk)?;
    let dk = tape.value(wk).cols() as f64;
    let logits = tape.matmul_bt(q, k)?;
    let logits = tape.scale(logits, 1.0 / dk.sqrt());
    tape.softmax(logits, 1)
}

/// Value-level content attention for encoder states `h: [N×dim]` and
/// decoder states `s: [T×dim]`.
pub fn content_attention(h: &Tensor, s: &Tensor, wq: &Tensor, wk: &Tensor) -> Result<AlignmentMatrix> {
    let mut tape = Tape::new();
    let (h, s) = (tape.constant(h.clone()), tape.constant(s.clone()));
    let (wq, wk) = (tape.constant(wq.clone()), tape.constant(wk.clone()));
    let w = content_attention_var(&mut tape, h, s, wq, wk)?;
    Ok(AlignmentMatrix(tape.value(w).clone()))
}
