//! Binary checkpoint container.
//!
//! ```text
//! "JDIT" | version u32 | text_len u32 | text (key=value lines)
//! count u64 | count × { name_len u32 | name | rank u32 | rank × dim u64 | f64 LE data }
//! ```
//!
//! The text block holds the model configuration and `meta.*` entries such
//! as the training step. All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::config::{parse_pairs, JditConfig};
use super::network::JditModel;
use super::optim::OptimizerState;

pub const MAGIC: &[u8; 4] = b"JDIT";
pub const FORMAT_VERSION: u32 = 1;

const META_PREFIX: &str = "meta.";
const MOMENT1_PREFIX: &str = "optim.m/";
const MOMENT2_PREFIX: &str = "optim.v/";
const OPTIM_STEP_KEY: &str = "optim_step";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: JditConfig,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of a model, and optionally its optimizer state.
    pub fn capture(model: &JditModel, optimizer: Option<&OptimizerState>) -> Self {
        let mut tensors: Vec<(String, Tensor)> =
            model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let mut meta = Vec::new();
        if let Some(state) = optimizer {
            for (i, (name, _)) in model.params().iter().enumerate() {
                tensors.push((format!("{MOMENT1_PREFIX}{name}"), state.m[i].clone()));
                tensors.push((format!("{MOMENT2_PREFIX}{name}"), state.v[i].clone()));
            }
            meta.push((OPTIM_STEP_KEY.to_string(), state.step.to_string()));
        }
        Checkpoint { config: model.config().clone(), meta, tensors }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model, and the optimizer state when one was saved.
    ///
    /// With `expected` set, any difference from the stored configuration is
    /// rejected.
    pub fn restore(&self, expected: Option<&JditConfig>) -> Result<(JditModel, Option<OptimizerState>)> {
        if let Some(want) = expected {
            let diffs: Vec<String> = want
                .to_pairs()
                .into_iter()
                .zip(self.config.to_pairs())
                .filter(|(a, b)| a.1 != b.1)
                .map(|((k, a), (_, b))| format!("{k}: checkpoint {b}, requested {a}"))
                .collect();
            if !diffs.is_empty() {
                return Err(Error::Checkpoint(format!("config mismatch: {}", diffs.join("; "))));
            }
        }
        let mut model = JditModel::new(self.config.clone(), 0)?;
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        let lookup = |name: &str| {
            self.tensor(name).cloned().ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        for name in &names {
            model.params_mut().set(name, lookup(name)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let optimizer = match self.meta(OPTIM_STEP_KEY) {
            None => None,
            Some(step) => {
                let step = step.parse().map_err(|_| Error::Checkpoint(format!("bad optimizer step {step:?}")))?;
                let mut state = OptimizerState::new(model.params());
                for (i, name) in names.iter().enumerate() {
                    for (prefix, slot) in [(MOMENT1_PREFIX, &mut state.m[i]), (MOMENT2_PREFIX, &mut state.v[i])] {
                        let t = lookup(&format!("{prefix}{name}"))?;
                        if t.shape() != slot.shape() {
                            return Err(Error::Checkpoint(format!("optimizer moment for {name} has shape {:?}", t.shape())));
                        }
                        *slot = t;
                    }
                }
                state.step = step;
                Some(state)
            }
        };
        Ok((model, optimizer))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = self.config.to_text();
        for (k, v) in &self.meta {
            text.push_str(&format!("{META_PREFIX}{k}={v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let mut config_pairs = Vec::new();
        let mut meta = Vec::new();
        for (k, v) in parse_pairs(text).map_err(|e| Error::Checkpoint(e.to_string()))? {
            match k.strip_prefix(META_PREFIX) {
                Some(key) => meta.push((key.to_string(), v)),
                None => config_pairs.push((k, v)),
            }
        }
        let mut config = JditConfig::default();
        config
            .apply_pairs(config_pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .and_then(|_| config.validate())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;

        let count = r.u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.error("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.error("tensor too large"))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.error("tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes after last tensor"));
        }
        Ok(Checkpoint { config, meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, msg: &str) -> Error {
        Error::Checkpoint(format!("{msg} at byte {}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(&format!("truncated: wanted {n} bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
