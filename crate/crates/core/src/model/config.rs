use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Full-size configuration: 512-dim, 6 blocks per side, 8 heads.
    Paper,
    /// Small configuration that trains on one CPU core in minutes.
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::arg(format!("unknown profile {other:?} (expected paper or desk)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

/// Architecture, loss and optimizer settings of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct JditConfig {
    pub vocab_size: usize,
    pub mel_dim: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_fft_blocks: usize,
    pub num_heads: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub prenet_layers: usize,
    pub prenet_kernel: usize,
    pub prenet_dropout: f64,
    pub duration_conv_layers: usize,
    pub duration_kernel: usize,
    pub duration_dropout: f64,
    pub guided_sigma: f64,
    pub loss_weights: LossWeights,
    pub grad_clip: f64,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for JditConfig {
    fn default() -> Self {
        JditConfig {
            vocab_size: 40,
            mel_dim: 80,
            model_dim: 512,
            ffn_dim: 2048,
            num_fft_blocks: 6,
            num_heads: 8,
            conv_kernel: 5,
            dropout: 0.1,
            prenet_layers: 3,
            prenet_kernel: 5,
            prenet_dropout: 0.5,
            duration_conv_layers: 2,
            duration_kernel: 3,
            duration_dropout: 0.1,
            guided_sigma: 0.2,
            loss_weights: LossWeights::default(),
            grad_clip: 1.0,
            warmup_steps: 4000,
            lr_scale: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        impl JditConfig {
            /// Every setting as `(key, value)` text pairs, in a fixed order.
            pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.to_string())),*]
            }

            fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = value.trim().parse().map_err(|_| {
                            Error::arg(format!("config key {key}: cannot parse {value:?}"))
                        })?;
                    })*
                    other => return Err(Error::arg(format!("unknown config key {other:?}"))),
                }
                Ok(())
            }
        }
    };
}

config_keys! {
    "vocab_size" => vocab_size,
    "mel_dim" => mel_dim,
    "model_dim" => model_dim,
    "ffn_dim" => ffn_dim,
    "num_fft_blocks" => num_fft_blocks,
    "num_heads" => num_heads,
    "conv_kernel" => conv_kernel,
    "dropout" => dropout,
    "prenet_layers" => prenet_layers,
    "prenet_kernel" => prenet_kernel,
    "prenet_dropout" => prenet_dropout,
    "duration_conv_layers" => duration_conv_layers,
    "duration_kernel" => duration_kernel,
    "duration_dropout" => duration_dropout,
    "guided_sigma" => guided_sigma,
    "loss_weight_l1_ar" => loss_weights.l1_ar,
    "loss_weight_l1_ff" => loss_weights.l1_ff,
    "loss_weight_l2_dur" => loss_weights.l2_dur,
    "loss_weight_ctc" => loss_weights.ctc,
    "loss_weight_guided" => loss_weights.guided,
    "grad_clip" => grad_clip,
    "warmup_steps" => warmup_steps,
    "lr_scale" => lr_scale,
    "adam_beta1" => adam_beta1,
    "adam_beta2" => adam_beta2,
    "adam_eps" => adam_eps,
}

impl JditConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => JditConfig::default(),
            Profile::Desk => JditConfig::desk(),
        }
    }

    /// Desk-scale dimensions: 64-dim model, 2 blocks per side, 2 heads,
    /// 20 mel bins.
    pub fn desk() -> Self {
        JditConfig {
            mel_dim: 20,
            model_dim: 64,
            ffn_dim: 256,
            num_fft_blocks: 2,
            num_heads: 2,
            warmup_steps: 400,
            ..JditConfig::default()
        }
    }

    /// Applies `key=value` overrides on top of `self`.
    pub fn apply_pairs<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.set_key(k.trim(), v)?;
        }
        Ok(())
    }

    /// Renders the config as `key=value` lines.
    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses `key=value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = JditConfig::default();
        cfg.apply_pairs(parse_pairs(text)?.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("mel_dim", self.mel_dim),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_fft_blocks", self.num_fft_blocks),
            ("num_heads", self.num_heads),
            ("prenet_layers", self.prenet_layers),
            ("duration_conv_layers", self.duration_conv_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::arg(format!("{name} must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::arg(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        for (name, k) in [
            ("conv_kernel", self.conv_kernel),
            ("prenet_kernel", self.prenet_kernel),
            ("duration_kernel", self.duration_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::arg(format!("{name} must be odd, got {k}")));
            }
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("prenet_dropout", self.prenet_dropout),
            ("duration_dropout", self.duration_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::arg(format!("{name} {p} outside [0, 1)")));
            }
        }
        if !(self.guided_sigma > 0.0) || !(self.grad_clip > 0.0) || self.warmup_steps == 0 {
            return Err(Error::arg("guided_sigma, grad_clip and warmup_steps must be positive"));
        }
        if !(self.lr_scale > 0.0) {
            return Err(Error::arg("lr_scale must be positive"));
        }
        Ok(())
    }

    /// Settings that determine parameter shapes.
    pub fn architecture(&self) -> BTreeMap<&'static str, String> {
        const SHAPE_KEYS: [&str; 11] = [
            "vocab_size",
            "mel_dim",
            "model_dim",
            "ffn_dim",
            "num_fft_blocks",
            "num_heads",
            "conv_kernel",
            "prenet_layers",
            "prenet_kernel",
            "duration_conv_layers",
            "duration_kernel",
        ];
        self.to_pairs().into_iter().filter(|(k, _)| SHAPE_KEYS.contains(k)).collect()
    }
}

/// Splits `key=value` lines; `#` starts a comment line.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::arg(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
