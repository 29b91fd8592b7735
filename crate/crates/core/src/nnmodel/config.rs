//! Model hyperparameters and the flat `key=value` config format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::alignment::{Kernel, Normalization, PositionCodec, PositionMode};
use crate::error::{Error, Result};
use crate::numcore::Real;

/// Parsed `key=value` lines. `#` starts a comment; blank lines are skipped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Removes and parses `key` into `slot` if present.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.entries.remove(key) {
            *slot = v
                .parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))?;
        }
        Ok(())
    }

    pub fn take_with<T>(&mut self, key: &str, slot: &mut T, f: impl Fn(&str) -> Result<T>) -> Result<()> {
        if let Some(v) = self.entries.remove(key) {
            *slot = f(&v)?;
        }
        Ok(())
    }

    /// Errors on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(k) => Err(Error::Config(format!("unknown config key {k:?}"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreqInit {
    Geometric,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub kernel_size: usize,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub enc_filter: usize,
    pub align_depth: usize,
    pub align_hidden: usize,
    pub align_filter: usize,
    pub cnn_dec_layers: usize,
    pub cnn_dec_filter: usize,
    pub ufans_dec_depth: usize,
    pub ufans_dec_hidden: usize,
    pub ufans_dec_filter: usize,
    pub dropout: Real,
    pub align_weight: Real,
    pub align_gamma: Real,
    pub num_freqs: usize,
    pub freq_init: FreqInit,
    pub freq_seed: u64,
    pub trainable_freqs: bool,
    pub kernel: Kernel,
    pub position_mode: PositionMode,
    pub normalization: Normalization,
    /// Lower bound added to every predicted width, frames.
    pub r_min: Real,
    /// Width the predictor head emits at initialization, frames.
    pub init_width: Real,
    pub seed: u64,
}

impl ModelConfig {
    /// Small enough to train in minutes on one CPU core.
    pub fn desk(vocab_size: usize, feature_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            feature_dim,
            embed_dim: 64,
            kernel_size: 3,
            enc_hidden: 64,
            enc_layers: 3,
            enc_filter: 128,
            align_depth: 4,
            align_hidden: 64,
            align_filter: 128,
            cnn_dec_layers: 3,
            cnn_dec_filter: 128,
            ufans_dec_depth: 6,
            ufans_dec_hidden: 64,
            ufans_dec_filter: 128,
            dropout: 0.15,
            align_weight: 0.02,
            align_gamma: 3.0,
            num_freqs: 64,
            freq_init: FreqInit::Geometric,
            freq_seed: 0,
            trainable_freqs: true,
            kernel: Kernel::SineCosine,
            position_mode: PositionMode::Learned,
            normalization: Normalization::Sum,
            r_min: 0.1,
            init_width: 6.0,
            seed: 1,
        }
    }

    /// Published layer sizes.
    pub fn full_scale(vocab_size: usize, feature_dim: usize) -> Self {
        ModelConfig {
            embed_dim: 512,
            enc_hidden: 512,
            enc_filter: 1024,
            align_hidden: 512,
            align_filter: 1024,
            cnn_dec_filter: 1024,
            ufans_dec_hidden: 512,
            ufans_dec_filter: 1024,
            ..Self::desk(vocab_size, feature_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("enc_hidden", self.enc_hidden),
            ("enc_filter", self.enc_filter),
            ("align_hidden", self.align_hidden),
            ("align_filter", self.align_filter),
            ("cnn_dec_filter", self.cnn_dec_filter),
            ("ufans_dec_hidden", self.ufans_dec_hidden),
            ("ufans_dec_filter", self.ufans_dec_filter),
            ("num_freqs", self.num_freqs),
        ];
        if let Some((k, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        for (k, v) in [
            ("enc_filter", self.enc_filter),
            ("align_filter", self.align_filter),
            ("cnn_dec_filter", self.cnn_dec_filter),
            ("ufans_dec_filter", self.ufans_dec_filter),
        ] {
            if v % 2 != 0 {
                return Err(Error::Config(format!("{k} must be even (gate halves), got {v}")));
            }
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.align_depth > 12 || self.ufans_dec_depth > 12 {
            return Err(Error::Config("UFANS depth above 12".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.align_gamma > 0.0) || !(self.align_weight >= 0.0) {
            return Err(Error::Config("align_gamma must be > 0 and align_weight >= 0".into()));
        }
        if !(self.r_min > 0.0) || !(self.init_width > self.r_min) {
            return Err(Error::Config("need 0 < r_min < init_width".into()));
        }
        if let Kernel::Gaussian { width } = self.kernel {
            if !(width > 0.0) {
                return Err(Error::Config("gaussian width must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn codec(&self) -> PositionCodec {
        let codec = match self.freq_init {
            FreqInit::Geometric => PositionCodec::geometric(self.num_freqs),
            FreqInit::Random => PositionCodec::seeded_random(self.num_freqs, self.freq_seed),
        };
        let mut codec = codec.with_kernel(self.kernel);
        codec.trainable = self.trainable_freqs;
        codec
    }

    pub fn to_kv(&self) -> String {
        let kernel = match self.kernel {
            Kernel::SineCosine => "sincos".to_string(),
            Kernel::Gaussian { .. } => "gaussian".to_string(),
        };
        let width = match self.kernel {
            Kernel::Gaussian { width } => width,
            Kernel::SineCosine => DEFAULT_GAUSSIAN_WIDTH,
        };
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("vocab_size", self.vocab_size.to_string());
        put("feature_dim", self.feature_dim.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("kernel_size", self.kernel_size.to_string());
        put("enc_hidden", self.enc_hidden.to_string());
        put("enc_layers", self.enc_layers.to_string());
        put("enc_filter", self.enc_filter.to_string());
        put("align_depth", self.align_depth.to_string());
        put("align_hidden", self.align_hidden.to_string());
        put("align_filter", self.align_filter.to_string());
        put("cnn_dec_layers", self.cnn_dec_layers.to_string());
        put("cnn_dec_filter", self.cnn_dec_filter.to_string());
        put("ufans_dec_depth", self.ufans_dec_depth.to_string());
        put("ufans_dec_hidden", self.ufans_dec_hidden.to_string());
        put("ufans_dec_filter", self.ufans_dec_filter.to_string());
        put("dropout", fmt_real(self.dropout));
        put("align_weight", fmt_real(self.align_weight));
        put("align_gamma", fmt_real(self.align_gamma));
        put("num_freqs", self.num_freqs.to_string());
        put(
            "freq_init",
            match self.freq_init {
                FreqInit::Geometric => "geometric",
                FreqInit::Random => "random",
            }
            .into(),
        );
        put("freq_seed", self.freq_seed.to_string());
        put("trainable_freqs", self.trainable_freqs.to_string());
        put("attention_kernel", kernel);
        put("gaussian_width", fmt_real(width));
        put(
            "position_mode",
            match self.position_mode {
                PositionMode::Learned => "learned",
                PositionMode::Fixed => "fixed",
            }
            .into(),
        );
        put(
            "normalization",
            match self.normalization {
                Normalization::Sum => "sum",
                Normalization::Softmax => "softmax",
            }
            .into(),
        );
        put("r_min", fmt_real(self.r_min));
        put("init_width", fmt_real(self.init_width));
        put("seed", self.seed.to_string());
        s
    }

    /// Overrides fields from `kv`, consuming the keys it recognizes.
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take("vocab_size", &mut self.vocab_size)?;
        kv.take("feature_dim", &mut self.feature_dim)?;
        kv.take("embed_dim", &mut self.embed_dim)?;
        kv.take("kernel_size", &mut self.kernel_size)?;
        kv.take("enc_hidden", &mut self.enc_hidden)?;
        kv.take("enc_layers", &mut self.enc_layers)?;
        kv.take("enc_filter", &mut self.enc_filter)?;
        kv.take("align_depth", &mut self.align_depth)?;
        kv.take("align_hidden", &mut self.align_hidden)?;
        kv.take("align_filter", &mut self.align_filter)?;
        kv.take("cnn_dec_layers", &mut self.cnn_dec_layers)?;
        kv.take("cnn_dec_filter", &mut self.cnn_dec_filter)?;
        kv.take("ufans_dec_depth", &mut self.ufans_dec_depth)?;
        kv.take("ufans_dec_hidden", &mut self.ufans_dec_hidden)?;
        kv.take("ufans_dec_filter", &mut self.ufans_dec_filter)?;
        kv.take("dropout", &mut self.dropout)?;
        kv.take("align_weight", &mut self.align_weight)?;
        kv.take("align_gamma", &mut self.align_gamma)?;
        kv.take("num_freqs", &mut self.num_freqs)?;
        kv.take_with("freq_init", &mut self.freq_init, |v| match v {
            "geometric" => Ok(FreqInit::Geometric),
            "random" => Ok(FreqInit::Random),
            o => Err(Error::Config(format!("unknown freq_init {o:?}"))),
        })?;
        kv.take("freq_seed", &mut self.freq_seed)?;
        kv.take("trainable_freqs", &mut self.trainable_freqs)?;
        let mut width = match self.kernel {
            Kernel::Gaussian { width } => width,
            Kernel::SineCosine => DEFAULT_GAUSSIAN_WIDTH,
        };
        kv.take("gaussian_width", &mut width)?;
        let mut gaussian = matches!(self.kernel, Kernel::Gaussian { .. });
        kv.take_with("attention_kernel", &mut gaussian, |v| match v {
            "sincos" => Ok(false),
            "gaussian" => Ok(true),
            o => Err(Error::Config(format!("unknown attention_kernel {o:?}"))),
        })?;
        self.kernel = if gaussian {
            Kernel::Gaussian { width }
        } else {
            Kernel::SineCosine
        };
        kv.take_with("position_mode", &mut self.position_mode, |v| match v {
            "learned" => Ok(PositionMode::Learned),
            "fixed" => Ok(PositionMode::Fixed),
            o => Err(Error::Config(format!("unknown position_mode {o:?}"))),
        })?;
        kv.take_with("normalization", &mut self.normalization, |v| match v {
            "sum" => Ok(Normalization::Sum),
            "softmax" => Ok(Normalization::Softmax),
            o => Err(Error::Config(format!("unknown normalization {o:?}"))),
        })?;
        kv.take("r_min", &mut self.r_min)?;
        kv.take("init_width", &mut self.init_width)?;
        kv.take("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut cfg = Self::desk(1, 1);
        cfg.apply(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 16 hex digits of the SHA-256 of [`ModelConfig::to_kv`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub const DEFAULT_GAUSSIAN_WIDTH: Real = 3.0;

/// Shortest decimal that parses back to the same value.
fn fmt_real(v: Real) -> String {
    format!("{v:?}")
}
