//! End-to-end synthesis: phonemes to normalized features (stage-2 model),
//! then features to a waveform (denormalize, undo the log, invert the mel
//! filterbank if needed, Griffin-Lim).

use std::path::Path;

use crate::audiofeat::{griffin_lim, FeatureConfig, FeatureKind, GriffinLimConfig, GriffinLimOutput, MelFilterbank, NormStats};
use crate::error::{Error, Result};
use crate::nnmodel::{FpetsModel, Inference, Stage};
use crate::numcore::{Container, Tensor};
use crate::training::{Corpus, CorpusMetadata};

/// Turns normalized log features into linear magnitudes and audio.
#[derive(Clone, Debug)]
pub struct Vocoder {
    pub features: FeatureConfig,
    pub stats: NormStats,
    pub griffin_lim: GriffinLimConfig,
    mel: Option<(MelFilterbank, Tensor)>,
}

impl Vocoder {
    pub fn new(features: FeatureConfig, stats: NormStats, iterations: usize, seed: u64) -> Result<Self> {
        if stats.dim() != features.dim() {
            return Err(Error::Config(format!(
                "stats cover {} dims, features have {}",
                stats.dim(),
                features.dim()
            )));
        }
        let mel = match features.kind {
            FeatureKind::MelLog => {
                let bank = MelFilterbank::new(features.n_mel, features.stft.fft_size, features.sample_rate)?;
                let pinv = bank.pseudo_inverse()?;
                Some((bank, pinv))
            }
            FeatureKind::LinearLog => None,
        };
        Ok(Vocoder {
            features,
            stats,
            griffin_lim: GriffinLimConfig {
                iterations,
                seed,
                stft: features.stft,
                ..GriffinLimConfig::default()
            },
            mel,
        })
    }

    /// `T x bins` linear magnitudes from `T x D` normalized features.
    pub fn magnitude(&self, normalized: &Tensor) -> Result<Tensor> {
        let logs = self.stats.denormalize(normalized)?;
        let lin = logs.map(f64::exp);
        match &self.mel {
            None => Ok(lin),
            Some((bank, pinv)) => Ok(bank.invert_power(&lin, pinv)?.map(f64::sqrt)),
        }
    }

    pub fn render(&self, normalized: &Tensor) -> Result<GriffinLimOutput> {
        griffin_lim(&self.magnitude(normalized)?, &self.griffin_lim, self.features.sample_rate)
    }
}

/// Model plus the corpus metadata needed to read text and write audio.
#[derive(Clone)]
pub struct Checkpoint {
    pub model: FpetsModel,
    pub meta: CorpusMetadata,
}

impl Checkpoint {
    pub fn to_container(model: &FpetsModel, corpus: &Corpus) -> Container {
        let mut c = model.to_container();
        corpus.store_metadata(&mut c);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let model = FpetsModel::from_container(c)?;
        let meta = CorpusMetadata::from_container(c)?;
        if meta.stats.dim() != model.config.feature_dim || meta.vocab.len() != model.config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "metadata ({} symbols, {} dims) does not fit the model ({} symbols, {} dims)",
                meta.vocab.len(),
                meta.stats.dim(),
                model.config.vocab_size,
                model.config.feature_dim
            )));
        }
        Ok(Checkpoint { model, meta })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Features and audio for one phoneme string.
pub struct Synthesis {
    pub phonemes: Vec<usize>,
    pub inference: Inference,
    pub audio: GriffinLimOutput,
}

pub struct Synthesizer {
    pub checkpoint: Checkpoint,
    pub vocoder: Vocoder,
}

impl Synthesizer {
    /// Stage-1 checkpoints are rejected: only the stage-2 decoder runs
    /// without target frames.
    pub fn new(checkpoint: Checkpoint, iterations: usize, seed: u64) -> Result<Self> {
        if checkpoint.model.stage() != Stage::Two {
            return Err(Error::Usage("synthesis needs a stage-2 checkpoint".into()));
        }
        let m = &checkpoint.meta;
        let vocoder = Vocoder::new(m.features, m.stats.clone(), iterations, seed)?;
        Ok(Synthesizer { checkpoint, vocoder })
    }

    /// Normalized features at `round(sum r)` frames.
    pub fn features(&self, text: &str) -> Result<(Vec<usize>, Inference)> {
        let ids = self.checkpoint.meta.vocab.encode(text)?;
        let inf = self.checkpoint.model.infer(&ids, None)?;
        Ok((ids, inf))
    }

    pub fn synthesize(&self, text: &str) -> Result<Synthesis> {
        let (phonemes, inference) = self.features(text)?;
        let audio = self.vocoder.render(&inference.features)?;
        Ok(Synthesis {
            phonemes,
            inference,
            audio,
        })
    }
}
