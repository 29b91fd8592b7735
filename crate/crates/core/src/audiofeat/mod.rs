//! Audio I/O and the acoustic feature pipeline: WAV files, STFT, linear and
//! mel log spectrograms, normalization and Griffin-Lim reconstruction.

pub mod griffin_lim;
pub mod spectrogram;
pub mod stft;
pub mod wav;

pub use griffin_lim::{griffin_lim, spectral_convergence, GriffinLimConfig, GriffinLimOutput};
pub use spectrogram::{
    extract, linear_log_spectrogram, mel_spectrogram, AcousticFeatures, FeatureConfig,
    FeatureKind, MelFilterbank, NormStats, LOG_FLOOR,
};
pub use stft::{stft, Spectrum, StftConfig, StftPlan};
pub use wav::{load_wav, save_wav, AudioClip, DEFAULT_SAMPLE_RATE};
