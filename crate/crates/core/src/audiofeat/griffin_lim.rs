//! Griffin-Lim phase reconstruction.
//!
//! Iterates between the set of consistent spectrograms (STFTs of some
//! signal) and the set of spectrograms with the target magnitude. The
//! signal lives in the padded domain of [`StftPlan::analyze`], so the
//! least-squares inverse is an exact orthogonal projection and the distance
//! to the magnitude set never increases.
//!
//! Iterations are accelerated with a momentum term on the consistent
//! estimates. A momentum step is kept only if it does not raise the
//! spectral convergence; otherwise the plain step is taken from the previous
//! estimate, so the reported history stays non-increasing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use super::stft::{bin_weight, Spectrum, StftConfig, StftPlan};
use super::wav::AudioClip;
use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

pub const DEFAULT_ITERATIONS: usize = 60;
pub const DEFAULT_MOMENTUM: Real = 0.99;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GriffinLimConfig {
    pub iterations: usize,
    pub seed: u64,
    pub stft: StftConfig,
    /// Extrapolation weight; 0 gives the classic algorithm.
    pub momentum: Real,
}

impl Default for GriffinLimConfig {
    fn default() -> Self {
        GriffinLimConfig {
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
            stft: StftConfig::default(),
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GriffinLimOutput {
    pub clip: AudioClip,
    /// Spectral convergence after each iteration.
    pub history: Vec<Real>,
}

impl GriffinLimOutput {
    pub fn convergence(&self) -> Real {
        self.history.last().copied().unwrap_or(0.0)
    }
}

/// `|| |S| - mag ||_F / || mag ||_F`, norms taken over the two-sided
/// spectrum; 0 when `mag` is all zero.
pub fn spectral_convergence(est: &Spectrum, mag: &Tensor) -> Real {
    let mut num = 0.0;
    let mut den = 0.0;
    for t in 0..est.frames {
        for (k, c) in est.frame(t).iter().enumerate() {
            let w = bin_weight(k, est.bins);
            let m = mag.at(t, k);
            num += w * (c.norm() - m).powi(2);
            den += w * m * m;
        }
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

/// Reconstructs a waveform of `frames * hop` samples from a `frames x bins`
/// magnitude spectrogram.
pub fn griffin_lim(mag: &Tensor, config: &GriffinLimConfig, sample_rate: u32) -> Result<GriffinLimOutput> {
    let plan = StftPlan::new(config.stft)?;
    let cfg = config.stft;
    if mag.rank() != 2 || mag.cols() != cfg.bins() || mag.rows() == 0 {
        return Err(Error::shape("griffin-lim", mag.shape(), &[mag.rows(), cfg.bins()]));
    }
    if let Some(v) = mag.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("negative or non-finite magnitude {v}")));
    }
    if cfg.hop > cfg.fft_size / 2 {
        return Err(Error::Config(format!(
            "hop {} exceeds half the fft size {}",
            cfg.hop, cfg.fft_size
        )));
    }
    if !(0.0..1.0).contains(&config.momentum) {
        return Err(Error::Config(format!("momentum {} outside [0, 1)", config.momentum)));
    }
    let frames = mag.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Spectrum {
        frames,
        bins: cfg.bins(),
        data: mag
            .data()
            .iter()
            .map(|&m| Complex64::from_polar(m, rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)))
            .collect(),
    };
    // One projection round trip: magnitude set, then consistent set.
    let step = |from: &Spectrum| -> (Vec<Real>, Spectrum) {
        let mut target = from.clone();
        for (x, &m) in target.data.iter_mut().zip(mag.data()) {
            let n = x.norm();
            *x = if n > 0.0 { *x * (m / n) } else { Complex64::new(m, 0.0) };
        }
        let signal = plan.synthesize(&target);
        let est = plan.analyze(&signal, frames);
        (signal, est)
    };

    let mut signal = plan.synthesize(&init);
    let mut prev = plan.analyze(&signal, frames);
    let mut prev_sc = spectral_convergence(&prev, mag);
    let mut accel = prev.clone();
    let mut history = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let (mut sig, mut est) = step(&accel);
        let mut sc = spectral_convergence(&est, mag);
        if sc > prev_sc {
            (sig, est) = step(&prev);
            sc = spectral_convergence(&est, mag);
        }
        history.push(sc);
        accel = est.clone();
        for ((a, e), p) in accel.data.iter_mut().zip(&est.data).zip(&prev.data) {
            *a = e + (e - p) * config.momentum;
        }
        signal = sig;
        prev = est;
        prev_sc = sc;
    }
    let start = cfg.fft_size / 2;
    let samples = signal[start..start + frames * cfg.hop].to_vec();
    Ok(GriffinLimOutput {
        clip: AudioClip::new(samples, sample_rate)?,
        history,
    })
}
