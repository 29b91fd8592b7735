//! Short-time Fourier transform with a periodic Hann window.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

pub const DEFAULT_FFT_SIZE: usize = 2048;
pub const DEFAULT_HOP: usize = 275;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: DEFAULT_FFT_SIZE,
            hop: DEFAULT_HOP,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() || self.fft_size < 2 {
            return Err(Error::Config(format!(
                "fft size {} is not a power of two",
                self.fft_size
            )));
        }
        if self.hop == 0 {
            return Err(Error::Config("hop must be at least 1".into()));
        }
        Ok(())
    }

    /// DC through Nyquist.
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `ceil(len / hop)`.
    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// Length of the padded-domain signal covered by `frames` frames.
    pub fn span(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.hop + self.fft_size
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<Real> {
    let w = 2.0 * std::f64::consts::PI / n as Real;
    (0..n).map(|i| 0.5 - 0.5 * (w * i as Real).cos()).collect()
}

/// Complex one-sided spectrogram, frames x bins, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn magnitude(&self) -> Tensor {
        Tensor::matrix(
            self.frames,
            self.bins,
            self.data.iter().map(|c| c.norm()).collect(),
        )
    }

    /// Squared Frobenius norm of the implied two-sided spectrum: interior
    /// bins count twice.
    pub fn full_energy(&self) -> Real {
        (0..self.frames)
            .map(|t| {
                self.frame(t)
                    .iter()
                    .enumerate()
                    .map(|(k, c)| bin_weight(k, self.bins) * c.norm_sqr())
                    .sum::<Real>()
            })
            .sum()
    }
}

pub(crate) fn bin_weight(k: usize, bins: usize) -> Real {
    if k == 0 || k + 1 == bins {
        1.0
    } else {
        2.0
    }
}

/// Reflection-pads `x` by `pad` on both sides (repeating the reflection as
/// often as needed for short inputs).
pub fn reflect_pad(x: &[Real], pad: usize) -> Vec<Real> {
    let n = x.len() as isize;
    let period = 2 * (n - 1);
    (0..x.len() + 2 * pad)
        .map(|i| {
            let m = (i as isize - pad as isize).rem_euclid(period);
            x[(if m >= n { period - m } else { m }) as usize]
        })
        .collect()
}

/// Planned forward/inverse transforms for one configuration.
pub struct StftPlan {
    config: StftConfig,
    window: Vec<Real>,
    forward: Arc<dyn Fft<Real>>,
    inverse: Arc<dyn Fft<Real>>,
}

impl StftPlan {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(StftPlan {
            window: hann(config.fft_size),
            forward: planner.plan_fft_forward(config.fft_size),
            inverse: planner.plan_fft_inverse(config.fft_size),
            config,
        })
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn window(&self) -> &[Real] {
        &self.window
    }

    /// Frames of an already padded signal; frame `t` starts at `t * hop`.
    pub fn analyze(&self, signal: &[Real], frames: usize) -> Spectrum {
        let n = self.config.fft_size;
        let bins = self.config.bins();
        assert!(signal.len() >= self.config.span(frames));
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::default(); n];
        let mut scratch = vec![Complex64::default(); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            let seg = &signal[t * self.config.hop..t * self.config.hop + n];
            for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex64::new(x * w, 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..bins]);
        }
        Spectrum { frames, bins, data }
    }

    /// Least-squares inverse of [`StftPlan::analyze`]: windowed overlap-add
    /// divided by the summed squared window. Returns `span(frames)` samples.
    pub fn synthesize(&self, spec: &Spectrum) -> Vec<Real> {
        let n = self.config.fft_size;
        let hop = self.config.hop;
        let len = self.config.span(spec.frames);
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::default(); n];
        let mut scratch = vec![Complex64::default(); self.inverse.get_inplace_scratch_len()];
        for t in 0..spec.frames {
            let half = spec.frame(t);
            for (k, b) in buf.iter_mut().enumerate() {
                *b = if k < spec.bins {
                    half[k]
                } else {
                    half[n - k].conj()
                };
            }
            // Real signals have real DC and Nyquist bins.
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let base = t * hop;
            for i in 0..n {
                let w = self.window[i];
                out[base + i] += w * buf[i].re / n as Real;
                norm[base + i] += w * w;
            }
        }
        for (o, &z) in out.iter_mut().zip(&norm) {
            *o = if z > 1e-10 { *o / z } else { 0.0 };
        }
        out
    }
}

/// STFT of `samples` with reflection padding of `fft_size / 2` on both
/// sides; yields `ceil(len / hop)` frames.
pub fn stft(samples: &[Real], config: StftConfig) -> Result<Spectrum> {
    if samples.len() < 2 {
        return Err(Error::Domain(format!(
            "stft needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let plan = StftPlan::new(config)?;
    let padded = reflect_pad(samples, config.fft_size / 2);
    Ok(plan.analyze(&padded, config.frame_count(samples.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_short_input() {
        assert_eq!(reflect_pad(&[1.0, 2.0, 3.0], 2), vec![3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        assert_eq!(reflect_pad(&[1.0, 2.0], 3), vec![2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn hann_is_periodic() {
        let w = hann(8);
        assert_eq!(w[0], 0.0);
        assert!((w[4] - 1.0).abs() < 1e-15);
        assert!((w[1] - w[7]).abs() < 1e-15);
    }

    #[test]
    fn synthesize_inverts_analyze() {
        let cfg = StftConfig { fft_size: 64, hop: 16 };
        let plan = StftPlan::new(cfg).unwrap();
        let frames = 9;
        let x: Vec<Real> = (0..cfg.span(frames)).map(|i| (i as Real * 0.37).sin()).collect();
        let y = plan.synthesize(&plan.analyze(&x, frames));
        for i in 1..x.len() {
            assert!((x[i] - y[i]).abs() < 1e-10, "sample {i}");
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(StftConfig { fft_size: 100, hop: 10 }.validate().is_err());
        assert!(StftConfig { fft_size: 64, hop: 0 }.validate().is_err());
        assert!(stft(&[0.5], StftConfig::default()).is_err());
    }
}
