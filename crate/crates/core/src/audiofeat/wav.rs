//! 16-bit PCM mono WAV I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Real;

pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;

const SCALE: Real = 32_768.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<Real>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<Real>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("sample {i} is not finite")));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    /// `amplitude * sin(2 pi freq t)` for `seconds` seconds.
    pub fn tone(freq: Real, amplitude: Real, seconds: Real, sample_rate: u32) -> Self {
        let n = (seconds * sample_rate as Real).round() as usize;
        let w = 2.0 * std::f64::consts::PI * freq / sample_rate as Real;
        AudioClip {
            samples: (0..n).map(|i| amplitude * (w * i as Real).sin()).collect(),
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> Real {
        self.samples.len() as Real / self.sample_rate as Real
    }
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::Unsupported => Error::UnsupportedEncoding(format!("{}", path.display())),
        other => Error::Corrupt {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Reads a 16-bit PCM mono file; samples are scaled by 1/32768.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedEncoding(format!(
            "{}: {} channels (mono only)",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding(format!(
            "{}: {}-bit {:?} (16-bit PCM only)",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as Real / SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono. Samples outside `[-1, 1]` are clipped; the number
/// of clipped samples is returned.
pub fn save_wav(clip: &AudioClip, path: &Path) -> Result<usize> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    let mut clipped = 0;
    for &x in &clip.samples {
        let (v, c) = quantize(x);
        clipped += c as usize;
        writer.write_sample(v).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))?;
    if clipped > 0 {
        log::warn!("{}: clipped {clipped} samples", path.display());
    }
    Ok(clipped)
}

fn quantize(x: Real) -> (i16, bool) {
    let clipped = !(-1.0..=1.0).contains(&x);
    let v = (x.clamp(-1.0, 1.0) * SCALE).round();
    (v.clamp(i16::MIN as Real, i16::MAX as Real) as i16, clipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_clips_and_counts() {
        assert_eq!(quantize(1.5), (i16::MAX, true));
        assert_eq!(quantize(-2.0), (i16::MIN, true));
        assert_eq!(quantize(1.0), (i16::MAX, false));
        assert_eq!(quantize(0.0), (0, false));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(AudioClip::new(vec![0.0, Real::NAN], 100).is_err());
        assert!(AudioClip::new(vec![], 0).is_err());
    }
}
