//! Log-magnitude spectrogram features, the mel filterbank and per-dimension
//! min-max normalization.

use nalgebra::DMatrix;

use super::stft::{stft, StftConfig};
use super::wav::{AudioClip, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::numcore::{Container, Real, Tensor};

pub const DEFAULT_N_MEL: usize = 80;
pub const LOG_FLOOR: Real = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    LinearLog,
    MelLog,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::LinearLog => "linear",
            FeatureKind::MelLog => "mel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(FeatureKind::LinearLog),
            "mel" => Ok(FeatureKind::MelLog),
            other => Err(Error::Config(format!("unknown feature kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub n_mel: usize,
    pub kind: FeatureKind,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: DEFAULT_SAMPLE_RATE,
            stft: StftConfig::default(),
            n_mel: DEFAULT_N_MEL,
            kind: FeatureKind::MelLog,
        }
    }
}

impl FeatureConfig {
    pub fn dim(&self) -> usize {
        match self.kind {
            FeatureKind::LinearLog => self.stft.bins(),
            FeatureKind::MelLog => self.n_mel,
        }
    }
}

/// A `T_a x D` feature matrix with its framing metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticFeatures {
    pub frames: Tensor,
    pub kind: FeatureKind,
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
}

impl AcousticFeatures {
    pub fn new(frames: Tensor, config: &FeatureConfig) -> Result<Self> {
        if frames.rank() != 2 || frames.cols() != config.dim() {
            return Err(Error::shape(
                "acoustic features",
                frames.shape(),
                &[frames.rows(), config.dim()],
            ));
        }
        if !frames.all_finite() {
            return Err(Error::Domain("non-finite feature value".into()));
        }
        Ok(AcousticFeatures {
            frames,
            kind: config.kind,
            sample_rate: config.sample_rate,
            fft_size: config.stft.fft_size,
            hop: config.stft.hop,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

fn log_floor(x: Real) -> Real {
    x.max(LOG_FLOOR).ln()
}

/// `ln(max(|STFT|, 1e-5))`, `fft_size / 2 + 1` columns. Not normalized.
pub fn linear_log_spectrogram(clip: &AudioClip, config: &FeatureConfig) -> Result<AcousticFeatures> {
    let mag = stft(&clip.samples, config.stft)?.magnitude();
    let cfg = FeatureConfig {
        kind: FeatureKind::LinearLog,
        sample_rate: clip.sample_rate,
        ..*config
    };
    AcousticFeatures::new(mag.map(log_floor), &cfg)
}

/// `ln(max(M |STFT|^2, 1e-5))` with an `n_mel`-band Slaney filterbank `M`.
pub fn mel_spectrogram(clip: &AudioClip, config: &FeatureConfig) -> Result<AcousticFeatures> {
    let power = stft(&clip.samples, config.stft)?.magnitude().map(|m| m * m);
    let bank = MelFilterbank::new(config.n_mel, config.stft.fft_size, clip.sample_rate)?;
    let cfg = FeatureConfig {
        kind: FeatureKind::MelLog,
        sample_rate: clip.sample_rate,
        ..*config
    };
    AcousticFeatures::new(bank.apply(&power)?.map(log_floor), &cfg)
}

pub fn extract(clip: &AudioClip, config: &FeatureConfig) -> Result<AcousticFeatures> {
    match config.kind {
        FeatureKind::LinearLog => linear_log_spectrogram(clip, config),
        FeatureKind::MelLog => mel_spectrogram(clip, config),
    }
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: Real) -> Real {
    const F_SP: Real = 200.0 / 3.0;
    let log_step = 6.4_f64.ln() / 27.0;
    if hz < 1000.0 {
        hz / F_SP
    } else {
        1000.0 / F_SP + (hz / 1000.0).ln() / log_step
    }
}

pub fn mel_to_hz(mel: Real) -> Real {
    const F_SP: Real = 200.0 / 3.0;
    let log_step = 6.4_f64.ln() / 27.0;
    let min_log_mel = 1000.0 / F_SP;
    if mel < min_log_mel {
        mel * F_SP
    } else {
        1000.0 * ((mel - min_log_mel) * log_step).exp()
    }
}

/// Triangular, area-normalized filters spanning 0 Hz to Nyquist.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    /// `n_mel x bins`.
    pub weights: Tensor,
    pub centers_hz: Vec<Real>,
    pub sample_rate: u32,
}

impl MelFilterbank {
    pub fn new(n_mel: usize, fft_size: usize, sample_rate: u32) -> Result<Self> {
        if n_mel == 0 || fft_size < 2 || sample_rate == 0 {
            return Err(Error::Config(format!(
                "invalid filterbank n_mel={n_mel} fft={fft_size} sr={sample_rate}"
            )));
        }
        let bins = fft_size / 2 + 1;
        let nyquist = sample_rate as Real / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<Real> = (0..n_mel + 2)
            .map(|i| mel_to_hz(top * i as Real / (n_mel + 1) as Real))
            .collect();
        let bin_hz = sample_rate as Real / fft_size as Real;
        let mut w = vec![0.0; n_mel * bins];
        for m in 0..n_mel {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let area = 2.0 / (hi - lo);
            for k in 0..bins {
                let f = k as Real * bin_hz;
                let v = ((f - lo) / (c - lo)).min((hi - f) / (hi - c));
                if v > 0.0 {
                    w[m * bins + k] = v * area;
                }
            }
        }
        Ok(MelFilterbank {
            weights: Tensor::matrix(n_mel, bins, w),
            centers_hz: edges[1..=n_mel].to_vec(),
            sample_rate,
        })
    }

    pub fn n_mel(&self) -> usize {
        self.weights.rows()
    }

    pub fn bins(&self) -> usize {
        self.weights.cols()
    }

    /// Maps a `T x bins` power spectrogram to `T x n_mel`.
    pub fn apply(&self, power: &Tensor) -> Result<Tensor> {
        if power.cols() != self.bins() {
            return Err(Error::shape("mel filterbank", power.shape(), self.weights.shape()));
        }
        let bins = self.bins();
        let n_mel = self.n_mel();
        let out = crate::numcore::kernels::matmul_bt(
            power.data(),
            self.weights.data(),
            power.rows(),
            bins,
            n_mel,
        );
        Ok(Tensor::matrix(power.rows(), n_mel, out))
    }

    /// Moore-Penrose pseudo-inverse, `bins x n_mel`.
    pub fn pseudo_inverse(&self) -> Result<Tensor> {
        let m = DMatrix::from_row_slice(self.n_mel(), self.bins(), self.weights.data());
        let pinv = m
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Domain(format!("filterbank pseudo-inverse: {e}")))?;
        let (r, c) = pinv.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(pinv.row(i).iter().copied());
        }
        Ok(Tensor::matrix(r, c, data))
    }

    /// Mel power back to linear power: pseudo-inverse then clamp at 0.
    pub fn invert_power(&self, mel_power: &Tensor, pinv: &Tensor) -> Result<Tensor> {
        if mel_power.cols() != self.n_mel() || pinv.shape() != [self.bins(), self.n_mel()] {
            return Err(Error::shape("mel inversion", mel_power.shape(), pinv.shape()));
        }
        let out = crate::numcore::kernels::matmul_bt(
            mel_power.data(),
            pinv.data(),
            mel_power.rows(),
            self.n_mel(),
            self.bins(),
        );
        Ok(Tensor::matrix(mel_power.rows(), self.bins(), out).map(|v| v.max(0.0)))
    }
}

/// Per-dimension corpus minimum and maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub min: Vec<Real>,
    pub max: Vec<Real>,
}

impl NormStats {
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut stats: Option<NormStats> = None;
        for f in features {
            let st = stats.get_or_insert_with(|| NormStats {
                min: vec![Real::INFINITY; f.cols()],
                max: vec![Real::NEG_INFINITY; f.cols()],
            });
            if f.cols() != st.min.len() {
                return Err(Error::shape("norm stats", f.shape(), &[f.rows(), st.min.len()]));
            }
            for t in 0..f.rows() {
                for (d, &v) in f.row(t).iter().enumerate() {
                    st.min[d] = st.min[d].min(v);
                    st.max[d] = st.max[d].max(v);
                }
            }
        }
        stats.ok_or_else(|| Error::Domain("no features to fit statistics on".into()))
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    fn range(&self, d: usize) -> Real {
        let r = self.max[d] - self.min[d];
        if r > 1e-12 {
            r
        } else {
            1.0
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::shape("normalization", x.shape(), &[x.rows(), self.dim()]));
        }
        Ok(())
    }

    /// `(x - min) / (max - min)`; constant dimensions map to 0.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        for t in 0..out.rows() {
            for (d, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = (*v - self.min[d]) / self.range(d);
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        for t in 0..out.rows() {
            for (d, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = *v * self.range(d) + self.min[d];
            }
        }
        Ok(out)
    }

    pub fn store(&self, c: &mut Container, prefix: &str) {
        c.insert(format!("{prefix}stats_min"), Tensor::vector(self.min.clone()));
        c.insert(format!("{prefix}stats_max"), Tensor::vector(self.max.clone()));
    }

    pub fn restore(c: &Container, prefix: &str) -> Result<Self> {
        let min = c.require(&format!("{prefix}stats_min"))?.data().to_vec();
        let max = c.require(&format!("{prefix}stats_max"))?.data().to_vec();
        if min.len() != max.len() {
            return Err(Error::Checkpoint("stats_min/stats_max length mismatch".into()));
        }
        Ok(NormStats { min, max })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 300.0, 999.0, 1000.0, 4000.0, 11025.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn constant_dimension_normalizes_to_zero() {
        let x = Tensor::matrix(2, 2, vec![1.0, 5.0, 1.0, 7.0]);
        let st = NormStats::fit([&x]).unwrap();
        let n = st.normalize(&x).unwrap();
        assert_eq!(n.data(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(st.denormalize(&n).unwrap().max_abs_diff(&x) < 1e-12);
    }
}
