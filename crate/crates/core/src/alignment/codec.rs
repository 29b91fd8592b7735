use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::Real;

pub const MIN_FREQ: Real = 1.0;
pub const MAX_FREQ: Real = 10_000.0;
pub const DEFAULT_NUM_FREQS: usize = 64;

/// Score function relating a frame to a phoneme position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    /// Inner product of sine/cosine encodings, `sum_f cos((j - s) / f)`.
    SineCosine,
    /// `exp(-(j - s)^2 / (2 width^2))`
    Gaussian { width: Real },
}

/// Frequency bank plus kernel choice for the position encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionCodec {
    freqs: Vec<Real>,
    pub kernel: Kernel,
    pub trainable: bool,
}

impl PositionCodec {
    pub fn new(freqs: Vec<Real>, kernel: Kernel, trainable: bool) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::Config("position codec needs at least one frequency".into()));
        }
        if let Some(f) = freqs.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
            return Err(Error::Domain(format!("frequency {f} must be positive")));
        }
        if let Kernel::Gaussian { width } = kernel {
            if !(width > 0.0) {
                return Err(Error::Domain(format!("gaussian width {width} must be positive")));
            }
        }
        Ok(PositionCodec {
            freqs,
            kernel,
            trainable,
        })
    }

    /// `count` frequencies spaced geometrically over `[1, 10000]`.
    pub fn geometric(count: usize) -> Self {
        let freqs = geometric_bank(count);
        PositionCodec {
            freqs,
            kernel: Kernel::SineCosine,
            trainable: false,
        }
    }

    /// `count` frequencies drawn log-uniformly from `[1, 10000]`, sorted.
    pub fn seeded_random(count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = (MIN_FREQ.ln(), MAX_FREQ.ln());
        let mut freqs: Vec<Real> = (0..count.max(1)).map(|_| rng.gen_range(lo..=hi).exp()).collect();
        freqs.sort_by(|a, b| a.total_cmp(b));
        PositionCodec {
            freqs,
            kernel: Kernel::SineCosine,
            trainable: false,
        }
    }

    pub fn with_kernel(mut self, kernel: Kernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn freqs(&self) -> &[Real] {
        &self.freqs
    }

    pub fn set_freqs(&mut self, freqs: Vec<Real>) -> Result<()> {
        *self = PositionCodec::new(freqs, self.kernel, self.trainable)?;
        Ok(())
    }

    pub fn num_freqs(&self) -> usize {
        self.freqs.len()
    }

    /// Width of a sine/cosine encoding vector (sin half then cos half).
    pub fn dim(&self) -> usize {
        2 * self.freqs.len()
    }
}

pub fn geometric_bank(count: usize) -> Vec<Real> {
    match count {
        0 | 1 => vec![MIN_FREQ],
        n => {
            let ratio = (MAX_FREQ / MIN_FREQ).ln() / (n - 1) as Real;
            (0..n).map(|k| MIN_FREQ * (ratio * k as Real).exp()).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_bank_spans_range() {
        let f = geometric_bank(64);
        assert_eq!(f.len(), 64);
        assert!((f[0] - 1.0).abs() < 1e-12);
        assert!((f[63] - 10_000.0).abs() < 1e-8);
        let r0 = f[1] / f[0];
        for w in f.windows(2) {
            assert!((w[1] / w[0] - r0).abs() < 1e-9);
        }
    }

    #[test]
    fn seeded_bank_is_deterministic_and_in_range() {
        let a = PositionCodec::seeded_random(16, 3);
        let b = PositionCodec::seeded_random(16, 3);
        assert_eq!(a, b);
        assert!(a.freqs().iter().all(|&f| (1.0..=10_000.0).contains(&f)));
        assert_eq!(a.dim(), 32);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(PositionCodec::new(vec![1.0, 0.0], Kernel::SineCosine, false).is_err());
        assert!(PositionCodec::new(vec![], Kernel::SineCosine, false).is_err());
        assert!(PositionCodec::new(vec![1.0], Kernel::Gaussian { width: 0.0 }, false).is_err());
    }
}
