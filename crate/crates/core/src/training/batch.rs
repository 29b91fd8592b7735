//! Padded mini-batches.

use super::corpus::Utterance;
use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

/// Items padded to the longest phoneme and frame counts. Padding ids are 0
/// and padded features are 0; the masks mark real positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B x max T_p`
    pub phonemes: Vec<Vec<usize>>,
    pub phoneme_mask: Vec<Vec<bool>>,
    /// `B` tensors of `max T_a x D`.
    pub features: Vec<Tensor>,
    pub frame_mask: Vec<Vec<bool>>,
    pub phoneme_lens: Vec<usize>,
    pub frame_lens: Vec<usize>,
}

impl Batch {
    pub fn new(items: &[&Utterance]) -> Result<Self> {
        Self::padded(items, 0, 0)
    }

    /// Pads to at least `min_phonemes` / `min_frames`.
    pub fn padded(items: &[&Utterance], min_phonemes: usize, min_frames: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let dim = items[0].features.cols();
        let tp = items.iter().map(|u| u.num_phonemes()).max().unwrap_or(0).max(min_phonemes);
        let ta = items.iter().map(|u| u.num_frames()).max().unwrap_or(0).max(min_frames);
        let mut b = Batch {
            phonemes: Vec::new(),
            phoneme_mask: Vec::new(),
            features: Vec::new(),
            frame_mask: Vec::new(),
            phoneme_lens: Vec::new(),
            frame_lens: Vec::new(),
        };
        for u in items {
            if u.features.cols() != dim {
                return Err(Error::shape("batch features", u.features.shape(), &[u.num_frames(), dim]));
            }
            let mut ids = u.phonemes.clone();
            ids.resize(tp, 0);
            b.phonemes.push(ids);
            b.phoneme_mask.push((0..tp).map(|i| i < u.num_phonemes()).collect());
            let mut data = u.features.data().to_vec();
            data.resize(ta * dim, 0.0);
            b.features.push(Tensor::matrix(ta, dim, data));
            b.frame_mask.push((0..ta).map(|t| t < u.num_frames()).collect());
            b.phoneme_lens.push(u.num_phonemes());
            b.frame_lens.push(u.num_frames());
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    /// Real phoneme ids of item `i`.
    pub fn ids(&self, i: usize) -> &[usize] {
        &self.phonemes[i][..self.phoneme_lens[i]]
    }

    /// Real frames of item `i`.
    pub fn target(&self, i: usize) -> Tensor {
        let t = &self.features[i];
        let n = self.frame_lens[i];
        Tensor::matrix(n, t.cols(), t.data()[..n * t.cols()].to_vec())
    }

    pub fn real_elements(&self) -> usize {
        self.frame_lens
            .iter()
            .zip(&self.features)
            .map(|(n, f)| n * f.cols())
            .sum()
    }
}

/// Deterministic epoch-shuffled index stream.
pub struct Sampler {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl Sampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self::at(n, seed, 0)
    }

    /// The sampler positioned after `drawn` indices. Every epoch is shuffled
    /// from its own seed, so resuming here continues the exact sequence.
    pub fn at(n: usize, seed: u64, drawn: u64) -> Self {
        let n64 = n.max(1) as u64;
        let mut s = Sampler {
            order: (0..n).collect(),
            pos: 0,
            epoch: drawn / n64,
            seed,
        };
        s.shuffle();
        s.pos = (drawn % n64) as usize;
        s
    }

    fn shuffle(&mut self) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mean absolute difference, or 0 for empty input.
pub fn mean_abs_diff(a: &[Real], b: &[Real]) -> Real {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<Real>() / a.len() as Real
}
