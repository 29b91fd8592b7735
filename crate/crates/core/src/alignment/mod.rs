//! Trainable position-encoding alignment.
//!
//! Each phoneme `i` owns an alignment width `r_i` (in frames). Widths give
//! positions `s_i = sum_{k<i} r_k + r_i / 2`; phoneme positions and integer
//! frame indices are encoded with sines and cosines over a geometric
//! frequency bank, and the inner product of the two encodings,
//! `sum_f cos((j - s_i) / f)`, scores how much frame `j` attends to phoneme
//! `i`. The row argmax of that matrix splits the frame axis at the midpoints
//! between neighbouring positions, which makes the per-phoneme frame counts
//! a fixed linear smoothing of the widths with the same total.

pub mod attention;
pub mod codec;
pub mod export;
pub mod graph;
pub mod width;

pub use attention::{
    argmax_rows, attention_matrix, encode_frame_positions, encode_phoneme_positions,
    gaussian_attention_matrix, hard_attention, hard_attention_masked, heavy_tail_profile,
    normalize_attention, score_matrix,
};
pub use codec::{Kernel, PositionCodec};
pub use graph::{Normalization, PositionMode};
pub use width::{
    alignment_from_attention_width, attention_width_from_alignment, brute_force_width,
    compute_positions, inferred_frame_count, position_deltas,
};

use crate::error::Result;
use crate::numcore::{Real, Tensor};

/// Everything derived from one utterance's alignment widths.
#[derive(Clone, Debug)]
pub struct AlignmentState {
    pub r: Vec<Real>,
    pub s: Vec<Real>,
    pub scores: Tensor,
    pub normalized: Tensor,
    pub hard: Tensor,
    pub w: Vec<Real>,
}

impl AlignmentState {
    pub fn compute(r: &[Real], frames: usize, codec: &PositionCodec) -> Result<Self> {
        let s = compute_positions(r)?;
        let scores = score_matrix(&s, frames, codec)?;
        let normalized = normalize_attention(&scores)?;
        let hard = hard_attention(&scores);
        let w = attention_width_from_alignment(r)?;
        Ok(AlignmentState {
            r: r.to_vec(),
            s,
            scores,
            normalized,
            hard,
            w,
        })
    }

    pub fn frames(&self) -> usize {
        self.scores.rows()
    }

    /// Frame counts per phoneme read off the one-hot matrix.
    pub fn empirical_widths(&self) -> Vec<usize> {
        brute_force_width(&self.hard)
    }
}
