//! Differentiable construction of the attention path on a [`Tape`].

use super::codec::Kernel;
use crate::error::Result;
use crate::numcore::{Real, Tape, Tensor, Var, ROW_NORMALIZE_EPS};

/// How phoneme positions are obtained from widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionMode {
    /// `s` from cumulative widths; gradients reach `r`.
    Learned,
    /// `s_i = i * frames / phonemes`, detached from `r`.
    Fixed,
}

/// Row normalization applied to the raw scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Plain division by the row sum.
    Sum,
    Softmax,
}

/// Phoneme positions for `frames` frames.
pub fn positions(tape: &mut Tape, r: Var, frames: usize, mode: PositionMode) -> Var {
    match mode {
        PositionMode::Learned => tape.positions(r),
        PositionMode::Fixed => {
            let n = tape.value(r).len();
            let step = frames as Real / n as Real;
            tape.constant(Tensor::vector((0..n).map(|i| i as Real * step).collect()))
        }
    }
}

fn sin_cos(tape: &mut Tape, pos: Var, inv_freqs: Var) -> Result<Var> {
    let phase = tape.outer(pos, inv_freqs);
    let s = tape.sin(phase);
    let c = tape.cos(phase);
    tape.concat_cols(s, c)
}

/// Raw scores `A` (frames x phonemes). `log_freqs` holds `ln f_k` so a
/// trainable bank stays positive.
pub fn scores(
    tape: &mut Tape,
    s: Var,
    frames: usize,
    kernel: Kernel,
    log_freqs: Var,
) -> Result<Var> {
    match kernel {
        Kernel::SineCosine => {
            let neg = tape.scale(log_freqs, -1.0);
            let inv = tape.exp(neg);
            let keys = sin_cos(tape, s, inv)?;
            let j = tape.constant(Tensor::vector((0..frames).map(|j| j as Real).collect()));
            let queries = sin_cos(tape, j, inv)?;
            tape.matmul_bt(queries, keys)
        }
        Kernel::Gaussian { width } => {
            let off = tape.frame_offsets(s, frames);
            let sq = tape.square(off);
            let z = tape.scale(sq, -1.0 / (2.0 * width * width));
            Ok(tape.exp(z))
        }
    }
}

pub fn normalize(tape: &mut Tape, a: Var, norm: Normalization) -> Result<Var> {
    match norm {
        Normalization::Sum => tape.row_normalize(a, ROW_NORMALIZE_EPS),
        Normalization::Softmax => tape.row_softmax(a),
    }
}

/// `r -> s -> A -> A_hat` in one call.
pub fn soft_attention(
    tape: &mut Tape,
    r: Var,
    frames: usize,
    kernel: Kernel,
    log_freqs: Var,
    mode: PositionMode,
    norm: Normalization,
) -> Result<Var> {
    let s = positions(tape, r, frames, mode);
    let a = scores(tape, s, frames, kernel, log_freqs)?;
    normalize(tape, a, norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{attention, width, PositionCodec};

    #[test]
    fn graph_matches_plain_construction() {
        let codec = PositionCodec::geometric(16);
        let r = vec![3.0, 5.5, 2.0, 7.0];
        let frames = 18;
        let mut tape = Tape::new();
        let rv = tape.constant(Tensor::vector(r.clone()));
        let lf = tape.constant(Tensor::vector(codec.freqs().iter().map(|f| f.ln()).collect()));
        let s = positions(&mut tape, rv, frames, PositionMode::Learned);
        let a = scores(&mut tape, s, frames, Kernel::SineCosine, lf).unwrap();
        let plain = attention::score_matrix(&width::compute_positions(&r).unwrap(), frames, &codec)
            .unwrap();
        assert!(tape.value(a).max_abs_diff(&plain) < 1e-9);
    }

    #[test]
    fn fixed_positions_are_detached() {
        let mut tape = Tape::new();
        let rv = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]), true);
        let s = positions(&mut tape, rv, 20, PositionMode::Fixed);
        assert_eq!(tape.value(s).data(), &[0.0, 5.0, 10.0, 15.0]);
        assert!(!tape.requires_grad(s));
    }
}
