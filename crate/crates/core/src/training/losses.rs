//! Acoustic, alignment and total losses.

use crate::error::{Error, Result};
use crate::numcore::{Real, Tape, Tensor, Var};

pub const DEFAULT_ALIGN_WEIGHT: Real = 0.02;

/// Sum of squared differences over unmasked frames, and the number of
/// elements summed. `mask[t]` marks real frames.
pub fn squared_error(tape: &mut Tape, pred: Var, target: &Tensor, mask: Option<&[bool]>) -> Result<(Var, usize)> {
    let p = tape.value(pred);
    if p.shape() != target.shape() {
        return Err(Error::shape("acoustic loss", p.shape(), target.shape()));
    }
    let (rows, cols) = (target.rows(), target.cols());
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff);
    let (sq, count) = match mask {
        None => (sq, rows * cols),
        Some(m) => {
            if m.len() != rows {
                return Err(Error::shape("frame mask", &[m.len()], &[rows]));
            }
            let weights: Vec<Real> = m
                .iter()
                .flat_map(|&keep| std::iter::repeat(if keep { 1.0 } else { 0.0 }).take(cols))
                .collect();
            let w = tape.constant(Tensor::matrix(rows, cols, weights));
            (tape.mul(sq, w)?, m.iter().filter(|&&k| k).count() * cols)
        }
    };
    Ok((tape.sum(sq), count))
}

/// Mean squared error over unmasked frame-feature elements.
pub fn acoustic_loss(tape: &mut Tape, pred: Var, target: &Tensor, mask: Option<&[bool]>) -> Result<Var> {
    let (s, count) = squared_error(tape, pred, target, mask)?;
    if count == 0 {
        return Err(Error::Domain("acoustic loss over zero frames".into()));
    }
    Ok(tape.scale(s, 1.0 / count as Real))
}

/// `gamma` while `|sum r - frames| < gamma`, otherwise the distance itself.
pub fn alignment_loss(tape: &mut Tape, r: Var, frames: usize, gamma: Real) -> Result<Var> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("alignment threshold {gamma} must be positive")));
    }
    let total = tape.sum(r);
    let shifted = tape.add_scalar(total, -(frames as Real));
    let d = tape.abs(shifted);
    if tape.value(d).item() < gamma {
        Ok(tape.constant(Tensor::scalar(gamma)))
    } else {
        Ok(d)
    }
}

/// Plain-number version of [`alignment_loss`].
pub fn alignment_loss_value(sum_r: Real, frames: Real, gamma: Real) -> Real {
    let d = (sum_r - frames).abs();
    if d < gamma {
        gamma
    } else {
        d
    }
}

/// `acou + weight * align`.
pub fn total_loss(tape: &mut Tape, acou: Var, align: Var, weight: Real) -> Result<Var> {
    let a = tape.scale(align, weight);
    tape.add(acou, a)
}
