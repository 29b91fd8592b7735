//! Alignment widths, positions and the attention-width algebra.

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

fn check_positive(r: &[Real]) -> Result<()> {
    if r.is_empty() {
        return Err(Error::Domain("alignment widths must be non-empty".into()));
    }
    match r.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        Some(i) => Err(Error::Domain(format!(
            "alignment width r[{i}] = {} must be positive",
            r[i]
        ))),
        None => Ok(()),
    }
}

/// Absolute alignment positions: `s_i = sum_{k<i} r_k + r_i / 2`.
pub fn compute_positions(r: &[Real]) -> Result<Vec<Real>> {
    check_positive(r)?;
    let mut acc = 0.0;
    Ok(r.iter()
        .map(|&ri| {
            let s = acc + 0.5 * ri;
            acc += ri;
            s
        })
        .collect())
}

/// Attention widths implied by alignment widths:
/// `w_i = (r_{i-1} + 2 r_i + r_{i+1}) / 4` with the ends mirrored
/// (`r_{-1} = r_0`, `r_N = r_{N-1}`). The transform preserves the total.
pub fn attention_width_from_alignment(r: &[Real]) -> Result<Vec<Real>> {
    check_positive(r)?;
    let n = r.len();
    Ok((0..n)
        .map(|i| {
            let prev = if i == 0 { r[0] } else { r[i - 1] };
            let next = if i + 1 == n { r[n - 1] } else { r[i + 1] };
            0.25 * (prev + 2.0 * r[i] + next)
        })
        .collect())
}

/// Inverse of [`attention_width_from_alignment`]: solves the tridiagonal
/// system for the alignment widths that produce attention widths `w`.
///
/// The result can contain non-positive entries when `w` alternates sharply;
/// callers decide how to treat those.
pub fn alignment_from_attention_width(w: &[Real]) -> Result<Vec<Real>> {
    let n = w.len();
    if n == 0 {
        return Err(Error::Domain("attention widths must be non-empty".into()));
    }
    if n == 1 {
        return Ok(vec![w[0]]);
    }
    // Rows scaled by 4: diag 3 at both ends, 2 inside, off-diagonals 1.
    let diag = |i: usize| if i == 0 || i == n - 1 { 3.0 } else { 2.0 };
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = 1.0 / diag(0);
    d[0] = 4.0 * w[0] / diag(0);
    for i in 1..n {
        let m = diag(i) - c[i - 1];
        c[i] = if i + 1 < n { 1.0 / m } else { 0.0 };
        d[i] = (4.0 * w[i] - d[i - 1]) / m;
    }
    let mut r = vec![0.0; n];
    r[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        r[i] = d[i] - c[i] * r[i + 1];
    }
    Ok(r)
}

/// Number of frames whose one-hot attention row selects each phoneme.
pub fn brute_force_width(hard: &Tensor) -> Vec<usize> {
    let cols = hard.cols();
    let mut counts = vec![0usize; cols];
    for j in 0..hard.rows() {
        if let Some(i) = hard.row(j).iter().position(|&v| v == 1.0) {
            counts[i] += 1;
        }
    }
    counts
}

/// Frame count implied by alignment widths at inference: `round(sum r)`,
/// at least one frame.
pub fn inferred_frame_count(r: &[Real]) -> usize {
    (r.iter().sum::<Real>().round() as usize).max(1)
}

/// First differences of the positions (`d_0 = s_0`), i.e. the distance from
/// each phoneme to its predecessor.
pub fn position_deltas(s: &[Real]) -> Vec<Real> {
    s.iter()
        .enumerate()
        .map(|(i, &si)| if i == 0 { si } else { si - s[i - 1] })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_examples() {
        assert_eq!(compute_positions(&[2.0, 4.0, 2.0]).unwrap(), vec![1.0, 4.0, 7.0]);
        assert_eq!(compute_positions(&[10.0]).unwrap(), vec![5.0]);
        let c = 3.5;
        let s = compute_positions(&[c; 6]).unwrap();
        for (i, si) in s.iter().enumerate() {
            assert!((si - (c * i as Real + c / 2.0)).abs() < 1e-12);
        }
        assert!(matches!(compute_positions(&[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(compute_positions(&[-1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn width_examples() {
        let w = attention_width_from_alignment(&[2.0, 4.0, 2.0]).unwrap();
        assert_eq!(w, vec![2.5, 3.0, 2.5]);
        assert_eq!(w.iter().sum::<Real>(), 8.0);
        assert_eq!(attention_width_from_alignment(&[1.7; 5]).unwrap(), vec![1.7; 5]);
        assert!(attention_width_from_alignment(&[2.0, -1.0]).is_err());
    }

    #[test]
    fn inverse_width_transform() {
        for r in [vec![2.0, 4.0, 2.0], vec![5.0], vec![3.0, 7.0], vec![4.0, 9.0, 6.0, 5.0, 8.0]] {
            let w = attention_width_from_alignment(&r).unwrap();
            let back = alignment_from_attention_width(&w).unwrap();
            for (a, b) in r.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12, "{r:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn deltas_of_constant_widths() {
        let s = compute_positions(&[4.0; 5]).unwrap();
        assert_eq!(position_deltas(&s), vec![2.0, 4.0, 4.0, 4.0, 4.0]);
    }
}
