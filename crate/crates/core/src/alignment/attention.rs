//! Key/query encodings and the attention matrices built from them.

use super::codec::{Kernel, PositionCodec};
use crate::error::{Error, Result};
use crate::numcore::{self, kernels, Real, Tensor};

fn encode(positions: impl Iterator<Item = Real>, freqs: &[Real], rows: usize) -> Tensor {
    let l = freqs.len();
    let mut data = Vec::with_capacity(rows * 2 * l);
    for p in positions {
        data.extend(freqs.iter().map(|f| (p / f).sin()));
        data.extend(freqs.iter().map(|f| (p / f).cos()));
    }
    Tensor::matrix(rows, 2 * l, data)
}

fn require_sine_cosine(codec: &PositionCodec) -> Result<()> {
    match codec.kernel {
        Kernel::SineCosine => Ok(()),
        Kernel::Gaussian { .. } => Err(Error::Config(
            "sine/cosine encoding requested from a gaussian codec".into(),
        )),
    }
}

/// Key matrix: row `i` is `[sin(s_i / f_k) ..., cos(s_i / f_k) ...]`.
pub fn encode_phoneme_positions(s: &[Real], codec: &PositionCodec) -> Result<Tensor> {
    require_sine_cosine(codec)?;
    Ok(encode(s.iter().copied(), codec.freqs(), s.len()))
}

/// Query matrix: row `j` encodes the integer frame index `j`.
pub fn encode_frame_positions(frames: usize, codec: &PositionCodec) -> Result<Tensor> {
    if frames == 0 {
        return Err(Error::Domain("frame count must be at least 1".into()));
    }
    require_sine_cosine(codec)?;
    Ok(encode((0..frames).map(|j| j as Real), codec.freqs(), frames))
}

/// `A = F P^T` (frames x phonemes).
pub fn attention_matrix(queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
    if queries.cols() != keys.cols() {
        return Err(Error::shape("attention_matrix", queries.shape(), keys.shape()));
    }
    let (n, k, m) = (queries.rows(), queries.cols(), keys.rows());
    Ok(Tensor::matrix(
        n,
        m,
        kernels::matmul_bt(queries.data(), keys.data(), n, k, m),
    ))
}

/// Row-normalized attention (plain sum normalization, negative entries kept).
pub fn normalize_attention(a: &Tensor) -> Result<Tensor> {
    numcore::row_normalize(a, numcore::ROW_NORMALIZE_EPS)
}

/// Per-row argmax; ties go to the smallest index and NaN never wins.
pub fn argmax_rows(a: &Tensor, valid_cols: Option<usize>) -> Vec<usize> {
    let cols = valid_cols.unwrap_or(a.cols()).min(a.cols()).max(1);
    (0..a.rows())
        .map(|j| {
            let row = &a.row(j)[..cols];
            let mut best = 0;
            let mut best_v = Real::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

/// One-hot attention from the row argmax.
pub fn hard_attention(a: &Tensor) -> Tensor {
    hard_attention_masked(a, None)
}

/// Like [`hard_attention`] but columns at or beyond `valid_cols` are treated
/// as `-inf` (padded phonemes in a batch).
pub fn hard_attention_masked(a: &Tensor, valid_cols: Option<usize>) -> Tensor {
    let cols = a.cols();
    let mut out = Tensor::zeros(&[a.rows(), cols]);
    for (j, i) in argmax_rows(a, valid_cols).into_iter().enumerate() {
        out.row_mut(j)[i] = 1.0;
    }
    out
}

/// Gaussian score matrix `A_ji = exp(-(j - s_i)^2 / (2 width^2))`.
pub fn gaussian_attention_matrix(s: &[Real], frames: usize, width: Real) -> Result<Tensor> {
    if !(width > 0.0) {
        return Err(Error::Domain(format!("gaussian width {width} must be positive")));
    }
    let denom = 2.0 * width * width;
    let mut data = Vec::with_capacity(frames * s.len());
    for j in 0..frames {
        data.extend(s.iter().map(|&si| {
            let d = j as Real - si;
            (-d * d / denom).exp()
        }));
    }
    Ok(Tensor::matrix(frames, s.len(), data))
}

/// Score matrix for whichever kernel `codec` carries.
pub fn score_matrix(s: &[Real], frames: usize, codec: &PositionCodec) -> Result<Tensor> {
    match codec.kernel {
        Kernel::SineCosine => {
            let keys = encode_phoneme_positions(s, codec)?;
            let queries = encode_frame_positions(frames, codec)?;
            attention_matrix(&queries, &keys)
        }
        Kernel::Gaussian { width } => gaussian_attention_matrix(s, frames, width),
    }
}

/// `g(x) = sum_f cos(x / f)` evaluated at each offset `x = j - s`.
pub fn heavy_tail_profile(codec: &PositionCodec, offsets: &[Real]) -> Result<Vec<Real>> {
    require_sine_cosine(codec)?;
    Ok(offsets
        .iter()
        .map(|&x| codec.freqs().iter().map(|f| (x / f).cos()).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::width::compute_positions;

    fn codec(freqs: &[Real]) -> PositionCodec {
        PositionCodec::new(freqs.to_vec(), Kernel::SineCosine, false).unwrap()
    }

    #[test]
    fn key_rows() {
        let c = codec(&[1.0, 10.0]);
        let p = encode_phoneme_positions(&[0.0, 3.0], &c).unwrap();
        assert_eq!(p.row(0), &[0.0, 0.0, 1.0, 1.0]);
        let expect = [3f64.sin(), 0.3f64.sin(), 3f64.cos(), 0.3f64.cos()];
        for (a, b) in p.row(1).iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let big = encode_phoneme_positions(&[123.4, 9876.5, -3.0], &PositionCodec::geometric(64)).unwrap();
        assert!(big.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn query_rows() {
        let c = codec(&[2.0]);
        let f = encode_frame_positions(4, &c).unwrap();
        assert_eq!(f.row(0), &[0.0, 1.0]);
        assert!((f.at(3, 0) - 1.5f64.sin()).abs() < 1e-15);
        assert!((f.at(3, 1) - 1.5f64.cos()).abs() < 1e-15);
        assert_eq!(f, encode_frame_positions(4, &c).unwrap());
        assert!(encode_frame_positions(0, &c).is_err());
    }

    #[test]
    fn attention_examples() {
        let c = codec(&[1.0, 10.0]);
        let keys = encode_phoneme_positions(&[3.0], &c).unwrap();
        let queries = encode_frame_positions(6, &c).unwrap();
        let a = attention_matrix(&queries, &keys).unwrap();
        assert!((a.at(3, 0) - 2.0).abs() < 1e-12, "coincident frame scores L");
        assert!((a.at(5, 0) - (2f64.cos() + 0.2f64.cos())).abs() < 1e-12);
        assert!((a.at(5, 0) - 0.5640).abs() < 1e-4);
        assert!(attention_matrix(&queries, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn hard_attention_examples() {
        let a = Tensor::from_rows(&[vec![0.2, 0.9, 0.5], vec![0.9, 0.9, 0.1]]).unwrap();
        let h = hard_attention(&a);
        assert_eq!(h.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(h.row(1), &[1.0, 0.0, 0.0]);
        let masked = hard_attention_masked(
            &Tensor::from_rows(&[vec![0.1, 0.2, 9.0]]).unwrap(),
            Some(2),
        );
        assert_eq!(masked.row(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn well_separated_positions() {
        let s = [5.0, 15.0, 25.0];
        let a = score_matrix(&s, 30, &PositionCodec::geometric(64)).unwrap();
        let arg = argmax_rows(&a, None);
        assert_eq!(arg[5], 0);
        assert_eq!(arg[15], 1);
        assert_eq!(arg[25], 2);
    }

    #[test]
    fn gaussian_examples() {
        let a = gaussian_attention_matrix(&[4.0], 12, 2.0).unwrap();
        assert_eq!(a.at(4, 0), 1.0);
        assert!((a.at(6, 0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((a.at(6, 0) - 0.6065).abs() < 1e-4);
        for j in 4..11 {
            assert!(a.at(j + 1, 0) < a.at(j, 0));
        }
        for j in 1..=4 {
            assert!(a.at(j - 1, 0) < a.at(j, 0));
        }
        assert!(gaussian_attention_matrix(&[1.0], 3, 0.0).is_err());
    }

    #[test]
    fn heavy_tail_examples() {
        let c = PositionCodec::geometric(64);
        let g = heavy_tail_profile(&c, &[0.0, 7.3, -7.3, 100.0]).unwrap();
        assert!((g[0] - 64.0).abs() < 1e-12);
        assert!((g[1] - g[2]).abs() < 1e-12);
        let gauss = (-(100.0f64 * 100.0) / (2.0 * 10.0 * 10.0)).exp();
        assert!(g[3].abs() / 64.0 > gauss);
    }

    #[test]
    fn brute_force_widths_track_the_width_algebra() {
        let r = [2.0, 4.0, 2.0];
        let s = compute_positions(&r).unwrap();
        let a = score_matrix(&s, 8, &PositionCodec::geometric(64)).unwrap();
        let counts = crate::alignment::width::brute_force_width(&hard_attention(&a));
        let w = crate::alignment::width::attention_width_from_alignment(&r).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 8);
        for (c, w) in counts.iter().zip(&w) {
            assert!((*c as Real - w).abs() <= 1.0, "{counts:?} vs {w:?}");
        }
        let single = score_matrix(&[3.0], 9, &PositionCodec::geometric(8)).unwrap();
        assert_eq!(crate::alignment::width::brute_force_width(&hard_attention(&single)), vec![9]);
    }
}
