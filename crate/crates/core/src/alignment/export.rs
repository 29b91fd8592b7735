//! Attention matrices as CSV and binary PGM (P5) images.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

/// One matrix row per line, values in shortest round-trip form.
pub fn to_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        for (k, v) in m.row(i).iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

pub fn from_csv(text: &str) -> Result<Tensor> {
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|f| {
                    f.trim()
                        .parse::<Real>()
                        .map_err(|e| Error::Domain(format!("csv row {i}: {e}")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

pub fn write_csv(m: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, to_csv(m)).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_csv(&text)
}

/// 8-bit grayscale image with one pixel row per matrix row (frames) and one
/// pixel column per phoneme. Values are min-max scaled; the maximum is white.
pub fn to_pgm(m: &Tensor) -> Vec<u8> {
    let (h, w) = (m.rows(), m.cols());
    let lo = m.data().iter().copied().fold(Real::INFINITY, Real::min);
    let hi = m.data().iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(m.data().iter().map(|&v| {
        if span > 0.0 {
            (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(m: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, to_pgm(m)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let m = Tensor::matrix(2, 3, vec![0.1, -2.5e-7, 1.0 / 3.0, 7.0, 0.0, -1e300]);
        assert_eq!(from_csv(&to_csv(&m)).unwrap(), m);
    }

    #[test]
    fn one_hot_pgm_has_one_white_pixel_per_row() {
        let m = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let img = to_pgm(&m);
        let header = b"P5\n2 3\n255\n";
        assert_eq!(&img[..header.len()], header);
        let pixels = &img[header.len()..];
        for row in pixels.chunks(2) {
            assert_eq!(row.iter().filter(|&&p| p == 255).count(), 1);
        }
    }
}
