//! Duration-recovery evaluation: predicted per-phoneme frame counts against
//! the synthetic corpus's true durations.

use std::fmt::Write as _;

use super::corpus::{Corpus, Utterance};
use crate::alignment::{
    alignment_from_attention_width, brute_force_width, compute_positions, hard_attention,
    inferred_frame_count, score_matrix, PositionCodec,
};
use crate::error::{Error, Result};
use crate::nnmodel::FpetsModel;
use crate::numcore::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct ItemAlignment {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub truth: Vec<Real>,
    pub predicted: Vec<usize>,
    pub r: Vec<Real>,
}

impl ItemAlignment {
    pub fn abs_diffs(&self) -> Vec<Real> {
        self.truth
            .iter()
            .zip(&self.predicted)
            .map(|(t, &p)| (t - p as Real).abs())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReport {
    pub items: Vec<ItemAlignment>,
}

impl AlignmentReport {
    /// Mean `|predicted - true|` over every phoneme of every item.
    pub fn average_diff(&self) -> Real {
        let diffs: Vec<Real> = self.items.iter().flat_map(|i| i.abs_diffs()).collect();
        if diffs.is_empty() {
            0.0
        } else {
            diffs.iter().sum::<Real>() / diffs.len() as Real
        }
    }

    /// `id,phoneme_index,phoneme,true,predicted,r` rows.
    pub fn to_csv(&self, symbols: &[String]) -> String {
        let mut s = String::from("id,index,phoneme,true,predicted,r\n");
        for it in &self.items {
            for (k, ((&p, &t), (&w, &r))) in it
                .phonemes
                .iter()
                .zip(&it.truth)
                .zip(it.predicted.iter().zip(&it.r))
                .enumerate()
            {
                let _ = writeln!(s, "{},{},{},{},{},{:.4}", it.id, k, symbols[p], t, w, r);
            }
        }
        s
    }

    /// Per-utterance table: phoneme row, then true ("real") and predicted
    /// ("resynth") durations, followed by the overall average.
    pub fn to_table(&self, symbols: &[String]) -> String {
        let mut s = String::new();
        for it in &self.items {
            let _ = writeln!(s, "{}", it.id);
            let cell = |v: String| format!("{v:>6}");
            let row = |label: &str, cells: Vec<String>| {
                format!("  {label:<8}{}\n", cells.into_iter().map(cell).collect::<String>())
            };
            s.push_str(&row("phoneme", it.phonemes.iter().map(|&p| symbols[p].clone()).collect()));
            s.push_str(&row("real", it.truth.iter().map(|t| format!("{t}")).collect()));
            s.push_str(&row("resynth", it.predicted.iter().map(|p| p.to_string()).collect()));
        }
        let _ = writeln!(s, "average-diff {:.4}", self.average_diff());
        s
    }
}

fn truth(u: &Utterance) -> Result<&[Real]> {
    u.durations
        .as_deref()
        .ok_or_else(|| Error::Usage(format!("utterance {} has no true durations", u.id)))
}

/// Frame counts per phoneme from hard attention over `round(sum r)` frames
/// with phoneme positions `s`.
pub fn widths_from_positions(s: &[Real], frames: usize, codec: &PositionCodec) -> Result<Vec<usize>> {
    Ok(brute_force_width(&hard_attention(&score_matrix(s, frames, codec)?)))
}

/// Evaluates any width source on every item.
pub fn evaluate_with(
    corpus: &Corpus,
    mut widths: impl FnMut(&Utterance) -> Result<(Vec<Real>, Vec<usize>)>,
) -> Result<AlignmentReport> {
    let mut items = Vec::with_capacity(corpus.len());
    for u in &corpus.items {
        let t = truth(u)?.to_vec();
        let (r, predicted) = widths(u)?;
        items.push(ItemAlignment {
            id: u.id.clone(),
            phonemes: u.phonemes.clone(),
            truth: t,
            predicted,
            r,
        });
    }
    Ok(AlignmentReport { items })
}

/// The model's inference alignment: predicted widths, `round(sum r)`
/// frames, hard attention, frame counts.
pub fn evaluate_alignment(corpus: &Corpus, model: &FpetsModel) -> Result<AlignmentReport> {
    let codec = model.codec();
    evaluate_with(corpus, |u| {
        let r = model.predict_r(&u.phonemes)?;
        let frames = inferred_frame_count(&r);
        let s = model.positions_for(&r, frames)?;
        Ok((r, widths_from_positions(&s, frames, &codec)?))
    })
}

/// Feeds the true durations themselves as `r`.
pub fn ground_truth_literal(corpus: &Corpus, codec: &PositionCodec) -> Result<AlignmentReport> {
    evaluate_with(corpus, |u| {
        let r = truth(u)?.to_vec();
        let frames = inferred_frame_count(&r);
        let w = widths_from_positions(&compute_positions(&r)?, frames, codec)?;
        Ok((r, w))
    })
}

/// Feeds the widths whose smoothed attention widths equal the true
/// durations (inverse of `w = (r_{i-1} + 2 r_i + r_{i+1}) / 4`), floored at
/// `r_min`.
pub fn ground_truth_inverse(corpus: &Corpus, codec: &PositionCodec, r_min: Real) -> Result<AlignmentReport> {
    evaluate_with(corpus, |u| {
        let d = truth(u)?;
        let r: Vec<Real> = alignment_from_attention_width(d)?
            .into_iter()
            .map(|v| v.max(r_min))
            .collect();
        let frames = d.iter().sum::<Real>().round() as usize;
        let w = widths_from_positions(&compute_positions(&r)?, frames.max(1), codec)?;
        Ok((r, w))
    })
}
