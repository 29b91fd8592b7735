//! Latency harness: one parallel stage-2 forward against a frame-by-frame
//! autoregressive loop running the same decoder.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::nnmodel::{Ctx, FpetsModel};
use crate::numcore::{Real, Tape, Tensor};
use crate::synthesis::Vocoder;

/// One benchmark input: phoneme ids and an optional frame-count override.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchCase {
    pub ids: Vec<usize>,
    pub frames: Option<usize>,
}

impl BenchCase {
    /// `n` phonemes cycling through the vocabulary.
    pub fn phonemes(n: usize, vocab: usize) -> Self {
        BenchCase {
            ids: (0..n).map(|i| i % vocab.max(1)).collect(),
            frames: None,
        }
    }

    /// Enough phonemes to cover `frames` at `frames_per_phoneme`, decoded
    /// at exactly `frames` frames.
    pub fn frames(frames: usize, frames_per_phoneme: usize, vocab: usize) -> Self {
        let n = frames.div_ceil(frames_per_phoneme.max(1)).max(1);
        BenchCase {
            frames: Some(frames),
            ..Self::phonemes(n, vocab)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub phonemes: usize,
    pub frames: usize,
    /// Median milliseconds of one full feature forward.
    pub fpets_ms: Real,
    /// Median milliseconds of the Griffin-Lim stage, if measured.
    pub vocoder_ms: Option<Real>,
    /// Median milliseconds of the frame-by-frame loop.
    pub autoregressive_ms: Real,
    pub fpets_calls: usize,
    pub autoregressive_calls: usize,
}

pub const BENCH_HEADER: &str = "phonemes,frames,fpets_ms,vocoder_ms,autoregressive_ms,fpets_calls,autoregressive_calls";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.3},{},{:.3},{},{}",
            self.phonemes,
            self.frames,
            self.fpets_ms,
            self.vocoder_ms.map_or_else(String::new, |v| format!("{v:.3}")),
            self.autoregressive_ms,
            self.fpets_calls,
            self.autoregressive_calls
        )
    }
}

pub fn median(xs: &mut [Real]) -> Real {
    if xs.is_empty() {
        return Real::NAN;
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// One parallel synthesis forward. Returns the features and the number of
/// decoder invocations it took.
pub fn fpets_forward(model: &FpetsModel, case: &BenchCase) -> Result<(Tensor, usize)> {
    model.reset_decoder_calls();
    let inf = model.infer(&case.ids, case.frames)?;
    Ok((inf.features, model.decoder_calls()))
}

/// Stage-2 decoder input `[A_tilde H | relative position]` in evaluation mode.
pub fn stage2_input(model: &FpetsModel, case: &BenchCase) -> Result<Tensor> {
    let mut tape = Tape::new();
    let binding = model.params.bind_frozen(&mut tape);
    let mut cx = Ctx::new(&mut tape, &binding, false, 0.0, 0);
    let h = model.encoder_forward(&mut cx, &case.ids)?;
    let r = model.predict_r(&case.ids)?;
    let frames = case.frames.unwrap_or_else(|| crate::alignment::inferred_frame_count(&r));
    if frames == 0 {
        return Err(Error::Domain("benchmark case decodes to zero frames".into()));
    }
    let hard = model.hard_alignment(&r, frames)?;
    let rel = model.relative_position_feature(&r, &hard)?;
    let a = cx.tape.constant(hard);
    let ctx = cx.tape.matmul(a, h)?;
    let rel = cx.tape.constant(rel);
    let x = cx.tape.concat_cols(ctx, rel)?;
    Ok(cx.tape.value(x).clone())
}

/// Reference sequential decoder: frame `t` is produced by running the
/// stage-2 decoder over the inputs of frames `0..=t`, as an autoregressive
/// decoder without cached state would. Returns the frames and the number of
/// decoder invocations (`T_a` by construction).
pub fn autoregressive_simulate(model: &FpetsModel, input: &Tensor) -> Result<(Tensor, usize)> {
    model.reset_decoder_calls();
    let cols = input.cols();
    let mut out = Vec::new();
    let mut dim = 0;
    for t in 0..input.rows() {
        let mut tape = Tape::new();
        let binding = model.params.bind_frozen(&mut tape);
        let mut cx = Ctx::new(&mut tape, &binding, false, 0.0, 0);
        let prefix = Tensor::matrix(t + 1, cols, input.data()[..(t + 1) * cols].to_vec());
        let x = cx.tape.constant(prefix);
        let y = model.stage2_decode(&mut cx, x)?;
        let y = tape.value(y);
        dim = y.cols();
        out.extend_from_slice(y.row(t));
    }
    Ok((Tensor::matrix(input.rows(), dim, out), model.decoder_calls()))
}

/// Medians over `repeat` runs per case. The vocoder column is measured only
/// when a vocoder is given.
pub fn run_bench(
    model: &FpetsModel,
    vocoder: Option<&Vocoder>,
    cases: &[BenchCase],
    repeat: usize,
) -> Result<Vec<BenchRow>> {
    let repeat = repeat.max(1);
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        let mut fp = Vec::with_capacity(repeat);
        let mut calls = 0;
        let mut features = Tensor::zeros(&[0, 0]);
        for _ in 0..repeat {
            let t0 = Instant::now();
            let (f, c) = fpets_forward(model, case)?;
            fp.push(t0.elapsed().as_secs_f64() * 1e3);
            features = f;
            calls = c;
        }
        let vocoder_ms = match vocoder {
            Some(v) => {
                let mut vt = Vec::with_capacity(repeat);
                for _ in 0..repeat {
                    let t0 = Instant::now();
                    v.render(&features)?;
                    vt.push(t0.elapsed().as_secs_f64() * 1e3);
                }
                Some(median(&mut vt))
            }
            None => None,
        };
        let input = stage2_input(model, case)?;
        let mut ar = Vec::with_capacity(repeat);
        let mut ar_calls = 0;
        for _ in 0..repeat {
            let t0 = Instant::now();
            let (_, c) = autoregressive_simulate(model, &input)?;
            ar.push(t0.elapsed().as_secs_f64() * 1e3);
            ar_calls = c;
        }
        rows.push(BenchRow {
            phonemes: case.ids.len(),
            frames: features.rows(),
            fpets_ms: median(&mut fp),
            vocoder_ms,
            autoregressive_ms: median(&mut ar),
            fpets_calls: calls,
            autoregressive_calls: ar_calls,
        });
    }
    Ok(rows)
}

/// How many times faster the sequential loop's latency grows than the
/// parallel forward's between rows `a` and `b`.
pub fn growth_gap(a: &BenchRow, b: &BenchRow) -> Real {
    let ar = b.autoregressive_ms / a.autoregressive_ms;
    let fp = b.fpets_ms / a.fpets_ms;
    ar / fp
}
