use fpets_core::alignment::graph::{self, Normalization, PositionMode};
use fpets_core::alignment::{
    attention_matrix, attention_width_from_alignment, brute_force_width, compute_positions,
    encode_frame_positions, encode_phoneme_positions, hard_attention, inferred_frame_count,
    Kernel, PositionCodec,
};
use fpets_core::numcore::{grad_check, Real, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent evaluation of `sum_f cos((s_i - j) / f)` for every (j, i).
fn cosine_sum_oracle(s: &[Real], frames: usize, freqs: &[Real]) -> Vec<Real> {
    let mut out = Vec::with_capacity(frames * s.len());
    for j in 0..frames {
        for &si in s {
            out.push(freqs.iter().map(|f| ((si - j as Real) / f).cos()).sum());
        }
    }
    out
}

#[test]
fn inner_product_equals_cosine_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let l = rng.gen_range(1..80);
        let freqs: Vec<Real> = (0..l).map(|_| rng.gen_range(0.5..20_000.0)).collect();
        let codec = PositionCodec::new(freqs.clone(), Kernel::SineCosine, false).unwrap();
        let tp = rng.gen_range(1..40);
        let s: Vec<Real> = (0..tp).map(|_| rng.gen_range(-10.0..400.0)).collect();
        let frames = rng.gen_range(1..300);
        let a = attention_matrix(
            &encode_frame_positions(frames, &codec).unwrap(),
            &encode_phoneme_positions(&s, &codec).unwrap(),
        )
        .unwrap();
        let oracle = cosine_sum_oracle(&s, frames, &freqs);
        let err = a
            .data()
            .iter()
            .zip(&oracle)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, Real::max);
        assert!(err < 1e-9, "max deviation {err}");
    }
}

#[test]
fn coincident_frame_scores_full_bank() {
    let codec = PositionCodec::geometric(64);
    let s = compute_positions(&[4.0, 6.0, 8.0]).unwrap(); // [2, 7, 14]
    let a = attention_matrix(
        &encode_frame_positions(18, &codec).unwrap(),
        &encode_phoneme_positions(&s, &codec).unwrap(),
    )
    .unwrap();
    for (i, &si) in s.iter().enumerate() {
        let j = si as usize;
        assert!((a.at(j, i) - 64.0).abs() < 1e-9);
        assert!(a.row(j).iter().all(|&v| v <= a.at(j, i) + 1e-12));
    }
}

proptest! {
    #[test]
    fn width_transform_conserves_length(r in proptest::collection::vec(1e-3f64..50.0, 1..200)) {
        let w = attention_width_from_alignment(&r).unwrap();
        let (sw, sr) = (w.iter().sum::<Real>(), r.iter().sum::<Real>());
        prop_assert!((sw - sr).abs() < 1e-9, "{} vs {}", sw, sr);
    }

    #[test]
    fn positions_strictly_increase(r in proptest::collection::vec(1e-3f64..50.0, 1..100)) {
        let s = compute_positions(&r).unwrap();
        prop_assert!(s.windows(2).all(|w| w[1] > w[0]));
    }
}

/// Fraction of random utterances whose argmax frame counts are within one
/// frame of the smoothed widths for every phoneme. Widths are drawn from
/// `[4, 10)` frames and rescaled so that their total is the integer frame
/// count.
fn oracle_agreement(codec: &PositionCodec, cases: usize, seed: u64) -> (Real, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = 0;
    let mut worst = 0;
    for _ in 0..cases {
        let tp = rng.gen_range(1..30);
        let mut r: Vec<Real> = (0..tp).map(|_| rng.gen_range(4.0..10.0)).collect();
        let frames = inferred_frame_count(&r);
        let total: Real = r.iter().sum();
        r.iter_mut().for_each(|v| *v *= frames as Real / total);
        let s = compute_positions(&r).unwrap();
        let a = attention_matrix(
            &encode_frame_positions(frames, codec).unwrap(),
            &encode_phoneme_positions(&s, codec).unwrap(),
        )
        .unwrap();
        let counts = brute_force_width(&hard_attention(&a));
        let w = attention_width_from_alignment(&r).unwrap();
        let dev = counts
            .iter()
            .zip(&w)
            .map(|(&c, &w)| (c as Real - w).abs())
            .fold(0.0, Real::max);
        worst = worst.max(dev.ceil() as usize);
        if dev <= 1.0 {
            ok += 1;
        }
    }
    (ok as Real / cases as Real, worst)
}

#[test]
fn argmax_widths_agree_with_width_algebra() {
    let (rate, worst) = oracle_agreement(&PositionCodec::geometric(64), 100, 99);
    eprintln!("agreement rate {rate}, worst deviation {worst}");
    assert!(rate >= 0.95, "rate {rate}");
}

#[test]
fn argmax_is_local_for_separated_phonemes() {
    let codec = PositionCodec::geometric(64);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let tp = rng.gen_range(2..25);
        let r: Vec<Real> = (0..tp).map(|_| rng.gen_range(4.0..14.0)).collect();
        let s = compute_positions(&r).unwrap();
        let frames = inferred_frame_count(&r);
        let a = attention_matrix(
            &encode_frame_positions(frames, &codec).unwrap(),
            &encode_phoneme_positions(&s, &codec).unwrap(),
        )
        .unwrap();
        let arg = fpets_core::alignment::argmax_rows(&a, None);
        for (i, &si) in s.iter().enumerate() {
            let j = si.round() as usize;
            if j < frames {
                assert_eq!(arg[j], i, "r = {r:?}");
            }
        }
    }
}

#[test]
fn normalized_attention_is_differentiable_in_widths() {
    let codec = PositionCodec::geometric(64);
    let log_freqs = Tensor::vector(codec.freqs().iter().map(|f| f.ln()).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let tp = rng.gen_range(1..8);
        let r = Tensor::vector((0..tp).map(|_| rng.gen_range(3.0..9.0)).collect());
        let frames = inferred_frame_count(r.data());
        let lf = log_freqs.clone();
        let report = grad_check(
            |tape, rv| {
                let lfv = tape.constant(lf.clone());
                let a_hat = graph::soft_attention(
                    tape,
                    rv,
                    frames,
                    Kernel::SineCosine,
                    lfv,
                    PositionMode::Learned,
                    Normalization::Sum,
                )?;
                // weight frames so the mean is not identically 1 / T_p
                let w = tape.constant(Tensor::matrix(
                    frames,
                    tp,
                    (0..frames * tp).map(|k| ((k * 7919) % 13) as Real / 13.0).collect(),
                ));
                let p = tape.mul(a_hat, w)?;
                Ok(tape.mean(p))
            },
            &r,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn frequency_gradients_match_finite_differences() {
    let r = vec![4.0, 6.5, 5.0];
    let frames = inferred_frame_count(&r);
    let log_freqs = Tensor::vector(
        PositionCodec::geometric(8)
            .freqs()
            .iter()
            .map(|f| f.ln())
            .collect(),
    );
    let report = grad_check(
        |tape, lf| {
            let rv = tape.constant(Tensor::vector(r.clone()));
            let a_hat = graph::soft_attention(
                tape,
                rv,
                frames,
                Kernel::SineCosine,
                lf,
                PositionMode::Learned,
                Normalization::Sum,
            )?;
            let sq = tape.square(a_hat);
            Ok(tape.sum(sq))
        },
        &log_freqs,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}
