use fpets_core::audiofeat::stft::{hann, reflect_pad};
use fpets_core::audiofeat::*;
use fpets_core::numcore::{Real, Tensor};
use fpets_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SR: u32 = 22_050;

fn small() -> StftConfig {
    StftConfig { fft_size: 512, hop: 128 }
}

#[test]
fn wav_round_trip_within_one_lsb() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tone.wav");
    let clip = AudioClip::tone(440.0, 0.8, 1.0, SR);
    assert_eq!(save_wav(&clip, &path).unwrap(), 0);
    let back = load_wav(&path).unwrap();
    assert_eq!(back.sample_rate, SR);
    assert_eq!(back.len(), clip.len());
    let err = clip
        .samples
        .iter()
        .zip(&back.samples)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, Real::max);
    assert!(err < 1.0 / 32768.0, "max error {err}");
}

#[test]
fn empty_clip_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.wav");
    save_wav(&AudioClip::new(vec![], SR).unwrap(), &path).unwrap();
    let back = load_wav(&path).unwrap();
    assert!(back.is_empty());
}

#[test]
fn clipping_is_counted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.wav");
    let clip = AudioClip::new(vec![1.5, 0.0, -3.0], SR).unwrap();
    assert_eq!(save_wav(&clip, &path).unwrap(), 2);
    let raw: Vec<i16> = hound::WavReader::open(&path)
        .unwrap()
        .into_samples::<i16>()
        .map(|s| s.unwrap())
        .collect();
    assert_eq!(raw, vec![32767, 0, -32768]);
}

#[test]
fn stereo_is_unsupported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stereo.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: SR,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&path, spec).unwrap();
    for _ in 0..10 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    assert!(matches!(load_wav(&path), Err(Error::UnsupportedEncoding(_))));
}

#[test]
fn garbage_header_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.wav");
    std::fs::write(&path, b"RIFF\x00\x00not a wave file at all").unwrap();
    assert!(matches!(load_wav(&path), Err(Error::Corrupt { .. })));
}

#[test]
fn frame_count_is_ceil_len_over_hop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = small();
    for _ in 0..100 {
        let len = rng.gen_range(2..3000);
        let x: Vec<Real> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = stft(&x, cfg).unwrap();
        assert_eq!(spec.frames, (len + cfg.hop - 1) / cfg.hop, "len {len}");
        assert_eq!(spec.bins, 257);
    }
}

#[test]
fn bin_centred_tone_peaks_at_its_bin() {
    let cfg = StftConfig::default();
    let bin = 41;
    let freq = bin as Real * SR as Real / cfg.fft_size as Real;
    let clip = AudioClip::tone(freq, 0.5, 0.5, SR);
    let mag = stft(&clip.samples, cfg).unwrap().magnitude();
    let t = mag.rows() / 2;
    let row = mag.row(t);
    let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    assert_eq!(peak, bin);
    let mut sorted = row.to_vec();
    sorted.sort_by(Real::total_cmp);
    let median = sorted[sorted.len() / 2];
    assert!(20.0 * (row[peak] / median).log10() > 20.0);
}

#[test]
fn zero_clip_has_zero_magnitude() {
    let mag = stft(&vec![0.0; 1000], small()).unwrap().magnitude();
    assert!(mag.data().iter().all(|&v| v == 0.0));
}

#[test]
fn parseval_energy_matches_windowed_signal() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<Real> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let spec = stft(&x, cfg).unwrap();
    let padded = reflect_pad(&x, cfg.fft_size / 2);
    let w = hann(cfg.fft_size);
    let windowed: Real = (0..spec.frames)
        .map(|t| {
            (0..cfg.fft_size)
                .map(|n| (w[n] * padded[t * cfg.hop + n]).powi(2))
                .sum::<Real>()
        })
        .sum();
    let spectral = spec.full_energy() / cfg.fft_size as Real;
    assert!((spectral - windowed).abs() / windowed < 0.01);
}

#[test]
fn linear_features_have_1025_bins_and_floor_on_silence() {
    let cfg = FeatureConfig {
        kind: FeatureKind::LinearLog,
        ..FeatureConfig::default()
    };
    let silence = AudioClip::new(vec![0.0; 3000], SR).unwrap();
    let f = linear_log_spectrogram(&silence, &cfg).unwrap();
    assert_eq!(f.dim(), 1025);
    assert!(f.frames.data().iter().all(|&v| v == LOG_FLOOR.ln()));

    let tone = linear_log_spectrogram(&AudioClip::tone(300.0, 0.5, 0.2, SR), &cfg).unwrap();
    let stats = NormStats::fit([&f.frames, &tone.frames]).unwrap();
    let n = stats.normalize(&f.frames).unwrap();
    assert!(n.data().iter().all(|&v| v == 0.0));
}

#[test]
fn normalization_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::matrix(30, 7, (0..210).map(|_| rng.gen_range(-11.0..3.0)).collect());
    let y = Tensor::matrix(12, 7, (0..84).map(|_| rng.gen_range(-11.0..3.0)).collect());
    let stats = NormStats::fit([&x, &y]).unwrap();
    let n = stats.normalize(&x).unwrap();
    assert!(n.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(stats.denormalize(&n).unwrap().max_abs_diff(&x) < 1e-9);
}

#[test]
fn mel_filterbank_construction() {
    let bank = MelFilterbank::new(80, 2048, SR).unwrap();
    assert_eq!(bank.weights.shape(), &[80, 1025]);
    for m in 0..80 {
        assert!(bank.weights.row(m).iter().sum::<Real>() > 0.0, "filter {m}");
    }
    let bin_hz = SR as Real / 2048.0;
    let first = bank.centers_hz[0];
    let last = bank.centers_hz[79];
    for k in 0..1025 {
        let f = k as Real * bin_hz;
        if f >= first && f <= last {
            assert!((0..80).any(|m| bank.weights.at(m, k) > 0.0), "bin {k} uncovered");
        }
    }
}

#[test]
fn tone_lands_in_single_dominant_mel_band() {
    let cfg = FeatureConfig::default();
    let bank = MelFilterbank::new(80, 2048, SR).unwrap();
    let target = 37;
    let clip = AudioClip::tone(bank.centers_hz[target], 0.5, 0.3, SR);
    let f = mel_spectrogram(&clip, &cfg).unwrap();
    assert_eq!(f.dim(), 80);
    let row = f.frames.row(f.num_frames() / 2);
    let mut order: Vec<usize> = (0..80).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    assert_eq!(order[0], target);
    // Dominant by at least a factor of e^1 in power over the runner-up.
    assert!(row[order[0]] - row[order[1]] > 1.0);
}

#[test]
fn mel_silence_is_floor() {
    let f = mel_spectrogram(&AudioClip::new(vec![0.0; 2000], SR).unwrap(), &FeatureConfig::default())
        .unwrap();
    assert!(f.frames.data().iter().all(|&v| v == LOG_FLOOR.ln()));
}

#[test]
fn mel_pseudo_inverse_recovers_filter_projection() {
    let bank = MelFilterbank::new(80, 2048, SR).unwrap();
    let pinv = bank.pseudo_inverse().unwrap();
    assert_eq!(pinv.shape(), &[1025, 80]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let power = Tensor::matrix(4, 1025, (0..4 * 1025).map(|_| rng.gen_range(0.0..2.0)).collect());
    let mel = bank.apply(&power).unwrap();
    let lin = bank.invert_power(&mel, &pinv).unwrap();
    assert!(lin.data().iter().all(|&v| v >= 0.0));
    // M * pinv(M) = I on the mel side (before clamping the result is exact).
    let unclamped = Tensor::matrix(
        4,
        1025,
        fpets_core::numcore::kernels::matmul_bt(mel.data(), pinv.data(), 4, 80, 1025),
    );
    assert!(bank.apply(&unclamped).unwrap().max_abs_diff(&mel) < 1e-8);
}

fn tone_mag(cfg: StftConfig) -> Tensor {
    let clip = AudioClip::tone(440.0, 0.5, 0.5, SR);
    stft(&clip.samples, cfg).unwrap().magnitude()
}

#[test]
fn griffin_lim_converges_on_tone() {
    let cfg = GriffinLimConfig::default();
    let mag = tone_mag(cfg.stft);
    let out = griffin_lim(&mag, &cfg, SR).unwrap();
    assert_eq!(out.history.len(), 60);
    assert!(out.convergence() < 0.1, "convergence {}", out.convergence());
    for w in out.history.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{} -> {}", w[0], w[1]);
    }
    assert_eq!(out.clip.len(), mag.rows() * cfg.stft.hop);
}

#[test]
fn griffin_lim_without_momentum_is_monotone_too() {
    let cfg = GriffinLimConfig {
        stft: small(),
        iterations: 30,
        momentum: 0.0,
        ..GriffinLimConfig::default()
    };
    let out = griffin_lim(&tone_mag(small()), &cfg, SR).unwrap();
    for w in out.history.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn momentum_speeds_up_convergence() {
    let base = GriffinLimConfig {
        iterations: 30,
        ..GriffinLimConfig::default()
    };
    let mag = tone_mag(base.stft);
    let plain = griffin_lim(&mag, &GriffinLimConfig { momentum: 0.0, ..base }, SR).unwrap();
    let fast = griffin_lim(&mag, &base, SR).unwrap();
    assert!(fast.convergence() < plain.convergence(), "{} vs {}", fast.convergence(), plain.convergence());
}

#[test]
fn momentum_must_be_below_one() {
    for momentum in [1.0, -0.1] {
        let cfg = GriffinLimConfig {
            stft: small(),
            momentum,
            ..GriffinLimConfig::default()
        };
        assert!(matches!(griffin_lim(&tone_mag(small()), &cfg, SR), Err(Error::Config(_))));
    }
}

#[test]
fn griffin_lim_zero_magnitude_gives_silence() {
    let cfg = GriffinLimConfig {
        stft: small(),
        ..GriffinLimConfig::default()
    };
    let out = griffin_lim(&Tensor::zeros(&[6, 257]), &cfg, SR).unwrap();
    assert!(out.clip.samples.iter().all(|&v| v == 0.0));
    assert_eq!(out.convergence(), 0.0);
}

#[test]
fn griffin_lim_rejects_negative_magnitude() {
    let mut m = Tensor::zeros(&[3, 257]);
    m.data_mut()[5] = -1.0;
    let cfg = GriffinLimConfig {
        stft: small(),
        ..GriffinLimConfig::default()
    };
    assert!(griffin_lim(&m, &cfg, SR).is_err());
}

#[test]
fn griffin_lim_is_seeded() {
    let cfg = GriffinLimConfig {
        stft: small(),
        iterations: 10,
        seed: 4,
        ..GriffinLimConfig::default()
    };
    let mag = tone_mag(small());
    let a = griffin_lim(&mag, &cfg, SR).unwrap();
    let b = griffin_lim(&mag, &cfg, SR).unwrap();
    assert_eq!(a.clip, b.clip);
}
