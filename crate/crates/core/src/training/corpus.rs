//! Utterances, the synthetic corpus with known durations, manifests,
//! vocabularies and on-disk feature caches.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::audiofeat::{self, AcousticFeatures, FeatureConfig, FeatureKind, NormStats, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::numcore::{Container, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub phonemes: Vec<usize>,
    /// Normalized features, `T_a x D`.
    pub features: Tensor,
    /// Frames per phoneme; synthetic data only.
    pub durations: Option<Vec<Real>>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }

    pub fn num_phonemes(&self) -> usize {
        self.phonemes.len()
    }
}

/// Phoneme symbols; line number is the id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub symbols: Vec<String>,
}

impl Vocab {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.contains(char::is_whitespace) || s.contains('|') {
                return Err(Error::Config(format!("bad phoneme symbol {s:?} at index {i}")));
            }
            if symbols[..i].contains(s) {
                return Err(Error::Config(format!("duplicate phoneme symbol {s:?}")));
            }
        }
        Ok(Vocab { symbols })
    }

    /// `P0, P1, ...`
    pub fn numbered(n: usize) -> Self {
        Vocab {
            symbols: (0..n).map(|i| format!("P{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let ids = text
            .split_whitespace()
            .map(|s| {
                self.id(s)
                    .ok_or_else(|| Error::Usage(format!("unknown phoneme symbol {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::Usage("no phonemes given".into()));
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.symbols[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        self.symbols.iter().map(|s| format!("{s}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Utterances plus the shared vocabulary, feature framing and statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub items: Vec<Utterance>,
    pub vocab: Vocab,
    pub features: FeatureConfig,
    pub stats: NormStats,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.stats.dim()
    }

    pub fn has_durations(&self) -> bool {
        !self.items.is_empty() && self.items.iter().all(|u| u.durations.is_some())
    }

    /// Splits off the last `n` items.
    pub fn split_tail(mut self, n: usize) -> (Corpus, Corpus) {
        let at = self.items.len().saturating_sub(n);
        let tail = self.items.split_off(at);
        let rest = Corpus {
            items: tail,
            ..self.clone()
        };
        (self, rest)
    }

    /// Stores metadata (`manifest.vocab`, `manifest.features`) and stats.
    pub fn store_metadata(&self, c: &mut Container) {
        c.insert_text("manifest.vocab", &self.vocab.to_text());
        c.insert_text("manifest.features", &feature_config_text(&self.features));
        self.stats.store(c, "");
    }
}

pub fn feature_config_text(f: &FeatureConfig) -> String {
    format!(
        "kind={}\nsample_rate={}\nfft_size={}\nhop={}\nn_mel={}\n",
        f.kind.as_str(),
        f.sample_rate,
        f.stft.fft_size,
        f.stft.hop,
        f.n_mel
    )
}

pub fn parse_feature_config(text: &str) -> Result<FeatureConfig> {
    let mut kv = crate::nnmodel::KeyValues::parse(text)?;
    let mut f = FeatureConfig::default();
    kv.take_with("kind", &mut f.kind, FeatureKind::parse)?;
    kv.take("sample_rate", &mut f.sample_rate)?;
    kv.take("fft_size", &mut f.stft.fft_size)?;
    kv.take("hop", &mut f.stft.hop)?;
    kv.take("n_mel", &mut f.n_mel)?;
    kv.finish()?;
    f.stft.validate()?;
    Ok(f)
}

/// Vocabulary, framing and statistics recovered from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusMetadata {
    pub vocab: Vocab,
    pub features: FeatureConfig,
    pub stats: NormStats,
}

impl CorpusMetadata {
    pub fn from_container(c: &Container) -> Result<Self> {
        Ok(CorpusMetadata {
            vocab: Vocab::parse(&c.text("manifest.vocab")?)?,
            features: parse_feature_config(&c.text("manifest.features")?)?,
            stats: NormStats::restore(c, "")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub items: usize,
    pub seed: u64,
    pub alphabet: usize,
    /// Inclusive duration range in frames.
    pub durations: (usize, usize),
    /// Inclusive phoneme count range per utterance.
    pub phonemes: (usize, usize),
    pub dim: usize,
    /// Standard deviation of the additive frame noise.
    pub noise: Real,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            items: 50,
            seed: 7,
            alphabet: 12,
            durations: (4, 10),
            phonemes: (5, 10),
            dim: audiofeat::spectrogram::DEFAULT_N_MEL,
            noise: 0.02,
        }
    }
}

/// Smooth template of phoneme `p`: three Gaussian bumps on a low floor, in
/// `[0, 1]`. Depends only on `p` and `dim`.
pub fn phoneme_template(p: usize, dim: usize) -> Vec<Real> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7E3A_0000 + p as u64);
    let bumps: Vec<(Real, Real, Real)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.0..dim as Real),
                rng.gen_range(0.03..0.1) * dim as Real,
                rng.gen_range(0.3..0.8),
            )
        })
        .collect();
    (0..dim)
        .map(|d| {
            let v: Real = bumps
                .iter()
                .map(|&(c, w, a)| a * (-(d as Real - c).powi(2) / (2.0 * w * w)).exp())
                .sum();
            (0.1 + v).min(1.0)
        })
        .collect()
}

/// Typical duration of phoneme `p`, spread over the duration range.
pub fn base_duration(p: usize, range: (usize, usize)) -> usize {
    let span = range.1 - range.0 + 1;
    let gcd = |mut a: usize, mut b: usize| {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    };
    // A stride coprime to the span visits every duration before repeating.
    let stride = (3..).step_by(2).find(|&k| gcd(k, span) == 1).unwrap_or(1);
    range.0 + (p * stride + 1) % span
}

/// Statistics under which synthetic `[0, 1]` features map to log-mel values
/// between the log floor and `ln 10`.
pub fn synthetic_stats(dim: usize) -> NormStats {
    NormStats {
        min: vec![LOG_FLOOR.ln(); dim],
        max: vec![10.0_f64.ln(); dim],
    }
}

/// Utterances whose frames are phoneme templates repeated for their
/// durations, plus seeded noise. Durations are the phoneme's base duration
/// with a jitter of at most one frame.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<Corpus> {
    let (lo, hi) = cfg.durations;
    if lo < 3 || hi > 20 || lo > hi {
        return Err(Error::Config(format!("duration range [{lo}, {hi}] not within [3, 20]")));
    }
    if cfg.alphabet == 0 || cfg.dim == 0 || cfg.phonemes.0 == 0 || cfg.phonemes.0 > cfg.phonemes.1 {
        return Err(Error::Config("empty alphabet, dimension or phoneme range".into()));
    }
    let templates: Vec<Vec<Real>> = (0..cfg.alphabet).map(|p| phoneme_template(p, cfg.dim)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items = Vec::with_capacity(cfg.items);
    for n in 0..cfg.items {
        let tp = rng.gen_range(cfg.phonemes.0..=cfg.phonemes.1);
        let phonemes: Vec<usize> = (0..tp).map(|_| rng.gen_range(0..cfg.alphabet)).collect();
        let durations: Vec<usize> = phonemes
            .iter()
            .map(|&p| {
                let jitter: i64 = match rng.gen_range(0..10) {
                    0 | 1 => -1,
                    8 | 9 => 1,
                    _ => 0,
                };
                (base_duration(p, cfg.durations) as i64 + jitter).clamp(lo as i64, hi as i64) as usize
            })
            .collect();
        let frames: usize = durations.iter().sum();
        let mut data = Vec::with_capacity(frames * cfg.dim);
        for (&p, &d) in phonemes.iter().zip(&durations) {
            for _ in 0..d {
                data.extend(templates[p].iter().map(|&v| {
                    let noise: Real = rng.sample(StandardNormal);
                    (v + cfg.noise * noise).clamp(0.0, 1.0)
                }));
            }
        }
        items.push(Utterance {
            id: format!("syn{n:04}"),
            phonemes,
            features: Tensor::matrix(frames, cfg.dim, data),
            durations: Some(durations.iter().map(|&d| d as Real).collect()),
        });
    }
    Ok(Corpus {
        items,
        vocab: Vocab::numbered(cfg.alphabet),
        features: FeatureConfig {
            n_mel: cfg.dim,
            kind: FeatureKind::MelLog,
            ..FeatureConfig::default()
        },
        stats: synthetic_stats(cfg.dim),
    })
}

/// Nearest-template label of every frame.
pub fn classify_frames(features: &Tensor, templates: &[Vec<Real>]) -> Vec<usize> {
    (0..features.rows())
        .map(|t| {
            let row = features.row(t);
            (0..templates.len())
                .min_by(|&a, &b| {
                    let da: Real = row.iter().zip(&templates[a]).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: Real = row.iter().zip(&templates[b]).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap_or(0)
        })
        .collect()
}

/// Frame labels implied by integer durations.
pub fn frame_labels(phonemes: &[usize], durations: &[Real]) -> Vec<usize> {
    phonemes
        .iter()
        .zip(durations)
        .flat_map(|(&p, &d)| std::iter::repeat(p).take(d.round() as usize))
        .collect()
}

/// Collapses runs of equal labels.
pub fn collapse_runs(labels: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &l in labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

const FEATURE_EXT: &str = "fpf";

/// Per-item cache: `features` and, when known, `durations`.
pub fn write_feature_cache(path: &Path, features: &Tensor, durations: Option<&[Real]>) -> Result<()> {
    let mut c = Container::new();
    c.insert("features", features.clone());
    if let Some(d) = durations {
        c.insert("durations", Tensor::vector(d.to_vec()));
    }
    c.save(path)
}

pub fn read_feature_cache(path: &Path) -> Result<(Tensor, Option<Vec<Real>>)> {
    let c = Container::load(path)?;
    let f = c.require("features")?.clone();
    if f.rank() != 2 {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("features have shape {:?}", f.shape()),
        });
    }
    Ok((f, c.get("durations").map(|d| d.data().to_vec())))
}

/// One parsed manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub audio: PathBuf,
}

/// Parses `id|PH1 PH2 ...|relative/path` lines against `vocab`. Paths are
/// resolved relative to the manifest's directory.
pub fn parse_manifest(path: &Path, vocab: &Vocab) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let bad = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 '|'-separated fields, got {}", fields.len())));
        }
        let phonemes = fields[1]
            .split_whitespace()
            .map(|s| vocab.id(s).ok_or_else(|| bad(format!("unknown phoneme symbol {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if phonemes.is_empty() {
            return Err(bad("no phonemes".into()));
        }
        let audio = base.join(fields[2].trim());
        if !audio.exists() {
            return Err(bad(format!("missing audio file {}", audio.display())));
        }
        out.push(ManifestRecord {
            id: fields[0].trim().to_string(),
            phonemes,
            audio,
        });
    }
    if out.is_empty() {
        log::warn!("{}: manifest is empty", path.display());
    }
    Ok(out)
}

/// Loads a manifest. WAV entries are converted to features with `features`;
/// `.fpf` entries are read as already-normalized caches. Statistics are
/// fitted on the WAV-derived features (or taken from `stats` when given)
/// and applied to them.
pub fn load_manifest(
    path: &Path,
    vocab: &Vocab,
    features: &FeatureConfig,
    stats: Option<NormStats>,
) -> Result<Corpus> {
    let records = parse_manifest(path, vocab)?;
    let mut raw = Vec::with_capacity(records.len());
    for r in &records {
        let is_cache = r.audio.extension().is_some_and(|e| e == FEATURE_EXT);
        if is_cache {
            let (f, d) = read_feature_cache(&r.audio)?;
            raw.push((f, d, true));
        } else {
            let clip = audiofeat::load_wav(&r.audio)?;
            let f: AcousticFeatures = audiofeat::extract(&clip, features)?;
            raw.push((f.frames, None, false));
        }
    }
    let stats = match stats {
        Some(s) => s,
        None => {
            let wav: Vec<&Tensor> = raw.iter().filter(|r| !r.2).map(|r| &r.0).collect();
            if wav.is_empty() {
                synthetic_stats(features.dim())
            } else {
                NormStats::fit(wav)?
            }
        }
    };
    let mut items = Vec::with_capacity(records.len());
    for (rec, (f, durations, cached)) in records.into_iter().zip(raw) {
        if f.cols() != stats.dim() {
            return Err(Error::shape("manifest features", f.shape(), &[f.rows(), stats.dim()]));
        }
        let features = if cached { f } else { stats.normalize(&f)? };
        if let Some(d) = &durations {
            if d.len() != rec.phonemes.len() {
                return Err(Error::Corrupt {
                    path: rec.audio.clone(),
                    reason: format!("{} durations for {} phonemes", d.len(), rec.phonemes.len()),
                });
            }
        }
        items.push(Utterance {
            id: rec.id,
            phonemes: rec.phonemes,
            features,
            durations,
        });
    }
    Ok(Corpus {
        items,
        vocab: vocab.clone(),
        features: *features,
        stats,
    })
}

/// Directory layout written by [`save_corpus`].
pub struct CorpusPaths {
    pub manifest: PathBuf,
    pub vocab: PathBuf,
    pub stats: PathBuf,
    pub features_dir: PathBuf,
    pub digest: PathBuf,
}

impl CorpusPaths {
    pub fn new(dir: &Path) -> Self {
        CorpusPaths {
            manifest: dir.join("manifest.txt"),
            vocab: dir.join("vocab.txt"),
            stats: dir.join("stats.fpf"),
            features_dir: dir.join("features"),
            digest: dir.join("corpus.sha256"),
        }
    }
}

/// Hex SHA-256 over everything [`save_corpus`] writes.
pub fn corpus_digest(corpus: &Corpus) -> String {
    let mut h = Sha256::new();
    h.update(corpus.vocab.to_text());
    h.update(feature_config_text(&corpus.features));
    let mut stats = Container::new();
    corpus.stats.store(&mut stats, "");
    h.update(stats.to_bytes());
    for u in &corpus.items {
        h.update(u.id.as_bytes());
        h.update(corpus.vocab.decode(&u.phonemes));
        let mut c = Container::new();
        c.insert("features", u.features.clone());
        if let Some(d) = &u.durations {
            c.insert("durations", Tensor::vector(d.clone()));
        }
        h.update(c.to_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes manifest, vocabulary, statistics and per-item caches into `dir`.
/// Returns `false` without touching anything when `dir` already holds the
/// identical corpus.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<bool> {
    let paths = CorpusPaths::new(dir);
    let digest = corpus_digest(corpus);
    if fs::read_to_string(&paths.digest).is_ok_and(|d| d.trim() == digest) {
        return Ok(false);
    }
    fs::create_dir_all(&paths.features_dir).map_err(|e| Error::io(&paths.features_dir, e))?;
    let mut manifest = String::new();
    for u in &corpus.items {
        let rel = format!("features/{}.{FEATURE_EXT}", u.id);
        write_feature_cache(&dir.join(&rel), &u.features, u.durations.as_deref())?;
        manifest.push_str(&format!("{}|{}|{}\n", u.id, corpus.vocab.decode(&u.phonemes), rel));
    }
    let write = |p: &Path, s: &str| fs::write(p, s).map_err(|e| Error::io(p, e));
    write(&paths.manifest, &manifest)?;
    write(&paths.vocab, &corpus.vocab.to_text())?;
    let mut stats = Container::new();
    stats.insert_text("manifest.features", &feature_config_text(&corpus.features));
    corpus.stats.store(&mut stats, "");
    stats.save(&paths.stats)?;
    write(&paths.digest, &format!("{digest}\n"))?;
    Ok(true)
}

/// Reads a directory written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let paths = CorpusPaths::new(dir);
    let vocab = Vocab::load(&paths.vocab)?;
    let stats_c = Container::load(&paths.stats)?;
    let features = parse_feature_config(&stats_c.text("manifest.features")?)?;
    let stats = NormStats::restore(&stats_c, "")?;
    load_manifest(&paths.manifest, &vocab, &features, Some(stats))
}
