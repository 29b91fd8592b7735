//! `fpets`: data preparation, two-stage training, synthesis, alignment
//! evaluation, benchmarking and attention export.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use fpets_core::alignment::{export, inferred_frame_count};
use fpets_core::audiofeat::{save_wav, FeatureConfig, FeatureKind};
use fpets_core::bench::{run_bench, BenchCase, BENCH_HEADER};
use fpets_core::nnmodel::{FpetsModel, KeyValues, ModelConfig, Stage};
use fpets_core::numcore::{AdamState, Container};
use fpets_core::synthesis::{Checkpoint, Synthesizer, Vocoder};
use fpets_core::training::{
    self, evaluate_alignment, ground_truth_literal, load_corpus, load_manifest, save_corpus,
    Corpus, Progress, SyntheticConfig, TrainConfig, TrainReport, Vocab,
};
use fpets_core::Error;

#[derive(Parser)]
#[command(name = "fpets", version, about = "Fully parallel text-to-speech acoustic model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a feature cache from a manifest or a synthetic corpus.
    Prepare(PrepareArgs),
    /// Alignment learning: CNN decoder with soft position attention.
    TrainStage1(TrainArgs),
    /// Decoder training on the frozen alignment.
    TrainStage2(TrainArgs),
    /// Phonemes to a WAV file.
    Synth(SynthArgs),
    /// Duration recovery against true durations.
    EvalAlign(EvalArgs),
    /// Parallel forward against a frame-by-frame decoder loop.
    Bench(BenchArgs),
    /// Soft and hard attention matrices as PGM images and CSV.
    ExportAttention(ExportArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// `id|PH1 PH2 ...|audio.wav` manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Phoneme symbols, one per line (required with --manifest).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// `mel` or `linear`.
    #[arg(long, default_value = "mel")]
    features: String,
    /// Generate this many synthetic utterances instead of reading a manifest.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Synthetic alphabet size.
    #[arg(long, default_value_t = 12)]
    alphabet: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// `key=value` model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ckpt_out: PathBuf,
    /// Continue from a checkpoint of the same stage, optimizer state included.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stage-1 checkpoint to start stage 2 from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Also write a checkpoint every N steps.
    #[arg(long)]
    save_every: Option<usize>,
    /// Fill the ms_per_step column with wall-clock time (otherwise 0, which
    /// keeps the report reproducible).
    #[arg(long)]
    record_timing: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Space-separated phoneme symbols.
    #[arg(long)]
    phonemes: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write the normalized features as CSV.
    #[arg(long)]
    features_out: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-phoneme rows as CSV.
    #[arg(long)]
    csv_out: Option<PathBuf>,
    /// Also report the true durations fed through the same width pipeline.
    #[arg(long)]
    baseline: bool,
    /// Omit the per-utterance tables.
    #[arg(long)]
    summary: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,50,100,200")]
    phoneme_lengths: Vec<usize>,
    /// Decode at these frame counts instead of the predicted lengths.
    #[arg(long, value_delimiter = ',')]
    frame_lengths: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    repeat: usize,
    /// Skip the Griffin-Lim column.
    #[arg(long)]
    no_vocoder: bool,
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    phonemes: String,
    /// Output prefix; `.soft.{pgm,csv}` and `.hard.{pgm,csv}` are appended.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Usage(_) | Error::Config(_)) => Failure::Usage(format!("{e:#}")),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("FPETS_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow!("FPETS_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("building the kernel thread pool")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::TrainStage1(a) => train(a, Stage::One),
        Command::TrainStage2(a) => train(a, Stage::Two),
        Command::Synth(a) => synth(a),
        Command::EvalAlign(a) => eval_align(a),
        Command::Bench(a) => bench(a),
        Command::ExportAttention(a) => export_attention(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn prepare(a: PrepareArgs) -> CmdResult {
    let corpus = match (&a.manifest, a.synthetic) {
        (Some(_), Some(_)) => return Err(usage("--manifest and --synthetic are exclusive")),
        (None, None) => return Err(usage("one of --manifest or --synthetic is required")),
        (None, Some(n)) => training::generate_synthetic_corpus(&SyntheticConfig {
            items: n,
            seed: a.seed,
            alphabet: a.alphabet,
            ..SyntheticConfig::default()
        })?,
        (Some(manifest), None) => {
            require_file(manifest, "manifest")?;
            let vocab_path = a.vocab.as_ref().ok_or_else(|| usage("--manifest needs --vocab"))?;
            require_file(vocab_path, "vocabulary")?;
            let vocab = Vocab::load(vocab_path)?;
            let features = FeatureConfig {
                kind: FeatureKind::parse(&a.features)?,
                ..FeatureConfig::default()
            };
            load_manifest(manifest, &vocab, &features, None)?
        }
    };
    let written = save_corpus(&corpus, &a.out)?;
    println!(
        "{} items, {} phonemes, feature dim {} -> {} ({})",
        corpus.len(),
        corpus.vocab.len(),
        corpus.feature_dim(),
        a.out.display(),
        if written { "written" } else { "unchanged" }
    );
    Ok(())
}

fn report_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    ckpt.with_file_name(format!("{stem}.report.csv"))
}

fn save_training(model: &FpetsModel, corpus: &Corpus, adam: &AdamState, tc: &TrainConfig, path: &Path) -> anyhow::Result<()> {
    let mut c = Checkpoint::to_container(model, corpus);
    training::store_adam(adam, model, &mut c);
    c.insert_text("manifest.train", &train_text(tc));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    c.save(path)?;
    Ok(())
}

fn train_text(tc: &TrainConfig) -> String {
    format!(
        "steps={}\nbatch_size={}\nlearning_rate={:?}\ntrain_seed={}\nreinit_encoder={}\n",
        tc.steps, tc.batch_size, tc.learning_rate, tc.seed, tc.reinit_encoder
    )
}

fn train(a: TrainArgs, stage: Stage) -> CmdResult {
    if !a.data.is_dir() {
        return Err(usage(format!("data directory {} does not exist", a.data.display())));
    }
    let corpus = load_corpus(&a.data)?;
    let mut kv = match &a.config {
        Some(p) => {
            require_file(p, "config")?;
            KeyValues::load(p)?
        }
        None => KeyValues::default(),
    };
    let mut tc = TrainConfig::default();
    let (mut model, adam, resumed) = match (stage, &a.resume, &a.init) {
        (_, Some(_), Some(_)) => return Err(usage("--resume and --init are exclusive")),
        (Stage::One, None, Some(_)) => return Err(usage("--init applies to train-stage2 only")),
        (Stage::Two, None, None) => return Err(usage("train-stage2 needs --init <stage-1 checkpoint> or --resume")),
        (_, Some(p), None) => {
            require_file(p, "checkpoint")?;
            let c = Container::load(p)?;
            let ck = Checkpoint::from_container(&c)?;
            if ck.model.stage() != stage {
                return Err(usage(format!(
                    "--resume expects a stage-{} checkpoint, got stage {}",
                    stage.number(),
                    ck.model.stage().number()
                )));
            }
            tc.apply(&mut KeyValues::parse(&c.text("manifest.train")?)?)?;
            tc.apply(&mut kv)?;
            let adam = training::restore_adam(&c, &ck.model, adam_config(&tc))?;
            check_corpus(&ck, &corpus)?;
            (ck.model, Some(adam), true)
        }
        (Stage::Two, None, Some(p)) => {
            require_file(p, "checkpoint")?;
            let ck = Checkpoint::load(p)?;
            if ck.model.stage() != Stage::One {
                return Err(usage("--init expects a stage-1 checkpoint"));
            }
            check_corpus(&ck, &corpus)?;
            tc.apply(&mut kv)?;
            (ck.model, None, false)
        }
        (Stage::One, None, None) => {
            let mut cfg = ModelConfig::desk(corpus.vocab.len(), corpus.feature_dim());
            cfg.apply(&mut kv)?;
            tc.apply(&mut kv)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            (FpetsModel::new(cfg)?, None, false)
        }
    };
    kv.finish()?;
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if let Some(n) = a.steps {
        tc.steps = n;
    }
    if stage == Stage::Two {
        training::enter_stage2(&mut model, &tc)?;
    }
    let mut adam = adam.unwrap_or_else(|| AdamState::new(adam_config(&tc), &model.params));
    adam.config = adam_config(&tc);

    log::info!(
        "stage {} on {} items: {} steps, batch {}, lr {}, config {}",
        stage.number(),
        corpus.len(),
        tc.steps,
        tc.batch_size,
        tc.learning_rate,
        model.config.hash()
    );
    let save_every = a.save_every.unwrap_or(0);
    let ckpt_out = a.ckpt_out.clone();
    let periodic_tc = tc.clone();
    let mut on_step = |p: &Progress| -> fpets_core::Result<()> {
        let r = p.record;
        if r.step % 100 == 0 {
            log::info!("step {} loss {:.5} (acou {:.5}, align {:.3})", r.step, r.loss, r.loss_acou, r.loss_align);
        }
        if save_every > 0 && r.step % save_every as u64 == 0 {
            save_training(p.model, &corpus, p.adam, &periodic_tc, &ckpt_out)
                .map_err(|e| Error::Checkpoint(format!("{e:#}")))?;
        }
        Ok(())
    };
    let (report, adam) = match stage {
        Stage::One => training::train_stage1(&corpus, &mut model, &tc, Some(adam), &mut on_step)?,
        Stage::Two => training::train_stage2(&corpus, &mut model, &tc, Some(adam), &mut on_step)?,
    };
    save_training(&model, &corpus, &adam, &tc, &a.ckpt_out)?;
    let rp = report_path(&a.ckpt_out);
    write_report(&report, &rp, resumed, a.record_timing)?;
    if !report.aborted.is_empty() {
        log::warn!("{} steps aborted on degenerate attention", report.aborted.len());
    }
    println!(
        "stage {} checkpoint {} (report {}); loss {} -> {}",
        stage.number(),
        a.ckpt_out.display(),
        rp.display(),
        fmt_loss(report.head_loss(20)),
        fmt_loss(report.tail_loss(20))
    );
    Ok(())
}

fn fmt_loss(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.5}"))
}

fn adam_config(tc: &TrainConfig) -> fpets_core::numcore::AdamConfig {
    fpets_core::numcore::AdamConfig {
        lr: tc.learning_rate,
        ..Default::default()
    }
}

fn check_corpus(ck: &Checkpoint, corpus: &Corpus) -> CmdResult {
    if ck.meta.vocab != corpus.vocab || ck.meta.stats.dim() != corpus.feature_dim() {
        return Err(usage("checkpoint vocabulary or feature layout differs from --data"));
    }
    Ok(())
}

/// The report is append-only across resumed runs.
fn write_report(report: &TrainReport, path: &Path, append: bool, timing: bool) -> anyhow::Result<()> {
    let csv = report.to_csv(timing);
    if append && path.exists() {
        let rows = csv.split_once('\n').map_or("", |(_, rest)| rest);
        let mut existing = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        existing.push_str(rows);
        fs::write(path, existing).with_context(|| format!("writing {}", path.display()))?;
    } else {
        report.write_csv(path, timing)?;
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> std::result::Result<Checkpoint, Failure> {
    require_file(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?)
}

fn synth(a: SynthArgs) -> CmdResult {
    let ck = load_checkpoint(&a.ckpt)?;
    let syn = Synthesizer::new(ck, a.iterations, a.seed)?;
    let out = syn.synthesize(&a.phonemes)?;
    let clipped = save_wav(&out.audio.clip, &a.out)?;
    if let Some(p) = &a.features_out {
        export::write_csv(&out.inference.features, p)?;
    }
    println!(
        "{} phonemes -> {} frames (sum r = {:.2}) -> {} samples, spectral convergence {:.4}, {} clipped",
        out.phonemes.len(),
        out.inference.features.rows(),
        out.inference.r.iter().sum::<f64>(),
        out.audio.clip.len(),
        out.audio.convergence(),
        clipped
    );
    Ok(())
}

fn eval_align(a: EvalArgs) -> CmdResult {
    let ck = load_checkpoint(&a.ckpt)?;
    if !a.data.is_dir() {
        return Err(usage(format!("data directory {} does not exist", a.data.display())));
    }
    let corpus = load_corpus(&a.data)?;
    if !corpus.has_durations() {
        return Err(usage("eval-align needs data with true durations"));
    }
    check_corpus(&ck, &corpus)?;
    let report = evaluate_alignment(&corpus, &ck.model)?;
    let symbols = &corpus.vocab.symbols;
    if !a.summary {
        print!("{}", report.to_table(symbols));
    }
    println!("average-diff {:.4}", report.average_diff());
    if a.baseline {
        let gt = ground_truth_literal(&corpus, &ck.model.codec())?;
        println!("ground-truth average-diff {:.4}", gt.average_diff());
    }
    if let Some(p) = &a.csv_out {
        fs::write(p, report.to_csv(symbols)).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> CmdResult {
    let ck = load_checkpoint(&a.ckpt)?;
    if ck.model.stage() != Stage::Two {
        return Err(usage("bench needs a stage-2 checkpoint"));
    }
    let vocab = ck.model.config.vocab_size;
    let cases: Vec<BenchCase> = if a.frame_lengths.is_empty() {
        a.phoneme_lengths.iter().map(|&n| BenchCase::phonemes(n, vocab)).collect()
    } else {
        let width = ck.model.config.init_width.round().max(1.0) as usize;
        a.frame_lengths.iter().map(|&n| BenchCase::frames(n, width, vocab)).collect()
    };
    if cases.iter().any(|c| c.ids.is_empty() || c.frames == Some(0)) {
        return Err(usage("lengths must be positive"));
    }
    let vocoder = if a.no_vocoder {
        None
    } else {
        let m = &ck.meta;
        Some(Vocoder::new(m.features, m.stats.clone(), 60, 0)?)
    };
    // A single worker keeps timings comparable between the two decoders.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .context("building the benchmark thread pool")?;
    let rows = pool.install(|| run_bench(&ck.model, vocoder.as_ref(), &cases, a.repeat))?;
    println!("kernel threads: {}", pool.current_num_threads());
    let mut csv = format!("{BENCH_HEADER}\n");
    for r in &rows {
        if r.fpets_calls != 1 {
            return Err(Failure::Runtime(anyhow!("parallel synthesis took {} decoder calls", r.fpets_calls)));
        }
        if r.autoregressive_calls != r.frames {
            return Err(Failure::Runtime(anyhow!(
                "sequential loop took {} decoder calls for {} frames",
                r.autoregressive_calls,
                r.frames
            )));
        }
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    print!("{csv}");
    if let Some(p) = &a.csv_out {
        fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn export_attention(a: ExportArgs) -> CmdResult {
    let ck = load_checkpoint(&a.ckpt)?;
    let ids = ck.meta.vocab.encode(&a.phonemes)?;
    let r = ck.model.predict_r(&ids)?;
    let frames = inferred_frame_count(&r).max(1);
    let (_, _, soft) = ck.model.infer_stage1(&ids, frames)?;
    let hard = ck.model.hard_alignment(&r, frames)?;
    let with = |suffix: &str| {
        let mut s = a.out.clone().into_os_string();
        s.push(suffix);
        PathBuf::from(s)
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    export::write_pgm(&soft, &with(".soft.pgm"))?;
    export::write_csv(&soft, &with(".soft.csv"))?;
    export::write_pgm(&hard, &with(".hard.pgm"))?;
    export::write_csv(&hard, &with(".hard.csv"))?;
    println!(
        "{} phonemes x {} frames -> {}.{{soft,hard}}.{{pgm,csv}}",
        ids.len(),
        frames,
        a.out.display()
    );
    Ok(())
}
