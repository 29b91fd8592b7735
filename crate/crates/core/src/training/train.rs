//! The two training stages.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use super::batch::{Batch, Sampler};
use super::corpus::{Corpus, Utterance};
use super::losses::{squared_error, alignment_loss, total_loss};
use crate::error::{Error, Result};
use crate::nnmodel::{Ctx, FpetsModel, KeyValues, Stage};
use crate::numcore::{AdamConfig, AdamState, Container, Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: Real,
    pub seed: u64,
    /// Redraw encoder weights when entering stage 2 instead of reusing
    /// the stage-1 encoder.
    pub reinit_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            reinit_encoder: false,
        }
    }
}

impl TrainConfig {
    /// Published schedule: 300k steps, batch 32.
    pub fn full_scale() -> Self {
        TrainConfig {
            steps: 300_000,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take("steps", &mut self.steps)?;
        kv.take("batch_size", &mut self.batch_size)?;
        kv.take("learning_rate", &mut self.learning_rate)?;
        kv.take("train_seed", &mut self.seed)?;
        kv.take("reinit_encoder", &mut self.reinit_encoder)?;
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub stage: u8,
    pub loss_acou: Real,
    pub loss_align: Real,
    pub loss: Real,
    pub ms: Real,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    /// Steps abandoned because a normalized-attention row was degenerate.
    pub aborted: Vec<u64>,
}

pub const REPORT_HEADER: &str = "step,stage,loss_acou,loss_align,loss,ms_per_step";

impl TrainReport {
    /// CSV rows; timings are written as 0 when `with_timing` is false so the
    /// file is reproducible.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.records {
            let ms = if with_timing { r.ms } else { 0.0 };
            let _ = writeln!(
                s,
                "{},{},{:?},{:?},{:?},{:.3}",
                r.step, r.stage, r.loss_acou, r.loss_align, r.loss, ms
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path, with_timing: bool) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_csv(with_timing)).map_err(|e| Error::io(path, e))
    }

    pub fn first_loss(&self) -> Option<Real> {
        self.records.first().map(|r| r.loss)
    }

    /// Mean loss over the last `n` steps.
    pub fn tail_loss(&self, n: usize) -> Option<Real> {
        let k = n.min(self.records.len());
        if k == 0 {
            return None;
        }
        let tail = &self.records[self.records.len() - k..];
        Some(tail.iter().map(|r| r.loss).sum::<Real>() / k as Real)
    }

    /// Mean loss over the first `n` steps.
    pub fn head_loss(&self, n: usize) -> Option<Real> {
        let k = n.min(self.records.len());
        if k == 0 {
            return None;
        }
        Some(self.records[..k].iter().map(|r| r.loss).sum::<Real>() / k as Real)
    }
}

/// Passed to the per-step callback.
pub struct Progress<'a> {
    pub record: &'a StepRecord,
    pub model: &'a FpetsModel,
    pub adam: &'a AdamState,
}

/// Optimizer moments under `optim.*` names.
pub fn store_adam(adam: &AdamState, model: &FpetsModel, c: &mut Container) {
    c.insert("optim.step", Tensor::scalar(adam.step as Real));
    for ((_, p), (m, v)) in model.params.iter().zip(adam.m.iter().zip(&adam.v)) {
        c.insert(format!("optim.m.{}", p.name), m.clone());
        c.insert(format!("optim.v.{}", p.name), v.clone());
    }
}

pub fn restore_adam(c: &Container, model: &FpetsModel, config: AdamConfig) -> Result<AdamState> {
    let mut adam = AdamState::new(config, &model.params);
    adam.step = c.require("optim.step")?.item() as u64;
    for (i, (_, p)) in model.params.iter().enumerate() {
        adam.m[i] = c.require(&format!("optim.m.{}", p.name))?.clone();
        adam.v[i] = c.require(&format!("optim.v.{}", p.name))?.clone();
    }
    Ok(adam)
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0xD134_2543_DE82_EF95).wrapping_add(step)
}

/// Loss terms for one batch on `tape`. Returns `(acou, align, total)`.
fn batch_loss(
    model: &FpetsModel,
    cx: &mut Ctx,
    batch: &Batch,
    stage: Stage,
) -> Result<(crate::numcore::Var, Option<crate::numcore::Var>, crate::numcore::Var)> {
    let mut sq_sum = None;
    let mut align_sum = None;
    for i in 0..batch.len() {
        let frames = batch.frame_lens[i];
        let (pred, align) = match stage {
            Stage::One => {
                let out = model.stage1_forward(cx, batch.ids(i), frames)?;
                let a = alignment_loss(cx.tape, out.r, frames, model.config.align_gamma)?;
                (out.features, Some(a))
            }
            Stage::Two => (model.stage2_forward(cx, batch.ids(i), Some(frames))?.features, None),
        };
        let padded = cx.tape.pad_rows(pred, batch.features[i].rows())?;
        let (sq, _) = squared_error(cx.tape, padded, &batch.features[i], Some(&batch.frame_mask[i]))?;
        sq_sum = Some(match sq_sum {
            None => sq,
            Some(acc) => cx.tape.add(acc, sq)?,
        });
        if let Some(a) = align {
            align_sum = Some(match align_sum {
                None => a,
                Some(acc) => cx.tape.add(acc, a)?,
            });
        }
    }
    let sq_sum = sq_sum.expect("non-empty batch");
    let acou = cx.tape.scale(sq_sum, 1.0 / batch.real_elements() as Real);
    match align_sum {
        Some(a) => {
            let align = cx.tape.scale(a, 1.0 / batch.len() as Real);
            let total = total_loss(cx.tape, acou, align, model.config.align_weight)?;
            Ok((acou, Some(align), total))
        }
        None => Ok((acou, None, acou)),
    }
}

fn run(
    corpus: &Corpus,
    model: &mut FpetsModel,
    cfg: &TrainConfig,
    stage: Stage,
    adam: Option<AdamState>,
    on_step: &mut dyn FnMut(&Progress) -> Result<()>,
) -> Result<(TrainReport, AdamState)> {
    if corpus.is_empty() {
        return Err(Error::Domain("cannot train on an empty corpus".into()));
    }
    if corpus.feature_dim() != model.config.feature_dim {
        return Err(Error::Config(format!(
            "corpus feature dim {} vs model feature_dim {}",
            corpus.feature_dim(),
            model.config.feature_dim
        )));
    }
    let mut adam = adam.unwrap_or_else(|| AdamState::new(cfg.adam(), &model.params));
    let per_step = cfg.batch_size.min(corpus.len()) as u64;
    let mut sampler = Sampler::at(corpus.len(), cfg.seed, adam.step * per_step);
    let mut report = TrainReport::default();
    for _ in 0..cfg.steps {
        let step = adam.step + 1;
        let started = Instant::now();
        let picked: Vec<&Utterance> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| &corpus.items[i])
            .collect();
        let batch = Batch::new(&picked)?;
        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape);
        let mut cx = Ctx::new(&mut tape, &binding, true, model.config.dropout, step_seed(cfg.seed, step));
        let (acou, align, total) = match batch_loss(model, &mut cx, &batch, stage) {
            Ok(v) => v,
            Err(e @ Error::DegenerateAttention { .. }) => {
                let ids: Vec<&str> = picked.iter().map(|u| u.id.as_str()).collect();
                log::warn!("step {step} aborted ({e}); batch {ids:?}");
                report.aborted.push(step);
                // The step is consumed without an update; advance the
                // counter so the next step draws fresh dropout masks.
                adam.step += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let loss = tape.value(total).item();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                loss,
            });
        }
        let grads = tape.backward(total)?;
        model.params.zero_grads();
        model.params.accumulate(&binding, &grads);
        adam.step(&mut model.params)?;
        let record = StepRecord {
            step,
            stage: stage.number(),
            loss_acou: tape.value(acou).item(),
            loss_align: align.map_or(0.0, |a| tape.value(a).item()),
            loss,
            ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&Progress {
            record: &record,
            model,
            adam: &adam,
        })?;
        report.records.push(record);
    }
    Ok((report, adam))
}

/// Adam on `acoustic + weight * alignment` through the stage-1 forward.
pub fn train_stage1(
    corpus: &Corpus,
    model: &mut FpetsModel,
    cfg: &TrainConfig,
    adam: Option<AdamState>,
    on_step: &mut dyn FnMut(&Progress) -> Result<()>,
) -> Result<(TrainReport, AdamState)> {
    if model.stage() != Stage::One {
        return Err(Error::Usage("stage-1 training needs a stage-1 model".into()));
    }
    run(corpus, model, cfg, Stage::One, adam, on_step)
}

/// Switches `model` to stage 2 (alignment frozen) unless it already is.
pub fn enter_stage2(model: &mut FpetsModel, cfg: &TrainConfig) -> Result<()> {
    if model.stage() == Stage::One {
        if cfg.reinit_encoder {
            model.reinit_encoder(cfg.seed ^ 0x5EED)?;
        }
        model.set_stage(Stage::Two);
    }
    Ok(())
}

/// Adam on the acoustic loss only, through the stage-2 forward with the
/// target frame count.
pub fn train_stage2(
    corpus: &Corpus,
    model: &mut FpetsModel,
    cfg: &TrainConfig,
    adam: Option<AdamState>,
    on_step: &mut dyn FnMut(&Progress) -> Result<()>,
) -> Result<(TrainReport, AdamState)> {
    enter_stage2(model, cfg)?;
    if !model.alignment_frozen() {
        return Err(Error::Usage("stage-2 training needs a frozen alignment module".into()));
    }
    run(corpus, model, cfg, Stage::Two, adam, on_step)
}

/// Mean squared error of a decoder over `items`, evaluation mode, target
/// frame counts.
pub fn reconstruction_loss(model: &FpetsModel, items: &[Utterance], stage: Stage) -> Result<Real> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for u in items {
        let pred = match stage {
            Stage::One => model.infer_stage1(&u.phonemes, u.num_frames())?.0,
            Stage::Two => model.infer(&u.phonemes, Some(u.num_frames()))?.features,
        };
        sum += pred
            .data()
            .iter()
            .zip(u.features.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<Real>();
        count += pred.len();
    }
    Ok(sum / count.max(1) as Real)
}
