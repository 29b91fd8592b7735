use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{ConvStack, Ctx, Dense, Ufans};
use crate::alignment::{
    self, compute_positions, graph, hard_attention, inferred_frame_count, position_deltas,
    PositionCodec, PositionMode,
};
use crate::error::{Error, Result};
use crate::numcore::{Container, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Tape label attached to every decoder output.
pub const DECODER_OUTPUT: &str = "decoder_output";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Alignment learning with the convolutional decoder.
    One,
    /// Frozen alignment, UFANS decoder.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    embed: ParamId,
    input: Dense,
    convs: ConvStack,
    out: Dense,
}

#[derive(Clone, Debug)]
struct Predictor {
    embed: ParamId,
    input: Dense,
    ufans: Ufans,
    head: Dense,
}

#[derive(Clone, Debug)]
struct CnnDecoder {
    convs: ConvStack,
    out: Dense,
}

#[derive(Clone, Debug)]
struct UfansDecoder {
    input: Dense,
    ufans: Ufans,
    out: Dense,
}

/// Parameter name prefixes of the alignment module (predictor and codec).
pub const ALIGNMENT_PREFIXES: [&str; 2] = ["align.", "codec."];

pub struct FpetsModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    stage: Stage,
    encoder: Encoder,
    predictor: Predictor,
    dec1: CnnDecoder,
    dec2: UfansDecoder,
    log_freqs: ParamId,
    decoder_calls: AtomicUsize,
}

impl Clone for FpetsModel {
    fn clone(&self) -> Self {
        FpetsModel {
            config: self.config.clone(),
            params: self.params.clone(),
            stage: self.stage,
            encoder: self.encoder.clone(),
            predictor: self.predictor.clone(),
            dec1: self.dec1.clone(),
            dec2: self.dec2.clone(),
            log_freqs: self.log_freqs,
            decoder_calls: AtomicUsize::new(self.decoder_calls()),
        }
    }
}

/// `softplus^{-1}(y)`
fn inv_softplus(y: Real) -> Real {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Result of a stage-1 forward pass.
pub struct Stage1Output {
    pub features: Var,
    /// Widths, `T_p x 1`.
    pub r: Var,
    /// Normalized attention, `T_a x T_p`.
    pub attention: Var,
}

/// Result of a stage-2 forward pass.
pub struct Stage2Output {
    pub features: Var,
    pub r: Vec<Real>,
    pub hard: Tensor,
}

/// Plain-tensor inference result.
#[derive(Clone, Debug)]
pub struct Inference {
    pub features: Tensor,
    pub r: Vec<Real>,
    pub hard: Tensor,
}

impl FpetsModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut p = ParamStore::new();
        let k = c.kernel_size;
        let encoder = Encoder {
            embed: p.add(
                "encoder.embed",
                super::layers::uniform_init(&mut rng, &[c.vocab_size, c.embed_dim], c.embed_dim),
            )?,
            input: Dense::new(&mut p, &mut rng, "encoder.in", c.embed_dim, c.enc_hidden)?,
            convs: ConvStack::new(&mut p, &mut rng, "encoder", c.enc_layers, c.enc_hidden, c.enc_filter, k)?,
            out: Dense::new(&mut p, &mut rng, "encoder.out", c.enc_hidden, c.enc_hidden)?,
        };
        let predictor = Predictor {
            embed: p.add(
                "align.embed",
                super::layers::uniform_init(&mut rng, &[c.vocab_size, c.embed_dim], c.embed_dim),
            )?,
            input: Dense::new(&mut p, &mut rng, "align.in", c.embed_dim, c.align_hidden)?,
            ufans: Ufans::new(&mut p, &mut rng, "align.ufans", c.align_depth, c.align_hidden, c.align_filter, k)?,
            head: Dense::new(&mut p, &mut rng, "align.head", c.align_hidden, 1)?,
        };
        let bias = inv_softplus(c.init_width - c.r_min);
        p.get_mut(predictor.head.b).value = Tensor::vector(vec![bias]);
        let log_freqs = p.add(
            "codec.log_freqs",
            Tensor::vector(c.codec().freqs().iter().map(|f| f.ln()).collect()),
        )?;
        let dec1 = CnnDecoder {
            convs: ConvStack::new(&mut p, &mut rng, "dec1", c.cnn_dec_layers, c.enc_hidden, c.cnn_dec_filter, k)?,
            out: Dense::new(&mut p, &mut rng, "dec1.out", c.enc_hidden, c.feature_dim)?,
        };
        let dec2 = UfansDecoder {
            input: Dense::new(&mut p, &mut rng, "dec2.in", c.enc_hidden + 1, c.ufans_dec_hidden)?,
            ufans: Ufans::new(&mut p, &mut rng, "dec2.ufans", c.ufans_dec_depth, c.ufans_dec_hidden, c.ufans_dec_filter, k)?,
            out: Dense::new(&mut p, &mut rng, "dec2.out", c.ufans_dec_hidden, c.feature_dim)?,
        };
        let mut model = FpetsModel {
            config,
            params: p,
            stage: Stage::One,
            encoder,
            predictor,
            dec1,
            dec2,
            log_freqs,
            decoder_calls: AtomicUsize::new(0),
        };
        model.set_stage(Stage::One);
        Ok(model)
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Adjusts which parameter groups train: stage 1 trains everything but
    /// the UFANS decoder; stage 2 trains the encoder and UFANS decoder with
    /// the alignment module frozen.
    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
        let p = &mut self.params;
        match stage {
            Stage::One => {
                p.set_frozen("", false);
                p.set_frozen("dec2.", true);
                p.set_frozen("codec.", !self.config.trainable_freqs);
            }
            Stage::Two => {
                p.set_frozen("", false);
                p.set_frozen("dec1.", true);
                for prefix in ALIGNMENT_PREFIXES {
                    p.set_frozen(prefix, true);
                }
            }
        }
    }

    pub fn alignment_frozen(&self) -> bool {
        ALIGNMENT_PREFIXES.iter().all(|prefix| {
            self.params
                .iter()
                .filter(|(_, p)| p.name.starts_with(prefix))
                .all(|(_, p)| p.frozen)
        })
    }

    /// Re-draws the encoder weights (stage-2 cold start).
    pub fn reinit_encoder(&mut self, seed: u64) -> Result<()> {
        let fresh = FpetsModel::new(ModelConfig {
            seed,
            ..self.config.clone()
        })?;
        for (_, p) in fresh.params.iter().filter(|(_, p)| p.name.starts_with("encoder.")) {
            let id = self.params.id(&p.name).expect("same layout");
            self.params.get_mut(id).value = p.value.clone();
        }
        Ok(())
    }

    /// Current position codec, with frequencies read from the parameters.
    pub fn codec(&self) -> PositionCodec {
        let mut codec = self.config.codec();
        let freqs = self.params.get(self.log_freqs).value.data().iter().map(|l| l.exp()).collect();
        codec.set_freqs(freqs).expect("exp of finite log-frequencies is positive");
        codec
    }

    pub fn decoder_calls(&self) -> usize {
        self.decoder_calls.load(Ordering::Relaxed)
    }

    pub fn reset_decoder_calls(&self) {
        self.decoder_calls.store(0, Ordering::Relaxed);
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Domain("empty phoneme sequence".into()));
        }
        if let Some((position, &index)) = ids.iter().enumerate().find(|(_, &i)| i >= self.config.vocab_size) {
            return Err(Error::Index {
                op: "phoneme ids",
                index,
                bound: self.config.vocab_size,
                position,
            });
        }
        Ok(())
    }

    /// `T_p x enc_hidden` hidden states.
    pub fn encoder_forward(&self, cx: &mut Ctx, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        let e = &self.encoder;
        let table = cx.var(e.embed);
        let x = cx.tape.embedding(ids, table)?;
        let x = e.input.forward(cx, x)?;
        let x = e.convs.forward(cx, x)?;
        e.out.forward(cx, x)
    }

    /// Alignment widths `softplus(head(UFANS(embed(ids)))) + r_min`, `T_p x 1`.
    pub fn predict_widths(&self, cx: &mut Ctx, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        let pr = &self.predictor;
        let table = cx.var(pr.embed);
        let x = cx.tape.embedding(ids, table)?;
        let x = pr.input.forward(cx, x)?;
        let x = pr.ufans.forward(cx, x)?;
        let x = pr.head.forward(cx, x)?;
        let x = cx.tape.softplus(x);
        Ok(cx.tape.add_scalar(x, self.config.r_min))
    }

    pub fn stage1_forward(&self, cx: &mut Ctx, ids: &[usize], frames: usize) -> Result<Stage1Output> {
        if frames == 0 {
            return Err(Error::Domain("stage 1 needs at least one frame".into()));
        }
        let h = self.encoder_forward(cx, ids)?;
        let r = self.predict_widths(cx, ids)?;
        let lf = cx.var(self.log_freqs);
        let c = &self.config;
        let attention = graph::soft_attention(cx.tape, r, frames, c.kernel, lf, c.position_mode, c.normalization)?;
        let context = cx.tape.matmul(attention, h)?;
        let x = self.dec1.convs.forward(cx, context)?;
        let features = self.dec1.out.forward(cx, x)?;
        self.note_decoder(cx, features);
        Ok(Stage1Output {
            features,
            r,
            attention,
        })
    }

    fn note_decoder(&self, cx: &mut Ctx, out: Var) {
        cx.tape.mark(out, DECODER_OUTPUT);
        self.decoder_calls.fetch_add(1, Ordering::Relaxed);
    }

    /// Phoneme positions used for hard attention at `frames` frames.
    pub fn positions_for(&self, r: &[Real], frames: usize) -> Result<Vec<Real>> {
        match self.config.position_mode {
            PositionMode::Learned => compute_positions(r),
            PositionMode::Fixed => {
                let step = frames as Real / r.len() as Real;
                Ok((0..r.len()).map(|i| i as Real * step).collect())
            }
        }
    }

    /// One-hot attention `T_a x T_p` for widths `r`.
    pub fn hard_alignment(&self, r: &[Real], frames: usize) -> Result<Tensor> {
        let s = self.positions_for(r, frames)?;
        Ok(hard_attention(&alignment::score_matrix(&s, frames, &self.codec())?))
    }

    /// `T_a x 1` feature: each frame carries `s_i - s_{i-1}` of the phoneme
    /// it attends to.
    pub fn relative_position_feature(&self, r: &[Real], hard: &Tensor) -> Result<Tensor> {
        let s = self.positions_for(r, hard.rows())?;
        relative_position_feature(&s, hard)
    }

    /// Stage-2 pass: widths from the (frozen) predictor, hard attention,
    /// `[A_tilde H | relative position]` into the UFANS decoder. The frame
    /// count is `round(sum r)` unless overridden.
    pub fn stage2_forward(&self, cx: &mut Ctx, ids: &[usize], frames: Option<usize>) -> Result<Stage2Output> {
        let h = self.encoder_forward(cx, ids)?;
        let r = {
            // Widths never carry gradient in stage 2.
            let training = std::mem::replace(&mut cx.training, false);
            let r = self.predict_widths(cx, ids);
            cx.training = training;
            let r = r?;
            cx.tape.value(r).data().to_vec()
        };
        let frames = frames.unwrap_or_else(|| inferred_frame_count(&r));
        if frames == 0 {
            return Err(Error::Domain("stage 2 needs at least one frame".into()));
        }
        let hard = self.hard_alignment(&r, frames)?;
        let rel = self.relative_position_feature(&r, &hard)?;
        let a = cx.tape.constant(hard.clone());
        let ctx = cx.tape.matmul(a, h)?;
        let rel = cx.tape.constant(rel);
        let x = cx.tape.concat_cols(ctx, rel)?;
        let features = self.stage2_decode(cx, x)?;
        Ok(Stage2Output { features, r, hard })
    }

    /// The stage-2 decoder alone on a `T x (enc_hidden + 1)` input.
    pub fn stage2_decode(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let d = &self.dec2;
        let x = d.input.forward(cx, x)?;
        let x = d.ufans.forward(cx, x)?;
        let features = d.out.forward(cx, x)?;
        self.note_decoder(cx, features);
        Ok(features)
    }

    /// Widths in evaluation mode.
    pub fn predict_r(&self, ids: &[usize]) -> Result<Vec<Real>> {
        let mut tape = Tape::new();
        let binding = self.params.bind_frozen(&mut tape);
        let mut cx = Ctx::new(&mut tape, &binding, false, 0.0, 0);
        let r = self.predict_widths(&mut cx, ids)?;
        Ok(tape.value(r).data().to_vec())
    }

    /// Full stage-2 synthesis of normalized features in evaluation mode.
    pub fn infer(&self, ids: &[usize], frames: Option<usize>) -> Result<Inference> {
        let mut tape = Tape::new();
        let binding = self.params.bind_frozen(&mut tape);
        let mut cx = Ctx::new(&mut tape, &binding, false, 0.0, 0);
        let out = self.stage2_forward(&mut cx, ids, frames)?;
        Ok(Inference {
            features: tape.value(out.features).clone(),
            r: out.r,
            hard: out.hard,
        })
    }

    /// Stage-1 features in evaluation mode for a known frame count.
    pub fn infer_stage1(&self, ids: &[usize], frames: usize) -> Result<(Tensor, Vec<Real>, Tensor)> {
        let mut tape = Tape::new();
        let binding = self.params.bind_frozen(&mut tape);
        let mut cx = Ctx::new(&mut tape, &binding, false, 0.0, 0);
        let out = self.stage1_forward(&mut cx, ids, frames)?;
        Ok((
            tape.value(out.features).clone(),
            tape.value(out.r).data().to_vec(),
            tape.value(out.attention).clone(),
        ))
    }

    /// Parameters plus `manifest.config`, `manifest.config_hash` and
    /// `manifest.stage`.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert_text("manifest.config", &self.config.to_kv());
        c.insert_text("manifest.config_hash", &self.config.hash());
        c.insert_text("manifest.stage", &self.stage.number().to_string());
        for (_, p) in self.params.iter() {
            c.insert(p.name.clone(), p.value.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = ModelConfig::from_kv(&c.text("manifest.config")?)?;
        let stored = c.text("manifest.config_hash")?;
        if stored != config.hash() {
            return Err(Error::Checkpoint(format!(
                "config hash {stored} does not match config ({})",
                config.hash()
            )));
        }
        let stage = match c.text("manifest.stage")?.as_str() {
            "1" => Stage::One,
            "2" => Stage::Two,
            other => return Err(Error::Checkpoint(format!("unknown stage {other:?}"))),
        };
        let mut model = FpetsModel::new(config)?;
        let names: Vec<String> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let t = c.require(&name)?;
            let id = model.params.id(&name).expect("listed above");
            let slot = &mut model.params.get_mut(id).value;
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        model.set_stage(stage);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Broadcast of `d_i = s_i - s_{i-1}` (with `d_0 = s_0`) through a one-hot
/// attention matrix.
pub fn relative_position_feature(s: &[Real], hard: &Tensor) -> Result<Tensor> {
    if hard.cols() != s.len() {
        return Err(Error::shape("relative position", hard.shape(), &[hard.rows(), s.len()]));
    }
    let d = position_deltas(s);
    let data = (0..hard.rows())
        .map(|j| hard.row(j).iter().zip(&d).map(|(a, b)| a * b).sum())
        .collect();
    Ok(Tensor::matrix(hard.rows(), 1, data))
}
