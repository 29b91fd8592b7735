//! Parameterized building blocks: dense layers, gated residual convolutions
//! and the U-shaped UFANS block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numcore::{Binding, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// `uniform(-a, a)` with `a = sqrt(1 / fan_in)`.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let a = (1.0 / fan_in as Real).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..a)).collect())
        .expect("shape product matches")
}

/// Evaluation state threaded through the forward functions.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub binding: &'a Binding,
    pub training: bool,
    pub dropout: Real,
    seed: u64,
    draws: u64,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, binding: &'a Binding, training: bool, dropout: Real, seed: u64) -> Self {
        Ctx {
            tape,
            binding,
            training,
            dropout,
            seed,
            draws: 0,
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.binding.var(id)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        if !self.training || self.dropout == 0.0 {
            return Ok(x);
        }
        self.draws += 1;
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.draws);
        self.tape.dropout(x, self.dropout, true, seed)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Dense {
            w: store.add(format!("{name}.w"), uniform_init(rng, &[din, dout], din))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[dout]))?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (cx.var(self.w), cx.var(self.b));
        cx.tape.dense(x, w, b)
    }
}

/// `x + dropout(proj(tanh(a) * sigmoid(g)))` where `[a | g] = conv(x)`.
/// `filter` is the doubled convolution width; the gated output has
/// `filter / 2` channels.
#[derive(Clone, Copy, Debug)]
pub struct GatedConv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub proj: Dense,
    pub filter: usize,
}

impl GatedConv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        filter: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(GatedConv {
            kernel: store.add(
                format!("{name}.kernel"),
                uniform_init(rng, &[kernel, channels, filter], kernel * channels),
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[filter]))?,
            proj: Dense::new(store, rng, &format!("{name}.proj"), filter / 2, channels)?,
            filter,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (k, b) = (cx.var(self.kernel), cx.var(self.bias));
        let y = cx.tape.conv1d(x, k, b)?;
        let half = self.filter / 2;
        let a = cx.tape.split_cols(y, 0, half)?;
        let g = cx.tape.split_cols(y, half, half)?;
        let h = cx.tape.gated(a, g)?;
        let p = self.proj.forward(cx, h)?;
        let p = cx.dropout(p)?;
        cx.tape.add(x, p)
    }
}

/// Stack of gated convolutions at constant length.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<GatedConv>,
}

impl ConvStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        count: usize,
        channels: usize,
        filter: usize,
        kernel: usize,
    ) -> Result<Self> {
        let layers = (0..count)
            .map(|i| GatedConv::new(store, rng, &format!("{name}.conv{i}"), channels, filter, kernel))
            .collect::<Result<_>>()?;
        Ok(ConvStack { layers })
    }

    pub fn forward(&self, cx: &mut Ctx, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(cx, x)?;
        }
        Ok(x)
    }
}

/// U-shaped block: `depth` levels of gated conv + average pooling, a bottom
/// gated conv, then `depth` levels of upsampling + gated conv + additive skip.
/// Inputs shorter than `2^depth` frames are zero-padded for the pass and
/// cropped afterwards.
#[derive(Clone, Debug)]
pub struct Ufans {
    pub down: Vec<GatedConv>,
    pub bottom: GatedConv,
    pub up: Vec<GatedConv>,
}

impl Ufans {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        depth: usize,
        channels: usize,
        filter: usize,
        kernel: usize,
    ) -> Result<Self> {
        let down = (0..depth)
            .map(|i| GatedConv::new(store, rng, &format!("{name}.down{i}"), channels, filter, kernel))
            .collect::<Result<_>>()?;
        let bottom = GatedConv::new(store, rng, &format!("{name}.bottom"), channels, filter, kernel)?;
        let up = (0..depth)
            .map(|i| GatedConv::new(store, rng, &format!("{name}.up{i}"), channels, filter, kernel))
            .collect::<Result<_>>()?;
        Ok(Ufans { down, bottom, up })
    }

    pub fn depth(&self) -> usize {
        self.down.len()
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let t = cx.tape.value(x).rows();
        let padded = t.max(1 << self.depth());
        let mut h = cx.tape.pad_rows(x, padded)?;
        let mut skips = Vec::with_capacity(self.depth());
        for layer in &self.down {
            h = layer.forward(cx, h)?;
            skips.push(h);
            h = cx.tape.avg_pool(h)?;
        }
        h = self.bottom.forward(cx, h)?;
        // up[i] mirrors down[i]; walk from the deepest level outwards.
        for (layer, skip) in self.up.iter().zip(skips).rev() {
            let len = cx.tape.value(skip).rows();
            h = cx.tape.upsample(h, len)?;
            h = layer.forward(cx, h)?;
            h = cx.tape.add(h, skip)?;
        }
        cx.tape.crop_rows(h, t)
    }
}
