//! Network assemblies: the phoneme encoder, the UFANS block, the alignment
//! width predictor and both decoders, with stage-1 and stage-2 forward passes.

pub mod config;
pub mod layers;
pub mod model;

pub use config::{FreqInit, KeyValues, ModelConfig};
pub use layers::{ConvStack, Ctx, Dense, GatedConv, Ufans};
pub use model::{
    relative_position_feature, FpetsModel, Inference, Stage, Stage1Output, Stage2Output,
    ALIGNMENT_PREFIXES, DECODER_OUTPUT,
};
