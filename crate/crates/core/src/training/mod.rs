//! Losses, the two-stage training procedure, corpora (synthetic and
//! manifest-based) and the duration-recovery evaluation.

pub mod batch;
pub mod corpus;
pub mod eval;
pub mod losses;
pub mod train;

pub use batch::{Batch, Sampler};
pub use corpus::{
    classify_frames, generate_synthetic_corpus, load_corpus, load_manifest, phoneme_template,
    save_corpus, Corpus, CorpusMetadata, SyntheticConfig, Utterance, Vocab,
};
pub use eval::{
    evaluate_alignment, ground_truth_inverse, ground_truth_literal, AlignmentReport,
    ItemAlignment,
};
pub use losses::{acoustic_loss, alignment_loss, alignment_loss_value, total_loss};
pub use train::{
    enter_stage2, reconstruction_loss, restore_adam, store_adam, train_stage1, train_stage2,
    Progress, StepRecord, TrainConfig, TrainReport,
};
