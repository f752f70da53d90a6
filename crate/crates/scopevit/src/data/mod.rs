//! Corpus curation, augmentation, and the procedural desk-scale corpus.

pub mod augment;
pub mod images;
pub mod manifest;
pub mod synth;

pub use augment::{augment, hflip, resize_bilinear, AugmentConfig};
pub use manifest::{
    few_shot_select, leakage_filter, sample_fps, synthetic_filter, CorpusManifest, FrameRecord,
    Labels, LeakageReport, Split,
};
pub use synth::{generate_synth_corpus, write_corpus, SynthCorpusConfig, SynthVideo};
