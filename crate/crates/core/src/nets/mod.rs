//! Segmenter and cycle-translator architectures.

pub mod archive;
mod segmenter;
mod translator;

pub use archive::{parameter_checksum, TensorArchive};
pub use segmenter::{build_segmenter, FrozenSegmenter, Segmenter, SegmenterConfig, BOTTLENECK};
pub use translator::{
    build_translator, to_signed, to_unit, Discriminator, Generator, TranslatorBundle, TranslatorConfig,
};
