//! Segmenter and discriminator construction, plus checkpoint archives.

mod checkpoint;
mod discriminator;
mod segmenter;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use discriminator::{
    build_discriminator, discriminator_inputs, Discriminator, DiscriminatorConfig,
    DiscriminatorSet, Head, HeadInputs,
};
pub use segmenter::{build_segmenter, Segmenter, SegmenterConfig, SPATIAL_MULTIPLE, STAGE_LAYOUT};
