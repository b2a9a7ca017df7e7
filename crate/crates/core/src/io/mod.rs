//! Binary volume and checkpoint formats. All integers are little-endian.

pub mod checkpoint;
pub mod volume;

pub use checkpoint::{config_digest, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use volume::{DType, VolumeData, VolumeFile, VOLUME_MAGIC, VOLUME_VERSION};
