//! File formats, datasets and synthetic data.
//!
//! Every parser takes bytes or text so it can be exercised without a
//! filesystem; the `read_*` functions wrap them with path diagnostics.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod keypoints;
pub mod synth;
pub mod volume;

pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint};
pub use config::RunConfig;
pub use dataset::{read_case, read_dataset, volume_to_transform, write_synth_case, Case};
pub use keypoints::{parse_keypoints, read_keypoints, write_keypoints};
pub use synth::{gen_synthetic_pair, ImageKind, SynthPair, SynthSpec};
pub use volume::{parse_volume, read_volume, write_volume, Volume, VolumeData};
