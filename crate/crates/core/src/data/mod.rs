//! Datasets, label maps, augmentation and checkpoints.

pub mod augment;
pub mod checkpoint;
pub mod io;
mod labels;
mod sample;
pub mod synthetic;

pub use augment::{augment, AugmentPolicy, Transform};
pub use checkpoint::Checkpoint;
pub use io::{load_dataset, save_dataset};
pub use labels::LabelMap;
pub use sample::SamplePair;
pub use synthetic::{make_synthetic_dataset, SceneMode};
