//! On-disk formats and the synthetic scene generator.

pub mod checkpoint;
pub mod dataset;
pub mod json;
pub mod scene;
pub mod tensorfile;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use dataset::{generate_dataset, load_dataset, write_dataset, Sample};
pub use json::{read_annotations, read_detections, write_annotations, write_detections};
pub use scene::{generate_scene, SceneConfig};
pub use tensorfile::{read_tensor_file, write_tensor_file};
