//! Training and evaluation data: the synthetic ray-cast scene generator,
//! JSON-lines manifests of frame triplets, and PNG depth/image IO.

pub mod dataset;
pub mod io;
pub mod synthetic;

pub use dataset::{ManifestEntry, SampleTriplet, SequenceDataset};
pub use io::{encode_depth_png, load_depth_png, load_labels_png, load_rgb_png, save_depth_png, save_labels_png, save_rgb_png, write_atomic};
pub use synthetic::{generate_synthetic_sequence, write_synthetic_dataset, BoxSpec, PlaneSpec, SceneSpec, SyntheticFrame, SyntheticSequence};
