//! Reproducible synthetic scenes with exact instance masks.

mod generator;
mod io;

pub use generator::{
    channel_mean, derive_seed, generate_scene, semantic_labels, Background, GeneratorConfig,
    Instance, Scene, ShapeKind, GENERATOR_VERSION,
};
pub use io::{
    dataset_digest, load_dataset, load_manifest, pack_bits, read_scene, save_dataset, scene_file,
    unpack_bits, write_scene, DatasetManifest, MANIFEST_FILE, SCENE_FORMAT_VERSION,
};
