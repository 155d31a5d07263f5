//! Synthetic scenes, PNM image I/O, dataset directories and checkpoints.

mod checkpoint;
mod dataset;
mod pnm;
mod scene;

pub use checkpoint::{
    config_hash, hex, load_checkpoint, save_checkpoint, Checkpoint, RngState, MAGIC, VERSION,
};
pub use dataset::{
    image_name, load_dir, mask_name, scene_seed, synth_samples, write_synth_dir, Sample, MANIFEST,
    MANIFEST_HEADER,
};
pub use pnm::{decode_pnm, encode_pnm, read_pnm, write_pnm};
pub use scene::{
    gen_scene, Layout, SceneDescriptor, SceneObject, SceneSpec, ShapeKind, SyntheticScene, FG_RANGE,
};
