//! Scenes, synthetic generation, and on-disk formats.

mod annotations;
mod manifest;
mod pgm;
mod synth;

pub use annotations::{
    class_id, class_name, format_annotations, parse_annotations, parse_annotations_str, Annotation, CLASS_NAMES,
};
pub use manifest::{parity_split, write_dataset, Dataset, Manifest, ManifestEntry, Split};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use synth::{flip_horizontal, flip_vertical, synth_scene, Scene, SynthConfig};
