//! Ingress and egress: MetaImage volumes, coordinate transforms, intensity
//! normalization, patch tiling, annotation/candidate CSVs, and the synthetic
//! phantom generator.

mod csv;
mod mhd;
mod phantom;
mod volume;

pub use csv::{
    implausible_diameters, read_annotations_csv, read_candidates_csv, write_annotations_csv,
    write_candidates_csv, ANNOTATIONS_HEADER, CANDIDATES_HEADER,
};
pub use mhd::{emit_mhd, load_volume, parse_mhd, volume_to_raw_f32, ElementType, VolumeMeta};
pub use phantom::{generate_phantom, PhantomConfig, BACKGROUND_MEAN};
pub use volume::{
    extract_patch, normalize_hu, tile_patches, Volume, DEFAULT_HU_WINDOW,
};
