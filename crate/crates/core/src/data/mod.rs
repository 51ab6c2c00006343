//! Synthetic scenes, driving-log split selection and raster files.

mod raster;
mod split;
mod synth;

pub use raster::{decode_raster, encode_raster, read_raster, write_raster, HEADER_LEN, RASTER_MAGIC, RASTER_VERSION};
pub use split::{make_split, parse_pose_log, write_manifest, FrameRecord, ScenePartition, Split, SplitSpec};
pub use synth::{gen_synthetic, normals_from_depth, random_scene, render, Albedo, Camera, Lighting, Shape, Surface, SyntheticScene};
