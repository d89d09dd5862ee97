//! File formats. Every `encode_*` output decodes to the same value, and
//! re-encoding a decoded file reproduces it byte for byte.

mod assets;
mod bundle;
mod checkpoint;
mod container;
mod images;
mod records;

use std::path::Path;

pub use assets::{
    decode_frames, decode_mesh, decode_splats, encode_frames, encode_mesh, encode_splats, ArrayDesc, MeshMeta,
    SplatMeta, FORMAT_VERSION, FRAMES_HEADER_LEN, FRAMES_MAGIC, FRAME_RECORD_FLOATS, MESH_MAGIC, SPLAT_MAGIC,
};
pub use bundle::{
    export_bundle, frames_for_poses, frames_for_request, is_plain_relative, load_bundle, Bundle, ClipEntry,
    Manifest, BUNDLE_FORMAT, CANONICAL_FRAMES_FILE, MANIFEST_FILE, MESH_FILE, SPLAT_FILE,
};
pub use checkpoint::{load_checkpoint, store_checkpoint, FileObserver};
pub use container::HEADER_LEN;
pub use images::{decode_mask, decode_png, decode_raw, encode_png, encode_raw};
pub use records::{
    decode_animation, decode_cameras, decode_face_targets, decode_keypoints, decode_pose, encode_animation,
    encode_cameras, encode_face_targets, encode_keypoints, encode_pose, to_json, AnimationClip, FaceTargets,
    PoseRequest,
};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::types::{Camera, KeypointSequence, PoseParams, SkinnedMesh, Splat};

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn load_mesh(path: &Path) -> Result<SkinnedMesh> {
    decode_mesh(&read(path)?)
}

pub fn store_mesh(path: &Path, mesh: &SkinnedMesh) -> Result<()> {
    write(path, &encode_mesh(mesh)?)
}

pub fn load_splats(path: &Path, num_triangles: Option<usize>) -> Result<Vec<Splat>> {
    decode_splats(&read(path)?, num_triangles)
}

pub fn store_splats(path: &Path, splats: &[Splat]) -> Result<()> {
    write(path, &encode_splats(splats)?)
}

pub fn load_keypoints(path: &Path) -> Result<KeypointSequence> {
    decode_keypoints(&read(path)?)
}

pub fn store_keypoints(path: &Path, seq: &KeypointSequence) -> Result<()> {
    write(path, &encode_keypoints(seq)?)
}

pub fn load_pose(path: &Path) -> Result<PoseParams> {
    decode_pose(&read(path)?)
}

pub fn store_pose(path: &Path, pose: &PoseParams) -> Result<()> {
    write(path, &encode_pose(pose)?)
}

pub fn load_animation(path: &Path) -> Result<AnimationClip> {
    decode_animation(&read(path)?)
}

pub fn store_animation(path: &Path, clip: &AnimationClip) -> Result<()> {
    write(path, &encode_animation(clip)?)
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    decode_cameras(&read(path)?)
}

pub fn store_cameras(path: &Path, cams: &[Camera]) -> Result<()> {
    write(path, &encode_cameras(cams)?)
}

pub fn load_face_targets(path: &Path) -> Result<FaceTargets> {
    decode_face_targets(&read(path)?)
}

pub fn store_face_targets(path: &Path, t: &FaceTargets) -> Result<()> {
    write(path, &encode_face_targets(t)?)
}

/// PNG or, for a `.raw`/`.f32` extension, raw f32 of the given size.
pub fn load_image(path: &Path, raw_size: Option<(usize, usize)>) -> Result<Image> {
    let bytes = read(path)?;
    if is_raw(path) {
        let (w, h) = raw_size.ok_or_else(|| {
            Error::Config(format!("{}: raw images need an explicit width and height", path.display()))
        })?;
        decode_raw(&bytes, w, h)
    } else {
        decode_png(&bytes)
    }
}

pub fn store_image(path: &Path, img: &Image) -> Result<()> {
    let bytes = if is_raw(path) { encode_raw(img) } else { encode_png(img)? };
    write(path, &bytes)
}

fn is_raw(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("raw" | "f32"))
}

pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_mask(&read(path)?)
}
