//! Viewer bundle: manifest, splat and mesh assets, and precomputed polygon
//! frames for each animation clip.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::assets::{decode_mesh, decode_splats, encode_frames, encode_mesh, encode_splats, FORMAT_VERSION};
use super::records::{encode_animation, to_json, AnimationClip, PoseRequest};
use crate::error::{Error, Result};
use crate::trainer::AvatarRenderer;
use crate::types::{PoseParams, SkinnedMesh, Splat};
use crate::validate::validate_asset;

pub const BUNDLE_FORMAT: &str = "meshsplat-viewer-bundle";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLAT_FILE: &str = "avatar.msplat";
pub const MESH_FILE: &str = "avatar.mmesh";
pub const CANONICAL_FRAMES_FILE: &str = "canonical.frames";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub name: String,
    pub fps: f64,
    pub poses: usize,
    /// Polygon frames for every pose of the clip.
    pub frames: String,
    /// The clip's pose parameters.
    pub animation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub splats: String,
    pub mesh: String,
    pub splat_count: usize,
    pub triangle_count: usize,
    pub joint_names: Vec<String>,
    pub joint_parents: Vec<u32>,
    pub canonical_frames: String,
    pub clips: Vec<ClipEntry>,
}

impl Manifest {
    /// Every file the bundle references, relative to its directory.
    pub fn files(&self) -> Vec<&str> {
        let mut f = vec![self.splats.as_str(), self.mesh.as_str(), self.canonical_frames.as_str()];
        for c in &self.clips {
            f.push(&c.frames);
            f.push(&c.animation);
        }
        f
    }
}

fn check_clip_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "clip name '{name}' must be nonempty ASCII letters, digits, '_' or '-'"
        )))
    }
}

/// Polygon frames for each pose, encoded as one frames file.
pub fn frames_for_poses(mesh: &SkinnedMesh, poses: &[PoseParams]) -> Result<Vec<u8>> {
    let renderer = AvatarRenderer::new(mesh)?;
    let frames = poses
        .iter()
        .map(|p| renderer.pose(p).map(|(_, f)| f))
        .collect::<Result<Vec<_>>>()?;
    encode_frames(&frames.iter().collect::<Vec<_>>())
}

/// Frames file for a single pose-update request.
pub fn frames_for_request(mesh: &SkinnedMesh, req: &PoseRequest) -> Result<Vec<u8>> {
    frames_for_poses(mesh, &[req.to_pose(mesh)?])
}

/// Writes a bundle into `dir`, creating it if needed, and returns its
/// manifest.
pub fn export_bundle(dir: &Path, mesh: &SkinnedMesh, splats: &[Splat], clips: &[AnimationClip]) -> Result<Manifest> {
    let report = validate_asset(mesh, splats);
    if !report.passed() {
        return Err(Error::Invalid(format!("asset fails validation: {report}")));
    }
    for (i, c) in clips.iter().enumerate() {
        check_clip_name(&c.name)?;
        if clips[..i].iter().any(|o| o.name == c.name) {
            return Err(Error::Invalid(format!("duplicate clip name '{}'", c.name)));
        }
        for p in &c.poses {
            p.check_dimensions(mesh)?;
        }
    }
    fs::create_dir_all(dir.join("clips"))?;
    fs::write(dir.join(SPLAT_FILE), encode_splats(splats)?)?;
    fs::write(dir.join(MESH_FILE), encode_mesh(mesh)?)?;
    fs::write(
        dir.join(CANONICAL_FRAMES_FILE),
        frames_for_poses(mesh, &[PoseParams::zeros(mesh)])?,
    )?;
    let mut entries = Vec::new();
    for c in clips {
        let frames = format!("clips/{}.frames", c.name);
        let animation = format!("clips/{}.json", c.name);
        fs::write(dir.join(&frames), frames_for_poses(mesh, &c.poses)?)?;
        fs::write(dir.join(&animation), encode_animation(c)?)?;
        entries.push(ClipEntry {
            name: c.name.clone(),
            fps: c.fps,
            poses: c.poses.len(),
            frames,
            animation,
        });
    }
    let manifest = Manifest {
        format: BUNDLE_FORMAT.into(),
        version: FORMAT_VERSION,
        splats: SPLAT_FILE.into(),
        mesh: MESH_FILE.into(),
        splat_count: splats.len(),
        triangle_count: mesh.num_triangles(),
        joint_names: mesh.joint_names.clone(),
        joint_parents: mesh.joint_parents.clone(),
        canonical_frames: CANONICAL_FRAMES_FILE.into(),
        clips: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), to_json(&manifest)?)?;
    Ok(manifest)
}

/// A loaded bundle; clip files are checked for presence only.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub mesh: SkinnedMesh,
    pub splats: Vec<Splat>,
}

fn read_named(dir: &Path, file: &str) -> Result<Vec<u8>> {
    fs::read(dir.join(file)).map_err(|e| Error::Format(format!("bundle file '{file}': {e}")))
}

pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let manifest: Manifest = serde_json::from_slice(&read_named(dir, MANIFEST_FILE)?)
        .map_err(|e| Error::Format(format!("{MANIFEST_FILE}: {e}")))?;
    if manifest.format != BUNDLE_FORMAT || manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "bundle is '{}' version {}, expected '{BUNDLE_FORMAT}' version {FORMAT_VERSION}",
            manifest.format, manifest.version
        )));
    }
    for f in manifest.files() {
        if !is_plain_relative(f) {
            return Err(Error::Format(format!("bundle file '{f}' escapes the bundle directory")));
        }
        if !dir.join(f).is_file() {
            return Err(Error::Format(format!("bundle file '{f}' is missing")));
        }
    }
    let mesh = decode_mesh(&read_named(dir, &manifest.mesh)?)?;
    let splats = decode_splats(&read_named(dir, &manifest.splats)?, Some(mesh.num_triangles()))?;
    if splats.len() != manifest.splat_count || mesh.num_triangles() != manifest.triangle_count {
        return Err(Error::Format("manifest counts do not match the assets".into()));
    }
    Ok(Bundle {
        dir: dir.to_path_buf(),
        manifest,
        mesh,
        splats,
    })
}

/// True for `a/b.c` style paths without `..`, roots or empty components.
pub fn is_plain_relative(path: &str) -> bool {
    !path.is_empty()
        && !path.starts_with('/')
        && path
            .split('/')
            .all(|c| !c.is_empty() && c != "." && c != ".." && !c.contains('\\'))
}
