//! JSON formats: keypoint sequences, poses, animation clips, cameras, face
//! targets and pose-update requests.

use std::collections::BTreeMap;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{quat_from_wxyz, quat_wxyz, Quat, Vec3};
use crate::types::{Camera, Keypoint, KeypointSequence, PoseParams, SkinnedMesh};

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

fn from_json<T: DeserializeOwned>(bytes: &[u8], what: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("{what}: {e}")))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointFile {
    layout: Vec<String>,
    /// Per frame, per joint `[x, y, confidence]`.
    frames: Vec<Vec<[f64; 3]>>,
    /// `[frame, joint]` pairs produced by gap filling.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    synthetic: Vec<[usize; 2]>,
}

pub fn encode_keypoints(seq: &KeypointSequence) -> Result<Vec<u8>> {
    let mut synthetic = Vec::new();
    let frames = seq
        .frames
        .iter()
        .enumerate()
        .map(|(f, frame)| {
            frame
                .iter()
                .enumerate()
                .map(|(j, k)| {
                    if k.synthetic {
                        synthetic.push([f, j]);
                    }
                    [k.x, k.y, k.confidence]
                })
                .collect()
        })
        .collect();
    to_json(&KeypointFile {
        layout: seq.layout.clone(),
        frames,
        synthetic,
    })
}

/// Parses and validates a keypoint sequence; violations cite frame and joint.
pub fn decode_keypoints(bytes: &[u8]) -> Result<KeypointSequence> {
    let file: KeypointFile = from_json(bytes, "keypoint file")?;
    let mut seq = KeypointSequence {
        layout: file.layout,
        frames: file
            .frames
            .into_iter()
            .map(|f| f.into_iter().map(|[x, y, c]| Keypoint::new(x, y, c)).collect())
            .collect(),
    };
    seq.validate()?;
    for [f, j] in file.synthetic {
        let kp = seq
            .frames
            .get_mut(f)
            .and_then(|frame| frame.get_mut(j))
            .ok_or_else(|| Error::Invalid(format!("synthetic marker for frame {f}, joint {j} is out of range")))?;
        kp.synthetic = true;
    }
    Ok(seq)
}

fn check_finite_pose(p: &PoseParams, what: &str) -> Result<()> {
    if p.to_vector().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{what}: non-finite pose parameter")))
    }
}

pub fn encode_pose(pose: &PoseParams) -> Result<Vec<u8>> {
    to_json(pose)
}

pub fn decode_pose(bytes: &[u8]) -> Result<PoseParams> {
    let pose: PoseParams = from_json(bytes, "pose file")?;
    check_finite_pose(&pose, "pose file")?;
    Ok(pose)
}

/// A named pose sequence played back at `fps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnimationClip {
    pub name: String,
    pub fps: f64,
    pub poses: Vec<PoseParams>,
}

pub fn encode_animation(clip: &AnimationClip) -> Result<Vec<u8>> {
    to_json(clip)
}

pub fn decode_animation(bytes: &[u8]) -> Result<AnimationClip> {
    let clip: AnimationClip = from_json(bytes, "animation file")?;
    if !(clip.fps.is_finite() && clip.fps > 0.0) {
        return Err(Error::Invalid(format!("animation '{}': fps {} must be positive", clip.name, clip.fps)));
    }
    for (i, p) in clip.poses.iter().enumerate() {
        check_finite_pose(p, &format!("animation '{}', pose {i}", clip.name))?;
    }
    Ok(clip)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// `[w, x, y, z]`
    rotation: [f64; 4],
    translation: [f64; 3],
    width: u32,
    height: u32,
}

/// Camera files hold a JSON array: one camera for all frames or one per
/// frame.
pub fn encode_cameras(cams: &[Camera]) -> Result<Vec<u8>> {
    let recs: Vec<CameraRecord> = cams
        .iter()
        .map(|c| CameraRecord {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: quat_wxyz(c.rotation.quaternion()),
            translation: [c.translation.x, c.translation.y, c.translation.z],
            width: c.width,
            height: c.height,
        })
        .collect();
    to_json(&recs)
}

pub fn decode_cameras(bytes: &[u8]) -> Result<Vec<Camera>> {
    let recs: Vec<CameraRecord> = from_json(bytes, "camera file")?;
    if recs.is_empty() {
        return Err(Error::Invalid("camera file lists no cameras".into()));
    }
    recs.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let q = quat_from_wxyz(r.rotation);
            if !((q.norm() - 1.0).abs() <= 1e-6) {
                return Err(Error::Invalid(format!("camera {i}: rotation is not a unit quaternion")));
            }
            let cam = Camera {
                fx: r.fx,
                fy: r.fy,
                cx: r.cx,
                cy: r.cy,
                rotation: Quat::new_unchecked(q),
                translation: Vec3::from(r.translation),
                width: r.width,
                height: r.height,
            };
            cam.validate().map_err(|e| Error::Invalid(format!("camera {i}: {e}")))?;
            Ok(cam)
        })
        .collect()
}

/// Per-frame target positions of the face patch vertices; `null` marks a
/// frame without a target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceTargets {
    pub vertex_count: usize,
    pub frames: Vec<Option<Vec<[f64; 3]>>>,
}

impl FaceTargets {
    pub fn to_vec3(&self) -> Vec<Option<Vec<Vec3>>> {
        self.frames
            .iter()
            .map(|f| f.as_ref().map(|v| v.iter().map(|p| Vec3::from(*p)).collect()))
            .collect()
    }
}

pub fn encode_face_targets(t: &FaceTargets) -> Result<Vec<u8>> {
    to_json(t)
}

pub fn decode_face_targets(bytes: &[u8]) -> Result<FaceTargets> {
    let t: FaceTargets = from_json(bytes, "face target file")?;
    for (f, frame) in t.frames.iter().enumerate() {
        if let Some(v) = frame {
            if v.len() != t.vertex_count {
                return Err(Error::Invalid(format!(
                    "face target frame {f}: {} vertices, expected {}",
                    v.len(),
                    t.vertex_count
                )));
            }
            if v.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("face target frame {f}: non-finite position")));
            }
        }
    }
    Ok(t)
}

/// Body of a pose update: axis-angle rotations by joint name on top of
/// the canonical pose. Unlisted joints stay at zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRequest {
    #[serde(default)]
    pub joint_rotations: BTreeMap<String, [f64; 3]>,
    #[serde(default)]
    pub root_translation: Option<[f64; 3]>,
    /// Echoed back so that clients can drop stale responses.
    #[serde(default)]
    pub seq: Option<u64>,
}

impl PoseRequest {
    pub fn to_pose(&self, mesh: &SkinnedMesh) -> Result<PoseParams> {
        let mut pose = PoseParams::zeros(mesh);
        for (name, r) in &self.joint_rotations {
            let j = mesh
                .joint_index(name)
                .ok_or_else(|| Error::Invalid(format!("unknown joint '{name}'")))?;
            pose.joint_rotations[j] = Vec3::from(*r);
        }
        if let Some(t) = self.root_translation {
            pose.root_translation = Vec3::from(t);
        }
        check_finite_pose(&pose, "pose request")?;
        Ok(pose)
    }
}
