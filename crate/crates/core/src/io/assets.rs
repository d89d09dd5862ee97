//! Splat asset, mesh asset and polygon-frame files.

use serde::{Deserialize, Serialize};

use super::container::{Reader, Writer};
use crate::body::PolygonFrames;
use crate::error::{Error, Result};
use crate::math::{quat_from_wxyz, quat_wxyz, Quat, Vec3};
use crate::types::{Blendshapes, MeshAnnotations, PolygonFrame, SkinnedMesh, Splat};
use crate::validate::{validate_mesh, validate_splats, ValidationReport};

pub const SPLAT_MAGIC: &[u8; 8] = b"MSHSPLAT";
pub const MESH_MAGIC: &[u8; 8] = b"MSHMESH\0";
pub const FRAMES_MAGIC: &[u8; 8] = b"MSHFRAME";
pub const FORMAT_VERSION: u32 = 1;
pub const FRAMES_HEADER_LEN: usize = 24;
/// Scale, rotation (w, x, y, z) and translation, as f32.
pub const FRAME_RECORD_FLOATS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayDesc {
    pub name: String,
    #[serde(rename = "type")]
    pub dtype: String,
    pub components: usize,
}

impl ArrayDesc {
    fn new(name: &str, dtype: &str, components: usize) -> Self {
        Self {
            name: name.into(),
            dtype: dtype.into(),
            components,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplatMeta {
    pub count: usize,
    pub rotation: String,
    pub scale: String,
    pub arrays: Vec<ArrayDesc>,
}

impl SplatMeta {
    pub fn new(count: usize) -> Self {
        Self {
            count,
            rotation: "wxyz".into(),
            scale: "log".into(),
            arrays: vec![
                ArrayDesc::new("mu", "f32", 3),
                ArrayDesc::new("rot", "f32", 4),
                ArrayDesc::new("log_scale", "f32", 3),
                ArrayDesc::new("color", "f32", 3),
                ArrayDesc::new("opacity", "f32", 1),
                ArrayDesc::new("polygon_id", "u32", 1),
            ],
        }
    }
}

fn reject(report: ValidationReport, what: &str) -> Result<()> {
    if report.passed() {
        return Ok(());
    }
    let list: Vec<String> = report.issues.iter().map(|i| i.to_string()).collect();
    Err(Error::Invalid(format!("{what}: {}", list.join("; "))))
}

/// Encodes splats as f32 arrays; values are rounded to single precision.
pub fn encode_splats(splats: &[Splat]) -> Result<Vec<u8>> {
    let n = splats.len();
    let mut w = Writer::with_header(SPLAT_MAGIC, FORMAT_VERSION, &SplatMeta::new(n))?;
    w.bytes.reserve(n * 15 * 4);
    for s in splats {
        s.mu_local.iter().for_each(|v| w.f32(*v));
    }
    for s in splats {
        quat_wxyz(s.rot_local.quaternion()).iter().for_each(|v| w.f32(*v));
    }
    for s in splats {
        s.log_scale.iter().for_each(|v| w.f32(*v));
    }
    for s in splats {
        s.color.iter().for_each(|v| w.f32(*v));
    }
    for s in splats {
        w.f32(s.opacity);
    }
    for s in splats {
        w.u32(s.polygon_id);
    }
    Ok(w.bytes)
}

/// Decodes and validates a splat asset. Polygon ids are range-checked
/// only when `num_triangles` is given.
pub fn decode_splats(bytes: &[u8], num_triangles: Option<usize>) -> Result<Vec<Splat>> {
    let mut r = Reader::new(bytes, "splat file");
    let meta: SplatMeta = r.header(SPLAT_MAGIC, FORMAT_VERSION)?;
    let n = meta.count;
    if meta != SplatMeta::new(n) {
        return Err(Error::Format("splat file declares an unsupported array layout".into()));
    }
    let mu = r.f32s(3 * n, "mu")?;
    let rot = r.f32s(4 * n, "rot")?;
    let ls = r.f32s(3 * n, "log_scale")?;
    let color = r.f32s(3 * n, "color")?;
    let opacity = r.f32s(n, "opacity")?;
    let ids = r.u32s(n, "polygon_id")?;
    r.finish()?;
    let v3 = |a: &[f64], i: usize| Vec3::new(a[3 * i], a[3 * i + 1], a[3 * i + 2]);
    let splats: Vec<Splat> = (0..n)
        .map(|i| Splat {
            mu_local: v3(&mu, i),
            // kept as stored so that a rewrite is byte-identical
            rot_local: Quat::new_unchecked(quat_from_wxyz([
                rot[4 * i],
                rot[4 * i + 1],
                rot[4 * i + 2],
                rot[4 * i + 3],
            ])),
            log_scale: v3(&ls, i),
            color: v3(&color, i),
            opacity: opacity[i],
            polygon_id: ids[i],
        })
        .collect();
    reject(validate_splats(&splats, num_triangles), "invalid splat file")?;
    Ok(splats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshMeta {
    pub vertices: usize,
    pub triangles: usize,
    pub joint_names: Vec<String>,
    pub joint_parents: Vec<u32>,
    pub shape_components: usize,
    pub expression_components: usize,
    pub annotations: MeshAnnotations,
    pub arrays: Vec<ArrayDesc>,
}

fn mesh_arrays(joints: usize, shape: usize, expression: usize) -> Vec<ArrayDesc> {
    let mut a = vec![
        ArrayDesc::new("vertices", "f64", 3),
        ArrayDesc::new("triangles", "u32", 3),
        ArrayDesc::new("joint_rest_positions", "f64", 3),
        ArrayDesc::new("skin_weights", "f64", joints),
    ];
    if shape > 0 {
        a.push(ArrayDesc::new("shape_basis", "f64", 3 * shape));
    }
    if expression > 0 {
        a.push(ArrayDesc::new("expression_basis", "f64", 3 * expression));
    }
    a
}

/// Encodes a mesh. Geometry is kept in f64 so that skin-weight rows still
/// sum to one within tolerance after a round trip.
pub fn encode_mesh(mesh: &SkinnedMesh) -> Result<Vec<u8>> {
    let shape = mesh.num_shape();
    let expression = mesh.num_expression();
    let meta = MeshMeta {
        vertices: mesh.num_vertices(),
        triangles: mesh.num_triangles(),
        joint_names: mesh.joint_names.clone(),
        joint_parents: mesh.joint_parents.clone(),
        shape_components: shape,
        expression_components: expression,
        annotations: mesh.annotations.clone(),
        arrays: mesh_arrays(mesh.num_joints(), shape, expression),
    };
    let mut w = Writer::with_header(MESH_MAGIC, FORMAT_VERSION, &meta)?;
    mesh.vertices.iter().flat_map(|v| v.iter()).for_each(|v| w.f64(*v));
    mesh.triangles.iter().flatten().for_each(|i| w.u32(*i));
    mesh.joint_rest_positions.iter().flat_map(|v| v.iter()).for_each(|v| w.f64(*v));
    mesh.skin_weights.iter().for_each(|v| w.f64(*v));
    for basis in [&mesh.shape_basis, &mesh.expression_basis].into_iter().flatten() {
        basis.data.iter().for_each(|v| w.f64(*v));
    }
    Ok(w.bytes)
}

pub fn decode_mesh(bytes: &[u8]) -> Result<SkinnedMesh> {
    let mut r = Reader::new(bytes, "mesh file");
    let meta: MeshMeta = r.header(MESH_MAGIC, FORMAT_VERSION)?;
    let j = meta.joint_names.len();
    if meta.joint_parents.len() != j {
        return Err(Error::Format(format!(
            "mesh file lists {j} joint names and {} parents",
            meta.joint_parents.len()
        )));
    }
    if meta.arrays != mesh_arrays(j, meta.shape_components, meta.expression_components) {
        return Err(Error::Format("mesh file declares an unsupported array layout".into()));
    }
    let (n, m) = (meta.vertices, meta.triangles);
    let to_vec3 = |a: Vec<f64>| -> Vec<Vec3> {
        a.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
    };
    let vertices = to_vec3(r.f64s(3 * n, "vertices")?);
    let triangles = r
        .u32s(3 * m, "triangles")?
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let joint_rest_positions = to_vec3(r.f64s(3 * j, "joint_rest_positions")?);
    let skin_weights = r.f64s(n * j, "skin_weights")?;
    let mut basis = |count: usize, name: &str| -> Result<Option<Blendshapes>> {
        if count == 0 {
            return Ok(None);
        }
        Ok(Some(Blendshapes {
            count,
            data: r.f64s(3 * n * count, name)?,
        }))
    };
    let shape_basis = basis(meta.shape_components, "shape_basis")?;
    let expression_basis = basis(meta.expression_components, "expression_basis")?;
    r.finish()?;
    let mesh = SkinnedMesh {
        vertices,
        triangles,
        joint_names: meta.joint_names,
        joint_parents: meta.joint_parents,
        joint_rest_positions,
        skin_weights,
        shape_basis,
        expression_basis,
        annotations: meta.annotations,
    };
    reject(validate_mesh(&mesh), "invalid mesh file")?;
    Ok(mesh)
}

/// Polygon frames for a sequence of poses: 24-byte header (magic, version,
/// pose count, polygon count, reserved zero) then one record per polygon
/// per pose.
pub fn encode_frames(poses: &[&PolygonFrames]) -> Result<Vec<u8>> {
    let m = poses.first().map_or(0, |p| p.frames.len());
    if poses.iter().any(|p| p.frames.len() != m) {
        return Err(Error::Dimension("frame sets differ in polygon count".into()));
    }
    let mut w = Writer::raw(FRAMES_HEADER_LEN + poses.len() * m * FRAME_RECORD_FLOATS * 4);
    w.bytes.extend_from_slice(FRAMES_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(poses.len() as u32);
    w.u32(m as u32);
    w.u32(0);
    for p in poses {
        for f in &p.frames {
            w.f32(f.scale);
            quat_wxyz(f.rotation.quaternion()).iter().for_each(|v| w.f32(*v));
            f.translation.iter().for_each(|v| w.f32(*v));
        }
    }
    Ok(w.bytes)
}

/// Decoded frames, one list per pose. Degeneracy flags are not stored.
pub fn decode_frames(bytes: &[u8]) -> Result<Vec<Vec<PolygonFrame>>> {
    let mut r = Reader::new(bytes, "frames file");
    let head = r.take(8, "header")?;
    if head != FRAMES_MAGIC {
        return Err(Error::Format("not a frames file: bad magic".into()));
    }
    let version = r.u32("header")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "frames file version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let poses = r.u32("header")? as usize;
    let m = r.u32("header")? as usize;
    r.u32("header")?;
    let mut out = Vec::with_capacity(poses);
    for p in 0..poses {
        let raw = r.f32s(m * FRAME_RECORD_FLOATS, &format!("pose {p}"))?;
        out.push(
            raw.chunks_exact(FRAME_RECORD_FLOATS)
                .map(|c| PolygonFrame {
                    scale: c[0],
                    rotation: Quat::new_unchecked(quat_from_wxyz([c[1], c[2], c[3], c[4]])),
                    translation: Vec3::new(c[5], c[6], c[7]),
                })
                .collect(),
        );
    }
    r.finish()?;
    Ok(out)
}
