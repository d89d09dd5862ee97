//! Shared domain types.
//!
//! Everything here is plain value data. Scales are carried in log space and
//! joint rotations as axis-angle vectors; quaternions appear wherever a
//! rotation is composed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Quat, Vec3};

/// Parent index marking the root joint.
pub const ROOT_PARENT: u32 = u32::MAX;

/// One Gaussian bound to a mesh triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat {
    /// Offset from the polygon center, in polygon-frame units.
    pub mu_local: Vec3,
    pub rot_local: Quat,
    pub log_scale: Vec3,
    pub color: Vec3,
    pub opacity: f64,
    pub polygon_id: u32,
}

impl Splat {
    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }
}

/// Similarity transform carrying canonical polygon space to posed space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolygonFrame {
    pub scale: f64,
    pub rotation: Quat,
    pub translation: Vec3,
}

impl PolygonFrame {
    pub fn identity_at(translation: Vec3) -> Self {
        Self {
            scale: 1.0,
            rotation: Quat::identity(),
            translation,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }
}

/// Linear blendshape basis. `data` is laid out `[vertex][xyz][component]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Blendshapes {
    pub count: usize,
    pub data: Vec<f64>,
}

impl Blendshapes {
    pub fn displacement(&self, vertex: usize, coeffs: &[f64]) -> Vec3 {
        let mut d = Vec3::zeros();
        let n = self.count.min(coeffs.len());
        for axis in 0..3 {
            let base = (vertex * 3 + axis) * self.count;
            let row = &self.data[base..base + n];
            d[axis] = row.iter().zip(coeffs).map(|(b, c)| b * c).sum();
        }
        d
    }

    pub fn component(&self, vertex: usize, k: usize) -> Vec3 {
        let base = vertex * 3 * self.count;
        Vec3::new(
            self.data[base + k],
            self.data[base + self.count + k],
            self.data[base + 2 * self.count + k],
        )
    }
}

/// Named index sets and correspondences shipped with a mesh asset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeshAnnotations {
    /// Vertices averaged into the face center for the visibility test.
    #[serde(default)]
    pub face_center: Vec<u32>,
    /// Vertices averaged into the eye midpoint for the visibility test.
    #[serde(default)]
    pub eye_midpoint: Vec<u32>,
    /// Face patch vertices, index-aligned with face-target files.
    #[serde(default)]
    pub face_vertices: Vec<u32>,
    /// Face patch triangles, indexing into `face_vertices`.
    #[serde(default)]
    pub face_triangles: Vec<[u32; 3]>,
    /// Left/right joint correspondence; empty when absent.
    #[serde(default)]
    pub joint_mirror: Vec<u32>,
    /// Keypoint layout name -> joint index.
    #[serde(default)]
    pub keypoint_joints: BTreeMap<String, u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkinnedMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub joint_names: Vec<String>,
    pub joint_parents: Vec<u32>,
    pub joint_rest_positions: Vec<Vec3>,
    /// Dense `vertices × joints`, row-major.
    pub skin_weights: Vec<f64>,
    pub shape_basis: Option<Blendshapes>,
    pub expression_basis: Option<Blendshapes>,
    pub annotations: MeshAnnotations,
}

impl SkinnedMesh {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joint_parents.len()
    }

    pub fn weights_of(&self, vertex: usize) -> &[f64] {
        let j = self.num_joints();
        &self.skin_weights[vertex * j..(vertex + 1) * j]
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        match self.joint_parents[joint] {
            ROOT_PARENT => None,
            p => Some(p as usize),
        }
    }

    /// Joints ordered so every parent precedes its children.
    pub fn joint_order(&self) -> Result<Vec<usize>> {
        let n = self.num_joints();
        let mut children = vec![Vec::new(); n];
        let mut roots = Vec::new();
        for (j, &p) in self.joint_parents.iter().enumerate() {
            if p == ROOT_PARENT {
                roots.push(j);
            } else if (p as usize) < n {
                children[p as usize].push(j);
            } else {
                return Err(Error::IndexOutOfRange {
                    what: format!("parent of joint {j}"),
                    index: p as usize,
                    limit: n,
                });
            }
        }
        if roots.len() != 1 {
            return Err(Error::Invalid(format!(
                "joint hierarchy must have exactly one root, found {}",
                roots.len()
            )));
        }
        let mut order = Vec::with_capacity(n);
        let mut stack = roots;
        while let Some(j) = stack.pop() {
            order.push(j);
            stack.extend(children[j].iter().rev());
        }
        if order.len() != n {
            return Err(Error::Invalid("joint hierarchy contains a cycle".into()));
        }
        Ok(order)
    }

    /// `descendants[j]` is true for every joint in the subtree rooted at `j`
    /// (including `j`), stored as a `joints × joints` bit grid.
    pub fn subtree_mask(&self) -> Result<Vec<bool>> {
        let n = self.num_joints();
        let order = self.joint_order()?;
        let mut mask = vec![false; n * n];
        for &j in &order {
            mask[j * n + j] = true;
            let mut a = self.parent(j);
            while let Some(p) = a {
                mask[p * n + j] = true;
                a = self.parent(p);
            }
        }
        Ok(mask)
    }

    pub fn num_shape(&self) -> usize {
        self.shape_basis.as_ref().map_or(0, |b| b.count)
    }

    pub fn num_expression(&self) -> usize {
        self.expression_basis.as_ref().map_or(0, |b| b.count)
    }

    pub fn triangle_vertices(&self, vertices: &[Vec3], t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            vertices[a as usize],
            vertices[b as usize],
            vertices[c as usize],
        ]
    }
}

pub fn triangle_area(p: &[Vec3; 3]) -> f64 {
    0.5 * (p[1] - p[0]).cross(&(p[2] - p[0])).norm()
}

/// Articulated pose. Joint rotations are axis-angle vectors in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    #[serde(with = "vec3_list")]
    pub joint_rotations: Vec<Vec3>,
    #[serde(with = "vec3_single")]
    pub root_translation: Vec3,
    #[serde(default)]
    pub shape: Vec<f64>,
    #[serde(with = "vec3_list")]
    pub joint_offsets: Vec<Vec3>,
    #[serde(default)]
    pub expression: Vec<f64>,
}

impl PoseParams {
    /// All-zero pose sized for `mesh`.
    pub fn zeros(mesh: &SkinnedMesh) -> Self {
        Self {
            joint_rotations: vec![Vec3::zeros(); mesh.num_joints()],
            root_translation: Vec3::zeros(),
            shape: vec![0.0; mesh.num_shape()],
            joint_offsets: vec![Vec3::zeros(); mesh.num_joints()],
            expression: vec![0.0; mesh.num_expression()],
        }
    }

    pub fn check_dimensions(&self, mesh: &SkinnedMesh) -> Result<()> {
        let j = mesh.num_joints();
        if self.joint_rotations.len() != j || self.joint_offsets.len() != j {
            return Err(Error::Dimension(format!(
                "pose has {} rotations / {} offsets, skeleton has {j} joints",
                self.joint_rotations.len(),
                self.joint_offsets.len()
            )));
        }
        if mesh.shape_basis.is_some() && self.shape.len() != mesh.num_shape() {
            return Err(Error::Dimension(format!(
                "pose has {} shape coefficients, asset declares {}",
                self.shape.len(),
                mesh.num_shape()
            )));
        }
        if mesh.expression_basis.is_some() && self.expression.len() != mesh.num_expression() {
            return Err(Error::Dimension(format!(
                "pose has {} expression coefficients, asset declares {}",
                self.expression.len(),
                mesh.num_expression()
            )));
        }
        let finite = self
            .joint_rotations
            .iter()
            .chain(&self.joint_offsets)
            .all(|v| v.iter().all(|x| x.is_finite()))
            && self.root_translation.iter().all(|x| x.is_finite())
            && self.shape.iter().chain(&self.expression).all(|x| x.is_finite());
        if !finite {
            return Err(Error::Invalid("pose contains non-finite values".into()));
        }
        Ok(())
    }

    /// Flat parameter vector: translation, rotations, offsets, shape, expression.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 + 6 * self.joint_rotations.len() + self.shape.len());
        v.extend(self.root_translation.iter());
        for r in &self.joint_rotations {
            v.extend(r.iter());
        }
        for o in &self.joint_offsets {
            v.extend(o.iter());
        }
        v.extend(&self.shape);
        v.extend(&self.expression);
        v
    }

    /// Inverse of [`PoseParams::to_vector`], using `self` for the dimensions.
    pub fn with_vector(&self, v: &[f64]) -> Self {
        let j = self.joint_rotations.len();
        let mut it = v.iter().copied();
        let mut next3 = || Vec3::new(it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        let root_translation = next3();
        let joint_rotations = (0..j).map(|_| next3()).collect();
        let joint_offsets = (0..j).map(|_| next3()).collect();
        let rest = &v[3 + 6 * j..];
        let (shape, expression) = rest.split_at(self.shape.len());
        Self {
            joint_rotations,
            root_translation,
            shape: shape.to_vec(),
            joint_offsets,
            expression: expression.to_vec(),
        }
    }
}

/// Pinhole camera. World points map to camera space as `rotation * p + translation`;
/// camera space is x right, y down, z forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Quat,
    pub translation: Vec3,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Invalid("camera focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("camera image size must be positive".into()));
        }
        if !(self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64)
        {
            return Err(Error::Invalid(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    /// Pinhole projection of a camera-space point; `None` at or behind `z = 0`.
    pub fn project_camera_space(&self, p: &Vec3) -> Option<[f64; 2]> {
        if p.z <= 0.0 {
            return None;
        }
        Some([
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    /// True when produced by gap filling rather than detection.
    pub synthetic: bool,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self {
            x,
            y,
            confidence,
            synthetic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSequence {
    pub layout: Vec<String>,
    pub frames: Vec<Vec<Keypoint>>,
}

impl KeypointSequence {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layout.iter().position(|n| n == name)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.layout.len();
        for (f, frame) in self.frames.iter().enumerate() {
            if frame.len() != k {
                return Err(Error::Dimension(format!(
                    "frame {f} has {} keypoints, layout has {k}",
                    frame.len()
                )));
            }
            for (j, kp) in frame.iter().enumerate() {
                if !(0.0..=1.0).contains(&kp.confidence) {
                    return Err(Error::Invalid(format!(
                        "frame {f}, joint {j} ({}): confidence {} outside [0, 1]",
                        self.layout[j], kp.confidence
                    )));
                }
                if !kp.x.is_finite() || !kp.y.is_finite() {
                    return Err(Error::Invalid(format!(
                        "frame {f}, joint {j} ({}): non-finite position",
                        self.layout[j]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Term weights for the fitting objective and the splat training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_kpt: f64,
    pub w_init: f64,
    pub w_vertex: f64,
    pub w_lap: f64,
    pub w_edge: f64,
    pub w_shape: f64,
    pub w_jo: f64,
    pub w_sym: f64,
    pub w_l2: f64,
    /// Reserved slot; no perceptual network is bundled.
    pub w_lpips: f64,
    pub w_ssim: f64,
    pub w_sobel: f64,
    pub w_knn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_kpt: 1.0,
            w_init: 0.1,
            w_vertex: 10.0,
            w_lap: 10000.0,
            w_edge: 1.0,
            w_shape: 0.01,
            w_jo: 100.0,
            w_sym: 1.0,
            w_l2: 1.0,
            w_lpips: 0.01,
            w_ssim: 0.1,
            w_sobel: 1.0,
            w_knn: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_kpt,
            self.w_init,
            self.w_vertex,
            self.w_lap,
            self.w_edge,
            self.w_shape,
            self.w_jo,
            self.w_sym,
            self.w_l2,
            self.w_lpips,
            self.w_ssim,
            self.w_sobel,
            self.w_knn,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

pub(crate) mod vec3_list {
    use super::Vec3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec3], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<[f64; 3]> = v.iter().map(|p| [p.x, p.y, p.z]).collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec3>, D::Error> {
        let raw: Vec<[f64; 3]> = Vec::deserialize(d)?;
        Ok(raw.into_iter().map(Vec3::from).collect())
    }
}

pub(crate) mod vec3_single {
    use super::Vec3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec3, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec3, D::Error> {
        Ok(Vec3::from(<[f64; 3]>::deserialize(d)?))
    }
}
