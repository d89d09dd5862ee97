//! Articulated skinned mesh: forward kinematics, linear blend skinning,
//! per-polygon frames, joint projection and the face-visibility test.
//!
//! Joint `j` sits at its rest position plus `joint_offsets[j]`. Its local
//! transform rotates by `exp(joint_rotations[j])` about the joint; the root
//! additionally translates by `root_translation`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{axis_angle_to_quat, canonical_quat, exp_map_left_jacobian, quat_from_rotation, Mat3, Quat, Vec3};
use crate::types::{Camera, PolygonFrame, PoseParams, SkinnedMesh};

const DEGENERATE_AREA: f64 = 1e-12;
const VERTEX_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct JointTransforms {
    pub rotations: Vec<Quat>,
    pub positions: Vec<Vec3>,
    /// Rest positions after applying the pose's joint offsets.
    pub rest: Vec<Vec3>,
    /// World rotation matrices, cached for skinning.
    pub rotation_matrices: Vec<Mat3>,
}

impl JointTransforms {
    /// Skinning transform of joint `j` applied to a canonical point.
    pub fn skin_point(&self, j: usize, v: &Vec3) -> Vec3 {
        self.rotation_matrices[j] * (v - self.rest[j]) + self.positions[j]
    }
}

/// Index ranges of the flat pose vector produced by [`PoseParams::to_vector`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoseLayout {
    pub joints: usize,
    pub shape: usize,
    pub expression: usize,
}

impl PoseLayout {
    pub fn of(pose: &PoseParams) -> Self {
        Self {
            joints: pose.joint_rotations.len(),
            shape: pose.shape.len(),
            expression: pose.expression.len(),
        }
    }

    pub fn len(&self) -> usize {
        3 + 6 * self.joints + self.shape + self.expression
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn translation(&self) -> usize {
        0
    }

    pub fn rotation(&self, joint: usize) -> usize {
        3 + 3 * joint
    }

    pub fn offset(&self, joint: usize) -> usize {
        3 + 3 * self.joints + 3 * joint
    }

    pub fn shape(&self, k: usize) -> usize {
        3 + 6 * self.joints + k
    }

    pub fn expression(&self, k: usize) -> usize {
        3 + 6 * self.joints + self.shape + k
    }
}

/// Skeleton topology and sparse skin weights precomputed from a mesh.
pub struct BodyModel<'a> {
    mesh: &'a SkinnedMesh,
    order: Vec<usize>,
    /// Ancestors of each joint including itself, root last.
    ancestors: Vec<Vec<usize>>,
    influences: Vec<Vec<(usize, f64)>>,
}

impl<'a> BodyModel<'a> {
    pub fn new(mesh: &'a SkinnedMesh) -> Result<Self> {
        let order = mesh.joint_order()?;
        let ancestors = (0..mesh.num_joints())
            .map(|j| {
                let mut chain = vec![j];
                let mut a = mesh.parent(j);
                while let Some(p) = a {
                    chain.push(p);
                    a = mesh.parent(p);
                }
                chain
            })
            .collect();
        let influences = (0..mesh.num_vertices())
            .map(|v| {
                mesh.weights_of(v)
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(j, w)| (j, *w))
                    .collect()
            })
            .collect();
        Ok(Self {
            mesh,
            order,
            ancestors,
            influences,
        })
    }

    pub fn mesh(&self) -> &SkinnedMesh {
        self.mesh
    }

    pub fn ancestors(&self, joint: usize) -> &[usize] {
        &self.ancestors[joint]
    }

    pub fn forward_kinematics(&self, pose: &PoseParams) -> Result<JointTransforms> {
        pose.check_dimensions(self.mesh)?;
        let n = self.mesh.num_joints();
        let rest: Vec<Vec3> = self
            .mesh
            .joint_rest_positions
            .iter()
            .zip(&pose.joint_offsets)
            .map(|(r, o)| r + o)
            .collect();
        let mut rotations = vec![Quat::identity(); n];
        let mut positions = vec![Vec3::zeros(); n];
        for &j in &self.order {
            let local = axis_angle_to_quat(&pose.joint_rotations[j]);
            match self.mesh.parent(j) {
                None => {
                    rotations[j] = local;
                    positions[j] = rest[j] + pose.root_translation;
                }
                Some(p) => {
                    rotations[j] = rotations[p] * local;
                    positions[j] = positions[p] + rotations[p] * (rest[j] - rest[p]);
                }
            }
        }
        let rotation_matrices = rotations
            .iter()
            .map(|q| q.to_rotation_matrix().into_inner())
            .collect();
        Ok(JointTransforms {
            rotations: rotations.into_iter().map(canonical_quat).collect(),
            positions,
            rest,
            rotation_matrices,
        })
    }

    /// Canonical vertices displaced by the shape and expression bases.
    pub fn shaped_vertices(&self, pose: &PoseParams) -> Vec<Vec3> {
        let mesh = self.mesh;
        let has_basis = mesh.shape_basis.is_some() || mesh.expression_basis.is_some();
        if !has_basis {
            return mesh.vertices.clone();
        }
        (0..mesh.num_vertices())
            .map(|v| {
                let mut p = mesh.vertices[v];
                if let Some(b) = &mesh.shape_basis {
                    p += b.displacement(v, &pose.shape);
                }
                if let Some(b) = &mesh.expression_basis {
                    p += b.displacement(v, &pose.expression);
                }
                p
            })
            .collect()
    }

    pub fn skin_point(&self, fk: &JointTransforms, v: usize, p: &Vec3) -> Vec3 {
        self.influences[v]
            .iter()
            .map(|&(j, w)| fk.skin_point(j, p) * w)
            .sum()
    }

    pub fn skin(&self, fk: &JointTransforms, shaped: &[Vec3]) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); shaped.len()];
        out.par_chunks_mut(VERTEX_CHUNK)
            .enumerate()
            .for_each(|(c, chunk)| {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    let v = c * VERTEX_CHUNK + i;
                    *slot = self.skin_point(fk, v, &shaped[v]);
                }
            });
        out
    }

    pub fn pose(&self, pose: &PoseParams) -> Result<PosedBody> {
        let transforms = self.forward_kinematics(pose)?;
        let shaped = self.shaped_vertices(pose);
        let vertices = self.skin(&transforms, &shaped);
        Ok(PosedBody {
            transforms,
            shaped,
            vertices,
        })
    }

    /// Sparse Jacobian columns of joint `d`'s world position.
    pub fn joint_jacobian(
        &self,
        layout: &PoseLayout,
        pose: &PoseParams,
        fk: &JointTransforms,
        d: usize,
    ) -> Vec<(usize, Vec3)> {
        let mut cols = Vec::new();
        for k in 0..3 {
            cols.push((layout.translation() + k, Vec3::ith(k, 1.0)));
        }
        let pd = fk.positions[d];
        for (depth, &m) in self.ancestors[d].iter().enumerate() {
            let parent_rot = self.parent_rotation(fk, m);
            // a joint's own rotation does not move it
            if m != d {
                let axes = exp_map_left_jacobian(&pose.joint_rotations[m]);
                let lever = pd - fk.positions[m];
                for (k, a) in axes.iter().enumerate() {
                    cols.push((layout.rotation(m) + k, (parent_rot * a).cross(&lever)));
                }
            }
            let off = if depth == 0 {
                parent_rot
            } else {
                parent_rot - fk.rotation_matrices[m]
            };
            for k in 0..3 {
                cols.push((layout.offset(m) + k, off.column(k).into_owned()));
            }
        }
        cols
    }

    fn parent_rotation(&self, fk: &JointTransforms, m: usize) -> Mat3 {
        self.mesh
            .parent(m)
            .map_or_else(Mat3::identity, |p| fk.rotation_matrices[p])
    }

    /// Sparse Jacobian columns of posed vertex `v`.
    pub fn vertex_jacobian(
        &self,
        layout: &PoseLayout,
        pose: &PoseParams,
        posed: &PosedBody,
        v: usize,
    ) -> Vec<(usize, Vec3)> {
        let fk = &posed.transforms;
        let mut cols = Vec::new();
        for k in 0..3 {
            cols.push((layout.translation() + k, Vec3::ith(k, 1.0)));
        }
        // per affected joint m: Σ_{j ∈ subtree(m)} w_j (x_j - p_m) and Σ w_j
        let mut lever: Vec<(usize, Vec3, f64)> = Vec::new();
        for &(j, w) in &self.influences[v] {
            let x = fk.skin_point(j, &posed.shaped[v]);
            for &m in &self.ancestors[j] {
                match lever.iter_mut().find(|e| e.0 == m) {
                    Some(e) => {
                        e.1 += (x - fk.positions[m]) * w;
                        e.2 += w;
                    }
                    None => lever.push((m, (x - fk.positions[m]) * w, w)),
                }
            }
        }
        for (m, s, wsum) in lever {
            let parent_rot = self.parent_rotation(fk, m);
            let axes = exp_map_left_jacobian(&pose.joint_rotations[m]);
            for (k, a) in axes.iter().enumerate() {
                cols.push((layout.rotation(m) + k, (parent_rot * a).cross(&s)));
            }
            let off = (parent_rot - fk.rotation_matrices[m]) * wsum;
            for k in 0..3 {
                cols.push((layout.offset(m) + k, off.column(k).into_owned()));
            }
        }
        let basis_cols = |basis: &crate::types::Blendshapes, start: usize, cols: &mut Vec<_>| {
            for k in 0..basis.count {
                let b = basis.component(v, k);
                let d: Vec3 = self.influences[v]
                    .iter()
                    .map(|&(j, w)| fk.rotation_matrices[j] * b * w)
                    .sum();
                cols.push((start + k, d));
            }
        };
        if let Some(b) = &self.mesh.shape_basis {
            basis_cols(b, layout.shape(0), &mut cols);
        }
        if let Some(b) = &self.mesh.expression_basis {
            basis_cols(b, layout.expression(0), &mut cols);
        }
        cols
    }

    /// Vector-Jacobian product: pulls per-vertex gradients back onto the
    /// flat pose vector.
    pub fn vertex_vjp(
        &self,
        layout: &PoseLayout,
        pose: &PoseParams,
        posed: &PosedBody,
        grads: &[Vec3],
    ) -> Vec<f64> {
        let n_joints = self.mesh.num_joints();
        let fk = &posed.transforms;
        // torque[m] = Σ_v Σ_{j∈sub(m)} w (x - p_m) × g ; force[m] = Σ_v Σ_{j∈sub(m)} w g
        let mut torque = vec![Vec3::zeros(); n_joints];
        let mut force = vec![Vec3::zeros(); n_joints];
        let mut out = vec![0.0; layout.len()];
        let mut total = Vec3::zeros();
        for (v, g) in grads.iter().enumerate() {
            if *g == Vec3::zeros() {
                continue;
            }
            total += g;
            for &(j, w) in &self.influences[v] {
                let x = fk.skin_point(j, &posed.shaped[v]);
                for &m in &self.ancestors[j] {
                    torque[m] += (x - fk.positions[m]).cross(g) * w;
                    force[m] += g * w;
                }
            }
            for (basis, start) in [
                (&self.mesh.shape_basis, layout.shape(0)),
                (&self.mesh.expression_basis, layout.expression(0)),
            ] {
                if let Some(b) = basis {
                    for k in 0..b.count {
                        let bk = b.component(v, k);
                        let d: Vec3 = self.influences[v]
                            .iter()
                            .map(|&(j, w)| fk.rotation_matrices[j] * bk * w)
                            .sum();
                        out[start + k] += d.dot(g);
                    }
                }
            }
        }
        for k in 0..3 {
            out[layout.translation() + k] = total[k];
        }
        for m in 0..n_joints {
            let parent_rot = self.parent_rotation(fk, m);
            let axes = exp_map_left_jacobian(&pose.joint_rotations[m]);
            for (k, a) in axes.iter().enumerate() {
                out[layout.rotation(m) + k] = (parent_rot * a).dot(&torque[m]);
            }
            let off = (parent_rot - fk.rotation_matrices[m]).transpose() * force[m];
            for k in 0..3 {
                out[layout.offset(m) + k] = off[k];
            }
        }
        out
    }
}

/// FK and skinning results for one pose.
#[derive(Clone, Debug)]
pub struct PosedBody {
    pub transforms: JointTransforms,
    /// Canonical vertices after blendshapes, before skinning.
    pub shaped: Vec<Vec3>,
    pub vertices: Vec<Vec3>,
}

pub fn forward_kinematics(mesh: &SkinnedMesh, pose: &PoseParams) -> Result<JointTransforms> {
    BodyModel::new(mesh)?.forward_kinematics(pose)
}

pub fn skin_vertices(mesh: &SkinnedMesh, pose: &PoseParams) -> Result<Vec<Vec3>> {
    Ok(BodyModel::new(mesh)?.pose(pose)?.vertices)
}

/// Orthonormal tangent frame `[ê1, ê2, n̂]` (as matrix columns) and area.
pub fn tangent_frame(p: &[Vec3; 3]) -> Option<(Mat3, f64)> {
    let e1 = p[1] - p[0];
    let cross = e1.cross(&(p[2] - p[0]));
    let area = 0.5 * cross.norm();
    if !(area >= DEGENERATE_AREA) || e1.norm() == 0.0 {
        return None;
    }
    let e1 = e1.normalize();
    let n = cross.normalize();
    let e2 = n.cross(&e1);
    Some((Mat3::from_columns(&[e1, e2, n]), area))
}

/// Polygon frames for one pose, with the triangles that fell back flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct PolygonFrames {
    pub frames: Vec<PolygonFrame>,
    pub degenerate: Vec<bool>,
}

/// Canonical tangent frames and areas, reusable across poses.
#[derive(Clone, Debug)]
pub struct PolygonBinding {
    triangles: Vec<[u32; 3]>,
    canonical: Vec<(Mat3, f64)>,
}

impl PolygonBinding {
    pub fn new(mesh: &SkinnedMesh, canonical_vertices: &[Vec3]) -> Result<Self> {
        let canonical = (0..mesh.num_triangles())
            .map(|t| {
                tangent_frame(&mesh.triangle_vertices(canonical_vertices, t)).ok_or_else(|| {
                    Error::Invalid(format!("canonical triangle {t} is degenerate"))
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            triangles: mesh.triangles.clone(),
            canonical,
        })
    }

    pub fn canonical_frame(&self, t: usize) -> &(Mat3, f64) {
        &self.canonical[t]
    }

    pub fn frames(&self, posed: &[Vec3], previous: Option<&[PolygonFrame]>) -> PolygonFrames {
        let per: Vec<(PolygonFrame, bool)> = self
            .triangles
            .par_iter()
            .enumerate()
            .map(|(t, tri)| {
                let p = tri.map(|i| posed[i as usize]);
                let centroid = (p[0] + p[1] + p[2]) / 3.0;
                match tangent_frame(&p) {
                    Some((frame, area)) => {
                        let (canon, canon_area) = &self.canonical[t];
                        let r = frame * canon.transpose();
                        let rotation = canonical_quat(quat_from_rotation(&r));
                        (
                            PolygonFrame {
                                scale: (area / canon_area).sqrt(),
                                rotation,
                                translation: centroid,
                            },
                            false,
                        )
                    }
                    None => {
                        let fallback = previous
                            .and_then(|prev| prev.get(t).copied())
                            .unwrap_or_else(|| PolygonFrame::identity_at(centroid));
                        (fallback, true)
                    }
                }
            })
            .collect();
        let (frames, degenerate) = per.into_iter().unzip();
        PolygonFrames { frames, degenerate }
    }
}

/// Per-triangle similarity transforms from the canonical to the posed mesh.
///
/// A degenerate posed triangle reuses its frame from `previous` when given,
/// otherwise an identity frame at its centroid, and is flagged.
pub fn polygon_frames(
    mesh: &SkinnedMesh,
    canonical_vertices: &[Vec3],
    posed_vertices: &[Vec3],
    previous: Option<&[PolygonFrame]>,
) -> Result<PolygonFrames> {
    if posed_vertices.len() != mesh.num_vertices() {
        return Err(Error::Dimension(format!(
            "{} posed vertices for a {}-vertex mesh",
            posed_vertices.len(),
            mesh.num_vertices()
        )));
    }
    Ok(PolygonBinding::new(mesh, canonical_vertices)?.frames(posed_vertices, previous))
}

/// Pinhole projection of every joint; joints at or behind the camera plane
/// are `None`.
pub fn project_joints(transforms: &JointTransforms, cam: &Camera) -> Vec<Option<[f64; 2]>> {
    transforms
        .positions
        .iter()
        .map(|p| cam.project_camera_space(&cam.to_camera(p)))
        .collect()
}

fn mean_of(vertices: &[Vec3], idx: &[u32]) -> Option<Vec3> {
    if idx.is_empty() {
        return None;
    }
    let sum: Vec3 = idx.iter().map(|&i| vertices[i as usize]).sum();
    Some(sum / idx.len() as f64)
}

/// Projections of (eye midpoint − face center) and (face center − camera)
/// onto the camera xz-plane, as `(dot, cross)`. `None` when either vanishes.
fn face_view_terms(
    posed_vertices: &[Vec3],
    face_center: &[u32],
    eye_midpoint: &[u32],
    cam: &Camera,
) -> Option<(f64, f64)> {
    let center = cam.to_camera(&mean_of(posed_vertices, face_center)?);
    let eyes = cam.to_camera(&mean_of(posed_vertices, eye_midpoint)?);
    // camera sits at the origin of camera space
    let a = eyes - center;
    let b = center;
    if (a.x == 0.0 && a.z == 0.0) || (b.x == 0.0 && b.z == 0.0) {
        return None;
    }
    Some((a.x * b.x + a.z * b.z, a.x * b.z - a.z * b.x))
}

/// Angle in radians between the two face vectors of [`face_visibility`].
pub fn face_view_angle(
    posed_vertices: &[Vec3],
    face_center: &[u32],
    eye_midpoint: &[u32],
    cam: &Camera,
) -> Option<f64> {
    face_view_terms(posed_vertices, face_center, eye_midpoint, cam)
        .map(|(dot, cross)| cross.abs().atan2(dot))
}

/// Visible iff the angle between (eye midpoint − face center) and
/// (face center − camera), projected to the camera xz-plane, is strictly
/// greater than 135°.
pub fn face_visibility(
    posed_vertices: &[Vec3],
    face_center: &[u32],
    eye_midpoint: &[u32],
    cam: &Camera,
) -> bool {
    // angle > 135° exactly when dot < 0 and |cross| < |dot|
    face_view_terms(posed_vertices, face_center, eye_midpoint, cam)
        .is_some_and(|(dot, cross)| dot < 0.0 && cross.abs() < dot.abs())
}
