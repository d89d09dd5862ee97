//! Per-frame articulated pose fitting to 2D keypoints.
//!
//! The objective is
//!
//! ```text
//! L = w_kpt·L_kpt + w_init·L_init
//!   + [face visible]·(w_vertex·L_vertex + w_lap·L_lap + w_edge·L_edge)
//!   + w_shape·‖β‖² + w_jo·‖offsets‖² + w_sym·L_sym
//! ```
//!
//! and is minimized with Levenberg–Marquardt. L1 terms enter the normal
//! equations through iteratively reweighted least squares; a step is only
//! taken if it lowers the true objective.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::body::{face_visibility, BodyModel, PoseLayout, PosedBody};
use crate::error::{Error, Result};
use crate::losses::{Breakdown, Term};
use crate::math::{Quat, Vec3};
use crate::types::{Camera, Keypoint, LossWeights, PoseParams, SkinnedMesh};

/// Down-weighting applied to gap-filled keypoints.
pub const SYNTHETIC_WEIGHT: f64 = 0.5;
pub const DEFAULT_FOCAL_FACTOR: f64 = 1.2;
pub const DEFAULT_DEPTH: f64 = 3.0;

/// Pinhole camera at the origin looking down +z with a focal length of
/// `factor · max(width, height)`.
pub fn init_camera_with(width: u32, height: u32, factor: f64) -> Camera {
    let f = factor * width.max(height) as f64;
    Camera {
        fx: f,
        fy: f,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        rotation: Quat::identity(),
        translation: Vec3::zeros(),
        width,
        height,
    }
}

pub fn init_camera(width: u32, height: u32) -> Camera {
    init_camera_with(width, height, DEFAULT_FOCAL_FACTOR)
}

/// Upright, camera-facing pose with the root on the optical axis at `depth`.
///
/// Model space is y-up and faces +z; a half turn about x maps it into the
/// y-down, z-forward camera frame facing the camera.
pub fn neutral_pose(mesh: &SkinnedMesh, depth: f64) -> Result<PoseParams> {
    let mut pose = PoseParams::zeros(mesh);
    let root = mesh.joint_order()?[0];
    pose.joint_rotations[root] = Vec3::new(std::f64::consts::PI, 0.0, 0.0);
    pose.root_translation = Vec3::new(0.0, 0.0, depth) - mesh.joint_rest_positions[root];
    Ok(pose)
}

/// Parameter groups the solver may change; frozen groups keep their
/// initial values exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreeParams {
    pub translation: bool,
    pub rotations: bool,
    pub offsets: bool,
    pub shape: bool,
    pub expression: bool,
}

impl Default for FreeParams {
    fn default() -> Self {
        Self {
            translation: true,
            rotations: true,
            offsets: true,
            shape: true,
            expression: true,
        }
    }
}

impl FreeParams {
    pub fn pose_only() -> Self {
        Self {
            offsets: false,
            shape: false,
            expression: false,
            ..Self::default()
        }
    }

    fn frozen(&self, layout: &PoseLayout) -> Vec<usize> {
        let j = layout.joints;
        let mut out = Vec::new();
        if !self.translation {
            out.extend(0..3);
        }
        if !self.rotations {
            out.extend(3..3 + 3 * j);
        }
        if !self.offsets {
            out.extend(3 + 3 * j..3 + 6 * j);
        }
        if !self.shape {
            out.extend((0..layout.shape).map(|k| layout.shape(k)));
        }
        if !self.expression {
            out.extend((0..layout.expression).map(|k| layout.expression(k)));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub weights: LossWeights,
    pub free: FreeParams,
    pub max_iterations: usize,
    /// Stop once the loss improved by less than this fraction over
    /// `window` accepted steps.
    pub rel_tol: f64,
    pub window: usize,
    pub initial_damping: f64,
    /// Abort when the loss exceeds this multiple of its initial value.
    pub divergence_factor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            free: FreeParams::default(),
            max_iterations: 200,
            rel_tol: 1e-6,
            window: 10,
            initial_damping: 1e-3,
            divergence_factor: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    /// Number of accepted steps.
    pub iterations: usize,
    /// Loss before the first step and after every accepted step.
    pub loss_history: Vec<f64>,
    pub breakdown: Breakdown,
    pub converged: bool,
    pub face_visible: bool,
    pub stop_reason: String,
}

/// One frame's detections in a named layout.
#[derive(Clone, Copy, Debug)]
pub struct KeypointFrame<'a> {
    pub layout: &'a [String],
    pub keypoints: &'a [Keypoint],
}

#[derive(Clone, Copy, Debug)]
struct KptTarget {
    joint: usize,
    x: f64,
    y: f64,
    weight: f64,
}

/// Residual kinds used while assembling the normal equations.
#[derive(Clone, Copy)]
enum Kind {
    L1 { floor: f64 },
    L2,
}

struct Normal {
    h: DMatrix<f64>,
    g: DVector<f64>,
}

impl Normal {
    fn new(n: usize) -> Self {
        Self {
            h: DMatrix::zeros(n, n),
            g: DVector::zeros(n),
        }
    }

    /// Decouples the given parameters so their step is exactly zero.
    fn freeze(&mut self, idx: &[usize]) {
        for &i in idx {
            self.h.row_mut(i).fill(0.0);
            self.h.column_mut(i).fill(0.0);
            self.h[(i, i)] = 1.0;
            self.g[i] = 0.0;
        }
    }

    /// Adds `a·|e|` (L1) or `a·e²` (L2) with Jacobian row `row`.
    fn add(&mut self, kind: Kind, a: f64, e: f64, row: &[(usize, f64)]) {
        if a == 0.0 {
            return;
        }
        let (curv, slope) = match kind {
            Kind::L1 { floor } => {
                let c = a / e.abs().max(floor);
                (c, c * e)
            }
            Kind::L2 => (2.0 * a, 2.0 * a * e),
        };
        for &(i, vi) in row {
            self.g[i] += slope * vi;
            for &(j, vj) in row {
                self.h[(i, j)] += curv * vi * vj;
            }
        }
    }
}

const KPT_FLOOR: f64 = 1e-6;
const FACE_FLOOR: f64 = 1e-9;
/// Without a floor the init term, whose residuals start at exactly zero,
/// would pin every parameter in place.
const INIT_FLOOR: f64 = 1e-2;

/// Mesh-dependent data shared by loss evaluations for one frame.
struct FitContext<'a> {
    model: BodyModel<'a>,
    mesh: &'a SkinnedMesh,
    cam: &'a Camera,
    weights: LossWeights,
    targets: Vec<KptTarget>,
    face_target: Option<&'a [Vec3]>,
    /// Face patch neighbors, as positions into `face_vertices`.
    face_neighbors: Vec<Vec<usize>>,
    face_edges: Vec<(usize, usize)>,
    init: Vec<f64>,
}

struct Evaluation {
    breakdown: Breakdown,
    posed: PosedBody,
    visible: bool,
}

impl<'a> FitContext<'a> {
    fn new(
        mesh: &'a SkinnedMesh,
        frame: KeypointFrame<'_>,
        init_pose: &PoseParams,
        face_target: Option<&'a [Vec3]>,
        cam: &'a Camera,
        weights: &LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        init_pose.check_dimensions(mesh)?;
        if frame.layout.len() != frame.keypoints.len() {
            return Err(Error::Dimension(format!(
                "{} keypoints for a {}-name layout",
                frame.keypoints.len(),
                frame.layout.len()
            )));
        }
        let ann = &mesh.annotations;
        if weights.w_sym > 0.0 && ann.joint_mirror.is_empty() {
            return Err(Error::Config(
                "symmetry term needs a left/right joint correspondence in the mesh asset".into(),
            ));
        }
        let mut targets = Vec::new();
        for (name, kp) in frame.layout.iter().zip(frame.keypoints) {
            if let Some(&joint) = ann.keypoint_joints.get(name) {
                let scale = if kp.synthetic { SYNTHETIC_WEIGHT } else { 1.0 };
                targets.push(KptTarget {
                    joint: joint as usize,
                    x: kp.x,
                    y: kp.y,
                    weight: kp.confidence * scale,
                });
            }
        }
        if let Some(t) = face_target {
            if t.len() != ann.face_vertices.len() {
                return Err(Error::Dimension(format!(
                    "face target has {} vertices, face patch has {}",
                    t.len(),
                    ann.face_vertices.len()
                )));
            }
        }
        let nf = ann.face_vertices.len();
        let mut neighbor_sets = vec![BTreeSet::new(); nf];
        let mut edges = BTreeSet::new();
        for tri in &ann.face_triangles {
            for k in 0..3 {
                let (a, b) = (tri[k] as usize, tri[(k + 1) % 3] as usize);
                if a >= nf || b >= nf {
                    return Err(Error::IndexOutOfRange {
                        what: "face triangle index".into(),
                        index: a.max(b),
                        limit: nf,
                    });
                }
                neighbor_sets[a].insert(b);
                neighbor_sets[b].insert(a);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        Ok(Self {
            model: BodyModel::new(mesh)?,
            mesh,
            cam,
            weights: weights.clone(),
            targets,
            face_target,
            face_neighbors: neighbor_sets
                .into_iter()
                .map(|s| s.into_iter().collect())
                .collect(),
            face_edges: edges.into_iter().collect(),
            init: init_pose.to_vector(),
        })
    }

    fn face_points(&self, posed: &[Vec3]) -> Vec<Vec3> {
        self.mesh
            .annotations
            .face_vertices
            .iter()
            .map(|&i| posed[i as usize])
            .collect()
    }

    fn laplacian(&self, pts: &[Vec3], i: usize) -> Vec3 {
        let nb = &self.face_neighbors[i];
        if nb.is_empty() {
            return Vec3::zeros();
        }
        let mean: Vec3 = nb.iter().map(|&j| pts[j]).sum::<Vec3>() / nb.len() as f64;
        pts[i] - mean
    }

    fn evaluate(&self, pose: &PoseParams) -> Result<Evaluation> {
        let w = &self.weights;
        let posed = self.model.pose(pose)?;
        let x = pose.to_vector();

        let mut kpt = 0.0;
        for t in &self.targets {
            let p = self.cam.to_camera(&posed.transforms.positions[t.joint]);
            if let Some([u, v]) = self.cam.project_camera_space(&p) {
                kpt += t.weight * ((u - t.x).abs() + (v - t.y).abs());
            }
        }
        kpt /= self.targets.len().max(1) as f64;
        let init: f64 = x.iter().zip(&self.init).map(|(a, b)| (a - b).abs()).sum();

        let ann = &self.mesh.annotations;
        let visible = face_visibility(&posed.vertices, &ann.face_center, &ann.eye_midpoint, self.cam);
        let mut terms = vec![Term::new("kpt", w.w_kpt, kpt), Term::new("init", w.w_init, init)];
        match self.face_target {
            Some(target) if visible && !target.is_empty() => {
                let model = self.face_points(&posed.vertices);
                let n = model.len() as f64;
                let vertex: f64 = model
                    .iter()
                    .zip(target)
                    .map(|(a, b)| (a - b).abs().sum())
                    .sum::<f64>()
                    / n;
                let lap: f64 = (0..model.len())
                    .map(|i| (self.laplacian(&model, i) - self.laplacian(target, i)).norm_squared())
                    .sum::<f64>()
                    / n;
                let edge: f64 = self
                    .face_edges
                    .iter()
                    .map(|&(a, b)| ((model[a] - model[b]).norm() - (target[a] - target[b]).norm()).abs())
                    .sum::<f64>()
                    / self.face_edges.len().max(1) as f64;
                terms.push(Term::new("vertex", w.w_vertex, vertex));
                terms.push(Term::new("lap", w.w_lap, lap));
                terms.push(Term::new("edge", w.w_edge, edge));
            }
            _ => {
                terms.push(Term::new("vertex", w.w_vertex, 0.0));
                terms.push(Term::new("lap", w.w_lap, 0.0));
                terms.push(Term::new("edge", w.w_edge, 0.0));
            }
        }
        let shape: f64 = pose.shape.iter().map(|b| b * b).sum();
        let jo: f64 = pose.joint_offsets.iter().map(|o| o.norm_squared()).sum();
        terms.push(Term::new("shape", w.w_shape, shape));
        terms.push(Term::new("jo", w.w_jo, jo));
        terms.push(Term::new("sym", w.w_sym, self.symmetry(pose)));
        Ok(Evaluation {
            breakdown: Breakdown::from_terms(terms),
            posed,
            visible,
        })
    }

    fn symmetry(&self, pose: &PoseParams) -> f64 {
        let mirror = &self.mesh.annotations.joint_mirror;
        if mirror.is_empty() {
            return 0.0;
        }
        let s = Vec3::new(-1.0, 1.0, 1.0);
        pose.joint_offsets
            .iter()
            .zip(mirror)
            .map(|(o, &m)| (o - pose.joint_offsets[m as usize].component_mul(&s)).norm_squared())
            .sum()
    }

    fn normal_equations(&self, pose: &PoseParams, ev: &Evaluation) -> Normal {
        let w = &self.weights;
        let layout = PoseLayout::of(pose);
        let mut ne = Normal::new(layout.len());
        let fk = &ev.posed.transforms;
        let cam_rot = self.cam.rotation.to_rotation_matrix().into_inner();

        let n_kpt = self.targets.len().max(1) as f64;
        for t in &self.targets {
            let p = self.cam.to_camera(&fk.positions[t.joint]);
            let Some([u, v]) = self.cam.project_camera_space(&p) else {
                continue;
            };
            let z = p.z;
            let du = cam_rot.transpose() * Vec3::new(self.cam.fx / z, 0.0, -self.cam.fx * p.x / (z * z));
            let dv = cam_rot.transpose() * Vec3::new(0.0, self.cam.fy / z, -self.cam.fy * p.y / (z * z));
            let cols = self.model.joint_jacobian(&layout, pose, fk, t.joint);
            let a = w.w_kpt * t.weight / n_kpt;
            let row_u: Vec<(usize, f64)> = cols.iter().map(|(i, c)| (*i, du.dot(c))).collect();
            let row_v: Vec<(usize, f64)> = cols.iter().map(|(i, c)| (*i, dv.dot(c))).collect();
            ne.add(Kind::L1 { floor: KPT_FLOOR }, a, u - t.x, &row_u);
            ne.add(Kind::L1 { floor: KPT_FLOOR }, a, v - t.y, &row_v);
        }

        let x = pose.to_vector();
        for (i, (a, b)) in x.iter().zip(&self.init).enumerate() {
            ne.add(Kind::L1 { floor: INIT_FLOOR }, w.w_init, a - b, &[(i, 1.0)]);
        }

        if let (Some(target), true) = (self.face_target, ev.visible) {
            self.face_equations(&mut ne, &layout, pose, ev, target);
        }

        for k in 0..pose.shape.len() {
            ne.add(Kind::L2, w.w_shape, pose.shape[k], &[(layout.shape(k), 1.0)]);
        }
        for (j, o) in pose.joint_offsets.iter().enumerate() {
            for c in 0..3 {
                ne.add(Kind::L2, w.w_jo, o[c], &[(layout.offset(j) + c, 1.0)]);
            }
        }
        let mirror = &self.mesh.annotations.joint_mirror;
        let s = [-1.0, 1.0, 1.0];
        for (j, &m) in mirror.iter().enumerate() {
            let m = m as usize;
            for c in 0..3 {
                let e = pose.joint_offsets[j][c] - s[c] * pose.joint_offsets[m][c];
                let row = [(layout.offset(j) + c, 1.0), (layout.offset(m) + c, -s[c])];
                ne.add(Kind::L2, w.w_sym, e, &row);
            }
        }
        ne
    }

    fn face_equations(
        &self,
        ne: &mut Normal,
        layout: &PoseLayout,
        pose: &PoseParams,
        ev: &Evaluation,
        target: &[Vec3],
    ) {
        let w = &self.weights;
        let ann = &self.mesh.annotations;
        let n = layout.len();
        let jac: Vec<DMatrix<f64>> = ann
            .face_vertices
            .iter()
            .map(|&v| {
                let mut m = DMatrix::zeros(3, n);
                for (i, c) in self.model.vertex_jacobian(layout, pose, &ev.posed, v as usize) {
                    for r in 0..3 {
                        m[(r, i)] += c[r];
                    }
                }
                m
            })
            .collect();
        let sparse = |row: DVector<f64>| -> Vec<(usize, f64)> {
            row.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect()
        };
        let model = self.face_points(&ev.posed.vertices);
        let nf = model.len() as f64;
        for (i, (p, t)) in model.iter().zip(target).enumerate() {
            for c in 0..3 {
                let row = sparse(jac[i].row(c).transpose());
                ne.add(Kind::L1 { floor: FACE_FLOOR }, w.w_vertex / nf, p[c] - t[c], &row);
            }
        }
        for i in 0..model.len() {
            let nb = &self.face_neighbors[i];
            if nb.is_empty() {
                continue;
            }
            let mut lj = jac[i].clone();
            for &j in nb {
                lj -= &jac[j] / nb.len() as f64;
            }
            let e = self.laplacian(&model, i) - self.laplacian(target, i);
            for c in 0..3 {
                ne.add(Kind::L2, w.w_lap / nf, e[c], &sparse(lj.row(c).transpose()));
            }
        }
        let ne_count = self.face_edges.len().max(1) as f64;
        for &(a, b) in &self.face_edges {
            let d = model[a] - model[b];
            let len = d.norm();
            if len == 0.0 {
                continue;
            }
            let u = d / len;
            let diff = &jac[a] - &jac[b];
            let row = diff.transpose() * nalgebra::DVector::from_column_slice(u.as_slice());
            let e = len - (target[a] - target[b]).norm();
            ne.add(Kind::L1 { floor: FACE_FLOOR }, w.w_edge / ne_count, e, &sparse(row));
        }
    }
}

/// Fitting objective with its per-term breakdown.
#[allow(clippy::too_many_arguments)]
pub fn fitting_loss(
    pose: &PoseParams,
    detected: KeypointFrame<'_>,
    init_pose: &PoseParams,
    face_target: Option<&[Vec3]>,
    mesh: &SkinnedMesh,
    cam: &Camera,
    w: &LossWeights,
) -> Result<Breakdown> {
    let ctx = FitContext::new(mesh, detected, init_pose, face_target, cam, w)?;
    pose.check_dimensions(mesh)?;
    Ok(ctx.evaluate(pose)?.breakdown)
}

fn solve_damped(ne: &Normal, lambda: f64) -> Option<DVector<f64>> {
    let mut a = ne.h.clone();
    for i in 0..a.nrows() {
        let d = a[(i, i)];
        a[(i, i)] = d + lambda * d.max(1e-9) + 1e-12;
    }
    a.cholesky().map(|c| c.solve(&(-&ne.g)))
}

/// Minimizes the fitting objective starting from `init_pose`.
pub fn fit_frame(
    mesh: &SkinnedMesh,
    init_pose: &PoseParams,
    detected: KeypointFrame<'_>,
    face_target: Option<&[Vec3]>,
    cam: &Camera,
    opts: &FitOptions,
) -> Result<(PoseParams, FitReport)> {
    cam.validate()?;
    let ctx = FitContext::new(mesh, detected, init_pose, face_target, cam, &opts.weights)?;
    let mut pose = init_pose.clone();
    let mut ev = ctx.evaluate(&pose)?;
    let l0 = ev.breakdown.total;
    if !l0.is_finite() {
        return Err(Error::Optimization(format!(
            "non-finite loss at initialization: {}",
            ev.breakdown.to_json()
        )));
    }
    let frozen = opts.free.frozen(&PoseLayout::of(&pose));
    let mut history = vec![l0];
    let mut lambda = opts.initial_damping;
    let mut converged = false;
    let mut stop_reason = String::from("iteration limit");
    for _ in 0..opts.max_iterations {
        let current = ev.breakdown.total;
        if current == 0.0 {
            converged = true;
            stop_reason = "zero loss".into();
            break;
        }
        let mut ne = ctx.normal_equations(&pose, &ev);
        ne.freeze(&frozen);
        let x = pose.to_vector();
        let mut accepted = None;
        for _ in 0..16 {
            if let Some(step) = solve_damped(&ne, lambda) {
                let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                let candidate = pose.with_vector(&xn);
                if let Ok(cev) = ctx.evaluate(&candidate) {
                    let l = cev.breakdown.total;
                    if l.is_finite() && l < current {
                        accepted = Some((candidate, cev));
                        lambda = (lambda / 3.0).max(1e-12);
                        break;
                    }
                }
            }
            lambda *= 5.0;
        }
        let Some((p, e)) = accepted else {
            converged = true;
            stop_reason = "no decreasing step".into();
            break;
        };
        pose = p;
        ev = e;
        let l = ev.breakdown.total;
        if l > opts.divergence_factor * l0 {
            return Err(Error::Optimization(format!("loss diverged: {l} from {l0}")));
        }
        history.push(l);
        if history.len() > opts.window {
            let past = history[history.len() - 1 - opts.window];
            if past - l <= opts.rel_tol * past {
                converged = true;
                stop_reason = "relative improvement below tolerance".into();
                break;
            }
        }
    }
    let report = FitReport {
        iterations: history.len() - 1,
        loss_history: history,
        breakdown: ev.breakdown,
        converged,
        face_visible: ev.visible,
        stop_reason,
    };
    Ok((pose, report))
}

#[derive(Clone, Debug)]
pub struct SequenceFit {
    pub poses: Vec<PoseParams>,
    pub reports: Vec<Option<FitReport>>,
    /// Frames whose fit failed; their pose is interpolated from neighbors.
    pub flagged: Vec<bool>,
    pub errors: Vec<Option<String>>,
}

/// Fits every frame in order, warm-starting each from the previous result.
///
/// `cams` holds one camera for all frames or one per frame; `face_targets`
/// likewise may be empty or per frame.
pub fn fit_sequence(
    mesh: &SkinnedMesh,
    seq: &crate::types::KeypointSequence,
    cams: &[Camera],
    init: Option<&PoseParams>,
    face_targets: &[Option<Vec<Vec3>>],
    opts: &FitOptions,
) -> Result<SequenceFit> {
    let n = seq.frames.len();
    if n == 0 {
        return Err(Error::Precondition("keypoint sequence is empty".into()));
    }
    if cams.len() != 1 && cams.len() != n {
        return Err(Error::Dimension(format!("{} cameras for {n} frames", cams.len())));
    }
    if !face_targets.is_empty() && face_targets.len() != n {
        return Err(Error::Dimension(format!(
            "{} face targets for {n} frames",
            face_targets.len()
        )));
    }
    let mut start = match init {
        Some(p) => p.clone(),
        None => neutral_pose(mesh, DEFAULT_DEPTH)?,
    };
    let mut results: Vec<Option<(PoseParams, FitReport)>> = Vec::with_capacity(n);
    let mut errors = Vec::with_capacity(n);
    for (f, kps) in seq.frames.iter().enumerate() {
        let cam = &cams[if cams.len() == 1 { 0 } else { f }];
        let target = face_targets.get(f).and_then(|t| t.as_deref());
        let frame = KeypointFrame {
            layout: &seq.layout,
            keypoints: kps,
        };
        match fit_frame(mesh, &start, frame, target, cam, opts) {
            Ok((pose, report)) => {
                start = pose.clone();
                results.push(Some((pose, report)));
                errors.push(None);
            }
            Err(e) => {
                results.push(None);
                errors.push(Some(e.to_string()));
            }
        }
    }
    let good: Vec<usize> = (0..n).filter(|&i| results[i].is_some()).collect();
    if good.is_empty() {
        return Err(Error::Optimization(format!(
            "no frame could be fitted: {}",
            errors[0].as_deref().unwrap_or("")
        )));
    }
    let vec_of = |i: usize| results[i].as_ref().unwrap().0.to_vector();
    let template = results[good[0]].as_ref().unwrap().0.clone();
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        if let Some((p, _)) = &results[i] {
            poses.push(p.clone());
            continue;
        }
        let prev = good.iter().rev().find(|&&g| g < i).copied();
        let next = good.iter().find(|&&g| g > i).copied();
        let v = match (prev, next) {
            (Some(a), Some(b)) => {
                let t = (i - a) as f64 / (b - a) as f64;
                let (va, vb) = (vec_of(a), vec_of(b));
                va.iter().zip(&vb).map(|(x, y)| x + t * (y - x)).collect()
            }
            (Some(a), None) => vec_of(a),
            (None, Some(b)) => vec_of(b),
            (None, None) => unreachable!(),
        };
        poses.push(template.with_vector(&v));
    }
    Ok(SequenceFit {
        poses,
        flagged: results.iter().map(|r| r.is_none()).collect(),
        reports: results.into_iter().map(|r| r.map(|(_, rep)| rep)).collect(),
        errors,
    })
}
