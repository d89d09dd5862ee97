//! Splat optimization against posed target images, plus rendering and
//! evaluation of trained avatars.
//!
//! Every parameter is stored unconstrained in one flat vector, 14 values per
//! splat: local offset (3), raw local quaternion `(w, x, y, z)` (4), log
//! scale (3), color (3) and opacity logit (1). After every update the
//! quaternion is renormalized and the color clamped to `[0, 1]`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::binding::{deform_splats, WorldGaussian};
use crate::body::{BodyModel, PolygonBinding, PolygonFrames, PoseLayout, PosedBody};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::losses::{
    image_loss_grad, knn_regularizer_grad, psnr, ssim, Breakdown, Term, DEFAULT_K,
};
use crate::math::{canonical_quat, quat_left_matrix, quat_mul_wxyz, quat_wxyz, skew, Mat3, Quat, Vec3};
use crate::raster::{
    project_all, project_gaussian_backward, rasterize, rasterize_backward, Background, GradWorld, Projection,
    RasterConfig, RenderOutput,
};
use crate::types::{Camera, LossWeights, PoseParams, SkinnedMesh, Splat};

pub const PARAMS_PER_SPLAT: usize = 14;
const MU: usize = 0;
const ROT: usize = 3;
const LOG_SCALE: usize = 7;
const COLOR: usize = 10;
const LOGIT: usize = 13;
const OPACITY_CLAMP: f64 = 1e-6;

/// Per-group step sizes. `position` is multiplied by the scene extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub color: f64,
    pub opacity: f64,
    pub pose: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            rotation: 1e-3,
            log_scale: 5e-3,
            color: 2.5e-3,
            opacity: 5e-2,
            pose: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub iterations: usize,
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weights: LossWeights,
    pub knn_k: usize,
    /// Draw a uniform random background color every iteration. Only frames
    /// with an alpha mask can be recomposited, the rest use `background`.
    pub random_background: bool,
    pub background: [f64; 3],
    pub seed: u64,
    /// Frames excluded from sampling and evaluated every `eval_every`
    /// iterations (0 disables).
    pub held_out: Vec<usize>,
    pub eval_every: usize,
    /// Checkpoint period in iterations (0 disables).
    pub checkpoint_every: usize,
    pub unfreeze_pose: bool,
    pub max_nan_skips: usize,
    pub prune_opacity: f64,
    pub tile_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            iterations: 3000,
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weights: LossWeights::default(),
            knn_k: DEFAULT_K,
            random_background: true,
            background: [0.0; 3],
            seed: 0,
            held_out: Vec::new(),
            eval_every: 0,
            checkpoint_every: 0,
            unfreeze_pose: false,
            max_nan_skips: 10,
            prune_opacity: 0.005,
            tile_size: crate::raster::DEFAULT_TILE,
        }
    }
}

/// One training view. `image` holds the foreground premultiplied by
/// `alpha`; without a mask it is taken as the final composite.
#[derive(Clone, Debug)]
pub struct TrainFrame {
    pub pose: PoseParams,
    pub camera: Camera,
    pub image: Image,
    pub alpha: Option<Vec<f64>>,
}

impl TrainFrame {
    /// The target as it would appear over `bg`.
    pub fn composite(&self, bg: [f64; 3]) -> Image {
        let mut out = self.image.clone();
        if let Some(alpha) = &self.alpha {
            for (i, a) in alpha.iter().enumerate() {
                for c in 0..3 {
                    out.data[3 * i + c] += (1.0 - a) * bg[c];
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One bias-corrected step; `lr(i)` is the step size of parameter `i`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64, b1: f64, b2: f64, eps: f64) {
        self.step += 1;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr(i) * mh / (vh.sqrt() + eps);
        }
    }
}

/// Optimizer state written with each checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub splats: Vec<Splat>,
    pub adam: Adam,
    /// Per-frame poses when they are being optimized.
    pub poses: Option<Vec<PoseParams>>,
}

pub trait TrainObserver {
    fn log(&mut self, _entry: &Value) {}
    fn checkpoint(&mut self, _cp: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Trained splats with low-opacity splats pruned.
    pub splats: Vec<Splat>,
    pub pruned: usize,
    pub log: Vec<Value>,
    /// Last good state; for a halted run this is what to resume from.
    pub checkpoint: Checkpoint,
    pub halted: Option<String>,
    pub nan_skips: usize,
    pub poses: Vec<PoseParams>,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn pack_splats(splats: &[Splat]) -> Vec<f64> {
    let mut out = Vec::with_capacity(splats.len() * PARAMS_PER_SPLAT);
    for s in splats {
        out.extend(s.mu_local.iter());
        out.extend(quat_wxyz(s.rot_local.quaternion()));
        out.extend(s.log_scale.iter());
        out.extend(s.color.iter());
        out.push(logit(s.opacity));
    }
    out
}

/// Inverse of [`pack_splats`]; polygon ids come from `template`.
pub fn unpack_splats(params: &[f64], template: &[Splat]) -> Vec<Splat> {
    template
        .iter()
        .zip(params.chunks_exact(PARAMS_PER_SPLAT))
        .map(|(t, p)| Splat {
            mu_local: Vec3::new(p[MU], p[MU + 1], p[MU + 2]),
            rot_local: Quat::new_normalize(crate::math::quat_from_wxyz([p[ROT], p[ROT + 1], p[ROT + 2], p[ROT + 3]])),
            log_scale: Vec3::new(p[LOG_SCALE], p[LOG_SCALE + 1], p[LOG_SCALE + 2]),
            color: Vec3::new(p[COLOR], p[COLOR + 1], p[COLOR + 2]),
            opacity: sigmoid(p[LOGIT]),
            polygon_id: t.polygon_id,
        })
        .collect()
}

fn project_params(params: &mut [f64]) {
    for p in params.chunks_exact_mut(PARAMS_PER_SPLAT) {
        let n = (p[ROT..ROT + 4].iter().map(|v| v * v).sum::<f64>()).sqrt();
        // rendering normalizes anyway; rewriting a unit quaternion would only
        // inject roundoff
        if (n - 1.0).abs() <= 1e-9 {
        } else if n > 0.0 {
            for v in &mut p[ROT..ROT + 4] {
                *v /= n;
            }
        } else {
            p[ROT..ROT + 4].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        }
        for v in &mut p[COLOR..COLOR + 3] {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Everything produced by rendering an avatar once.
#[derive(Clone, Debug)]
pub struct AvatarRender {
    pub output: RenderOutput,
    pub world: Vec<WorldGaussian>,
    pub projection: Projection,
}

/// Posing, deformation and rasterization for one mesh.
pub struct AvatarRenderer<'a> {
    mesh: &'a SkinnedMesh,
    model: BodyModel<'a>,
    binding: PolygonBinding,
    pub raster: RasterConfig,
}

impl<'a> AvatarRenderer<'a> {
    pub fn new(mesh: &'a SkinnedMesh) -> Result<Self> {
        Ok(Self {
            mesh,
            model: BodyModel::new(mesh)?,
            binding: PolygonBinding::new(mesh, &mesh.vertices)?,
            raster: RasterConfig::default(),
        })
    }

    pub fn mesh(&self) -> &SkinnedMesh {
        self.mesh
    }

    pub fn model(&self) -> &BodyModel<'a> {
        &self.model
    }

    pub fn binding(&self) -> &PolygonBinding {
        &self.binding
    }

    pub fn pose(&self, pose: &PoseParams) -> Result<(PosedBody, PolygonFrames)> {
        let posed = self.model.pose(pose)?;
        let frames = self.binding.frames(&posed.vertices, None);
        Ok((posed, frames))
    }

    pub fn render_frames(
        &self,
        splats: &[Splat],
        frames: &PolygonFrames,
        cam: &Camera,
        bg: &Background,
    ) -> Result<AvatarRender> {
        cam.validate()?;
        let world = deform_splats(splats, &frames.frames)?;
        let projection = project_all(&world, cam);
        let output = rasterize(
            &projection.splats,
            cam.width as usize,
            cam.height as usize,
            bg,
            &self.raster,
        )?;
        Ok(AvatarRender {
            output,
            world,
            projection,
        })
    }

    pub fn render(&self, splats: &[Splat], pose: &PoseParams, cam: &Camera, bg: &Background) -> Result<AvatarRender> {
        let (_, frames) = self.pose(pose)?;
        self.render_frames(splats, &frames, cam, bg)
    }
}

/// Poses the mesh, deforms the splats and renders them at the camera's
/// resolution.
pub fn render_avatar(
    mesh: &SkinnedMesh,
    pose: &PoseParams,
    splats: &[Splat],
    cam: &Camera,
    bg: &Background,
) -> Result<AvatarRender> {
    AvatarRenderer::new(mesh)?.render(splats, pose, cam, bg)
}

/// Radius of the canonical mesh around its vertex centroid.
pub fn scene_extent(mesh: &SkinnedMesh) -> f64 {
    let n = mesh.num_vertices().max(1) as f64;
    let c: Vec3 = mesh.vertices.iter().sum::<Vec3>() / n;
    mesh.vertices.iter().map(|v| (v - c).norm()).fold(0.0, f64::max)
}

/// Gradient of a loss w.r.t. one polygon frame: translation, scale, and
/// the rotation as a left-perturbation vector.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameGrad {
    pub translation: Vec3,
    pub scale: f64,
    pub rotation: Vec3,
}

/// Loss gradients on the packed splat parameters and the polygon frames,
/// given gradients on the deformed Gaussians.
pub fn deformation_backward(
    splats: &[Splat],
    frames: &PolygonFrames,
    grads: &[GradWorld],
) -> (Vec<f64>, Vec<FrameGrad>) {
    let mut out = vec![0.0; splats.len() * PARAMS_PER_SPLAT];
    let mut fg = vec![FrameGrad::default(); frames.frames.len()];
    for (i, (s, g)) in splats.iter().zip(grads).enumerate() {
        let f = &frames.frames[s.polygon_id as usize];
        let rot = f.rotation.to_rotation_matrix().into_inner();
        let o = &mut out[i * PARAMS_PER_SPLAT..(i + 1) * PARAMS_PER_SPLAT];

        let d_mu = rot.transpose() * g.center * f.scale;
        o[MU..MU + 3].copy_from_slice(d_mu.as_slice());

        let qr = quat_wxyz(f.rotation.quaternion());
        let r = quat_wxyz(s.rot_local.quaternion());
        let u = quat_mul_wxyz(qr, r);
        let qw = quat_wxyz(canonical_quat(Quat::new_unchecked(crate::math::quat_from_wxyz(u))).quaternion());
        let sign = if qw == u { 1.0 } else { -1.0 };
        let du = g.rotation.map(|x| x * sign);
        let dr = quat_left_matrix(qr).transpose() * nalgebra::Vector4::from(du);
        let rv = nalgebra::Vector4::from(r);
        let dq = dr - rv * rv.dot(&dr);
        o[ROT..ROT + 4].copy_from_slice(dq.as_slice());

        let local_scale = s.scale();
        for k in 0..3 {
            o[LOG_SCALE + k] = g.scale[k] * f.scale * local_scale[k];
        }
        o[COLOR..COLOR + 3].copy_from_slice(g.color.as_slice());
        o[LOGIT] = g.opacity * s.opacity * (1.0 - s.opacity);

        let rmu = rot * s.mu_local;
        let fgi = &mut fg[s.polygon_id as usize];
        fgi.translation += g.center;
        fgi.scale += g.center.dot(&rmu) + g.scale.dot(&local_scale);
        fgi.rotation += (rmu * f.scale).cross(&g.center);
        // left perturbation of the world quaternion: δq = (0, ω/2) ⊗ q_w
        for k in 0..3 {
            let mut e = [0.0; 4];
            e[k + 1] = 0.5;
            let d = quat_mul_wxyz(e, qw);
            fgi.rotation[k] += (0..4).map(|c| d[c] * g.rotation[c]).sum::<f64>();
        }
    }
    (out, fg)
}

/// Pulls frame gradients back onto posed vertex positions. Degenerate
/// (fallback) frames do not depend on the vertices and contribute nothing.
pub fn frames_backward(
    mesh: &SkinnedMesh,
    posed: &[Vec3],
    frames: &PolygonFrames,
    grads: &[FrameGrad],
) -> Vec<Vec3> {
    let mut out = vec![Vec3::zeros(); posed.len()];
    for (t, g) in grads.iter().enumerate() {
        if frames.degenerate[t] || *g == FrameGrad::default() {
            continue;
        }
        let tri = mesh.triangles[t];
        let p = tri.map(|i| posed[i as usize]);
        let a = p[1] - p[0];
        let b = p[2] - p[0];
        let c = a.cross(&b);
        let (an, cn) = (a.norm(), c.norm());
        let e1 = a / an;
        let n = c / cn;
        let e2 = n.cross(&e1);
        let fp = Mat3::from_columns(&[e1, e2, n]);
        let gf = skew(&g.rotation) * fp * 0.5;
        let (mut g_e1, g_e2, mut g_n) = (gf.column(0).into_owned(), gf.column(1).into_owned(), gf.column(2).into_owned());
        g_n += e1.cross(&g_e2);
        g_e1 += g_e2.cross(&n);
        let mut g_a = (g_e1 - e1 * e1.dot(&g_e1)) / an;
        let mut g_c = (g_n - n * n.dot(&g_n)) / cn;
        // scale = sqrt(area / canonical area), area = |c| / 2
        let area = 0.5 * cn;
        let k = frames.frames[t].scale;
        g_c += n * (0.5 * g.scale * k / (2.0 * area));
        g_a += b.cross(&g_c);
        let g_b = g_c.cross(&a);
        let third = g.translation / 3.0;
        out[tri[0] as usize] += third - g_a - g_b;
        out[tri[1] as usize] += third + g_a;
        out[tri[2] as usize] += third + g_b;
    }
    out
}

/// Loss, its breakdown and all gradients for one rendered view.
pub struct StepResult {
    pub breakdown: Breakdown,
    pub params_grad: Vec<f64>,
    pub pose_grad: Option<Vec<f64>>,
    pub render: AvatarRender,
}

/// Forward and backward pass of the training objective for one view.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradients(
    renderer: &AvatarRenderer<'_>,
    splats: &[Splat],
    pose: &PoseParams,
    posed_frames: Option<(&PosedBody, &PolygonFrames)>,
    cam: &Camera,
    target: &Image,
    bg: [f64; 3],
    w: &LossWeights,
    knn_k: usize,
    with_pose: bool,
) -> Result<StepResult> {
    let owned;
    let (posed, frames) = match posed_frames {
        Some(pf) => pf,
        None => {
            owned = renderer.pose(pose)?;
            (&owned.0, &owned.1)
        }
    };
    let background = Background::Color(bg);
    let render = renderer.render_frames(splats, frames, cam, &background)?;
    let (mut terms, d_image) = image_loss_grad(&render.output.image, target, w)?;
    let mut world_grads = vec![GradWorld::default(); render.world.len()];
    if w.w_knn > 0.0 {
        let (v, kg) = knn_regularizer_grad(&render.world, knn_k)?;
        terms.push(Term::new("knn", w.w_knn, v));
        for (g, k) in world_grads.iter_mut().zip(kg) {
            g.color += k.color * w.w_knn;
            g.opacity += k.opacity * w.w_knn;
            g.scale += k.scale * w.w_knn;
            for c in 0..4 {
                g.rotation[c] += k.rotation[c] * w.w_knn;
            }
        }
    } else {
        terms.push(Term::skipped("knn", w.w_knn));
    }
    terms.push(Term::unavailable("lpips", w.w_lpips));
    let breakdown = Breakdown::from_terms(terms);

    let g2d = rasterize_backward(&render.projection.splats, &render.output.state, &background, &d_image)?;
    for (k, g) in g2d.iter().enumerate() {
        let src = render.projection.source[k];
        let gw = project_gaussian_backward(&render.world[src], cam, g);
        let t = &mut world_grads[src];
        t.center += gw.center;
        t.scale += gw.scale;
        t.color += gw.color;
        t.opacity += gw.opacity;
        for c in 0..4 {
            t.rotation[c] += gw.rotation[c];
        }
    }
    let (params_grad, frame_grads) = deformation_backward(splats, frames, &world_grads);
    let pose_grad = with_pose.then(|| {
        let vg = frames_backward(renderer.mesh(), &posed.vertices, frames, &frame_grads);
        renderer
            .model()
            .vertex_vjp(&PoseLayout::of(pose), pose, posed, &vg)
    });
    Ok(StepResult {
        breakdown,
        params_grad,
        pose_grad,
        render,
    })
}

fn check_frames(mesh: &SkinnedMesh, splats: &[Splat], frames: &[TrainFrame], opts: &TrainOptions) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Precondition("training needs at least one frame".into()));
    }
    let report = crate::validate::validate_asset(mesh, splats);
    if !report.passed() {
        return Err(Error::Invalid(report.to_string()));
    }
    opts.weights.validate()?;
    for (i, f) in frames.iter().enumerate() {
        f.pose.check_dimensions(mesh)?;
        f.camera.validate()?;
        let (w, h) = (f.camera.width as usize, f.camera.height as usize);
        if f.image.width != w || f.image.height != h {
            return Err(Error::Dimension(format!(
                "frame {i}: image is {}x{}, camera is {w}x{h}",
                f.image.width, f.image.height
            )));
        }
        if let Some(a) = &f.alpha {
            if a.len() != w * h {
                return Err(Error::Dimension(format!("frame {i}: alpha has {} values for {} pixels", a.len(), w * h)));
            }
        }
    }
    if let Some(&bad) = opts.held_out.iter().find(|&&i| i >= frames.len()) {
        return Err(Error::IndexOutOfRange {
            what: "held-out frame".into(),
            index: bad,
            limit: frames.len(),
        });
    }
    if opts.held_out.len() == frames.len() {
        return Err(Error::Precondition("every frame is held out".into()));
    }
    if opts.weights.w_knn > 0.0 && splats.len() < opts.knn_k + 1 {
        return Err(Error::Precondition(format!(
            "the neighborhood term needs at least {} splats, got {}",
            opts.knn_k + 1,
            splats.len()
        )));
    }
    Ok(())
}

fn param_lr(lr: &LearningRates, extent: f64) -> [f64; PARAMS_PER_SPLAT] {
    let mut out = [0.0; PARAMS_PER_SPLAT];
    out[MU..MU + 3].fill(lr.position * extent);
    out[ROT..ROT + 4].fill(lr.rotation);
    out[LOG_SCALE..LOG_SCALE + 3].fill(lr.log_scale);
    out[COLOR..COLOR + 3].fill(lr.color);
    out[LOGIT] = lr.opacity;
    out
}

/// Optimizes the splats against `frames`; see the module docs for the
/// parameterization.
pub fn train(mesh: &SkinnedMesh, splats: &[Splat], frames: &[TrainFrame], opts: &TrainOptions) -> Result<TrainOutcome> {
    train_with(mesh, splats, frames, opts, &mut ())
}

pub fn train_with(
    mesh: &SkinnedMesh,
    splats: &[Splat],
    frames: &[TrainFrame],
    opts: &TrainOptions,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    check_frames(mesh, splats, frames, opts)?;
    let mut renderer = AvatarRenderer::new(mesh)?;
    renderer.raster = RasterConfig {
        tile_size: opts.tile_size,
    };
    let lr = param_lr(&opts.lr, scene_extent(mesh));
    let mut params = pack_splats(splats);
    project_params(&mut params);
    let mut adam = Adam::new(params.len());
    let mut poses: Vec<PoseParams> = frames.iter().map(|f| f.pose.clone()).collect();
    let mut pose_adam: Vec<Adam> = poses.iter().map(|p| Adam::new(p.to_vector().len())).collect();
    let mut cached: Vec<Option<(PosedBody, PolygonFrames)>> = if opts.unfreeze_pose {
        vec![None; frames.len()]
    } else {
        frames
            .iter()
            .map(|f| renderer.pose(&f.pose).map(Some))
            .collect::<Result<_>>()?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let train_ids: Vec<usize> = (0..frames.len()).filter(|i| !opts.held_out.contains(i)).collect();
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    let mut nan_skips = 0;
    let mut halted = None;
    let emit = |entry: Value, log: &mut Vec<Value>, observer: &mut dyn TrainObserver| {
        observer.log(&entry);
        log.push(entry);
    };
    let snapshot = |iteration: usize, params: &[f64], adam: &Adam, poses: &[PoseParams]| Checkpoint {
        iteration,
        splats: unpack_splats(params, splats),
        adam: adam.clone(),
        poses: opts.unfreeze_pose.then(|| poses.to_vec()),
    };

    for it in 0..opts.iterations {
        if order.is_empty() {
            order = train_ids.clone();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let f = order.pop().unwrap();
        let frame = &frames[f];
        let bg = if opts.random_background && frame.alpha.is_some() {
            [rng.random(), rng.random(), rng.random()]
        } else {
            opts.background
        };
        let target = frame.composite(bg);
        let current = unpack_splats(&params, splats);
        let pf = cached[f].as_ref().map(|(p, fr)| (p, fr));
        let step = loss_and_gradients(
            &renderer,
            &current,
            &poses[f],
            pf,
            &frame.camera,
            &target,
            bg,
            &opts.weights,
            opts.knn_k,
            opts.unfreeze_pose,
        )?;
        let loss = step.breakdown.total;
        if !loss.is_finite() {
            let reason = format!("non-finite loss at iteration {it}");
            emit(json!({"iteration": it, "frame": f, "halted": reason}), &mut log, observer);
            halted = Some(reason);
            break;
        }
        let finite = step.params_grad.iter().all(|g| g.is_finite())
            && step.pose_grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            nan_skips += 1;
            emit(
                json!({"iteration": it, "frame": f, "loss": step.breakdown.to_json(), "skipped": "non-finite gradient"}),
                &mut log,
                observer,
            );
            if nan_skips > opts.max_nan_skips {
                halted = Some(format!("more than {} non-finite gradients", opts.max_nan_skips));
                break;
            }
            continue;
        }
        adam.update(
            &mut params,
            &step.params_grad,
            |i| lr[i % PARAMS_PER_SPLAT],
            opts.beta1,
            opts.beta2,
            opts.epsilon,
        );
        project_params(&mut params);
        if let Some(pg) = &step.pose_grad {
            let mut x = poses[f].to_vector();
            pose_adam[f].update(&mut x, pg, |_| opts.lr.pose, opts.beta1, opts.beta2, opts.epsilon);
            poses[f] = poses[f].with_vector(&x);
            cached[f] = None;
        }
        emit(
            json!({"iteration": it, "frame": f, "background": bg, "loss": step.breakdown.to_json()}),
            &mut log,
            observer,
        );
        let done = it + 1;
        if opts.eval_every > 0 && !opts.held_out.is_empty() && done % opts.eval_every == 0 {
            let current = unpack_splats(&params, splats);
            let m = eval_frames(&renderer, &current, frames, &poses, &opts.held_out, opts.background)?;
            emit(json!({"iteration": it, "eval": m}), &mut log, observer);
        }
        if opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 {
            observer.checkpoint(&snapshot(done, &params, &adam, &poses))?;
        }
    }

    let checkpoint = snapshot(
        log.iter().filter(|e| e.get("background").is_some()).count(),
        &params,
        &adam,
        &poses,
    );
    if halted.is_some() {
        observer.checkpoint(&checkpoint)?;
    }
    let trained = unpack_splats(&params, splats);
    let kept: Vec<Splat> = trained.into_iter().filter(|s| s.opacity >= opts.prune_opacity).collect();
    Ok(TrainOutcome {
        pruned: splats.len() - kept.len(),
        splats: kept,
        log,
        checkpoint,
        halted,
        nan_skips,
        poses,
    })
}

fn eval_frames(
    renderer: &AvatarRenderer<'_>,
    splats: &[Splat],
    frames: &[TrainFrame],
    poses: &[PoseParams],
    ids: &[usize],
    bg: [f64; 3],
) -> Result<Value> {
    let mut p = 0.0;
    let mut s = 0.0;
    for &i in ids {
        let r = renderer.render(splats, &poses[i], &frames[i].camera, &Background::Color(bg))?;
        let truth = frames[i].composite(bg);
        p += psnr(&r.output.image, &truth)?;
        s += ssim(&r.output.image, &truth)?;
    }
    let n = ids.len() as f64;
    Ok(json!({"psnr": p / n, "ssim": s / n}))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub render_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_render_ms: f64,
    pub splat_count: usize,
    /// Always `"unavailable"`: no perceptual network is bundled.
    pub lpips: &'static str,
}

/// Renders every pose over `bg` and compares with `truth`.
pub fn evaluate(
    mesh: &SkinnedMesh,
    splats: &[Splat],
    poses: &[PoseParams],
    cams: &[Camera],
    truth: &[Image],
    bg: [f64; 3],
) -> Result<EvalReport> {
    let n = poses.len();
    if n == 0 || truth.len() != n || (cams.len() != 1 && cams.len() != n) {
        return Err(Error::Dimension(format!(
            "{n} poses, {} cameras and {} images",
            cams.len(),
            truth.len()
        )));
    }
    let renderer = AvatarRenderer::new(mesh)?;
    let mut frames = Vec::with_capacity(n);
    for (i, pose) in poses.iter().enumerate() {
        let cam = &cams[if cams.len() == 1 { 0 } else { i }];
        let start = Instant::now();
        let r = renderer.render(splats, pose, cam, &Background::Color(bg))?;
        let render_ms = start.elapsed().as_secs_f64() * 1e3;
        frames.push(FrameMetrics {
            psnr: psnr(&r.output.image, &truth[i])?,
            ssim: ssim(&r.output.image, &truth[i])?,
            render_ms,
        });
    }
    let mean = |f: fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n as f64;
    Ok(EvalReport {
        mean_psnr: mean(|m| m.psnr),
        mean_ssim: mean(|m| m.ssim),
        mean_render_ms: mean(|m| m.render_ms),
        frames,
        splat_count: splats.len(),
        lpips: "unavailable",
    })
}
