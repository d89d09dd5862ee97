//! One test per acceptance criterion. Each prints a single
//! `ACCEPTANCE <name>: PASS|FAIL (...)` line to stderr.

mod common;

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::time::Instant;

use common::*;
use meshsplat::binding::{deform_splats, init_splats, InitOptions};
use meshsplat::body::{skin_vertices, PolygonBinding};
use meshsplat::fitting::{fit_frame, fitting_loss, init_camera, neutral_pose, FitOptions, FreeParams, KeypointFrame};
use meshsplat::imaging::Image;
use meshsplat::kinematics::{chain_state_from_points, fill_all_gaps, relative_deltas, Side, DEFAULT_THRESHOLD};
use meshsplat::losses::{total_gaussian_loss, Breakdown};
use meshsplat::math::{Quat, Vec3};
use meshsplat::raster::{rasterize, Background, Projected2D, RasterConfig};
use meshsplat::synthetic::{icosphere, marker_joints, stick_body, BodyOptions};
use meshsplat::trainer::{
    evaluate, loss_and_gradients, pack_splats, train, train_with, unpack_splats, AvatarRenderer, Checkpoint,
    TrainObserver, TrainOptions, PARAMS_PER_SPLAT,
};
use meshsplat::types::{Keypoint, KeypointSequence, LossWeights, PoseParams, SkinnedMesh, Splat};
use nalgebra::{Matrix2, Vector2};
use rand::Rng;

// ---------------------------------------------------------------- kinematics

struct ArmMotion {
    shoulder: [f64; 2],
    shoulder_velocity: [f64; 2],
    lengths: [f64; 3],
    /// Initial shoulder angle and the two initial relative bends.
    angles: [f64; 3],
    omegas: [f64; 3],
    finger: [f64; 2],
}

impl ArmMotion {
    /// Shoulder, elbow, wrist, palm and one finger at frame `t`.
    fn points(&self, t: f64) -> [[f64; 2]; 5] {
        let s = [
            self.shoulder[0] + t * self.shoulder_velocity[0],
            self.shoulder[1] + t * self.shoulder_velocity[1],
        ];
        let a = self.angles[0] + t * self.omegas[0];
        let b = a + self.angles[1] + t * self.omegas[1];
        let c = b + self.angles[2] + t * self.omegas[2];
        let e = [s[0] + self.lengths[0] * a.cos(), s[1] + self.lengths[0] * a.sin()];
        let w = [e[0] + self.lengths[1] * b.cos(), e[1] + self.lengths[1] * b.sin()];
        let p = [w[0] + self.lengths[2] * c.cos(), w[1] + self.lengths[2] * c.sin()];
        [s, e, w, p, [p[0] + self.finger[0], p[1] + self.finger[1]]]
    }
}

const ARM_JOINTS: [&str; 5] = ["shoulder", "elbow", "wrist", "palm", "hand_index"];

#[test]
fn kinematic_recovery() {
    let arms = [
        // crosses the ±π seam inside the gap
        ArmMotion {
            shoulder: [400.0, 300.0],
            shoulder_velocity: [1.5, -0.75],
            lengths: [80.0, 70.0, 20.0],
            angles: [3.0, -0.4, 0.2],
            omegas: [0.05, -0.08, 0.11],
            finger: [5.0, -3.0],
        },
        ArmMotion {
            shoulder: [600.0, 310.0],
            shoulder_velocity: [-2.0, 0.5],
            lengths: [75.0, 72.0, 18.0],
            angles: [0.3, 0.6, -0.25],
            omegas: [-0.07, 0.09, 0.04],
            finger: [-4.0, 6.0],
        },
    ];
    let sides = [Side::Left, Side::Right];
    let mut layout = vec!["nose".to_string()];
    for side in sides {
        layout.extend(ARM_JOINTS.iter().map(|j| format!("{}_{j}", side.prefix())));
    }
    let (frames, hidden) = (10, 2..7);
    let mut truth = Vec::new();
    let mut observed = Vec::new();
    for f in 0..frames {
        let mut row = vec![Keypoint::new(500.0, 150.0, 0.95)];
        let mut obs = row.clone();
        for arm in &arms {
            let pts = arm.points(f as f64);
            for (k, p) in pts.iter().enumerate() {
                row.push(Keypoint::new(p[0], p[1], 0.95));
                obs.push(if hidden.contains(&f) && k > 0 {
                    // junk coordinates under low confidence
                    Keypoint::new(p[0] + 37.0, p[1] - 11.0, 0.05)
                } else {
                    Keypoint::new(p[0], p[1], 0.95)
                });
            }
        }
        truth.push(row);
        observed.push(obs);
    }
    let seq = KeypointSequence { layout, frames: observed };
    let start = Instant::now();
    let out = fill_all_gaps(&seq, DEFAULT_THRESHOLD).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let gaps_ok = out.failed.is_empty()
        && out.report.gaps.len() == 2
        && out.report.gaps.iter().all(|g| g.last_visible == 1 && g.first_reappear == 7 && g.n == 6);
    let mut worst: f64 = 0.0;
    for f in hidden.clone() {
        for (j, kp) in out.sequence.frames[f].iter().enumerate() {
            let t = truth[f][j];
            worst = worst.max((kp.x - t.x).hypot(kp.y - t.y));
        }
    }
    report(
        "kinematic_recovery",
        gaps_ok && worst <= 1e-6 && elapsed < 1.0,
        format!("2 arms x {} hidden frames, max error {worst:.2e} px, {:.1} ms", hidden.len(), elapsed * 1e3),
    );
}

/// The representative of `d + 2πk` with the smallest magnitude, `+π` on a tie.
fn wrap_oracle(d: f64) -> f64 {
    let mut best = d;
    for k in -4..=4 {
        let c = d + TAU * k as f64;
        if c.abs() < best.abs() - 1e-12 || ((c.abs() - best.abs()).abs() <= 1e-12 && c > best) {
            best = c;
        }
    }
    best
}

#[test]
fn delta_decomposition() {
    let mut rng = rng(100);
    let point = |rng: &mut rand_chacha::ChaCha8Rng| [rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0)];
    let mut worst: f64 = 0.0;
    let mut seam_pairs = 0;
    for _ in 0..1000 {
        let a = chain_state_from_points([point(&mut rng), point(&mut rng), point(&mut rng), point(&mut rng)]).unwrap();
        let b = chain_state_from_points([point(&mut rng), point(&mut rng), point(&mut rng), point(&mut rng)]).unwrap();
        let abs_se = wrap_oracle(b.theta_se - a.theta_se);
        let abs_ew = wrap_oracle(b.theta_ew - a.theta_ew);
        let abs_wp = wrap_oracle(b.theta_wp - a.theta_wp);
        let expected = (abs_se, abs_ew - abs_se, abs_wp - abs_ew);
        let got = relative_deltas(&a, &b);
        if (b.theta_se - a.theta_se).abs() > PI {
            seam_pairs += 1;
        }
        worst = worst
            .max((got.0 - expected.0).abs())
            .max((got.1 - expected.1).abs())
            .max((got.2 - expected.2).abs());
    }
    report(
        "delta_decomposition",
        worst <= 1e-9 && seam_pairs > 0,
        format!("1000 pairs ({seam_pairs} across the seam), max deviation {worst:.2e} rad"),
    );
}

// --------------------------------------------------------------- deformation

fn rotation_gap(a: &Quat, b: &Quat) -> f64 {
    (a.to_rotation_matrix().into_inner() - b.to_rotation_matrix().into_inner()).abs().max()
}

#[test]
fn deformation_identity_and_equivariance() {
    let mesh = stick_body(&BodyOptions::default());
    let splats = varied_splats(&mesh, 30);
    let renderer = AvatarRenderer::new(&mesh).unwrap();

    let (_, canon) = renderer.pose(&PoseParams::zeros(&mesh)).unwrap();
    let world = deform_splats(&splats, &canon.frames).unwrap();
    let mut identity_err: f64 = 0.0;
    for (t, f) in canon.frames.iter().enumerate() {
        let p = mesh.triangle_vertices(&mesh.vertices, t);
        let centroid = (p[0] + p[1] + p[2]) / 3.0;
        identity_err = identity_err
            .max((f.scale - 1.0).abs())
            .max(rotation_gap(&f.rotation, &Quat::identity()))
            .max((f.translation - centroid).abs().max());
    }
    for (s, g) in splats.iter().zip(&world) {
        let f = &canon.frames[s.polygon_id as usize];
        identity_err = identity_err
            .max((g.center - (f.translation + s.mu_local)).abs().max())
            .max(rotation_gap(&g.rotation, &s.rot_local))
            .max((g.scale - s.scale()).abs().max());
    }

    let mut rng = rng(31);
    let mut pose = neutral_pose(&mesh, 3.0).unwrap();
    for r in pose.joint_rotations.iter_mut().skip(1) {
        *r = ball(&mut rng, 0.5);
    }
    let posed = skin_vertices(&mesh, &pose).unwrap();
    let binding = PolygonBinding::new(&mesh, &mesh.vertices).unwrap();
    let base = binding.frames(&posed, None);
    let base_world = deform_splats(&splats, &base.frames).unwrap();
    let mut equi_err: f64 = 0.0;
    for _ in 0..100 {
        let q = random_rotation(&mut rng);
        let t = ball(&mut rng, 5.0);
        let moved: Vec<Vec3> = posed.iter().map(|v| q * v + t).collect();
        let frames = binding.frames(&moved, None);
        for (a, b) in base.frames.iter().zip(&frames.frames) {
            equi_err = equi_err
                .max((a.scale - b.scale).abs())
                .max(rotation_gap(&(q * a.rotation), &b.rotation))
                .max((q * a.translation + t - b.translation).abs().max());
        }
        let w = deform_splats(&splats, &frames.frames).unwrap();
        for (a, b) in base_world.iter().zip(&w) {
            equi_err = equi_err
                .max((q * a.center + t - b.center).abs().max())
                .max(rotation_gap(&(q * a.rotation), &b.rotation))
                .max((a.scale - b.scale).abs().max());
        }
    }
    report(
        "deformation",
        identity_err <= 1e-12 && equi_err <= 1e-9,
        format!(
            "canonical round trip {identity_err:.1e}, 100 rigid motions over {} frames / {} splats {equi_err:.1e}",
            mesh.num_triangles(),
            splats.len()
        ),
    );
}

// ---------------------------------------------------------------- rasterizer

/// Literal per-pixel compositing: stable depth order, clamped alpha, early
/// stop once transmittance falls under 1e-4.
fn brute_force(splats: &[Projected2D], w: usize, h: usize, bg: &Background) -> (Vec<f64>, Vec<f64>, Vec<f64>, usize) {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| splats[a].depth.partial_cmp(&splats[b].depth).unwrap());
    let inverses: Vec<Option<Matrix2<f64>>> = splats
        .iter()
        .map(|s| {
            let m = Matrix2::new(s.cov[0], s.cov[1], s.cov[1], s.cov[2]);
            m.cholesky().map(|c| c.inverse())
        })
        .collect();
    let skipped = inverses.iter().filter(|i| i.is_none()).count();
    let mut image = vec![0.0; 3 * w * h];
    let mut alpha = vec![0.0; w * h];
    let mut trans = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut c, mut a, mut t) = ([0.0; 3], 0.0, 1.0);
            for &i in &order {
                let Some(inv) = inverses[i] else { continue };
                let s = &splats[i];
                let d = Vector2::new(x as f64 + 0.5 - s.mean[0], y as f64 + 0.5 - s.mean[1]);
                let al = (s.opacity * (-0.5 * d.dot(&(inv * d))).exp()).min(0.99);
                for k in 0..3 {
                    c[k] += t * al * s.color[k];
                }
                a += t * al;
                t *= 1.0 - al;
                if t < 1e-4 {
                    break;
                }
            }
            let p = y * w + x;
            let b = match bg {
                Background::Color(b) => *b,
                Background::Image(img) => img.pixel(x, y),
            };
            for k in 0..3 {
                image[3 * p + k] = c[k] + t * b[k];
            }
            alpha[p] = a;
            trans[p] = t;
        }
    }
    (image, alpha, trans, skipped)
}

fn random_scene(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<Projected2D> {
    let mut out: Vec<Projected2D> = Vec::with_capacity(n);
    for i in 0..n {
        let theta: f64 = rng.random_range(0.0..PI);
        let (s1, s2): (f64, f64) = (rng.random_range(0.4..4.0), rng.random_range(0.4..4.0));
        let (c, s) = (theta.cos(), theta.sin());
        let cov = match rng.random_range(0..20) {
            0 => [1.0, 1.0, 1.0],
            _ => [
                c * c * s1 * s1 + s * s * s2 * s2,
                c * s * (s1 * s1 - s2 * s2),
                s * s * s1 * s1 + c * c * s2 * s2,
            ],
        };
        let depth = if i > 0 && rng.random_range(0..4) == 0 {
            out[rng.random_range(0..i)].depth
        } else {
            rng.random_range(1.0..5.0)
        };
        out.push(Projected2D {
            mean: [rng.random_range(-3.0..11.0), rng.random_range(-3.0..11.0)],
            cov,
            depth,
            color: [rng.random(), rng.random(), rng.random()],
            opacity: if rng.random_range(0..5) == 0 { 1.0 } else { rng.random_range(0.05..1.0) },
        });
    }
    out
}

#[test]
fn rasterizer_matches_brute_force() {
    let mut rng = rng(40);
    let mut scenes: Vec<Vec<Projected2D>> = (0..500).map(|k| random_scene(&mut rng, 1 + k % 16)).collect();
    // an opaque stack that ends compositing early
    scenes.push(
        (0..16)
            .map(|i| Projected2D {
                mean: [4.0, 4.0],
                cov: [30.0, 0.0, 30.0],
                depth: 1.0 + i as f64,
                color: [i as f64 / 16.0, 0.5, 1.0 - i as f64 / 16.0],
                opacity: 1.0,
            })
            .collect(),
    );
    let mut color_err: f64 = 0.0;
    let mut sum_err: f64 = 0.0;
    let mut skip_ok = true;
    for (k, scene) in scenes.iter().enumerate() {
        let bg = if k % 3 == 0 {
            let mut img = Image::new(8, 8);
            for v in img.data.iter_mut() {
                *v = rng.random();
            }
            Background::Image(img)
        } else {
            Background::Color([rng.random(), rng.random(), rng.random()])
        };
        let cfg = RasterConfig { tile_size: [16, 4, 3, 1][k % 4] };
        let out = rasterize(scene, 8, 8, &bg, &cfg).unwrap();
        let (image, _, _, skipped) = brute_force(scene, 8, 8, &bg);
        skip_ok &= skipped == out.skipped;
        for (a, b) in out.image.data.iter().zip(&image) {
            color_err = color_err.max((a - b).abs());
        }
        for (a, t) in out.alpha.iter().zip(&out.transmittance) {
            sum_err = sum_err.max((a + t - 1.0).abs());
        }
    }
    report(
        "rasterizer_oracle",
        color_err <= 1e-5 && sum_err <= 1e-6 && skip_ok,
        format!("{} scenes, max channel error {color_err:.1e}, max |alpha + T - 1| {sum_err:.1e}", scenes.len()),
    );
}

// ----------------------------------------------------------------- gradients

const CLASSES: [(&str, std::ops::Range<usize>); 5] =
    [("position", 0..3), ("rotation", 3..7), ("scale", 7..10), ("color", 10..13), ("opacity", 13..14)];

/// Worst `|fd - an| / (|fd| + |an| + floor)` per parameter class.
fn gradient_errors(mesh: &SkinnedMesh, splats: &[Splat], size: u32, weights: &LossWeights, seed: u64) -> [f64; 5] {
    let mut rng = rng(seed);
    let cam = init_camera(size, size);
    let pose = neutral_pose(mesh, 3.0).unwrap();
    let renderer = AvatarRenderer::new(mesh).unwrap();
    let mut target = Image::new(size as usize, size as usize);
    for v in target.data.iter_mut() {
        *v = rng.random();
    }
    let bg = [0.2, 0.4, 0.6];
    let step = loss_and_gradients(&renderer, splats, &pose, None, &cam, &target, bg, weights, 5, false).unwrap();
    let params = pack_splats(splats);
    let loss = |p: &[f64]| {
        let s = unpack_splats(p, splats);
        loss_and_gradients(&renderer, &s, &pose, None, &cam, &target, bg, weights, 5, false)
            .unwrap()
            .breakdown
            .total
    };
    let eps = 1e-4;
    let mut worst = [0.0f64; 5];
    for i in 0..splats.len() {
        for (c, (_, range)) in CLASSES.iter().enumerate() {
            for k in range.clone() {
                let idx = i * PARAMS_PER_SPLAT + k;
                let mut p = params.clone();
                let mut m = params.clone();
                p[idx] += eps;
                m[idx] -= eps;
                let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
                let an = step.params_grad[idx];
                let rel = (fd - an).abs() / (fd.abs().max(an.abs()) + 1e-6);
                worst[c] = worst[c].max(rel);
            }
        }
    }
    worst
}

#[test]
fn gradient_check() {
    let start = Instant::now();
    let mesh = icosphere(0);
    let mut worst = [0.0f64; 5];
    let mut scenes = 0;
    for seed in 0..3u64 {
        // 11x11 SSIM windows do not fit an 8x8 image
        let splats: Vec<Splat> = varied_splats(&mesh, 50 + seed).into_iter().skip(seed as usize).step_by(2).collect();
        let w = LossWeights { w_ssim: 0.0, ..Default::default() };
        let e = gradient_errors(&mesh, &splats, 8, &w, 60 + seed);
        for c in 0..5 {
            worst[c] = worst[c].max(e[c]);
        }
        scenes += 1;
    }
    let splats: Vec<Splat> = varied_splats(&mesh, 53).into_iter().step_by(2).collect();
    let e = gradient_errors(&mesh, &splats, 16, &LossWeights::default(), 63);
    for c in 0..5 {
        worst[c] = worst[c].max(e[c]);
    }
    scenes += 1;
    let elapsed = start.elapsed().as_secs_f64();
    let detail: Vec<String> = CLASSES.iter().zip(worst).map(|((n, _), e)| format!("{n} {e:.1e}")).collect();
    report(
        "gradient_check",
        worst.iter().all(|&e| e <= 1e-3) && elapsed < 60.0,
        format!("{scenes} scenes of 10 splats, worst relative error: {}; {elapsed:.1} s", detail.join(", ")),
    );
}

// ------------------------------------------------------------------ training

#[derive(Default)]
struct Snapshots(Vec<Checkpoint>);

impl TrainObserver for Snapshots {
    fn checkpoint(&mut self, cp: &Checkpoint) -> meshsplat::error::Result<()> {
        self.0.push(cp.clone());
        Ok(())
    }
}

#[test]
fn toy_training() {
    let mesh = icosphere(2);
    let truth: Vec<Splat> = varied_splats(&mesh, 21)
        .into_iter()
        .enumerate()
        .filter(|(i, _)| i % 8 < 5)
        .map(|(_, s)| s)
        .collect();
    let mut rng = rng(22);
    let mut init = truth.clone();
    for s in init.iter_mut() {
        s.mu_local += Vec3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(-0.01..0.01));
        s.color = s.color.map(|c| (c + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0));
        s.log_scale += Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
        s.opacity = (s.opacity + rng.random_range(-0.15..0.15)).clamp(0.05, 0.95);
    }
    let frames: Vec<_> = (0..4)
        .map(|k| {
            let mut pose = neutral_pose(&mesh, 3.0).unwrap();
            let q = Quat::from_scaled_axis(Vec3::new(0.0, k as f64 * FRAC_PI_2, 0.0))
                * Quat::from_scaled_axis(pose.joint_rotations[0]);
            pose.joint_rotations[0] = q.scaled_axis();
            self_target(&mesh, &truth, &pose, 64)
        })
        .collect();
    let opts = TrainOptions {
        iterations: 2000,
        checkpoint_every: 500,
        ..Default::default()
    };
    let start = Instant::now();
    let mut snaps = Snapshots::default();
    let out = train_with(&mesh, &init, &frames, &opts, &mut snaps).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    // loss over the fixed black background the targets were rendered on
    let renderer = AvatarRenderer::new(&mesh).unwrap();
    let mean_loss = |splats: &[Splat]| {
        frames
            .iter()
            .map(|f| {
                loss_and_gradients(&renderer, splats, &f.pose, None, &f.camera, &f.image, [0.0; 3], &opts.weights, opts.knn_k, false)
                    .unwrap()
                    .breakdown
                    .total
            })
            .sum::<f64>()
            / frames.len() as f64
    };
    let at500 = snaps.0.iter().find(|c| c.iteration == 500).expect("checkpoint at 500");
    let (l0, l500) = (mean_loss(&init), mean_loss(&at500.splats));
    let poses: Vec<_> = frames.iter().map(|f| f.pose.clone()).collect();
    let cams: Vec<_> = frames.iter().map(|f| f.camera.clone()).collect();
    let images: Vec<_> = frames.iter().map(|f| f.image.clone()).collect();
    let before = evaluate(&mesh, &init, &poses, &cams, &images, [0.0; 3]).unwrap();
    let after = evaluate(&mesh, &out.splats, &poses, &cams, &images, [0.0; 3]).unwrap();
    report(
        "toy_training",
        after.mean_psnr > 30.0 && l500 <= 0.5 * l0 && elapsed < 300.0 && out.halted.is_none(),
        format!(
            "{} splats, 4 views 64x64: PSNR {:.2} -> {:.2} dB after 2000 iterations, loss {l0:.4e} -> {l500:.4e} at 500 ({:.0}%), {elapsed:.1} s",
            init.len(),
            before.mean_psnr,
            after.mean_psnr,
            100.0 * l500 / l0
        ),
    );
}

// ------------------------------------------------------------------- fitting

#[test]
fn pose_recovery() {
    let mesh = stick_body(&BodyOptions::default());
    let cam = init_camera(1080, 1080);
    let markers = marker_joints(&mesh);
    let mut rng = rng(11);
    let mut worst_all: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..20 {
        let mut truth = neutral_pose(&mesh, 3.0).unwrap();
        for j in 1..mesh.num_joints() {
            if !markers.contains(&j) {
                truth.joint_rotations[j] = ball(&mut rng, 0.3);
            }
        }
        let (layout, kps) = detections(&mesh, &truth, &cam);
        let mut init = truth.clone();
        for j in 0..mesh.num_joints() {
            if !markers.contains(&j) {
                let q = Quat::from_scaled_axis(ball(&mut rng, 0.1)) * Quat::from_scaled_axis(truth.joint_rotations[j]);
                init.joint_rotations[j] = near(q.scaled_axis(), truth.joint_rotations[j]);
            }
        }
        let frame = KeypointFrame { layout: &layout, keypoints: &kps };
        let opts = FitOptions { free: FreeParams::pose_only(), ..Default::default() };
        let (fit, rep) = fit_frame(&mesh, &init, frame, None, &cam, &opts).unwrap();
        let worst = (0..mesh.num_joints())
            .filter(|j| !markers.contains(j))
            .map(|j| angle_between(fit.joint_rotations[j], truth.joint_rotations[j]))
            .fold(0.0, f64::max);
        worst_all = worst_all.max(worst);
        monotone &= rep.loss_history.windows(2).all(|w| w[1] < w[0]);
    }
    report(
        "pose_recovery",
        worst_all <= 1e-2 && monotone,
        format!("20 trials, worst joint error {worst_all:.2e} rad, strictly decreasing accepted steps: {monotone}"),
    );
}

/// Angle between (eye midpoint - face center) and (face center - camera)
/// in the camera's horizontal plane.
fn view_angle_oracle(mesh: &SkinnedMesh, pose: &PoseParams, cam: &meshsplat::types::Camera) -> f64 {
    let v = skin_vertices(mesh, pose).unwrap();
    let mean = |ids: &[u32]| ids.iter().map(|&i| v[i as usize]).sum::<Vec3>() / ids.len() as f64;
    let ann = &mesh.annotations;
    let center = cam.rotation * mean(&ann.face_center) + cam.translation;
    let eyes = cam.rotation * mean(&ann.eye_midpoint) + cam.translation;
    let a = Vector2::new(eyes.x - center.x, eyes.z - center.z);
    let b = Vector2::new(center.x, center.z);
    (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos()
}

fn turned_pose(mesh: &SkinnedMesh, yaw: f64) -> PoseParams {
    let mut pose = neutral_pose(mesh, 3.0).unwrap();
    let q = Quat::from_scaled_axis(Vec3::new(0.0, yaw, 0.0)) * Quat::from_scaled_axis(pose.joint_rotations[0]);
    pose.joint_rotations[0] = q.scaled_axis();
    pose
}

fn face_target(mesh: &SkinnedMesh, pose: &PoseParams, seed: u64) -> Vec<Vec3> {
    let v = skin_vertices(mesh, pose).unwrap();
    let mut rng = rng(seed);
    mesh.annotations
        .face_vertices
        .iter()
        .map(|&i| v[i as usize] + ball(&mut rng, 0.01))
        .collect()
}

fn face_contribution(mesh: &SkinnedMesh, pose: &PoseParams, target: &[Vec3], w: &LossWeights) -> f64 {
    let cam = init_camera(512, 512);
    let (layout, kps) = detections(mesh, pose, &cam);
    let frame = KeypointFrame { layout: &layout, keypoints: &kps };
    let b = fitting_loss(pose, frame, pose, Some(target), mesh, &cam, w).unwrap();
    ["vertex", "lap", "edge"].iter().map(|t| b.contribution(t)).sum()
}

#[test]
fn face_visibility_gate() {
    let mesh = stick_body(&BodyOptions::default());
    let cam = init_camera(512, 512);
    let w = LossWeights::default();
    let threshold = 135f64.to_radians();
    let (mut on, mut off, mut wrong) = (0, 0, Vec::new());
    let mut check = |yaw: f64, on: &mut usize, off: &mut usize| {
        let pose = turned_pose(&mesh, yaw);
        let angle = view_angle_oracle(&mesh, &pose, &cam);
        if (angle - threshold).abs() < 1e-12 {
            return;
        }
        let target = face_target(&mesh, &pose, 70);
        let l = face_contribution(&mesh, &pose, &target, &w);
        let ok = if angle > threshold {
            *on += 1;
            l > 0.0
        } else {
            *off += 1;
            l == 0.0
        };
        if !ok {
            wrong.push(format!("yaw {:.4}° angle {:.6}° face {l:e}", yaw.to_degrees(), angle.to_degrees()));
        }
    };
    for k in 0..=720 {
        check((k as f64 * 0.5 - 180.0).to_radians(), &mut on, &mut off);
    }
    // bracket the boundary by bisection on the oracle angle
    let (mut lo, mut hi) = (0.0, PI);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if view_angle_oracle(&mesh, &turned_pose(&mesh, mid), &cam) > threshold {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    for d in [1e-9, 1e-7, 1e-5] {
        check(lo - d, &mut on, &mut off);
        check(hi + d, &mut on, &mut off);
    }
    report(
        "face_visibility_gate",
        wrong.is_empty() && on > 0 && off > 0,
        format!(
            "{} poses ({on} above 135°, {off} at or below; boundary at yaw {:.6}°), mismatches: {:?}",
            on + off,
            lo.to_degrees(),
            wrong
        ),
    );
}

// ------------------------------------------------------------------- weights

type Field = fn(&mut LossWeights) -> &mut f64;

/// Weight-zeroing and linearity probe of one term: returns the term's
/// unweighted value and a description of any violation.
fn probe(term: &str, expected: f64, field: Field, base: &LossWeights, total: &dyn Fn(&LossWeights) -> Breakdown) -> (f64, Option<String>) {
    let with = |v: f64| {
        let mut w = base.clone();
        *field(&mut w) = v;
        total(&w).total
    };
    let default = *field(&mut base.clone());
    let zero = with(0.0);
    let unit = with(1.0) - zero;
    let triple = with(3.0) - zero;
    let full = total(base);
    let contribution = full.total - zero;
    let term_ok = full.term(term).is_some_and(|t| {
        t.weight == expected && t.value.is_some_and(|v| (t.contribution - expected * v).abs() <= 1e-12 * t.contribution.abs())
    });
    let ok = default == expected
        && unit > 0.0
        && (triple - 3.0 * unit).abs() <= 1e-9 * triple.abs()
        && (contribution - expected * unit).abs() <= 1e-9 * contribution.abs()
        && term_ok;
    let err = (!ok).then(|| format!("default {default}, unit {unit:e}, triple {triple:e}, contribution {contribution:e}"));
    (unit, err)
}

#[test]
fn loss_coefficients() {
    let mesh = stick_body(&BodyOptions { shape_basis: true, ..Default::default() });
    let cam = init_camera(512, 512);
    let mut rng = rng(80);
    let mut pose = neutral_pose(&mesh, 3.0).unwrap();
    for r in pose.joint_rotations.iter_mut().skip(1) {
        *r = ball(&mut rng, 0.2);
    }
    for b in pose.shape.iter_mut() {
        *b = rng.random_range(-0.5..0.5);
    }
    for o in pose.joint_offsets.iter_mut() {
        *o = ball(&mut rng, 0.02);
    }
    let mut init = pose.clone();
    for r in init.joint_rotations.iter_mut() {
        *r += ball(&mut rng, 0.05);
    }
    let (layout, mut kps) = detections(&mesh, &pose, &cam);
    for k in kps.iter_mut() {
        k.x += rng.random_range(-3.0..3.0);
    }
    let target = face_target(&mesh, &pose, 81);
    let fit_total = |w: &LossWeights| {
        let frame = KeypointFrame { layout: &layout, keypoints: &kps };
        fitting_loss(&pose, frame, &init, Some(&target), &mesh, &cam, w).unwrap()
    };
    let base = LossWeights::default();
    let mut failures = Vec::new();
    let mut checked = Vec::new();
    let mut run = |name: &str, term: &str, expected: f64, field: Field, total: &dyn Fn(&LossWeights) -> Breakdown| {
        checked.push(format!("{name}={expected}"));
        let (unit, err) = probe(term, expected, field, &base, total);
        if let Some(e) = err {
            failures.push(format!("{name}: {e}"));
        }
        unit
    };
    let fit = |w: &LossWeights| fit_total(w);
    run("w_init", "init", 0.1, |w| &mut w.w_init, &fit);
    run("w_vertex", "vertex", 10.0, |w| &mut w.w_vertex, &fit);
    run("w_lap", "lap", 10000.0, |w| &mut w.w_lap, &fit);
    let shape = run("w_shape", "shape", 0.01, |w| &mut w.w_shape, &fit);
    let jo = run("w_jo", "jo", 100.0, |w| &mut w.w_jo, &fit);

    // independent values of the closed-form regularizers
    let init_l1: f64 = pose.to_vector().iter().zip(init.to_vector()).map(|(a, b)| (a - b).abs()).sum();
    let shape_sq: f64 = pose.shape.iter().map(|b| b * b).sum();
    let jo_sq: f64 = pose.joint_offsets.iter().map(|o| o.norm_squared()).sum();
    let full = fit_total(&base);
    let mut value_failures = Vec::new();
    let term_value = |t: &str| full.term(t).and_then(|t| t.value).unwrap();
    for (name, got, want) in [("init", term_value("init"), init_l1), ("shape", shape, shape_sq), ("jo", jo, jo_sq)] {
        if (got - want).abs() > 1e-9 * want.abs() {
            value_failures.push(format!("{name} value {got} vs {want}"));
        }
    }

    let splat_mesh = icosphere(1);
    let splats = varied_splats(&splat_mesh, 82);
    let r = AvatarRenderer::new(&splat_mesh)
        .unwrap()
        .render(&splats, &neutral_pose(&splat_mesh, 3.0).unwrap(), &init_camera(24, 24), &Background::Color([0.1; 3]))
        .unwrap();
    let mut truth = Image::new(24, 24);
    for v in truth.data.iter_mut() {
        *v = rng.random();
    }
    let train_total = |w: &LossWeights| total_gaussian_loss(&r.output.image, &truth, &r.world, w, 5).unwrap();
    run("w_ssim", "ssim", 0.1, |w| &mut w.w_ssim, &train_total);
    run("w_knn", "knn", 0.01, |w| &mut w.w_knn, &train_total);
    // the perceptual slot keeps its weight but contributes nothing
    let lpips = train_total(&base);
    let slot = lpips.term("lpips").unwrap();
    if !(base.w_lpips == 0.01 && slot.weight == 0.01 && !slot.available && slot.contribution == 0.0) {
        value_failures.push("lpips slot".into());
    }
    failures.extend(value_failures);
    checked.push("w_lpips=0.01 (slot)".into());
    report(
        "loss_coefficients",
        failures.is_empty(),
        format!("confirmed {}; failures: {failures:?}", checked.join(", ")),
    );
}

// --------------------------------------------------------------- performance

#[test]
fn performance_floor() {
    let mesh = icosphere(4);
    // five splats per triangle, sized so that together they tile the surface
    let mut splats = init_splats(&mesh, &InitOptions { per_polygon: 5, scale_fraction: 0.2, seed: 90, ..Default::default() }).unwrap();
    splats.truncate(25_000);
    let mut rng = rng(91);
    for s in splats.iter_mut() {
        s.color = Vec3::new(rng.random(), rng.random(), rng.random());
        s.opacity = rng.random_range(0.3..0.9);
    }
    let renderer = AvatarRenderer::new(&mesh).unwrap();
    let cam = init_camera(512, 512);
    let pose = neutral_pose(&mesh, 3.0).unwrap();
    let bg = Background::Color([0.0; 3]);
    renderer.render(&splats, &pose, &cam, &bg).unwrap();
    let mut times: Vec<f64> = (0..7)
        .map(|k| {
            let mut p = pose.clone();
            p.joint_rotations[0] = (Quat::from_scaled_axis(Vec3::new(0.0, 0.3 * k as f64, 0.0))
                * Quat::from_scaled_axis(pose.joint_rotations[0]))
            .scaled_axis();
            let start = Instant::now();
            renderer.render(&splats, &p, &cam, &bg).unwrap();
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let pass = median <= 33.0;
    let detail = format!(
        "25000 splats at 512x512, median {median:.1} ms/frame over 7 poses on {cores} core(s); target 33 ms on 8 cores"
    );
    if pass || cores >= 8 {
        report("performance_floor", pass, detail);
    } else {
        // the stated floor assumes an 8-core machine; below that the
        // measurement is reported but not enforced
        let line = format!("ACCEPTANCE performance_floor: FAIL ({detail}; not enforced below 8 cores)\n");
        let _ = std::io::Write::write_all(&mut std::io::stderr(), line.as_bytes());
    }
}

// --------------------------------------------------------------- determinism

#[test]
fn determinism() {
    let run = || {
        let mesh = icosphere(1);
        let splats = init_splats(&mesh, &InitOptions { per_polygon: 3, seed: 7, ..Default::default() }).unwrap();
        let pose = neutral_pose(&mesh, 3.0).unwrap();
        let frames = vec![self_target(&mesh, &varied_splats(&mesh, 8), &pose, 24); 2];
        let trained = train(&mesh, &splats, &frames, &TrainOptions { iterations: 30, seed: 9, ..Default::default() }).unwrap();
        let image = AvatarRenderer::new(&mesh)
            .unwrap()
            .render(&trained.splats, &pose, &init_camera(32, 32), &Background::Color([0.3; 3]))
            .unwrap()
            .output
            .image;
        let body = stick_body(&BodyOptions::default());
        let cam = init_camera(512, 512);
        let truth = turned_pose(&body, 0.2);
        let (layout, kps) = detections(&body, &truth, &cam);
        let frame = KeypointFrame { layout: &layout, keypoints: &kps };
        let (fit, _) = fit_frame(&body, &neutral_pose(&body, 3.0).unwrap(), frame, None, &cam, &FitOptions::default()).unwrap();
        format!("{:?}{:?}{:?}{:?}", pack_splats(&trained.splats), trained.log, image.data, fit)
    };
    let (a, b) = (run(), run());
    report(
        "determinism",
        a == b,
        format!("seeded init, training, rendering and fitting repeated bit for bit ({} bytes of state)", a.len()),
    );
}
