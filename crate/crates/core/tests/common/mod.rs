#![allow(dead_code)]

use std::io::Write;

use meshsplat::binding::{init_splats, InitOptions};
use meshsplat::body::BodyModel;
use meshsplat::fitting::init_camera;
use meshsplat::math::{axis_angle_to_quat, Quat, Vec3};
use meshsplat::raster::Background;
use meshsplat::trainer::{AvatarRenderer, TrainFrame};
use meshsplat::types::{Camera, Keypoint, PoseParams, SkinnedMesh, Splat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Prints one result line past the test harness's output capture, then
/// fails the test if the criterion did not hold.
pub fn report(name: &str, pass: bool, detail: impl AsRef<str>) {
    let line = format!(
        "ACCEPTANCE {name}: {} ({})\n",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{}", line.trim_end());
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ball(rng: &mut ChaCha8Rng, radius: f64) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm() <= 1.0 {
            return v * radius;
        }
    }
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Quat {
    Quat::from_scaled_axis(ball(rng, std::f64::consts::PI))
}

/// Canonical splats with randomized offsets, orientations, sizes, colors
/// and opacities.
pub fn varied_splats(mesh: &SkinnedMesh, seed: u64) -> Vec<Splat> {
    let mut rng = rng(seed);
    let mut splats = init_splats(mesh, &InitOptions::default()).unwrap();
    for s in splats.iter_mut() {
        s.mu_local = Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.02..0.02));
        s.rot_local = Quat::from_scaled_axis(Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        s.log_scale += Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        s.color = Vec3::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
        s.opacity = rng.random_range(0.2..0.8);
    }
    splats
}

/// A training view rendered from `splats` over black, with its alpha mask.
pub fn self_target(mesh: &SkinnedMesh, splats: &[Splat], pose: &PoseParams, size: u32) -> TrainFrame {
    let cam = init_camera(size, size);
    let r = AvatarRenderer::new(mesh)
        .unwrap()
        .render(splats, pose, &cam, &Background::Color([0.0; 3]))
        .unwrap();
    TrainFrame {
        pose: pose.clone(),
        camera: cam,
        image: r.output.image,
        alpha: Some(r.output.alpha),
    }
}

/// Every joint projected through `cam` as a fully confident keypoint.
pub fn detections(mesh: &SkinnedMesh, pose: &PoseParams, cam: &Camera) -> (Vec<String>, Vec<Keypoint>) {
    let fk = BodyModel::new(mesh).unwrap().forward_kinematics(pose).unwrap();
    let kps = (0..mesh.num_joints())
        .map(|j| {
            let [u, v] = cam.project_camera_space(&cam.to_camera(&fk.positions[j])).unwrap();
            Keypoint::new(u, v, 1.0)
        })
        .collect();
    (mesh.joint_names.clone(), kps)
}

/// The axis-angle vector of the same rotation closest to `reference`.
pub fn near(v: Vec3, reference: Vec3) -> Vec3 {
    let theta = v.norm();
    if theta == 0.0 {
        return v;
    }
    let alt = v * (1.0 - std::f64::consts::TAU / theta);
    if (alt - reference).norm() < (v - reference).norm() { alt } else { v }
}

pub fn angle_between(a: Vec3, b: Vec3) -> f64 {
    axis_angle_to_quat(&a).angle_to(&axis_angle_to_quat(&b))
}
