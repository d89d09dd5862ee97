use meshsplat::body::BodyModel;
use meshsplat::fitting::{fit_frame, init_camera, neutral_pose, FitOptions, FreeParams, KeypointFrame};
use meshsplat::math::{axis_angle_to_quat, Vec3};
use meshsplat::synthetic::{marker_joints, stick_body, BodyOptions};
use meshsplat::types::{Keypoint, PoseParams, SkinnedMesh};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ball(rng: &mut ChaCha8Rng, radius: f64) -> Vec3 {
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

fn detections(mesh: &SkinnedMesh, pose: &PoseParams, cam: &meshsplat::types::Camera) -> (Vec<String>, Vec<Keypoint>) {
    let fk = BodyModel::new(mesh).unwrap().forward_kinematics(pose).unwrap();
    let layout = mesh.joint_names.clone();
    let kps = (0..mesh.num_joints())
        .map(|j| {
            let [u, v] = cam.project_camera_space(&cam.to_camera(&fk.positions[j])).unwrap();
            Keypoint::new(u, v, 1.0)
        })
        .collect();
    (layout, kps)
}

/// The axis-angle vector of the same rotation closest to `reference`.
fn near(v: Vec3, reference: Vec3) -> Vec3 {
    let theta = v.norm();
    if theta == 0.0 {
        return v;
    }
    let alt = v * (1.0 - std::f64::consts::TAU / theta);
    if (alt - reference).norm() < (v - reference).norm() { alt } else { v }
}

fn angle_between(a: Vec3, b: Vec3) -> f64 {
    axis_angle_to_quat(&a).angle_to(&axis_angle_to_quat(&b))
}

#[test]
fn ground_truth_is_a_fixed_point() {
    let mesh = stick_body(&BodyOptions::default());
    let cam = init_camera(1080, 1080);
    let pose = neutral_pose(&mesh, 3.0).unwrap();
    let (layout, kps) = detections(&mesh, &pose, &cam);
    let frame = KeypointFrame { layout: &layout, keypoints: &kps };
    let (fit, report) = fit_frame(&mesh, &pose, frame, None, &cam, &FitOptions::default()).unwrap();
    assert_eq!(report.iterations, 0);
    assert_eq!(fit, pose);
}

#[test]
fn recovers_perturbed_pose() {
    let mesh = stick_body(&BodyOptions::default());
    let cam = init_camera(1080, 1080);
    let markers = marker_joints(&mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let mut truth = neutral_pose(&mesh, 3.0).unwrap();
        for j in 0..mesh.num_joints() {
            if !markers.contains(&j) && j != 0 {
                truth.joint_rotations[j] = ball(&mut rng, 0.3);
            }
        }
        let (layout, kps) = detections(&mesh, &truth, &cam);
        let mut init = truth.clone();
        for j in 0..mesh.num_joints() {
            if !markers.contains(&j) {
                let q = axis_angle_to_quat(&ball(&mut rng, 0.1)) * axis_angle_to_quat(&truth.joint_rotations[j]);
                init.joint_rotations[j] = near(q.scaled_axis(), truth.joint_rotations[j]);
            }
        }
        let frame = KeypointFrame { layout: &layout, keypoints: &kps };
        let opts = FitOptions { free: FreeParams::pose_only(), ..Default::default() };
        let (fit, report) = fit_frame(&mesh, &init, frame, None, &cam, &opts).unwrap();
        let worst = (0..mesh.num_joints())
            .map(|j| angle_between(fit.joint_rotations[j], truth.joint_rotations[j]))
            .fold(0.0, f64::max);
        println!("trial {trial}: worst {worst:.2e} after {} steps ({})", report.iterations, report.stop_reason);
        assert!(worst <= 1e-2, "trial {trial}: {worst}");
        assert!(report.loss_history.windows(2).all(|w| w[1] < w[0]));
    }
}

