//! Perspective projection of world Gaussians to screen-space ellipses
//! (local-affine approximation of the pinhole map) and its adjoint.

use nalgebra::Matrix2x3;
use rayon::prelude::*;

use crate::binding::WorldGaussian;
use crate::math::{quat_wxyz, rotation_matrix_wxyz, rotation_matrix_wxyz_backward, Mat3, Vec3};
use crate::types::Camera;

pub const NEAR_PLANE: f64 = 0.01;
/// Added to both diagonal entries of every screen covariance.
pub const COV_BLUR: f64 = 0.3;

/// A Gaussian's screen footprint. `cov` holds `(xx, xy, yy)` in pixel².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected2D {
    pub mean: [f64; 2],
    pub cov: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

/// Gradient of a scalar loss w.r.t. one [`Projected2D`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Grad2D {
    pub mean: [f64; 2],
    /// `xy` is treated as one parameter shared by both off-diagonal entries.
    pub cov: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
}

/// Gradient w.r.t. one world Gaussian; `rotation` is in `(w, x, y, z)` order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradWorld {
    pub center: Vec3,
    pub rotation: [f64; 4],
    pub scale: Vec3,
    pub color: Vec3,
    pub opacity: f64,
}

struct Geometry {
    t: Vec3,
    w: Mat3,
    j: Matrix2x3<f64>,
    rot: Mat3,
    sigma: Mat3,
}

fn geometry(g: &WorldGaussian, cam: &Camera) -> Geometry {
    let w = cam.rotation.to_rotation_matrix().into_inner();
    let t = w * g.center + cam.translation;
    let (x, y, z) = (t.x, t.y, t.z);
    let j = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    );
    let rot = rotation_matrix_wxyz(quat_wxyz(g.rotation.quaternion()));
    let m = rot * Mat3::from_diagonal(&g.scale);
    Geometry {
        t,
        w,
        j,
        rot,
        sigma: m * m.transpose(),
    }
}

/// Projects one Gaussian; `None` when it is at or in front of the near
/// plane or its 3σ box misses the viewport.
pub fn project_gaussian(g: &WorldGaussian, cam: &Camera) -> Option<Projected2D> {
    let geo = geometry(g, cam);
    if !(geo.t.z > NEAR_PLANE) {
        return None;
    }
    let tm = geo.j * geo.w;
    let c = tm * geo.sigma * tm.transpose();
    let cov = [c[(0, 0)] + COV_BLUR, c[(0, 1)], c[(1, 1)] + COV_BLUR];
    let mean = [
        cam.fx * geo.t.x / geo.t.z + cam.cx,
        cam.fy * geo.t.y / geo.t.z + cam.cy,
    ];
    let (rx, ry) = (3.0 * cov[0].sqrt(), 3.0 * cov[2].sqrt());
    let misses = mean[0] + rx < 0.0
        || mean[0] - rx > cam.width as f64
        || mean[1] + ry < 0.0
        || mean[1] - ry > cam.height as f64;
    if misses || !mean.iter().chain(&cov).all(|v| v.is_finite()) {
        return None;
    }
    Some(Projected2D {
        mean,
        cov,
        depth: geo.t.z,
        color: g.color.into(),
        opacity: g.opacity,
    })
}

/// Projected splats and, for each, the index of its source Gaussian.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Projection {
    pub splats: Vec<Projected2D>,
    pub source: Vec<usize>,
}

pub fn project_all(gaussians: &[WorldGaussian], cam: &Camera) -> Projection {
    let all: Vec<Option<Projected2D>> = gaussians
        .par_iter()
        .map(|g| project_gaussian(g, cam))
        .collect();
    let mut out = Projection::default();
    for (i, p) in all.into_iter().enumerate() {
        if let Some(p) = p {
            out.splats.push(p);
            out.source.push(i);
        }
    }
    out
}

/// Adjoint of [`project_gaussian`] for a Gaussian that was not culled.
pub fn project_gaussian_backward(g: &WorldGaussian, cam: &Camera, grad: &Grad2D) -> GradWorld {
    let geo = geometry(g, cam);
    let (x, y, z) = (geo.t.x, geo.t.y, geo.t.z);
    let g2 = nalgebra::Matrix2::new(
        grad.cov[0],
        0.5 * grad.cov[1],
        0.5 * grad.cov[1],
        grad.cov[2],
    );
    let tm = geo.j * geo.w;
    // cov = T Σ Tᵀ with symmetric Σ and G
    let d_sigma = tm.transpose() * g2 * tm;
    let d_t = 2.0 * g2 * tm * geo.sigma;
    let d_j = d_t * geo.w.transpose();

    let mut d_cam = Vec3::new(
        grad.mean[0] * cam.fx / z,
        grad.mean[1] * cam.fy / z,
        -grad.mean[0] * cam.fx * x / (z * z) - grad.mean[1] * cam.fy * y / (z * z),
    );
    d_cam.x += d_j[(0, 2)] * (-cam.fx / (z * z));
    d_cam.y += d_j[(1, 2)] * (-cam.fy / (z * z));
    d_cam.z += d_j[(0, 0)] * (-cam.fx / (z * z))
        + d_j[(0, 2)] * (2.0 * cam.fx * x / (z * z * z))
        + d_j[(1, 1)] * (-cam.fy / (z * z))
        + d_j[(1, 2)] * (2.0 * cam.fy * y / (z * z * z));

    // Σ = M Mᵀ, M = R diag(s)
    let m = geo.rot * Mat3::from_diagonal(&g.scale);
    let d_m = 2.0 * d_sigma * m;
    let mut d_scale = Vec3::zeros();
    for k in 0..3 {
        d_scale[k] = d_m.column(k).dot(&geo.rot.column(k));
    }
    let d_rot = d_m * Mat3::from_diagonal(&g.scale);
    GradWorld {
        center: geo.w.transpose() * d_cam,
        rotation: rotation_matrix_wxyz_backward(quat_wxyz(g.rotation.quaternion()), &d_rot),
        scale: d_scale,
        color: Vec3::from(grad.color),
        opacity: grad.opacity,
    }
}
