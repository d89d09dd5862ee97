//! Small rotation helpers shared by the body model, the splat binding and the
//! differentiable renderer.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector4};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Flip the sign of `q` so that `w >= 0`; when `w == 0` the first nonzero
/// vector component is made positive.
pub fn canonical_quat(q: Quat) -> Quat {
    let c = q.quaternion().coords; // (x, y, z, w)
    let flip = if c.w != 0.0 {
        c.w < 0.0
    } else if c.x != 0.0 {
        c.x < 0.0
    } else if c.y != 0.0 {
        c.y < 0.0
    } else {
        c.z < 0.0
    };
    if flip {
        Quat::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Quaternion components in `(w, x, y, z)` order.
pub fn quat_wxyz(q: &Quaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

pub fn quat_from_wxyz(v: [f64; 4]) -> Quaternion<f64> {
    Quaternion::new(v[0], v[1], v[2], v[3])
}

/// Closed-form quaternion of a rotation matrix, renormalized. Unlike the
/// iterative nearest-rotation fit this always terminates, including for
/// half turns.
pub fn quat_from_rotation(m: &Mat3) -> Quat {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
    Quat::new_normalize(q.into_inner())
}

pub fn axis_angle_to_quat(v: &Vec3) -> Quat {
    UnitQuaternion::from_scaled_axis(*v)
}

pub fn skew(v: &Vec3) -> Mat3 {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of a unit quaternion given as `(w, x, y, z)`.
pub fn rotation_matrix_wxyz(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient w.r.t. the entries of `rotation_matrix_wxyz(q)` back onto
/// the quaternion components `(w, x, y, z)`.
pub fn rotation_matrix_wxyz_backward(q: [f64; 4], g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = q;
    let g = |r: usize, c: usize| g[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// Matrix `L(p)` with `p ⊗ q = L(p) q` for quaternions stored as `(w, x, y, z)`.
pub fn quat_left_matrix(p: [f64; 4]) -> Matrix4<f64> {
    let [w, x, y, z] = p;
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

pub fn quat_mul_wxyz(p: [f64; 4], q: [f64; 4]) -> [f64; 4] {
    let r = quat_left_matrix(p) * Vector4::new(q[0], q[1], q[2], q[3]);
    [r[0], r[1], r[2], r[3]]
}

/// Vectors `a_k` with `∂ exp([ω]×) / ∂ω_k = [a_k]× exp([ω]×)`.
pub fn exp_map_left_jacobian(omega: &Vec3) -> [Vec3; 3] {
    let theta2 = omega.norm_squared();
    if theta2 < 1e-20 {
        return [Vec3::x(), Vec3::y(), Vec3::z()];
    }
    let rot = axis_angle_to_quat(omega).to_rotation_matrix().into_inner();
    let i_minus_r = Mat3::identity() - rot;
    let mut out = [Vec3::zeros(); 3];
    for (k, a) in out.iter_mut().enumerate() {
        let e = Vec3::ith(k, 1.0);
        *a = (omega * omega[k] + omega.cross(&(i_minus_r * e))) / theta2;
    }
    out
}
