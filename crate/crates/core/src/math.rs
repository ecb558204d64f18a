//! Quaternion and small-matrix helpers shared across the pipeline.
//!
//! Quaternions are stored (w, x, y, z).

use nalgebra::{Matrix3, Matrix4};

pub fn quat_norm(q: [f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Unit-normalize; the zero quaternion falls back to identity.
pub fn quat_normalize(q: [f64; 4]) -> [f64; 4] {
    let n = quat_norm(q);
    if n == 0.0 {
        [1.0, 0.0, 0.0, 0.0]
    } else {
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    }
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
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

/// Hamilton product a * b.
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Matrix L(a) with L(a) * b = a ⊗ b for column quaternions.
pub fn quat_left_matrix(a: [f64; 4]) -> Matrix4<f64> {
    let [w, x, y, z] = a;
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

pub fn quat_from_axis_angle(axis: [f64; 3], angle: f64) -> [f64; 4] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (s, c) = ((angle / 2.0).sin(), (angle / 2.0).cos());
    [c, axis[0] / n * s, axis[1] / n * s, axis[2] / n * s]
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn left_matrix_matches_product() {
        let a = quat_normalize([0.9, 0.1, -0.3, 0.2]);
        let b = quat_normalize([0.2, 0.8, 0.4, -0.1]);
        let prod = quat_mul(a, b);
        let l = quat_left_matrix(a);
        let v = l * nalgebra::Vector4::new(b[0], b[1], b[2], b[3]);
        for k in 0..4 {
            assert!((v[k] - prod[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_composition() {
        let a = quat_from_axis_angle([0.0, 1.0, 0.0], 0.7);
        let b = quat_from_axis_angle([1.0, 0.0, 0.0], -0.4);
        let rab = quat_to_matrix(a) * quat_to_matrix(b);
        let rq = quat_to_matrix(quat_mul(a, b));
        assert!((rab - rq).norm() < 1e-12);
    }
}
