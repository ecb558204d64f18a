//! Pinhole camera and rigid head pose.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{quat_normalize, quat_to_matrix};

/// Pinhole camera: intrinsics in pixels plus a rigid world-to-camera
/// transform. Camera space has +z pointing into the scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: Matrix4<f64>,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("camera has zero-sized image".into()));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).norm();
        if err > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "world_to_camera rotation block is not orthonormal (|RtR - I| = {err:.2e})"
            )));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera_space(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// New camera rotated by `yaw` radians about the world up axis through
    /// `pivot`, keeping intrinsics.
    pub fn orbited(&self, yaw: f64, pivot: Vector3<f64>) -> Camera {
        let rot = Matrix3::new(
            yaw.cos(),
            0.0,
            yaw.sin(),
            0.0,
            1.0,
            0.0,
            -yaw.sin(),
            0.0,
            yaw.cos(),
        );
        // world' = pivot + rot (world - pivot); camera follows the inverse
        let r_old = self.rotation();
        let t_old = self.translation();
        let r_new = r_old * rot.transpose();
        let t_new = r_old * rot.transpose() * (-pivot) + r_old * pivot + t_old;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_new);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t_new);
        Camera { world_to_camera: m, ..*self }
    }
}

/// Serialized camera record: `w2c` is row-major 4x4.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub w2c: Vec<f64>,
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<Camera> {
        if self.w2c.len() != 16 {
            return Err(Error::InvalidConfig(format!("w2c has {} entries", self.w2c.len())));
        }
        let m = Matrix4::from_row_slice(&self.w2c);
        let cam = Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            world_to_camera: m,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn from_camera(c: &Camera) -> Self {
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            w2c: c.world_to_camera.transpose().as_slice().to_vec(),
        }
    }
}

/// Rigid head pose: rotation as unit quaternion (w,x,y,z) plus translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub quat: [f64; 4],
    pub trans: [f64; 3],
}

impl RigidPose {
    pub fn identity() -> Self {
        Self { quat: [1.0, 0.0, 0.0, 0.0], trans: [0.0, 0.0, 0.0] }
    }

    pub fn is_identity(&self) -> bool {
        self.quat == [1.0, 0.0, 0.0, 0.0] && self.trans == [0.0, 0.0, 0.0]
    }

    pub fn validate(&self) -> Result<()> {
        let n = crate::math::quat_norm(self.quat);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!("pose quaternion norm {n} is not unit")));
        }
        if !self.trans.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("pose translation not finite".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_matrix(quat_normalize(self.quat))
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + Vector3::from(self.trans)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_camera() -> Camera {
        let mut m = Matrix4::identity();
        m[(0, 0)] = -1.0;
        m[(1, 1)] = -1.0;
        m[(2, 3)] = 3.0;
        Camera { fx: 80.0, fy: 80.0, cx: 32.0, cy: 32.0, width: 64, height: 64, world_to_camera: m }
    }

    #[test]
    fn validates_orthonormal_rotation() {
        let cam = test_camera();
        cam.validate().unwrap();
        let mut bad = cam.clone();
        bad.world_to_camera[(0, 1)] = 0.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn orbit_preserves_distance_to_pivot() {
        let cam = test_camera();
        let pivot = Vector3::new(0.0, 0.0, 0.0);
        let d0 = (cam.center() - pivot).norm();
        for yaw in [-0.5, 0.2, 0.5] {
            let c2 = cam.orbited(yaw, pivot);
            c2.validate().unwrap();
            assert!(((c2.center() - pivot).norm() - d0).abs() < 1e-9);
        }
    }

    #[test]
    fn orbit_zero_is_identity() {
        let cam = test_camera();
        let c2 = cam.orbited(0.0, Vector3::zeros());
        assert!((c2.world_to_camera - cam.world_to_camera).norm() < 1e-12);
    }
}
