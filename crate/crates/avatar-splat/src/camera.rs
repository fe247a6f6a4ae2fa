use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::*;

/// Points closer than this to the camera plane are culled.
pub const NEAR_CLIP: f64 = 0.01;

/// Pinhole camera: intrinsics in pixels, extrinsics as a rigid world-to-camera
/// transform. Camera space looks down +z; pixel (0,0) is the top-left corner
/// and pixel centers sit at half-integer coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4x4 world-to-camera transform.
    pub world_to_camera: [[f64; 4]; 4],
}

impl Camera {
    pub fn new(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64, w2c: Mat4) -> Camera {
        let mut rows = [[0.0; 4]; 4];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = w2c[(i, j)];
            }
        }
        Camera {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            world_to_camera: rows,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::data("camera has zero resolution"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::data(format!(
                "camera focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !is_rigid(&self.w2c(), 1e-6) {
            return Err(Error::data("camera world-to-camera transform is not rigid"));
        }
        Ok(())
    }

    pub fn w2c(&self) -> Mat4 {
        let mut m = Mat4::zeros();
        for i in 0..4 {
            for j in 0..4 {
                m[(i, j)] = self.world_to_camera[i][j];
            }
        }
        m
    }

    pub fn rotation(&self) -> Mat3 {
        rotation_part(&self.w2c())
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vec3 {
        let m = self.w2c();
        let r = rotation_part(&m);
        -(r.transpose() * translation_part(&m))
    }

    pub fn to_camera(&self, p_world: Vec3) -> Vec3 {
        transform_point(&self.w2c(), p_world)
    }

    /// Pixel coordinates and camera-space depth of a world point.
    pub fn project(&self, p_world: Vec3) -> (Vec2, f64) {
        let pc = self.to_camera(p_world);
        (self.project_camera_space(pc), pc.z)
    }

    pub fn project_camera_space(&self, pc: Vec3) -> Vec2 {
        Vec2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        )
    }

    /// Unit direction from the camera center toward a world point.
    pub fn view_dir(&self, p_world: Vec3) -> Vec3 {
        (p_world - self.position()).normalize()
    }

    /// Jacobian of pixel coordinates w.r.t. the camera-space point.
    pub fn projection_jacobian(&self, pc: Vec3) -> nalgebra::Matrix2x3<f64> {
        let inv_z = 1.0 / pc.z;
        nalgebra::Matrix2x3::new(
            self.fx * inv_z,
            0.0,
            -self.fx * pc.x * inv_z * inv_z,
            0.0,
            self.fy * inv_z,
            -self.fy * pc.y * inv_z * inv_z,
        )
    }

    pub fn contains_pixel(&self, uv: Vec2) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x < self.width as f64 && uv.y < self.height as f64
    }

    /// Camera at `eye` looking at `target` with `up` roughly up.
    pub fn look_at(
        width: u32,
        height: u32,
        fov_y_rad: f64,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
    ) -> Camera {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right);
        // Rows of the world-to-camera rotation: x right, y down, z forward.
        let r = Mat3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let t = -(r * eye);
        let fy = 0.5 * height as f64 / (0.5 * fov_y_rad).tan();
        Camera::new(
            width,
            height,
            fy,
            fy,
            0.5 * width as f64,
            0.5 * height as f64,
            compose_rt(&r, t),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_camera() -> Camera {
        Camera::new(64, 48, 100.0, 100.0, 32.0, 24.0, Mat4::identity())
    }

    #[test]
    fn identity_extrinsics_project_through_center() {
        let cam = unit_camera();
        let (uv, z) = cam.project(Vec3::new(0.0, 0.0, 2.0));
        assert_relative_eq!(uv, Vec2::new(32.0, 24.0), epsilon = 1e-12);
        assert_relative_eq!(z, 2.0);
        let (uv, _) = cam.project(Vec3::new(0.5, -0.25, 2.0));
        assert_relative_eq!(uv, Vec2::new(32.0 + 25.0, 24.0 - 12.5), epsilon = 1e-12);
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let cam = unit_camera();
        let pc = Vec3::new(0.4, -0.3, 2.5);
        let jac = cam.projection_jacobian(pc);
        let h = 1e-7;
        for k in 0..3 {
            let mut pp = pc;
            let mut pm = pc;
            pp[k] += h;
            pm[k] -= h;
            let fd = (cam.project_camera_space(pp) - cam.project_camera_space(pm)) / (2.0 * h);
            for r in 0..2 {
                assert_relative_eq!(jac[(r, k)], fd[r], epsilon = 1e-5, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn look_at_centers_target() {
        let cam = Camera::look_at(
            128,
            128,
            0.8,
            Vec3::new(3.0, 1.0, -2.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::y(),
        );
        cam.validate().unwrap();
        let (uv, z) = cam.project(Vec3::new(0.0, 1.0, 0.0));
        assert!(z > 0.0);
        assert_relative_eq!(uv, Vec2::new(64.0, 64.0), epsilon = 1e-9);
        // A point above the target lands higher in the image (smaller v).
        let (uv_up, _) = cam.project(Vec3::new(0.0, 1.5, 0.0));
        assert!(uv_up.y < 64.0);
        assert_relative_eq!(cam.position(), Vec3::new(3.0, 1.0, -2.0), epsilon = 1e-9);
    }

    #[test]
    fn validation_rejects_bad_cameras() {
        let mut cam = unit_camera();
        cam.fx = 0.0;
        assert!(cam.validate().is_err());
        let mut cam = unit_camera();
        cam.world_to_camera[0][0] = 2.0;
        assert!(cam.validate().is_err());
        let mut cam = unit_camera();
        cam.width = 0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn camera_json_roundtrip() {
        let cam = Camera::look_at(64, 64, 0.9, Vec3::new(0.0, 0.5, -3.0), Vec3::zeros(), Vec3::y());
        let json = serde_json::to_string(&cam).unwrap();
        let back: Camera = serde_json::from_str(&json).unwrap();
        assert_eq!(back.width, 64);
        assert_relative_eq!(back.w2c(), cam.w2c(), epsilon = 1e-15);
    }
}
