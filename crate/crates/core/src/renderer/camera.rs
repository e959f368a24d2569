use std::f64::consts::PI;

use nalgebra::Matrix3;

use super::RenderError;
use crate::Vec3;

/// Pinhole camera. Camera axes follow the computer-vision convention:
/// `x` right, `y` down, `z` forward. `rotation` maps world vectors into
/// that frame, so a world point `p` has camera coordinates
/// `rotation * (p - center)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    rotation: Matrix3<f64>,
    center: Vec3,
    fov_y: f64,
    width: usize,
    height: usize,
}

impl Camera {
    /// Camera on a sphere of radius `distance` around `look_at`, at zenith
    /// `theta` (from `+z`) and azimuth `phi` (from `+x`), aimed at `look_at`
    /// with `+z` as the up hint.
    pub fn orbit(
        theta: f64,
        phi: f64,
        distance: f64,
        look_at: Vec3,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, RenderError> {
        if !(distance > 0.0) {
            return Err(RenderError::InvalidCamera(format!("distance {distance} must be positive")));
        }
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        let eye = look_at + Vec3::new(st * cp, st * sp, ct) * distance;
        Self::looking_at(eye, look_at, fov_y, width, height)
    }

    /// Camera at `eye` aimed at `target`, keeping `+z` up where possible.
    pub fn looking_at(eye: Vec3, target: Vec3, fov_y: f64, width: usize, height: usize) -> Result<Self, RenderError> {
        let forward = target - eye;
        if forward.norm() <= 0.0 {
            return Err(RenderError::InvalidCamera("eye coincides with target".into()));
        }
        let forward = forward.normalize();
        let up = if forward.cross(&Vec3::z()).norm() < 1e-9 { Vec3::y() } else { Vec3::z() };
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self::with_rotation(rotation, eye, fov_y, width, height)
    }

    /// From a world-to-camera pose `x_cam = rotation * x_world + translation`.
    pub fn from_pose(
        rotation: Matrix3<f64>,
        translation: Vec3,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, RenderError> {
        let center = -(rotation.transpose() * translation);
        Self::with_rotation(rotation, center, fov_y, width, height)
    }

    fn with_rotation(
        rotation: Matrix3<f64>,
        center: Vec3,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, RenderError> {
        if !(fov_y > 0.0 && fov_y < PI) {
            return Err(RenderError::InvalidCamera(format!("field of view {fov_y} outside (0, pi)")));
        }
        if width == 0 || height == 0 {
            return Err(RenderError::InvalidCamera("image dimensions must be at least 1".into()));
        }
        let orthonormality = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        if !(orthonormality < 1e-6) || rotation.determinant() < 0.0 {
            return Err(RenderError::InvalidCamera("rotation is not a proper rotation".into()));
        }
        Ok(Self { rotation, center, fov_y, width, height })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        -(self.rotation * self.center)
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn fov_y(&self) -> f64 {
        self.fov_y
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Same pose with a different image size.
    pub fn with_resolution(&self, width: usize, height: usize) -> Self {
        Self { width, height, ..self.clone() }
    }

    pub fn focal_px(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y).tan()
    }

    pub fn to_world(&self, v_cam: &Vec3) -> Vec3 {
        self.rotation.transpose() * v_cam
    }

    pub fn to_camera(&self, v_world: &Vec3) -> Vec3 {
        self.rotation * v_world
    }

    /// Unit world direction through the center of pixel `(px, py)`.
    pub fn ray_direction(&self, px: usize, py: usize) -> Vec3 {
        let f = self.focal_px();
        let d = Vec3::new(
            (px as f64 + 0.5 - 0.5 * self.width as f64) / f,
            (py as f64 + 0.5 - 0.5 * self.height as f64) / f,
            1.0,
        );
        self.to_world(&d).normalize()
    }

    /// Continuous pixel coordinates of a world point in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        let c = self.rotation * (p - self.center);
        if c.z <= 0.0 {
            return None;
        }
        let f = self.focal_px();
        Some((f * c.x / c.z + 0.5 * self.width as f64, f * c.y / c.z + 0.5 * self.height as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn orbit_camera_looks_at_target() {
        let cam = Camera::orbit(0.7, 2.1, 4.0, Vec3::zeros(), 0.6, 64, 48).unwrap();
        assert_relative_eq!(cam.center().norm(), 4.0, epsilon = 1e-12);
        let (u, v) = cam.project(&Vec3::zeros()).unwrap();
        assert_relative_eq!(u, 32.0, epsilon = 1e-9);
        assert_relative_eq!(v, 24.0, epsilon = 1e-9);
        // +z projects upward (smaller v) for a camera above the equator
        let (_, v_up) = cam.project(&Vec3::new(0.0, 0.0, 0.1)).unwrap();
        assert!(v_up < 24.0);
    }

    #[test]
    fn pose_round_trip() {
        let cam = Camera::orbit(1.2, -0.4, 3.0, Vec3::new(0.1, 0.2, 0.3), 0.9, 10, 10).unwrap();
        let back = Camera::from_pose(*cam.rotation(), cam.translation(), cam.fov_y(), 10, 10).unwrap();
        assert_relative_eq!(back.center(), cam.center(), epsilon = 1e-12);
    }

    #[test]
    fn polar_camera_uses_fallback_up() {
        let cam = Camera::orbit(0.0, 0.0, 2.0, Vec3::zeros(), 0.5, 9, 9).unwrap();
        assert_relative_eq!(cam.ray_direction(4, 4), -Vec3::z(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(Camera::orbit(1.0, 0.0, 0.0, Vec3::zeros(), 0.5, 9, 9).is_err());
        assert!(Camera::orbit(1.0, 0.0, 1.0, Vec3::zeros(), PI, 9, 9).is_err());
        assert!(Camera::orbit(1.0, 0.0, 1.0, Vec3::zeros(), 0.5, 0, 9).is_err());
        assert!(Camera::from_pose(Matrix3::identity() * 2.0, Vec3::zeros(), 0.5, 9, 9).is_err());
    }

    #[test]
    fn ray_through_projection_hits_the_pixel() {
        let cam = Camera::orbit(1.0, 0.3, 5.0, Vec3::zeros(), 0.8, 40, 30).unwrap();
        let d = cam.ray_direction(7, 21);
        let (u, v) = cam.project(&(cam.center() + d * 3.0)).unwrap();
        assert_relative_eq!(u, 7.5, epsilon = 1e-9);
        assert_relative_eq!(v, 21.5, epsilon = 1e-9);
    }
}
