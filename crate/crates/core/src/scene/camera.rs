//! Look-at pinhole cameras on an orbit around a target point.
//!
//! World space is z-up. Azimuth is measured counterclockwise from +x in the
//! xy-plane and elevation is positive above that plane (polar angle is
//! `90° - elevation`). Camera space follows the x-right, y-down, z-forward
//! convention, and pixel centers sit at half-integer coordinates.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::SceneError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub look_at: [f64; 3],
}

/// Intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn new(
        azimuth: f64,
        elevation: f64,
        distance: f64,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, SceneError> {
        let cam = Self {
            azimuth,
            elevation,
            distance,
            fov_y,
            width,
            height,
            look_at: [0.0; 3],
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_look_at(mut self, look_at: [f64; 3]) -> Self {
        self.look_at = look_at;
        self
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let finite = [self.azimuth, self.elevation, self.distance, self.fov_y]
            .iter()
            .chain(self.look_at.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(SceneError::InvalidParameter(
                "non-finite camera field".into(),
            ));
        }
        if !(self.fov_y > 0.0 && self.fov_y < 180.0) {
            return Err(SceneError::InvalidParameter(format!(
                "fov_y {} outside (0, 180)",
                self.fov_y
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::InvalidParameter("empty image size".into()));
        }
        if !(self.distance > 0.0) {
            return Err(SceneError::InvalidParameter(
                "distance must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn target(&self) -> Vector3<f64> {
        Vector3::from(self.look_at)
    }

    /// World-space camera center.
    pub fn position(&self) -> Vector3<f64> {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        self.target() + dir * self.distance
    }

    /// World-to-camera rotation (rows are the camera's right, down and forward axes).
    pub fn rotation(&self) -> Matrix3<f64> {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        let forward = -Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        // Right is horizontal and perpendicular to the azimuth direction, which
        // stays well defined at the poles.
        let right = Vector3::new(-az.sin(), az.cos(), 0.0);
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        orthonormalize(r)
    }

    /// World-to-camera translation, `t = -R·C`.
    pub fn translation(&self) -> Vector3<f64> {
        -(self.rotation() * self.position())
    }

    /// Transforms a world point into camera space.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * (p - self.position())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let fy = self.height as f64 / (2.0 * (self.fov_y.to_radians() / 2.0).tan());
        Intrinsics {
            fx: fy,
            fy,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
        }
    }

    /// Same intrinsics and target at a different orbit position.
    pub fn at(&self, azimuth: f64, elevation: f64) -> Camera {
        Camera {
            azimuth,
            elevation,
            ..*self
        }
    }

    /// Recovers orbit parameters from extrinsics, assuming this camera's
    /// intrinsics and look-at target.
    pub fn from_extrinsics(
        rotation: &Matrix3<f64>,
        translation: &Vector3<f64>,
        template: &Camera,
    ) -> Result<Camera, SceneError> {
        let center = -(rotation.transpose() * translation);
        let offset = center - template.target();
        let distance = offset.norm();
        if !(distance > 0.0) {
            return Err(SceneError::InvalidParameter(
                "camera coincides with its target".into(),
            ));
        }
        let elevation = (offset.z / distance).clamp(-1.0, 1.0).asin().to_degrees();
        let azimuth = offset.y.atan2(offset.x).to_degrees();
        let cam = Camera {
            azimuth,
            elevation,
            distance,
            ..*template
        };
        cam.validate()?;
        Ok(cam)
    }
}

fn orthonormalize(r: Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => u * v_t,
        _ => r,
    }
}

/// Cameras with uniform azimuth spacing at each listed elevation.
pub fn orbit_cameras(
    n_azimuth: usize,
    elevations: &[f64],
    distance: f64,
    fov_y: f64,
    width: usize,
    height: usize,
) -> Result<Vec<Camera>, SceneError> {
    if n_azimuth == 0 {
        return Err(SceneError::InvalidParameter(
            "n_azimuth must be >= 1".into(),
        ));
    }
    if elevations.is_empty() {
        return Err(SceneError::InvalidParameter("empty elevation list".into()));
    }
    let mut cams = Vec::with_capacity(n_azimuth * elevations.len());
    for &el in elevations {
        for i in 0..n_azimuth {
            let az = 360.0 * i as f64 / n_azimuth as f64;
            cams.push(Camera::new(az, el, distance, fov_y, width, height)?);
        }
    }
    Ok(cams)
}
