use nalgebra::{Matrix3, Vector3};

use super::PriorError;
use crate::scene::{Camera, ImageBuffer};

/// Conditioning passed to a score provider.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioning {
    /// An opaque embedding produced by an external text encoder.
    Text(Vec<f64>),
    View(ViewCondition),
    Unconditional,
}

impl Conditioning {
    pub fn tag(&self) -> &'static str {
        match self {
            Conditioning::Text(_) => "text",
            Conditioning::View(_) => "view",
            Conditioning::Unconditional => "unconditional",
        }
    }
}

/// Reference image plus the pose of the target view relative to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewCondition {
    reference: ImageBuffer,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl ViewCondition {
    pub fn new(
        reference: ImageBuffer,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, PriorError> {
        let err = (rotation * rotation.transpose() - Matrix3::identity())
            .abs()
            .max();
        if !(err <= 1e-6) {
            return Err(PriorError::InvalidConditioning(format!(
                "rotation is not orthonormal (error {err:e})"
            )));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(PriorError::InvalidConditioning(
                "non-finite translation".into(),
            ));
        }
        Ok(Self {
            reference,
            rotation,
            translation,
        })
    }

    /// Pose of `cam` relative to `reference_cam`: a point in the reference
    /// camera frame maps to `R·p + T` in the target camera frame.
    pub fn relative(
        reference: ImageBuffer,
        reference_cam: &Camera,
        cam: &Camera,
    ) -> Result<Self, PriorError> {
        let (r_ref, t_ref) = (reference_cam.rotation(), reference_cam.translation());
        let (r_cam, t_cam) = (cam.rotation(), cam.translation());
        let rotation = r_cam * r_ref.transpose();
        let translation = t_cam - rotation * t_ref;
        Self::new(reference, rotation, translation)
    }

    pub fn reference(&self) -> &ImageBuffer {
        &self.reference
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// World-to-camera extrinsics of the target view, given the reference camera.
    pub fn target_extrinsics(&self, reference_cam: &Camera) -> (Matrix3<f64>, Vector3<f64>) {
        let r = self.rotation * reference_cam.rotation();
        let t = self.translation + self.rotation * reference_cam.translation();
        (r, t)
    }

    /// Recovers the target camera, assuming the reference camera's intrinsics
    /// and look-at target.
    pub fn target_camera(&self, reference_cam: &Camera) -> Result<Camera, PriorError> {
        let (r, t) = self.target_extrinsics(reference_cam);
        Camera::from_extrinsics(&r, &t, reference_cam)
            .map_err(|e| PriorError::InvalidConditioning(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_pose_recovers_target_camera() {
        let reference = Camera::new(0.0, 0.0, 1.5, 49.1, 8, 8).unwrap();
        let cam = reference.at(75.0, 20.0);
        let cond = ViewCondition::relative(ImageBuffer::new(8, 8, 3), &reference, &cam).unwrap();
        let back = cond.target_camera(&reference).unwrap();
        assert!((back.azimuth - 75.0).abs() < 1e-9);
        assert!((back.elevation - 20.0).abs() < 1e-9);
        let same =
            ViewCondition::relative(ImageBuffer::new(8, 8, 3), &reference, &reference).unwrap();
        assert!((same.rotation() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(same.translation().norm() < 1e-12);
    }

    #[test]
    fn rejects_non_rotation() {
        let r = Matrix3::identity() * 2.0;
        assert!(ViewCondition::new(ImageBuffer::new(2, 2, 3), r, Vector3::zeros()).is_err());
    }
}
