use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{COV2D_FLOOR, NEAR_PLANE, SIGMA_CUTOFF};
use crate::scene::{Camera, Gaussian, Intrinsics};

/// A Gaussian after projection into image space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    /// Center in pixel coordinates.
    pub mean2d: Vector2<f64>,
    /// `J·W·Σ·Wᵀ·Jᵀ` plus the diagonal floor.
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Camera-space depth used for sorting.
    pub depth: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    /// Pixel range `[x0, y0, x1, y1)` that can receive a contribution.
    pub bbox: [usize; 4],
    pub(crate) p_cam: Vector3<f64>,
    pub(crate) cov3d: Matrix3<f64>,
    /// `J·W`.
    pub(crate) jw: Matrix2x3<f64>,
}

/// Camera quantities shared by every Gaussian in a view.
#[derive(Debug, Clone, Copy)]
pub struct ViewTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

/// Jacobian of the pinhole projection at camera-space point `p`.
pub fn projection_jacobian(p: &Vector3<f64>, intr: &Intrinsics) -> Matrix2x3<f64> {
    let (x, y, z) = (p.x, p.y, p.z);
    Matrix2x3::new(
        intr.fx / z,
        0.0,
        -intr.fx * x / (z * z),
        0.0,
        intr.fy / z,
        -intr.fy * y / (z * z),
    )
}

impl ViewTransform {
    pub fn new(cam: &Camera) -> Self {
        Self {
            rotation: cam.rotation(),
            translation: cam.translation(),
            intrinsics: cam.intrinsics(),
            width: cam.width,
            height: cam.height,
        }
    }

    /// Projects one Gaussian, or returns `None` when it is culled (behind the
    /// near plane, degenerate, or entirely off screen).
    pub fn project(&self, g: &Gaussian) -> Option<ProjectedGaussian> {
        let p_cam = self.rotation * g.position + self.translation;
        if !(p_cam.z > NEAR_PLANE) {
            return None;
        }
        let cov3d = g.covariance().ok()?;
        let intr = &self.intrinsics;
        let jw = projection_jacobian(&p_cam, intr) * self.rotation;
        let mut cov2d = jw * cov3d * jw.transpose();
        cov2d[(0, 1)] = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
        cov2d[(1, 0)] = cov2d[(0, 1)];
        cov2d[(0, 0)] += COV2D_FLOOR;
        cov2d[(1, 1)] += COV2D_FLOOR;
        let det = cov2d.determinant();
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        let conic =
            Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
        let mean2d = Vector2::new(
            intr.fx * p_cam.x / p_cam.z + intr.cx,
            intr.fy * p_cam.y / p_cam.z + intr.cy,
        );

        let half_trace = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
        let lambda_max = half_trace + (half_trace * half_trace - det).max(0.0).sqrt();
        let radius = SIGMA_CUTOFF * lambda_max.sqrt();
        // Pixel i has center i + 0.5, so it can be hit when
        // |i + 0.5 - mean| <= radius.
        let range = |m: f64, limit: usize| -> (usize, usize) {
            let lo = (m - radius - 0.5).ceil().max(0.0);
            let hi = (m + radius - 0.5).floor() + 1.0;
            let hi = hi.min(limit as f64);
            if !(hi > lo) {
                (0, 0)
            } else {
                (lo as usize, hi as usize)
            }
        };
        let (x0, x1) = range(mean2d.x, self.width);
        let (y0, y1) = range(mean2d.y, self.height);
        if x0 >= x1 || y0 >= y1 {
            return None;
        }
        Some(ProjectedGaussian {
            mean2d,
            cov2d,
            conic,
            depth: p_cam.z,
            color: g.color,
            opacity: g.opacity,
            bbox: [x0, y0, x1, y1],
            p_cam,
            cov3d,
            jw,
        })
    }
}

/// Projects a single Gaussian through `cam`.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Option<ProjectedGaussian> {
    ViewTransform::new(cam).project(g)
}
