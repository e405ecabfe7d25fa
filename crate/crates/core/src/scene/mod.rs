//! Gaussian scene representation, cameras and image buffers.

mod camera;
mod geometry;
mod image;
pub mod ply;

use nalgebra::{Matrix3, Vector3, Vector4};
use thiserror::Error;

pub use camera::{orbit_cameras, Camera, Intrinsics};
pub use geometry::{
    covariance_from_params, normalize_quaternion, quaternion_from_matrix, query_gaussian,
    rotation_matrix, rotation_matrix_partials,
};
pub use image::{ImageBuffer, MaskedImage};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate covariance")]
    DegenerateCovariance,
    #[error("image error for {path}: {message}")]
    Image { path: String, message: String },
    #[error("ply error: {0}")]
    Ply(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Logits are clamped so that `sigmoid` stays finite and reaches exactly 0 or 1.
const MAX_LOGIT: f64 = 40.0;

pub fn sigmoid(x: f64) -> f64 {
    if x <= -MAX_LOGIT {
        return 0.0;
    }
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    (p / (1.0 - p)).ln().clamp(-MAX_LOGIT, MAX_LOGIT)
}

/// One Gaussian in activated form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// Unit quaternion `[w, x, y, z]`.
    pub rotation: Vector4<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
}

impl Gaussian {
    pub fn covariance(&self) -> Result<Matrix3<f64>, SceneError> {
        covariance_from_params(&self.scale, &self.rotation)
    }
}

/// The learnable scene: positions, scales, rotations, colors and opacities.
///
/// Scales are stored as logarithms and opacities as logits so unconstrained
/// optimizer steps keep them positive and inside `[0, 1]`. Rotations are kept
/// as raw quaternions and normalized on read.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    positions: Vec<Vector3<f64>>,
    log_scales: Vec<Vector3<f64>>,
    rotations: Vec<Vector4<f64>>,
    colors: Vec<Vector3<f64>>,
    opacity_logits: Vec<f64>,
}

/// Number of unconstrained scalars per Gaussian.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            positions: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
            opacity_logits: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Appends a Gaussian given in activated form.
    pub fn push(&mut self, g: Gaussian) -> Result<(), SceneError> {
        let finite = g
            .position
            .iter()
            .chain(g.scale.iter())
            .chain(g.rotation.iter())
            .chain(g.color.iter())
            .chain(std::iter::once(&g.opacity))
            .all(|v| v.is_finite());
        if !finite {
            return Err(SceneError::InvalidParameter("non-finite Gaussian".into()));
        }
        if g.scale.iter().any(|s| *s <= 0.0) {
            return Err(SceneError::InvalidParameter("non-positive scale".into()));
        }
        if g.rotation.norm() == 0.0 {
            return Err(SceneError::InvalidParameter("zero quaternion".into()));
        }
        self.push_raw(
            g.position,
            g.scale.map(f64::ln),
            normalize_quaternion(g.rotation),
            g.color,
            logit(g.opacity),
        );
        Ok(())
    }

    /// Appends a Gaussian given in the internal unconstrained parameterization.
    pub fn push_raw(
        &mut self,
        position: Vector3<f64>,
        log_scale: Vector3<f64>,
        rotation: Vector4<f64>,
        color: Vector3<f64>,
        opacity_logit: f64,
    ) {
        self.positions.push(position);
        self.log_scales.push(log_scale);
        self.rotations.push(rotation);
        self.colors.push(color);
        self.opacity_logits.push(opacity_logit);
    }

    pub fn gaussian(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.positions[i],
            scale: self.scale(i),
            rotation: self.rotation(i),
            color: self.colors[i],
            opacity: self.opacity(i),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Gaussian> + '_ {
        (0..self.len()).map(|i| self.gaussian(i))
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        self.log_scales[i].map(f64::exp)
    }

    pub fn rotation(&self, i: usize) -> Vector4<f64> {
        normalize_quaternion(self.rotations[i])
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [Vector3<f64>] {
        &mut self.positions
    }

    pub fn log_scales(&self) -> &[Vector3<f64>] {
        &self.log_scales
    }

    pub fn log_scales_mut(&mut self) -> &mut [Vector3<f64>] {
        &mut self.log_scales
    }

    /// Raw (not necessarily unit) quaternions.
    pub fn raw_rotations(&self) -> &[Vector4<f64>] {
        &self.rotations
    }

    pub fn raw_rotations_mut(&mut self) -> &mut [Vector4<f64>] {
        &mut self.rotations
    }

    pub fn colors(&self) -> &[Vector3<f64>] {
        &self.colors
    }

    pub fn colors_mut(&mut self) -> &mut [Vector3<f64>] {
        &mut self.colors
    }

    pub fn opacity_logits(&self) -> &[f64] {
        &self.opacity_logits
    }

    pub fn opacity_logits_mut(&mut self) -> &mut [f64] {
        &mut self.opacity_logits
    }

    /// Renormalizes every quaternion and clamps colors to `[0, 1]`.
    pub fn project_constraints(&mut self) {
        for q in &mut self.rotations {
            *q = normalize_quaternion(*q);
        }
        for c in &mut self.colors {
            *c = c.map(|v| v.clamp(0.0, 1.0));
        }
        for o in &mut self.opacity_logits {
            *o = o.clamp(-MAX_LOGIT, MAX_LOGIT);
        }
    }

    /// Flattens the unconstrained parameters of Gaussian `i` as
    /// `[μ(3), log s(3), q(4), c(3), logit α(1)]`.
    pub fn raw_params(&self, i: usize) -> [f64; PARAMS_PER_GAUSSIAN] {
        let mut out = [0.0; PARAMS_PER_GAUSSIAN];
        out[0..3].copy_from_slice(self.positions[i].as_slice());
        out[3..6].copy_from_slice(self.log_scales[i].as_slice());
        out[6..10].copy_from_slice(self.rotations[i].as_slice());
        out[10..13].copy_from_slice(self.colors[i].as_slice());
        out[13] = self.opacity_logits[i];
        out
    }

    pub fn set_raw_params(&mut self, i: usize, p: &[f64; PARAMS_PER_GAUSSIAN]) {
        self.positions[i] = Vector3::new(p[0], p[1], p[2]);
        self.log_scales[i] = Vector3::new(p[3], p[4], p[5]);
        self.rotations[i] = Vector4::new(p[6], p[7], p[8], p[9]);
        self.colors[i] = Vector3::new(p[10], p[11], p[12]);
        self.opacity_logits[i] = p[13];
    }

    /// Keeps only the Gaussians at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> GaussianCloud {
        let mut out = GaussianCloud::with_capacity(indices.len());
        for &i in indices {
            out.push_raw(
                self.positions[i],
                self.log_scales[i],
                self.rotations[i],
                self.colors[i],
                self.opacity_logits[i],
            );
        }
        out
    }

    /// Axis-aligned bounds of the centers, or `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.positions.first()?;
        Some(
            self.positions
                .iter()
                .fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))),
        )
    }

    /// Uniformly rescales and recenters positions (and scales) so the
    /// centers' bounding box fits `[-half_extent, half_extent]³`.
    pub fn normalize_to_box(&mut self, half_extent: f64) {
        let Some((lo, hi)) = self.bounds() else {
            return;
        };
        let extent = (hi - lo).max();
        let center = (lo + hi) * 0.5;
        let factor = if extent > 0.0 {
            2.0 * half_extent / extent
        } else {
            1.0
        };
        for p in &mut self.positions {
            *p = (*p - center) * factor;
        }
        let log_factor = factor.ln();
        for s in &mut self.log_scales {
            *s = s.add_scalar(log_factor);
        }
    }
}
