//! Image and geometry metrics.

mod image;
mod points;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use image::{gaussian_window, psnr, ssim, PSNR_IDENTICAL_DB, SSIM_SIGMA, SSIM_WINDOW};
pub use points::{
    align_normalize, chamfer, chamfer_brute, f_score, f_score_brute, normalize_unit_box,
    sample_points, GridIndex, PointCloud,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryMetrics {
    pub cd: f64,
    pub fscore: f64,
    pub threshold: f64,
    pub n_points: usize,
    pub alignment: String,
}

/// Samples both clouds with the same seed, normalizes the ground truth to a
/// unit box, aligns the prediction to it by bounding box and reports
/// Chamfer distance and F-score.
pub fn geometry_metrics(
    pred: &crate::scene::GaussianCloud,
    gt: &crate::scene::GaussianCloud,
    n_points: usize,
    threshold: f64,
    seed: u64,
) -> Result<GeometryMetrics, EvalError> {
    use rand::SeedableRng;
    let sample = |c| {
        sample_points(
            c,
            n_points,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        )
    };
    let b = normalize_unit_box(&sample(gt)?)?;
    let a = align_normalize(&normalize_unit_box(&sample(pred)?)?, &b)?;
    Ok(GeometryMetrics {
        cd: chamfer(&a, &b)?,
        fscore: f_score(&a, &b, threshold)?,
        threshold,
        n_points,
        alignment: "bbox".into(),
    })
}
