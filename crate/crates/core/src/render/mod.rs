//! CPU splatting of a [`GaussianCloud`] with an analytic backward pass.
//!
//! Each Gaussian is projected with the local affine (EWA) approximation,
//! sorted front to back by camera depth (ties broken by index) and alpha
//! composited per pixel. The image is processed in 16×16 tiles; tiles run in
//! parallel and their gradient buffers are merged in tile order, so results
//! do not depend on the thread count.

mod backward;
mod project;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::scene::{Camera, GaussianCloud, ImageBuffer};

pub use backward::{rasterize_with_gradients, CloudGradients};
pub use project::{project_gaussian, projection_jacobian, ProjectedGaussian, ViewTransform};

/// Added to the diagonal of every 2D covariance (pixels²).
pub const COV2D_FLOOR: f64 = 0.3;
/// Contributions with `α·G` below this are skipped.
pub const ALPHA_THRESHOLD: f64 = 1.0 / 255.0;
/// Mahalanobis radius beyond which a Gaussian contributes nothing.
pub const SIGMA_CUTOFF: f64 = 3.0;
/// Compositing stops once transmittance falls below this (unless disabled).
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
/// Camera-space depth below which Gaussians are culled.
pub const NEAR_PLANE: f64 = 0.01;

pub(crate) const TILE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    /// Stop compositing a pixel once transmittance drops below
    /// [`TRANSMITTANCE_EPS`]. Disabled in oracle mode.
    pub early_stop: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: [1.0; 3],
            early_stop: true,
        }
    }
}

impl RenderOptions {
    pub fn with_background(background: [f64; 3]) -> Self {
        Self {
            background,
            ..Self::default()
        }
    }

    /// Exact compositing with no transmittance early-out.
    pub fn oracle(background: [f64; 3]) -> Self {
        Self {
            background,
            early_stop: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: ImageBuffer,
    pub alpha: ImageBuffer,
    /// Number of Gaussians composited at each pixel, row-major.
    pub contributors: Vec<u32>,
}

/// Projected Gaussians in compositing order plus per-tile work lists.
pub(crate) struct Prepared {
    pub projected: Vec<Option<ProjectedGaussian>>,
    pub tiles: Vec<Tile>,
}

pub(crate) struct Tile {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// Gaussian indices overlapping the tile, front to back.
    pub list: Vec<usize>,
}

pub(crate) fn prepare(cloud: &GaussianCloud, cam: &Camera) -> Prepared {
    let view = ViewTransform::new(cam);
    let projected: Vec<Option<ProjectedGaussian>> =
        cloud.iter().map(|g| view.project(&g)).collect();
    // Front to back by depth, ties broken by index.
    let mut order: Vec<usize> = (0..projected.len())
        .filter(|i| projected[*i].is_some())
        .collect();
    order.sort_by(|a, b| {
        let da = projected[*a].as_ref().map_or(0.0, |p| p.depth);
        let db = projected[*b].as_ref().map_or(0.0, |p| p.depth);
        da.total_cmp(&db).then(a.cmp(b))
    });
    let (w, h) = (cam.width, cam.height);
    let mut tiles = Vec::new();
    for y0 in (0..h).step_by(TILE) {
        for x0 in (0..w).step_by(TILE) {
            let (x1, y1) = ((x0 + TILE).min(w), (y0 + TILE).min(h));
            let list = order
                .iter()
                .copied()
                .filter(|i| {
                    let b = projected[*i].as_ref().map(|p| p.bbox);
                    matches!(b, Some([bx0, by0, bx1, by1]) if bx0 < x1 && bx1 > x0 && by0 < y1 && by1 > y0)
                })
                .collect();
            tiles.push(Tile {
                x0,
                y0,
                x1,
                y1,
                list,
            });
        }
    }
    Prepared { projected, tiles }
}

/// Opacity-weighted footprint of `p` at pixel center `(px, py)`, or `None`
/// when the pixel lies outside the 3σ support or below the alpha threshold.
#[inline]
pub(crate) fn splat_alpha(p: &ProjectedGaussian, px: f64, py: f64) -> Option<(f64, f64, [f64; 2])> {
    let d = [px - p.mean2d.x, py - p.mean2d.y];
    let q = &p.conic;
    let maha = q[(0, 0)] * d[0] * d[0] + 2.0 * q[(0, 1)] * d[0] * d[1] + q[(1, 1)] * d[1] * d[1];
    if maha > SIGMA_CUTOFF * SIGMA_CUTOFF {
        return None;
    }
    let g = (-0.5 * maha).exp();
    let a = p.opacity * g;
    if a < ALPHA_THRESHOLD {
        return None;
    }
    Some((a, g, d))
}

/// Renders `cloud` from `cam`, compositing front to back over the background.
pub fn rasterize(cloud: &GaussianCloud, cam: &Camera, opts: &RenderOptions) -> RenderOutput {
    let prepared = prepare(cloud, cam);
    let (w, h) = (cam.width, cam.height);
    let bg = Vector3::from(opts.background);

    let tile_pixels: Vec<Vec<(usize, [f64; 3], f64, u32)>> = prepared
        .tiles
        .par_iter()
        .map(|tile| {
            let mut out = Vec::with_capacity((tile.x1 - tile.x0) * (tile.y1 - tile.y0));
            for y in tile.y0..tile.y1 {
                for x in tile.x0..tile.x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0;
                    let mut c = Vector3::zeros();
                    let mut n = 0u32;
                    for &gi in &tile.list {
                        let p = prepared.projected[gi].as_ref().unwrap();
                        let Some((a, _, _)) = splat_alpha(p, px, py) else {
                            continue;
                        };
                        c += p.color * (a * t);
                        t *= 1.0 - a;
                        n += 1;
                        if opts.early_stop && t < TRANSMITTANCE_EPS {
                            break;
                        }
                    }
                    c += bg * t;
                    out.push((y * w + x, [c.x, c.y, c.z], 1.0 - t, n));
                }
            }
            out
        })
        .collect();

    let mut color = ImageBuffer::new(w, h, 3);
    let mut alpha = ImageBuffer::new(w, h, 1);
    let mut contributors = vec![0u32; w * h];
    for pixels in tile_pixels {
        for (idx, c, a, n) in pixels {
            color.data_mut()[idx * 3..idx * 3 + 3].copy_from_slice(&c);
            alpha.data_mut()[idx] = a;
            contributors[idx] = n;
        }
    }
    RenderOutput {
        color,
        alpha,
        contributors,
    }
}
