use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3, Vector4};
use rayon::prelude::*;

use super::{
    prepare, splat_alpha, ProjectedGaussian, RenderOptions, RenderOutput, ViewTransform,
    TRANSMITTANCE_EPS,
};
use crate::scene::{
    rotation_matrix, rotation_matrix_partials, Camera, GaussianCloud, ImageBuffer, SceneError,
    PARAMS_PER_GAUSSIAN,
};

/// Gradients with respect to the unconstrained parameters of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGradients {
    pub positions: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub rotations: Vec<Vector4<f64>>,
    pub colors: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
}

impl CloudGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![Vector3::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            rotations: vec![Vector4::zeros(); n],
            colors: vec![Vector3::zeros(); n],
            opacity_logits: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Same layout as [`GaussianCloud::raw_params`].
    pub fn flat(&self, i: usize) -> [f64; PARAMS_PER_GAUSSIAN] {
        let mut out = [0.0; PARAMS_PER_GAUSSIAN];
        out[0..3].copy_from_slice(self.positions[i].as_slice());
        out[3..6].copy_from_slice(self.log_scales[i].as_slice());
        out[6..10].copy_from_slice(self.rotations[i].as_slice());
        out[10..13].copy_from_slice(self.colors[i].as_slice());
        out[13] = self.opacity_logits[i];
        out
    }

    /// `self += k·other`.
    pub fn add_scaled(&mut self, other: &CloudGradients, k: f64) {
        assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            self.positions[i] += other.positions[i] * k;
            self.log_scales[i] += other.log_scales[i] * k;
            self.rotations[i] += other.rotations[i] * k;
            self.colors[i] += other.colors[i] * k;
            self.opacity_logits[i] += other.opacity_logits[i] * k;
        }
    }

    pub fn norm(&self) -> f64 {
        (0..self.len())
            .map(|i| self.flat(i).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        (0..self.len()).all(|i| self.flat(i).iter().all(|v| v.is_finite()))
    }
}

/// Per-Gaussian image-space gradient:
/// `[∂mean_x, ∂mean_y, ∂Q00, ∂Q01, ∂Q11, ∂opacity, ∂r, ∂g, ∂b]`,
/// where `Q` is the conic and `∂Q01` is the gradient of each off-diagonal entry.
type Grad2d = [f64; 9];

struct Contribution {
    slot: usize,
    alpha: f64,
    gauss: f64,
    d: [f64; 2],
    transmittance: f64,
}

/// Renders like [`super::rasterize`] and backpropagates `d_color`, the
/// gradient of a scalar loss with respect to the rendered RGB image.
pub fn rasterize_with_gradients(
    cloud: &GaussianCloud,
    cam: &Camera,
    opts: &RenderOptions,
    d_color: &ImageBuffer,
) -> Result<(RenderOutput, CloudGradients), SceneError> {
    let (w, h) = (cam.width, cam.height);
    if d_color.width() != w || d_color.height() != h || d_color.channels() != 3 {
        return Err(SceneError::InvalidParameter(format!(
            "gradient image is {}x{}x{}, render is {w}x{h}x3",
            d_color.width(),
            d_color.height(),
            d_color.channels()
        )));
    }
    let prepared = prepare(cloud, cam);
    let bg = Vector3::from(opts.background);

    struct TileResult {
        pixels: Vec<(usize, [f64; 3], f64, u32)>,
        grads: Vec<Grad2d>,
    }

    let results: Vec<TileResult> = prepared
        .tiles
        .par_iter()
        .map(|tile| {
            let mut pixels = Vec::with_capacity((tile.x1 - tile.x0) * (tile.y1 - tile.y0));
            let mut grads = vec![[0.0; 9]; tile.list.len()];
            let mut contribs: Vec<Contribution> = Vec::new();
            for y in tile.y0..tile.y1 {
                for x in tile.x0..tile.x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    contribs.clear();
                    let mut t = 1.0;
                    let mut c = Vector3::zeros();
                    for (slot, &gi) in tile.list.iter().enumerate() {
                        let p = prepared.projected[gi].as_ref().unwrap();
                        let Some((a, g, d)) = splat_alpha(p, px, py) else {
                            continue;
                        };
                        contribs.push(Contribution {
                            slot,
                            alpha: a,
                            gauss: g,
                            d,
                            transmittance: t,
                        });
                        c += p.color * (a * t);
                        t *= 1.0 - a;
                        if opts.early_stop && t < TRANSMITTANCE_EPS {
                            break;
                        }
                    }
                    c += bg * t;
                    let idx = y * w + x;
                    pixels.push((idx, [c.x, c.y, c.z], 1.0 - t, contribs.len() as u32));

                    let g_pix = Vector3::new(
                        d_color.data()[idx * 3],
                        d_color.data()[idx * 3 + 1],
                        d_color.data()[idx * 3 + 2],
                    );
                    if g_pix == Vector3::zeros() {
                        continue;
                    }
                    // Back to front: `behind` is the color composited from
                    // everything after the current contribution.
                    let mut behind = bg;
                    for k in contribs.iter().rev() {
                        let p = prepared.projected[tile.list[k.slot]].as_ref().unwrap();
                        let acc = &mut grads[k.slot];
                        let d_c = g_pix * (k.alpha * k.transmittance);
                        acc[6] += d_c.x;
                        acc[7] += d_c.y;
                        acc[8] += d_c.z;
                        let d_alpha = k.transmittance * g_pix.dot(&(p.color - behind));
                        acc[5] += d_alpha * k.gauss;
                        let d_power = d_alpha * p.opacity * k.gauss;
                        let q = &p.conic;
                        let qd = [
                            q[(0, 0)] * k.d[0] + q[(0, 1)] * k.d[1],
                            q[(1, 0)] * k.d[0] + q[(1, 1)] * k.d[1],
                        ];
                        acc[0] += d_power * qd[0];
                        acc[1] += d_power * qd[1];
                        acc[2] += -0.5 * d_power * k.d[0] * k.d[0];
                        acc[3] += -0.5 * d_power * k.d[0] * k.d[1];
                        acc[4] += -0.5 * d_power * k.d[1] * k.d[1];
                        behind = p.color * k.alpha + behind * (1.0 - k.alpha);
                    }
                }
            }
            TileResult { pixels, grads }
        })
        .collect();

    let n = cloud.len();
    let mut color = ImageBuffer::new(w, h, 3);
    let mut alpha = ImageBuffer::new(w, h, 1);
    let mut contributors = vec![0u32; w * h];
    let mut grad2d: Vec<Grad2d> = vec![[0.0; 9]; n];
    for (tile, res) in prepared.tiles.iter().zip(results) {
        for (idx, c, a, cnt) in res.pixels {
            color.data_mut()[idx * 3..idx * 3 + 3].copy_from_slice(&c);
            alpha.data_mut()[idx] = a;
            contributors[idx] = cnt;
        }
        for (slot, g) in res.grads.iter().enumerate() {
            let dst = &mut grad2d[tile.list[slot]];
            for (d, s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    let view = ViewTransform::new(cam);
    let per_gaussian: Vec<[f64; PARAMS_PER_GAUSSIAN]> = (0..n)
        .into_par_iter()
        .map(|i| match &prepared.projected[i] {
            Some(p) => chain_to_params(cloud, i, p, &view, &grad2d[i]),
            None => [0.0; PARAMS_PER_GAUSSIAN],
        })
        .collect();
    let mut grads = CloudGradients::zeros(n);
    for (i, g) in per_gaussian.iter().enumerate() {
        grads.positions[i] = Vector3::new(g[0], g[1], g[2]);
        grads.log_scales[i] = Vector3::new(g[3], g[4], g[5]);
        grads.rotations[i] = Vector4::new(g[6], g[7], g[8], g[9]);
        grads.colors[i] = Vector3::new(g[10], g[11], g[12]);
        grads.opacity_logits[i] = g[13];
    }
    Ok((
        RenderOutput {
            color,
            alpha,
            contributors,
        },
        grads,
    ))
}

/// Carries an image-space gradient back to the unconstrained parameters.
fn chain_to_params(
    cloud: &GaussianCloud,
    i: usize,
    p: &ProjectedGaussian,
    view: &ViewTransform,
    g2: &Grad2d,
) -> [f64; PARAMS_PER_GAUSSIAN] {
    let mut out = [0.0; PARAMS_PER_GAUSSIAN];
    if g2.iter().all(|v| *v == 0.0) {
        return out;
    }
    let intr = &view.intrinsics;
    let w = &view.rotation;
    let (x, y, z) = (p.p_cam.x, p.p_cam.y, p.p_cam.z);

    // Conic to 2D covariance.
    let g_conic = Matrix2::new(g2[2], g2[3], g2[3], g2[4]);
    let g_cov2d = -(p.conic * g_conic * p.conic);

    // 2D covariance to 3D covariance and to T = J·W.
    let t = p.jw;
    let g_cov3d: Matrix3<f64> = t.transpose() * g_cov2d * t;
    let g_t: Matrix2x3<f64> = g_cov2d * t * p.cov3d * 2.0;
    let g_j: Matrix2x3<f64> = g_t * w.transpose();

    let mut g_pcam = Vector3::new(
        g2[0] * intr.fx / z,
        g2[1] * intr.fy / z,
        -g2[0] * intr.fx * x / (z * z) - g2[1] * intr.fy * y / (z * z),
    );
    let (z2, z3) = (z * z, z * z * z);
    g_pcam.x += g_j[(0, 2)] * (-intr.fx / z2);
    g_pcam.y += g_j[(1, 2)] * (-intr.fy / z2);
    g_pcam.z += g_j[(0, 0)] * (-intr.fx / z2)
        + g_j[(0, 2)] * (2.0 * intr.fx * x / z3)
        + g_j[(1, 1)] * (-intr.fy / z2)
        + g_j[(1, 2)] * (2.0 * intr.fy * y / z3);
    let g_mean = w.transpose() * g_pcam;
    out[0..3].copy_from_slice(g_mean.as_slice());

    // Σ = M·Mᵀ with M = R·S.
    let raw_q = cloud.raw_rotations()[i];
    let q_norm = raw_q.norm();
    let q = raw_q / q_norm;
    let r = rotation_matrix(&q);
    let s = cloud.scale(i);
    let m = r * Matrix3::from_diagonal(&s);
    let g_m = g_cov3d * m * 2.0;
    let rt_gm = r.transpose() * g_m;
    for k in 0..3 {
        out[3 + k] = s[k] * rt_gm[(k, k)];
    }
    let g_r = g_m * Matrix3::from_diagonal(&s);
    let partials = rotation_matrix_partials(&q);
    let g_qhat = Vector4::from_fn(|k, _| g_r.component_mul(&partials[k]).sum());
    let g_q = (g_qhat - q * q.dot(&g_qhat)) / q_norm;
    out[6..10].copy_from_slice(g_q.as_slice());

    out[10] = g2[6];
    out[11] = g2[7];
    out[12] = g2[8];
    let a = p.opacity;
    out[13] = g2[5] * a * (1.0 - a);
    out
}
