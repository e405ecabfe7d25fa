use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{residual::sds_residual, DistillError, ResidualMode};
use crate::frequency::{adaptive_cutoff, dft2, make_masks, FrequencyError, FrequencyMask};
use crate::priors::{
    add_noise, Conditioning, Encoder, Latent, NoiseSchedule, ScoreProvider, ScoreRequest,
    TimestepSampler, Weighting,
};
use crate::render::{
    rasterize, rasterize_with_gradients, CloudGradients, RenderOptions, RenderOutput,
};
use crate::scene::{Camera, GaussianCloud, ImageBuffer};

/// Renders whose peak alpha stays below this are treated as empty.
const DEGENERATE_ALPHA: f64 = 1e-6;

/// How a cutoff radius is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CutoffRule {
    /// Smallest radius holding this fraction of the latent's spectral energy.
    Adaptive {
        energy_fraction: f64,
    },
    Fixed(f64),
}

/// Which part of the spectrum a residual keeps.
#[derive(Debug, Clone, PartialEq)]
pub enum Band {
    AllPass,
    Explicit(FrequencyMask),
    Low { cutoff: CutoffRule, softness: f64 },
    High { cutoff: CutoffRule, softness: f64 },
}

/// Diagnostic tag naming the band a gradient came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum BranchTag {
    #[serde(rename = "LF")]
    Low,
    #[serde(rename = "HF")]
    High,
    #[serde(rename = "FULL")]
    Full,
}

impl std::fmt::Display for BranchTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BranchTag::Low => "LF",
            BranchTag::High => "HF",
            BranchTag::Full => "FULL",
        })
    }
}

impl Band {
    pub fn tag(&self) -> BranchTag {
        match self {
            Band::AllPass => BranchTag::Full,
            Band::Low { .. } => BranchTag::Low,
            Band::High { .. } => BranchTag::High,
            Band::Explicit(m) if m.is_all_pass() => BranchTag::Full,
            Band::Explicit(m) => {
                let dc = m.get(m.width() / 2, m.height() / 2);
                if dc >= 0.5 {
                    BranchTag::Low
                } else {
                    BranchTag::High
                }
            }
        }
    }

    /// The mask for a latent of this size. Adaptive rules measure `latent`;
    /// a spectrum with no energy yields cutoff 1.
    pub fn resolve(&self, latent: &Latent) -> Result<FrequencyMask, DistillError> {
        let (w, h) = (latent.width(), latent.height());
        let (rule, softness, low) = match self {
            Band::AllPass => return Ok(FrequencyMask::all_pass(w, h)),
            Band::Explicit(m) => return Ok(m.clone()),
            Band::Low { cutoff, softness } => (cutoff, *softness, true),
            Band::High { cutoff, softness } => (cutoff, *softness, false),
        };
        let cutoff = match *rule {
            CutoffRule::Fixed(c) => c,
            CutoffRule::Adaptive { energy_fraction } => {
                match adaptive_cutoff(&dft2(latent.image()), energy_fraction) {
                    Ok(c) => c,
                    Err(FrequencyError::DegenerateSpectrum) => 1.0,
                    Err(e) => return Err(e.into()),
                }
            }
        };
        let (lo, hi) = make_masks(w, h, cutoff, softness)?;
        Ok(if low { lo } else { hi })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SdsSettings {
    pub schedule: NoiseSchedule,
    pub weighting: Weighting,
    pub mode: ResidualMode,
    pub encoder: Encoder,
}

/// A timestep and injected noise. Reusing one draw across branches gives
/// them shared `(t, ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub timestep: usize,
    pub noise: Latent,
}

impl NoiseDraw {
    pub fn sample(
        rng: &mut impl Rng,
        sampler: &TimestepSampler,
        progress: f64,
        schedule: &NoiseSchedule,
        width: usize,
        height: usize,
        channels: usize,
    ) -> Self {
        let timestep = sampler.sample(rng, progress, schedule.num_steps());
        let noise = Latent::new(ImageBuffer::from_fn(width, height, channels, |_, _, _| {
            rng.sample(StandardNormal)
        }));
        Self { timestep, noise }
    }
}

/// One score query's worth of guidance.
#[derive(Clone)]
pub struct SdsBranch<'a> {
    pub provider: &'a dyn ScoreProvider,
    pub conditioning: Conditioning,
    pub guidance_scale: f64,
    pub band: Band,
}

impl std::fmt::Debug for SdsBranch<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SdsBranch")
            .field("provider", &self.provider.name())
            .field("conditioning", &self.conditioning.tag())
            .field("guidance_scale", &self.guidance_scale)
            .field("band", &self.band)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct SdsGradient {
    /// `∂L/∂x` in pixel space.
    pub pixel_grad: ImageBuffer,
    pub residual: Latent,
    pub timestep: usize,
    pub weight: f64,
    pub cutoff: f64,
    pub branch: BranchTag,
    /// The provider hit a numerical guard.
    pub guarded: bool,
    /// The render was empty and a centering nudge was used instead.
    pub degenerate: bool,
}

/// Pixel-space score distillation gradient `−ω(t)·ℰᵀ r` for a rendered image.
pub fn sds_pixel_gradient(
    image: &ImageBuffer,
    branch: &SdsBranch<'_>,
    settings: &SdsSettings,
    draw: &NoiseDraw,
) -> Result<SdsGradient, DistillError> {
    let z = settings.encoder.encode(image);
    if z.shape() != draw.noise.shape() {
        return Err(DistillError::ShapeMismatch(format!(
            "noise {:?} vs latent {:?}",
            draw.noise.shape(),
            z.shape()
        )));
    }
    let z_t = add_noise(&z, &draw.noise, draw.timestep, &settings.schedule)?;
    let request = ScoreRequest {
        latent: z_t,
        timestep: draw.timestep,
        conditioning: branch.conditioning.clone(),
        guidance_scale: branch.guidance_scale,
    };
    let response = branch
        .provider
        .predict(&request)
        .map_err(|source| DistillError::Provider {
            name: branch.provider.name().to_string(),
            branch: branch.band.tag(),
            source,
        })?;
    if response.noise.shape() != z.shape() {
        return Err(DistillError::ShapeMismatch(format!(
            "provider {} returned {:?} for latent {:?}",
            branch.provider.name(),
            response.noise.shape(),
            z.shape()
        )));
    }
    let mask = branch.band.resolve(&z)?;
    let residual = sds_residual(&draw.noise, &response.noise, &mask, settings.mode)?;
    let weight = settings
        .schedule
        .weight(draw.timestep, settings.weighting)?;
    let grad_z = residual.map(|v| -weight * v);
    let pixel_grad = settings
        .encoder
        .adjoint(&grad_z, image.width(), image.height());
    Ok(SdsGradient {
        pixel_grad,
        residual,
        timestep: draw.timestep,
        weight,
        cutoff: mask.cutoff(),
        branch: branch.band.tag(),
        guarded: response.guarded,
        degenerate: false,
    })
}

/// Renders at `cam` and backpropagates the score distillation gradient to
/// the cloud parameters. An empty render returns a gradient pulling every
/// center toward the camera's optical axis and sets `degenerate`.
pub fn sds_step_grad(
    cloud: &GaussianCloud,
    cam: &Camera,
    opts: &RenderOptions,
    branch: &SdsBranch<'_>,
    settings: &SdsSettings,
    draw: &NoiseDraw,
) -> Result<(CloudGradients, SdsGradient, RenderOutput), DistillError> {
    let render = rasterize(cloud, cam, opts);
    let peak = render.alpha.data().iter().fold(0.0f64, |m, v| m.max(*v));
    if peak < DEGENERATE_ALPHA {
        let grads = centering_nudge(cloud, cam);
        let info = SdsGradient {
            pixel_grad: ImageBuffer::new(cam.width, cam.height, 3),
            residual: Latent::zeros(
                draw.noise.width(),
                draw.noise.height(),
                draw.noise.channels(),
            ),
            timestep: draw.timestep,
            weight: 0.0,
            cutoff: f64::NAN,
            branch: branch.band.tag(),
            guarded: false,
            degenerate: true,
        };
        return Ok((grads, info, render));
    }
    let info = sds_pixel_gradient(&render.color, branch, settings, draw)?;
    let (out, grads) = rasterize_with_gradients(cloud, cam, opts, &info.pixel_grad)?;
    Ok((grads, info, out))
}

fn centering_nudge(cloud: &GaussianCloud, cam: &Camera) -> CloudGradients {
    let origin = cam.position();
    let axis = (cam.target() - origin).normalize();
    let mut grads = CloudGradients::zeros(cloud.len());
    for (g, mu) in grads.positions.iter_mut().zip(cloud.positions()) {
        let rel = mu - origin;
        let off: Vector3<f64> = rel - axis * rel.dot(&axis);
        *g = off;
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::SyntheticProvider;
    use crate::scene::Gaussian;
    use nalgebra::Vector4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob_cloud(x: f64) -> GaussianCloud {
        let mut cloud = GaussianCloud::new();
        cloud
            .push(Gaussian {
                position: Vector3::new(x, 0.0, 0.0),
                scale: Vector3::new(0.3, 0.3, 0.3),
                rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                color: Vector3::new(0.8, 0.2, 0.1),
                opacity: 0.9,
            })
            .unwrap();
        cloud
    }

    #[test]
    fn descent_moves_render_toward_target() {
        let cam = Camera::new(0.0, 0.0, 3.0, 50.0, 16, 16).unwrap();
        let opts = RenderOptions::with_background([1.0; 3]);
        let target = Latent::new(ImageBuffer::filled(16, 16, 3, 1.0));
        let sched = NoiseSchedule::default();
        let provider = SyntheticProvider::new(target, sched.clone()).unwrap();
        let branch = SdsBranch {
            provider: &provider,
            conditioning: Conditioning::Unconditional,
            guidance_scale: 7.5,
            band: Band::AllPass,
        };
        let settings = SdsSettings::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draw = NoiseDraw::sample(
            &mut rng,
            &TimestepSampler::default(),
            0.0,
            &sched,
            16,
            16,
            3,
        );
        let cloud = blob_cloud(0.0);
        let (grads, info, _) =
            sds_step_grad(&cloud, &cam, &opts, &branch, &settings, &draw).unwrap();
        assert!(!info.degenerate);
        // Target is pure background, so opacity should be pushed down.
        assert!(grads.opacity_logits[0] > 0.0);
    }

    #[test]
    fn empty_render_is_flagged_with_centering_nudge() {
        let cam = Camera::new(0.0, 0.0, 3.0, 50.0, 16, 16).unwrap();
        let mut cloud = blob_cloud(0.0);
        cloud.positions_mut()[0] = Vector3::new(0.0, 50.0, 1.0);
        let sched = NoiseSchedule::default();
        let provider = SyntheticProvider::new(Latent::zeros(16, 16, 3), sched.clone()).unwrap();
        let branch = SdsBranch {
            provider: &provider,
            conditioning: Conditioning::Unconditional,
            guidance_scale: 1.0,
            band: Band::AllPass,
        };
        let draw = NoiseDraw {
            timestep: 500,
            noise: Latent::zeros(16, 16, 3),
        };
        let (grads, info, _) = sds_step_grad(
            &cloud,
            &cam,
            &RenderOptions::default(),
            &branch,
            &SdsSettings::default(),
            &draw,
        )
        .unwrap();
        assert!(info.degenerate);
        let step = -grads.positions[0];
        let before = cloud.positions()[0];
        let axis = (cam.target() - cam.position()).normalize();
        let dist = |p: Vector3<f64>| {
            let r = p - cam.position();
            (r - axis * r.dot(&axis)).norm()
        };
        assert!(dist(before + 0.1 * step) < dist(before));
    }

    #[test]
    fn adaptive_band_resolves_complementary_masks() {
        let z = Latent::new(ImageBuffer::from_fn(8, 8, 3, |x, y, _| {
            ((x * y) % 5) as f64
        }));
        let rule = CutoffRule::Adaptive {
            energy_fraction: 0.85,
        };
        let lo = Band::Low {
            cutoff: rule,
            softness: 2.0,
        }
        .resolve(&z)
        .unwrap();
        let hi = Band::High {
            cutoff: rule,
            softness: 2.0,
        }
        .resolve(&z)
        .unwrap();
        for (a, b) in lo.weights().iter().zip(hi.weights()) {
            assert!((a + b - 1.0).abs() < 1e-15);
        }
        let flat = Latent::zeros(8, 8, 3);
        assert_eq!(
            Band::Low {
                cutoff: rule,
                softness: 0.0
            }
            .resolve(&flat)
            .unwrap()
            .cutoff(),
            1.0
        );
    }
}
