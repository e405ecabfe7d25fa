use super::{Conditioning, Encoder, Latent, NoiseSchedule, PriorError};
use crate::render::{rasterize, RenderOptions};
use crate::scene::{Camera, GaussianCloud};

/// One query of a noise predictor: `ε_θ(z_t, t, conditioning)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub latent: Latent,
    pub timestep: usize,
    pub conditioning: Conditioning,
    pub guidance_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResponse {
    pub noise: Latent,
    /// Set when the provider hit a numerical guard and returned a fallback.
    pub guarded: bool,
}

/// A noise predictor. Implementations apply classifier-free guidance
/// themselves using `guidance_scale`.
pub trait ScoreProvider: Send + Sync {
    fn name(&self) -> &str;

    fn predict(&self, request: &ScoreRequest) -> Result<ScoreResponse, PriorError>;
}

/// The optimal denoiser for a point mass at `target`:
/// `ε_θ(z_t, t) = (z_t − √ᾱ_t·target)/√(1−ᾱ_t)`.
///
/// It ignores conditioning, so the conditional and unconditional predictions
/// coincide and guidance has no effect.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    target: Latent,
    schedule: NoiseSchedule,
}

impl SyntheticProvider {
    pub fn new(target: Latent, schedule: NoiseSchedule) -> Result<Self, PriorError> {
        if target.data().iter().any(|v| !v.is_finite()) {
            return Err(PriorError::ShapeMismatch(
                "target has non-finite values".into(),
            ));
        }
        Ok(Self { target, schedule })
    }

    pub fn target(&self) -> &Latent {
        &self.target
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

pub(crate) fn point_mass_noise(
    z_t: &Latent,
    target: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<ScoreResponse, PriorError> {
    z_t.check_shape(target)?;
    let a = schedule.alpha_bar(t)?;
    let sigma = (1.0 - a).sqrt();
    if !(sigma > 0.0) {
        return Ok(ScoreResponse {
            noise: z_t.map(|_| 0.0),
            guarded: true,
        });
    }
    let sa = a.sqrt();
    Ok(ScoreResponse {
        noise: z_t.zip_map(target, |z, x| (z - sa * x) / sigma),
        guarded: false,
    })
}

impl ScoreProvider for SyntheticProvider {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn predict(&self, request: &ScoreRequest) -> Result<ScoreResponse, PriorError> {
        point_mass_noise(
            &request.latent,
            &self.target,
            request.timestep,
            &self.schedule,
        )
    }
}

/// A view-conditioned synthetic prior: the target is a ground-truth scene
/// rendered at the camera encoded in the [`super::ViewCondition`], relative to
/// a fixed reference camera.
#[derive(Debug, Clone)]
pub struct SceneOracleProvider {
    scene: GaussianCloud,
    reference_cam: Camera,
    options: RenderOptions,
    encoder: Encoder,
    schedule: NoiseSchedule,
}

impl SceneOracleProvider {
    pub fn new(
        scene: GaussianCloud,
        reference_cam: Camera,
        options: RenderOptions,
        encoder: Encoder,
        schedule: NoiseSchedule,
    ) -> Self {
        Self {
            scene,
            reference_cam,
            options,
            encoder,
            schedule,
        }
    }

    /// The encoded ground-truth render at `cam`.
    pub fn target_at(&self, cam: &Camera) -> Latent {
        self.encoder
            .encode(&rasterize(&self.scene, cam, &self.options).color)
    }
}

impl ScoreProvider for SceneOracleProvider {
    fn name(&self) -> &str {
        "scene_oracle"
    }

    fn predict(&self, request: &ScoreRequest) -> Result<ScoreResponse, PriorError> {
        let Conditioning::View(view) = &request.conditioning else {
            return Err(PriorError::Unsupported(format!(
                "scene oracle needs view conditioning, got {}",
                request.conditioning.tag()
            )));
        };
        let cam = view.target_camera(&self.reference_cam)?;
        let target = self.target_at(&cam);
        point_mass_noise(&request.latent, &target, request.timestep, &self.schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{add_noise, ViewCondition};
    use crate::scene::{Gaussian, ImageBuffer};
    use nalgebra::{Vector3, Vector4};

    fn request(latent: Latent, t: usize) -> ScoreRequest {
        ScoreRequest {
            latent,
            timestep: t,
            conditioning: Conditioning::Unconditional,
            guidance_scale: 7.5,
        }
    }

    #[test]
    fn fixed_point_returns_injected_noise() {
        let sched = NoiseSchedule::default();
        let target = Latent::new(ImageBuffer::from_fn(4, 4, 3, |x, y, c| {
            (x * y + c) as f64 / 10.0
        }));
        let eps = Latent::new(ImageBuffer::from_fn(4, 4, 3, |x, y, c| {
            (x as f64 - y as f64 + c as f64) / 3.0
        }));
        let p = SyntheticProvider::new(target.clone(), sched.clone()).unwrap();
        for t in [20, 400, 979] {
            let zt = add_noise(&target, &eps, t, &sched).unwrap();
            let out = p.predict(&request(zt, t)).unwrap();
            assert!(out.noise.max_abs_diff(&eps) < 1e-12);
        }
    }

    #[test]
    fn offset_residual_matches_closed_form() {
        let sched = NoiseSchedule::default();
        let target = Latent::new(ImageBuffer::filled(2, 2, 1, 0.4));
        let delta = 0.15;
        let z = target.map(|v| v + delta);
        let eps = Latent::new(ImageBuffer::from_fn(2, 2, 1, |x, y, _| {
            x as f64 - 0.5 * y as f64
        }));
        let t = 300;
        let zt = add_noise(&z, &eps, t, &sched).unwrap();
        let pred = SyntheticProvider::new(target, sched.clone())
            .unwrap()
            .predict(&request(zt, t))
            .unwrap();
        let a = sched.alpha_bar(t).unwrap();
        let expected = -a.sqrt() * delta / (1.0 - a).sqrt();
        for (e, p) in eps.data().iter().zip(pred.noise.data()) {
            assert!(((e - p) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn guard_at_clean_endpoint() {
        let sched = NoiseSchedule::from_alpha_bars(vec![1.0, 0.5]).unwrap();
        let p = SyntheticProvider::new(Latent::zeros(2, 2, 1), sched).unwrap();
        let out = p
            .predict(&request(Latent::new(ImageBuffer::filled(2, 2, 1, 0.3)), 0))
            .unwrap();
        assert!(out.guarded);
        assert!(out.noise.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn descent_on_small_latent_converges() {
        let sched = NoiseSchedule::default();
        let target = Latent::new(ImageBuffer::from_fn(2, 2, 1, |x, y, _| {
            0.2 + 0.3 * x as f64 + 0.1 * y as f64
        }));
        let p = SyntheticProvider::new(target.clone(), sched.clone()).unwrap();
        let eps = Latent::new(ImageBuffer::from_fn(2, 2, 1, |x, y, _| {
            if (x + y) % 2 == 0 {
                0.8
            } else {
                -1.1
            }
        }));
        let mut z = Latent::zeros(2, 2, 1);
        let t = 500;
        let mut steps = 0;
        while z.max_abs_diff(&target) >= 1e-3 && steps < 500 {
            let zt = add_noise(&z, &eps, t, &sched).unwrap();
            let pred = p.predict(&request(zt, t)).unwrap().noise;
            z = z.zip_map(&pred.zip_map(&eps, |p, e| p - e), |zv, g| zv - 0.1 * g);
            steps += 1;
        }
        assert!(z.max_abs_diff(&target) < 1e-3, "{steps} steps");
    }

    #[test]
    fn scene_oracle_matches_direct_render() {
        let mut scene = GaussianCloud::new();
        scene
            .push(Gaussian {
                position: Vector3::new(0.0, 0.1, 0.0),
                scale: Vector3::new(0.2, 0.1, 0.1),
                rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                color: Vector3::new(0.9, 0.2, 0.1),
                opacity: 0.8,
            })
            .unwrap();
        let reference = Camera::new(0.0, 0.0, 1.5, 49.1, 16, 16).unwrap();
        let cam = reference.at(60.0, 15.0);
        let sched = NoiseSchedule::default();
        let oracle = SceneOracleProvider::new(
            scene.clone(),
            reference,
            RenderOptions::default(),
            Encoder::Identity,
            sched.clone(),
        );
        let target = oracle.target_at(&cam);
        let direct = Latent::new(rasterize(&scene, &cam, &RenderOptions::default()).color);
        assert!(target.max_abs_diff(&direct) < 1e-9);
        let cond = Conditioning::View(
            ViewCondition::relative(ImageBuffer::new(16, 16, 3), &reference, &cam).unwrap(),
        );
        let eps = Latent::new(ImageBuffer::filled(16, 16, 3, 0.5));
        let zt = add_noise(&direct, &eps, 250, &sched).unwrap();
        let out = oracle
            .predict(&ScoreRequest {
                latent: zt,
                timestep: 250,
                conditioning: cond,
                guidance_scale: 5.0,
            })
            .unwrap();
        assert!(out.noise.max_abs_diff(&eps) < 1e-6);
        let text = ScoreRequest {
            latent: direct,
            timestep: 250,
            conditioning: Conditioning::Text(vec![0.0; 4]),
            guidance_scale: 7.5,
        };
        assert!(matches!(
            oracle.predict(&text),
            Err(PriorError::Unsupported(_))
        ));
    }
}
