use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    reference_loss_grad, sds_step_grad, Adam, AdamConfig, Band, CutoffRule, DistillError,
    LearningRates, NoiseDraw, ResidualMode, SdsBranch, SdsSettings,
};
use crate::evaluation::psnr;
use crate::frequency::{adaptive_cutoff, dft2, FrequencyError};
use crate::priors::{
    Conditioning, Encoder, NoiseSchedule, ScoreProvider, TimestepSampler, ViewCondition, Weighting,
};
use crate::render::{CloudGradients, RenderOptions};
use crate::scene::{Camera, GaussianCloud, MaskedImage};

/// Where the adaptive cutoff is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffSource {
    /// The current render at the sampled camera, every step.
    #[default]
    Render,
    /// The reference image, once.
    Reference,
    /// `fixed_cutoff`.
    Fixed,
}

/// Conditioning sent to the high-frequency provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HfConditioning {
    #[default]
    Text,
    View,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Geometry: low band from the multi-view prior.
    Low,
    /// Texture: high band from the image prior.
    High,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Low => 1,
            Stage::High => 2,
        }
    }
}

/// Everything that drives a two-stage optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationPlan {
    pub iterations: usize,
    /// Fraction of iterations spent in the low-frequency stage.
    pub stage_split: f64,
    pub lambda_lf: f64,
    pub lambda_hf: f64,
    pub lambda_ref: f64,
    /// Weight of the masked loss on auxiliary views, shared across them.
    pub lambda_aux: f64,
    pub guidance_3d: f64,
    pub guidance_2d: f64,
    pub energy_fraction: f64,
    pub softness: f64,
    pub cutoff_source: CutoffSource,
    pub fixed_cutoff: f64,
    pub residual_mode: ResidualMode,
    pub weighting: Weighting,
    pub timesteps: TimestepSampler,
    pub encoder: Encoder,
    pub hf_conditioning: HfConditioning,
    pub text_embedding: Vec<f64>,
    pub lr: LearningRates,
    pub adam: AdamConfig,
    /// Elevation range in degrees for SDS cameras, sampled uniformly by area.
    pub elevation_range: [f64; 2],
    pub background: [f64; 3],
    /// Disables transmittance early stop so renders match the brute-force loop.
    pub oracle: bool,
    pub seed: u64,
}

impl Default for OptimizationPlan {
    fn default() -> Self {
        Self {
            iterations: 2000,
            stage_split: 0.6,
            lambda_lf: 1.0,
            lambda_hf: 1.0,
            lambda_ref: 1000.0,
            lambda_aux: 0.0,
            guidance_3d: 5.0,
            guidance_2d: 7.5,
            energy_fraction: 0.85,
            softness: 2.0,
            cutoff_source: CutoffSource::Render,
            fixed_cutoff: 0.25,
            residual_mode: ResidualMode::Filtered,
            weighting: Weighting::OneMinusAlphaBar,
            timesteps: TimestepSampler::default(),
            encoder: Encoder::Identity,
            hf_conditioning: HfConditioning::Text,
            text_embedding: Vec::new(),
            lr: LearningRates::default(),
            adam: AdamConfig::default(),
            elevation_range: [-90.0, 90.0],
            background: [1.0; 3],
            oracle: false,
            seed: 0,
        }
    }
}

impl OptimizationPlan {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: String| Err(DistillError::InvalidPlan(m));
        if !(0.0..=1.0).contains(&self.stage_split) {
            return bad(format!("stage_split {} outside [0, 1]", self.stage_split));
        }
        let lambdas = [
            self.lambda_lf,
            self.lambda_hf,
            self.lambda_ref,
            self.lambda_aux,
        ];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad(format!("loss weights must be finite and >= 0: {lambdas:?}"));
        }
        if !(self.energy_fraction > 0.0 && self.energy_fraction <= 1.0) {
            return bad(format!(
                "energy_fraction {} outside (0, 1]",
                self.energy_fraction
            ));
        }
        if !(self.softness >= 0.0 && self.softness.is_finite()) {
            return bad(format!("softness {} must be >= 0", self.softness));
        }
        if !(0.0..=1.0).contains(&self.fixed_cutoff) {
            return bad(format!("fixed_cutoff {} outside [0, 1]", self.fixed_cutoff));
        }
        let [lo, hi] = self.elevation_range;
        if !(-90.0..=90.0).contains(&lo) || !(-90.0..=90.0).contains(&hi) || lo > hi {
            return bad(format!(
                "elevation range {:?} invalid",
                self.elevation_range
            ));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad(format!("background {:?} outside [0, 1]", self.background));
        }
        self.lr.validate().map_err(DistillError::InvalidPlan)?;
        self.timesteps.validate()?;
        Ok(())
    }

    /// Number of iterations in the low-frequency stage.
    pub fn low_stage_iterations(&self) -> usize {
        (self.stage_split * self.iterations as f64).round() as usize
    }

    pub fn stage_at(&self, iteration: usize) -> Stage {
        if iteration < self.low_stage_iterations() {
            Stage::Low
        } else {
            Stage::High
        }
    }

    pub fn render_options(&self) -> RenderOptions {
        if self.oracle {
            RenderOptions::oracle(self.background)
        } else {
            RenderOptions::with_background(self.background)
        }
    }

    pub fn sds_settings(&self, schedule: NoiseSchedule) -> SdsSettings {
        SdsSettings {
            schedule,
            weighting: self.weighting,
            mode: self.residual_mode,
            encoder: self.encoder,
        }
    }
}

/// Score providers for the two bands.
#[derive(Clone, Copy)]
pub struct Providers<'a> {
    /// Multi-view prior, low band.
    pub lf: &'a dyn ScoreProvider,
    /// Image prior, high band.
    pub hf: &'a dyn ScoreProvider,
}

/// Supervised views.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub reference: MaskedImage,
    pub reference_cam: Camera,
    pub aux: Vec<(MaskedImage, Camera)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub iteration: usize,
    pub stage: u8,
    pub loss_ref: f64,
    /// Full-frame PSNR of the reference-view render against the reference.
    pub psnr_ref: f64,
    pub loss_aux: f64,
    pub sds_residual_norm: f64,
    pub timestep: usize,
    pub cutoff: f64,
    pub grad_norm: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub degenerate: bool,
    pub guarded: bool,
}

/// Optimizer state for a run: Adam moments, RNG and iteration counter.
pub struct HybridOptimizer {
    plan: OptimizationPlan,
    settings: SdsSettings,
    adam: Adam,
    rng: ChaCha8Rng,
    iteration: usize,
    reference_cutoff: Option<f64>,
}

impl HybridOptimizer {
    pub fn new(
        plan: OptimizationPlan,
        schedule: NoiseSchedule,
        n_gaussians: usize,
    ) -> Result<Self, DistillError> {
        plan.validate()?;
        Ok(Self {
            settings: plan.sds_settings(schedule),
            adam: Adam::new(plan.adam, n_gaussians),
            rng: ChaCha8Rng::seed_from_u64(plan.seed),
            iteration: 0,
            reference_cutoff: None,
            plan,
        })
    }

    pub fn plan(&self) -> &OptimizationPlan {
        &self.plan
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.plan.iterations
    }

    /// Runs the next iteration in whichever stage the schedule assigns it.
    pub fn step(
        &mut self,
        cloud: &mut GaussianCloud,
        providers: Providers<'_>,
        views: &ViewSet,
    ) -> Result<StepMetrics, DistillError> {
        let stage = self.plan.stage_at(self.iteration);
        hybrid_step(self, cloud, stage, providers, views)
    }

    fn cutoff_rule(&mut self, views: &ViewSet) -> Result<CutoffRule, DistillError> {
        Ok(match self.plan.cutoff_source {
            CutoffSource::Render => CutoffRule::Adaptive {
                energy_fraction: self.plan.energy_fraction,
            },
            CutoffSource::Fixed => CutoffRule::Fixed(self.plan.fixed_cutoff),
            CutoffSource::Reference => {
                if self.reference_cutoff.is_none() {
                    let z = self.settings.encoder.encode(views.reference.image());
                    let c = match adaptive_cutoff(&dft2(z.image()), self.plan.energy_fraction) {
                        Ok(c) => c,
                        Err(FrequencyError::DegenerateSpectrum) => 1.0,
                        Err(e) => return Err(e.into()),
                    };
                    self.reference_cutoff = Some(c);
                }
                CutoffRule::Fixed(self.reference_cutoff.unwrap_or(1.0))
            }
        })
    }

    fn sample_camera(&mut self, template: &Camera) -> Camera {
        let azimuth = self.rng.random_range(0.0..360.0);
        let [lo, hi] = self.plan.elevation_range;
        let (s0, s1) = (lo.to_radians().sin(), hi.to_radians().sin());
        let s = if s1 > s0 {
            self.rng.random_range(s0..=s1)
        } else {
            s0
        };
        template.at(azimuth, s.asin().to_degrees())
    }
}

/// One optimization step in `stage`: the masked reference loss plus the
/// band-limited score distillation loss of that stage, followed by an Adam
/// update and constraint projection.
pub fn hybrid_step(
    opt: &mut HybridOptimizer,
    cloud: &mut GaussianCloud,
    stage: Stage,
    providers: Providers<'_>,
    views: &ViewSet,
) -> Result<StepMetrics, DistillError> {
    let plan = opt.plan.clone();
    let progress = opt.iteration as f64 / plan.iterations.max(1) as f64;
    let opts = plan.render_options();
    let mut total = CloudGradients::zeros(cloud.len());

    let mut loss_ref = f64::NAN;
    let mut psnr_ref = f64::NAN;
    if plan.lambda_ref > 0.0 {
        let (loss, g, out) =
            reference_loss_grad(cloud, &views.reference, &views.reference_cam, &opts)?;
        total.add_scaled(&g, plan.lambda_ref);
        loss_ref = loss;
        psnr_ref = psnr(&out.color, views.reference.image()).unwrap_or(f64::NAN);
    }
    let mut loss_aux = 0.0;
    if plan.lambda_aux > 0.0 && !views.aux.is_empty() {
        let k = plan.lambda_aux / views.aux.len() as f64;
        for (img, cam) in &views.aux {
            let (loss, g, _) = reference_loss_grad(cloud, img, cam, &opts)?;
            total.add_scaled(&g, k);
            loss_aux += loss / views.aux.len() as f64;
        }
    }

    let (lambda, provider, guidance) = match stage {
        Stage::Low => (plan.lambda_lf, providers.lf, plan.guidance_3d),
        Stage::High => (plan.lambda_hf, providers.hf, plan.guidance_2d),
    };
    let mut metrics = StepMetrics {
        iteration: opt.iteration,
        stage: stage.number(),
        loss_ref,
        psnr_ref,
        loss_aux,
        sds_residual_norm: 0.0,
        timestep: 0,
        cutoff: f64::NAN,
        grad_norm: 0.0,
        azimuth: f64::NAN,
        elevation: f64::NAN,
        degenerate: false,
        guarded: false,
    };
    if lambda > 0.0 {
        let cam = opt.sample_camera(&views.reference_cam);
        let view =
            || ViewCondition::relative(views.reference.image().clone(), &views.reference_cam, &cam);
        let conditioning = match (stage, plan.hf_conditioning) {
            (Stage::Low, _) | (Stage::High, HfConditioning::View) => Conditioning::View(view()?),
            (Stage::High, HfConditioning::Text) => Conditioning::Text(plan.text_embedding.clone()),
        };
        let rule = opt.cutoff_rule(views)?;
        let band = match stage {
            Stage::Low => Band::Low {
                cutoff: rule,
                softness: plan.softness,
            },
            Stage::High => Band::High {
                cutoff: rule,
                softness: plan.softness,
            },
        };
        let branch = SdsBranch {
            provider,
            conditioning,
            guidance_scale: guidance,
            band,
        };
        let (lw, lh) = plan.encoder.latent_size(cam.width, cam.height);
        let draw = NoiseDraw::sample(
            &mut opt.rng,
            &plan.timesteps,
            progress,
            &opt.settings.schedule,
            lw,
            lh,
            3,
        );
        let (g, info, _) = sds_step_grad(cloud, &cam, &opts, &branch, &opt.settings, &draw)?;
        total.add_scaled(&g, lambda);
        metrics.sds_residual_norm = info.residual.norm();
        metrics.timestep = info.timestep;
        metrics.cutoff = info.cutoff;
        metrics.azimuth = cam.azimuth;
        metrics.elevation = cam.elevation;
        metrics.degenerate = info.degenerate;
        metrics.guarded = info.guarded;
    }

    if !total.is_finite() {
        return Err(DistillError::NonFinite(format!(
            "gradient at iteration {}",
            opt.iteration
        )));
    }
    metrics.grad_norm = total.norm();
    opt.adam.step(cloud, &total, &plan.lr, progress);
    opt.iteration += 1;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_boundary_follows_split() {
        let plan = OptimizationPlan {
            iterations: 10,
            ..OptimizationPlan::default()
        };
        assert_eq!(plan.low_stage_iterations(), 6);
        assert_eq!(plan.stage_at(5), Stage::Low);
        assert_eq!(plan.stage_at(6), Stage::High);
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let mut plan = OptimizationPlan::default();
        plan.validate().unwrap();
        plan.stage_split = 1.5;
        assert!(plan.validate().is_err());
        plan.stage_split = 0.6;
        plan.elevation_range = [10.0, -10.0];
        assert!(plan.validate().is_err());
    }
}
