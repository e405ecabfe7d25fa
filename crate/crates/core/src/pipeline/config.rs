use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::distillation::{
    AdamConfig, CutoffSource, HfConditioning, LearningRates, OptimizationPlan, ResidualMode,
};
use crate::priors::{BetaSchedule, Encoder, NoiseSchedule, TimestepSampler, Weighting};

/// Environment variables `FREQSPLAT__<SECTION>__<KEY>=<value>` override the
/// matching config key. Values are parsed as TOML, falling back to a string.
pub const ENV_PREFIX: &str = "FREQSPLAT__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunConfig,
    pub init: InitConfig,
    pub views: ViewsConfig,
    pub loss: LossConfig,
    pub frequency: FrequencyConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub prior_3d: PriorConfig,
    pub prior_2d: PriorConfig,
    pub orbit: OrbitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub iterations: usize,
    pub seed: u64,
    /// Single-threaded rendering without transmittance early stop.
    pub oracle: bool,
    /// Worker threads; 0 picks the number of cores.
    pub threads: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            iterations: 500,
            seed: 0,
            oracle: false,
            threads: 0,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// `"random"` or a PLY path (Gaussian layout or plain points).
    pub source: String,
    pub count: usize,
    /// Random positions are drawn from `[-half_extent, half_extent]³`.
    pub half_extent: f64,
    /// Rescale imported points into the box.
    pub normalize_import: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            source: "random".into(),
            count: 4096,
            half_extent: 0.5,
            normalize_import: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewsConfig {
    /// Reference PNG: RGBA, or RGB with `reference_mask`.
    pub reference: Option<PathBuf>,
    pub reference_mask: Option<PathBuf>,
    pub aux: Vec<PathBuf>,
    /// JSON list of `{"azimuth": deg, "elevation": deg}` for the aux views.
    pub aux_cameras: Option<PathBuf>,
    pub aux_elevation: f64,
    /// Ground-truth Gaussian PLY. When set and `reference` is not, the
    /// reference and `n_aux` aux views are rendered from it.
    pub scene: Option<PathBuf>,
    pub n_aux: usize,
    pub width: usize,
    pub height: usize,
    pub distance: f64,
    pub fov_y: f64,
    pub background: [f64; 3],
    pub encoder: Encoder,
}

impl Default for ViewsConfig {
    fn default() -> Self {
        Self {
            reference: None,
            reference_mask: None,
            aux: Vec::new(),
            aux_cameras: None,
            aux_elevation: 20.0,
            scene: None,
            n_aux: 6,
            width: 64,
            height: 64,
            distance: 1.5,
            fov_y: 49.1,
            background: [1.0; 3],
            encoder: Encoder::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_lf: f64,
    pub lambda_hf: f64,
    pub lambda_ref: f64,
    pub lambda_aux: f64,
    pub stage_split: f64,
    pub residual_mode: ResidualMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_lf: 1.0,
            lambda_hf: 1.0,
            lambda_ref: 1000.0,
            lambda_aux: 0.0,
            stage_split: 0.6,
            residual_mode: ResidualMode::Filtered,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencyConfig {
    pub energy_fraction: f64,
    /// Width of the raised-cosine transition, in frequency bins.
    pub softness: f64,
    pub cutoff_source: CutoffSource,
    pub fixed_cutoff: f64,
    /// Fractions reported by `analyze-spectrum`.
    pub analysis_fractions: Vec<f64>,
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        Self {
            energy_fraction: 0.85,
            softness: 2.0,
            cutoff_source: CutoffSource::Render,
            fixed_cutoff: 0.25,
            analysis_fractions: vec![0.5, 0.85, 0.9, 0.99],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub beta_schedule: BetaSchedule,
    pub beta_start: f64,
    pub beta_end: f64,
    pub num_steps: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub t_max_annealed: f64,
    pub weighting: Weighting,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let t = TimestepSampler::default();
        Self {
            beta_schedule: BetaSchedule::Linear,
            beta_start: 8.5e-4,
            beta_end: 1.2e-2,
            num_steps: 1000,
            t_min: t.min_fraction,
            t_max: t.max_fraction,
            t_max_annealed: t.annealed_max_fraction,
            weighting: Weighting::OneMinusAlphaBar,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Elevation range for SDS cameras, degrees.
    pub sds_elevation_min: f64,
    pub sds_elevation_max: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let lr = LearningRates::default();
        let adam = AdamConfig::default();
        Self {
            lr_position: lr.position,
            lr_position_final: lr.position_final,
            lr_scale: lr.scale,
            lr_rotation: lr.rotation,
            lr_color: lr.color,
            lr_opacity: lr.opacity,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            sds_elevation_min: -90.0,
            sds_elevation_max: 90.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Renders the ground-truth `scene` at the requested view.
    SceneOracle,
    /// Point-mass denoiser whose target is the reference image.
    Synthetic,
    /// Replays a fixture archive.
    Fixture,
    /// Score bridge over TCP.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub kind: ProviderKind,
    pub guidance_scale: f64,
    pub endpoint: String,
    pub timeout_ms: u64,
    pub fixture: Option<PathBuf>,
    /// Scene for `scene_oracle`; defaults to `views.scene`.
    pub scene: Option<PathBuf>,
    /// Only read for the image prior.
    pub conditioning: HfConditioning,
    pub text_embedding: Vec<f64>,
}

impl PriorConfig {
    fn with_guidance(guidance_scale: f64, endpoint: &str) -> Self {
        Self {
            kind: ProviderKind::Remote,
            guidance_scale,
            endpoint: endpoint.into(),
            timeout_ms: 30_000,
            fixture: None,
            scene: None,
            conditioning: HfConditioning::Text,
            text_embedding: Vec::new(),
        }
    }
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self::with_guidance(7.5, "127.0.0.1:7862")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitConfig {
    pub n_azimuth: usize,
    pub elevations: Vec<f64>,
    pub eval_points: usize,
    pub fscore_threshold: f64,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        Self {
            n_azimuth: 7,
            elevations: vec![-30.0, 0.0, 30.0],
            eval_points: 16384,
            fscore_threshold: 0.2,
        }
    }
}

impl Config {
    /// Defaults with the multi-view prior at guidance 5 on its own port.
    pub fn defaults() -> Self {
        Self {
            prior_3d: PriorConfig::with_guidance(5.0, "127.0.0.1:7861"),
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        Self::from_toml_with_env(text, std::iter::empty())
    }

    /// Parses `text`, applies `FREQSPLAT__` overrides from `env`, then
    /// validates.
    pub fn from_toml_with_env(
        text: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, PipelineError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| PipelineError::Config(format!("{e}")))?;
        apply_env(&mut table, env)?;
        let mut base = toml::Table::try_from(Self::defaults())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        merge(&mut base, table);
        let cfg: Config = base
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults with process environment overrides, for commands run
    /// without a config file.
    pub fn from_env() -> Result<Self, PipelineError> {
        Self::from_toml_with_env("", std::env::vars())
    }

    /// Reads a config file with process environment overrides. Relative
    /// paths inside it are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Io(format!("reading {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_with_env(&text, std::env::vars())?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run.output_dir);
        for p in [
            &mut self.views.reference,
            &mut self.views.reference_mask,
            &mut self.views.aux_cameras,
            &mut self.views.scene,
            &mut self.prior_3d.fixture,
            &mut self.prior_3d.scene,
            &mut self.prior_2d.fixture,
            &mut self.prior_2d.scene,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        self.views.aux.iter_mut().for_each(fix);
        if self.init.source != "random" {
            let mut p = PathBuf::from(&self.init.source);
            fix(&mut p);
            self.init.source = p.to_string_lossy().into_owned();
        }
    }

    pub fn to_toml(&self) -> Result<String, PipelineError> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let v = &self.views;
        if v.width == 0 || v.height == 0 {
            return bad("views.width and views.height must be >= 1".into());
        }
        if !(v.fov_y > 0.0 && v.fov_y < 180.0) || !(v.distance > 0.0) {
            return bad("views.fov_y must be in (0, 180) and views.distance > 0".into());
        }
        if self.init.source == "random" && self.init.count == 0 {
            return bad("init.count must be >= 1".into());
        }
        if !(self.init.half_extent > 0.0) {
            return bad("init.half_extent must be > 0".into());
        }
        if self.orbit.n_azimuth == 0 || self.orbit.elevations.is_empty() {
            return bad("orbit needs n_azimuth >= 1 and at least one elevation".into());
        }
        if !(self.orbit.fscore_threshold > 0.0) || self.orbit.eval_points == 0 {
            return bad("orbit.fscore_threshold must be > 0 and eval_points >= 1".into());
        }
        if self
            .frequency
            .analysis_fractions
            .iter()
            .any(|f| !(0.0..=1.0).contains(f))
        {
            return bad("frequency.analysis_fractions must lie in [0, 1]".into());
        }
        self.noise_schedule()?;
        self.plan()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule, PipelineError> {
        let s = &self.schedule;
        NoiseSchedule::new(s.beta_schedule, s.beta_start, s.beta_end, s.num_steps)
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn plan(&self) -> OptimizationPlan {
        OptimizationPlan {
            iterations: self.run.iterations,
            stage_split: self.loss.stage_split,
            lambda_lf: self.loss.lambda_lf,
            lambda_hf: self.loss.lambda_hf,
            lambda_ref: self.loss.lambda_ref,
            lambda_aux: self.loss.lambda_aux,
            guidance_3d: self.prior_3d.guidance_scale,
            guidance_2d: self.prior_2d.guidance_scale,
            energy_fraction: self.frequency.energy_fraction,
            softness: self.frequency.softness,
            cutoff_source: self.frequency.cutoff_source,
            fixed_cutoff: self.frequency.fixed_cutoff,
            residual_mode: self.loss.residual_mode,
            weighting: self.schedule.weighting,
            timesteps: TimestepSampler {
                min_fraction: self.schedule.t_min,
                max_fraction: self.schedule.t_max,
                annealed_max_fraction: self.schedule.t_max_annealed,
            },
            encoder: self.views.encoder,
            hf_conditioning: self.prior_2d.conditioning,
            text_embedding: self.prior_2d.text_embedding.clone(),
            lr: LearningRates {
                position: self.optim.lr_position,
                position_final: self.optim.lr_position_final,
                scale: self.optim.lr_scale,
                rotation: self.optim.lr_rotation,
                color: self.optim.lr_color,
                opacity: self.optim.lr_opacity,
            },
            adam: AdamConfig {
                beta1: self.optim.beta1,
                beta2: self.optim.beta2,
                eps: self.optim.eps,
            },
            elevation_range: [self.optim.sds_elevation_min, self.optim.sds_elevation_max],
            background: self.views.background,
            oracle: self.run.oracle,
            seed: self.run.seed,
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_env(
    table: &mut toml::Table,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<(), PipelineError> {
    for (name, raw) in env {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let Some((section, key)) = rest.split_once("__") else {
            return Err(PipelineError::Config(format!(
                "{name}: expected {ENV_PREFIX}<SECTION>__<KEY>"
            )));
        };
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(toml::Value::String(raw));
        let section = table
            .entry(section.to_ascii_lowercase())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(section) = section else {
            return Err(PipelineError::Config(format!(
                "{name}: section is not a table"
            )));
        };
        section.insert(key.to_ascii_lowercase(), value);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = Config::from_toml_str("").unwrap();
        assert_eq!(cfg, Config::defaults());
        assert_eq!(cfg.prior_3d.guidance_scale, 5.0);
        assert_eq!(cfg.prior_2d.guidance_scale, 7.5);
        assert_eq!(cfg.loss.lambda_ref, 1000.0);
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = Config::defaults();
        cfg.views.scene = Some("gt.ply".into());
        cfg.schedule.weighting = Weighting::Constant(2.0);
        let text = cfg.to_toml().unwrap();
        assert_eq!(Config::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn env_overrides_keys() {
        let env = vec![
            ("FREQSPLAT__RUN__ITERATIONS".to_string(), "12".to_string()),
            (
                "FREQSPLAT__PRIOR_2D__ENDPOINT".to_string(),
                "10.0.0.1:9".to_string(),
            ),
            (
                "FREQSPLAT__VIEWS__BACKGROUND".to_string(),
                "[0.0, 0.0, 0.0]".to_string(),
            ),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let cfg = Config::from_toml_with_env("[run]\niterations = 3\n", env).unwrap();
        assert_eq!(cfg.run.iterations, 12);
        assert_eq!(cfg.prior_2d.endpoint, "10.0.0.1:9");
        assert_eq!(cfg.views.background, [0.0; 3]);
    }

    #[test]
    fn unknown_and_invalid_keys_are_config_errors() {
        assert!(matches!(
            Config::from_toml_str("[run]\nbogus = 1\n"),
            Err(PipelineError::Config(_))
        ));
        assert!(matches!(
            Config::from_toml_str("[loss]\nstage_split = 2.0\n"),
            Err(PipelineError::Config(_))
        ));
        assert!(matches!(
            Config::from_toml_str("[views"),
            Err(PipelineError::Config(_))
        ));
        let env = vec![("FREQSPLAT__RUN".to_string(), "1".to_string())];
        assert!(Config::from_toml_with_env("", env).is_err());
    }

    #[test]
    fn paper_shaped_config_resolves() {
        let text = "[run]\niterations = 500\n[prior_2d]\nguidance_scale = 7.5\n[prior_3d]\nguidance_scale = 5.0\n\
                    [optim]\nlr_position = 1e-4\nlr_position_final = 2e-5\n";
        let cfg = Config::from_toml_str(text).unwrap();
        let plan = cfg.plan();
        assert_eq!(plan.low_stage_iterations(), 300);
        assert_eq!(plan.lr.position_at(1.0), 2e-5);
    }
}
