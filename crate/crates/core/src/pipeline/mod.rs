//! Configuration, scene initialization and the `generate`, `render`, `eval`
//! and `analyze-spectrum` workflows.

mod commands;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use commands::{
    parse_orbit, run_analyze_spectrum, run_eval, run_render, EvalReport, SpectrumImageReport,
    SpectrumSummary,
};
pub use config::{
    Config, FrequencyConfig, InitConfig, LossConfig, OptimConfig, OrbitConfig, PriorConfig,
    ProviderKind, RunConfig, ScheduleConfig, ViewsConfig, ENV_PREFIX,
};

use crate::distillation::{DistillError, HybridOptimizer, Providers, ViewSet};
use crate::evaluation::EvalError;
use crate::frequency::FrequencyError;
use crate::priors::{
    FixtureProvider, NoiseSchedule, PriorError, RemoteProvider, SceneOracleProvider, ScoreProvider,
    SyntheticProvider,
};
use crate::render::{rasterize, RenderOptions};
use crate::scene::ply::{self, read_vertices};
use crate::scene::{orbit_cameras, Camera, GaussianCloud, ImageBuffer, MaskedImage, SceneError};

/// Opacity logit given to freshly initialized Gaussians.
pub const INIT_OPACITY_LOGIT: f64 = 0.1;
pub const INIT_GRAY: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Provider(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Input(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Io(_) => 3,
            PipelineError::Provider(_) => 4,
            PipelineError::Numerical(_) => 5,
            PipelineError::Input(_) => 6,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Io(_) => "io",
            PipelineError::Provider(_) => "provider",
            PipelineError::Numerical(_) => "numerical",
            PipelineError::Input(_) => "input",
        }
    }

    /// One-line JSON description for machine consumption.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

impl From<SceneError> for PipelineError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Io(_) | SceneError::Image { .. } => PipelineError::Io(e.to_string()),
            SceneError::DegenerateCovariance => PipelineError::Numerical(e.to_string()),
            SceneError::InvalidParameter(_) | SceneError::Ply(_) => {
                PipelineError::Input(e.to_string())
            }
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        PipelineError::Input(e.to_string())
    }
}

impl From<FrequencyError> for PipelineError {
    fn from(e: FrequencyError) -> Self {
        match e {
            FrequencyError::InvalidParameter(_) | FrequencyError::ShapeMismatch(_) => {
                PipelineError::Input(e.to_string())
            }
            _ => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<PriorError> for PipelineError {
    fn from(e: PriorError) -> Self {
        match e {
            PriorError::InvalidTimestep(..) | PriorError::Schedule(_) => {
                PipelineError::Config(e.to_string())
            }
            _ => PipelineError::Provider(e.to_string()),
        }
    }
}

impl From<DistillError> for PipelineError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::EmptyMask | DistillError::ShapeMismatch(_) => {
                PipelineError::Input(e.to_string())
            }
            DistillError::InvalidPlan(_) => PipelineError::Config(e.to_string()),
            DistillError::NonFinite(_) => PipelineError::Numerical(e.to_string()),
            DistillError::Provider { .. } => PipelineError::Provider(e.to_string()),
            DistillError::Prior(p) => p.into(),
            DistillError::Frequency(f) => f.into(),
            DistillError::Scene(s) => s.into(),
        }
    }
}

impl From<csv::Error> for PipelineError {
    fn from(e: csv::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for PipelineError {
    fn from(e: serde_json::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

/// Mean point spacing: the box edge divided by the cube root of the count.
fn init_scale(lo: Vector3<f64>, hi: Vector3<f64>, count: usize) -> f64 {
    let edge = (hi - lo).norm() / 3f64.sqrt();
    let s = edge / (count as f64).cbrt();
    if s > 0.0 {
        s
    } else {
        1e-2
    }
}

/// `count` Gaussians uniform in `[-h, h]³`, mid-gray, isotropic.
pub fn init_random(
    count: usize,
    half_extent: f64,
    rng: &mut impl Rng,
) -> Result<GaussianCloud, PipelineError> {
    if count == 0 {
        return Err(PipelineError::Input("random init needs count >= 1".into()));
    }
    let h = half_extent;
    let positions: Vec<Vector3<f64>> = (0..count)
        .map(|_| {
            Vector3::new(
                rng.random_range(-h..=h),
                rng.random_range(-h..=h),
                rng.random_range(-h..=h),
            )
        })
        .collect();
    let s = init_scale(Vector3::repeat(-h), Vector3::repeat(h), count);
    Ok(cloud_at(&positions, None, s))
}

/// One Gaussian per point, sized from the points' bounding box.
pub fn init_from_points(
    positions: &[Vector3<f64>],
    colors: Option<&[Vector3<f64>]>,
) -> Result<GaussianCloud, PipelineError> {
    if positions.is_empty() {
        return Err(PipelineError::Input("point cloud has no points".into()));
    }
    let lo = positions.iter().fold(positions[0], |a, p| a.inf(p));
    let hi = positions.iter().fold(positions[0], |a, p| a.sup(p));
    Ok(cloud_at(
        positions,
        colors,
        init_scale(lo, hi, positions.len()),
    ))
}

fn cloud_at(
    positions: &[Vector3<f64>],
    colors: Option<&[Vector3<f64>]>,
    scale: f64,
) -> GaussianCloud {
    let mut cloud = GaussianCloud::with_capacity(positions.len());
    let log_s = Vector3::repeat(scale.ln());
    for (i, p) in positions.iter().enumerate() {
        let c = colors.map_or(Vector3::repeat(INIT_GRAY), |c| c[i]);
        cloud.push_raw(
            *p,
            log_s,
            nalgebra::Vector4::new(1.0, 0.0, 0.0, 0.0),
            c,
            INIT_OPACITY_LOGIT,
        );
    }
    cloud.project_constraints();
    cloud
}

/// Builds the initial cloud from `cfg`: random, a Gaussian PLY as is, or a
/// point PLY.
pub fn init_gaussians(
    cfg: &InitConfig,
    rng: &mut impl Rng,
) -> Result<GaussianCloud, PipelineError> {
    if cfg.source == "random" {
        return init_random(cfg.count, cfg.half_extent, rng);
    }
    let path = Path::new(&cfg.source);
    let file =
        fs::File::open(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    let table = read_vertices(std::io::BufReader::new(file))?;
    let mut cloud = if ply::is_gaussian_table(&table) {
        ply::cloud_from_table(&table)?
    } else {
        let pts = ply::points_from_table(&table)?;
        init_from_points(&pts.positions, pts.colors.as_deref())?
    };
    if cloud.is_empty() {
        return Err(PipelineError::Input(format!(
            "{} has no vertices",
            path.display()
        )));
    }
    if cfg.normalize_import {
        cloud.normalize_to_box(cfg.half_extent);
    }
    Ok(cloud)
}

/// Reference camera: azimuth 0, elevation 0.
pub fn reference_camera(
    v: &ViewsConfig,
    width: usize,
    height: usize,
) -> Result<Camera, PipelineError> {
    Ok(Camera::new(0.0, 0.0, v.distance, v.fov_y, width, height)?)
}

/// Aux cameras at `elevation`, azimuths offset half a step from the reference.
pub fn aux_cameras(n: usize, elevation: f64, template: &Camera) -> Vec<Camera> {
    (0..n)
        .map(|i| template.at(360.0 * (i as f64 + 0.5) / n as f64, elevation))
        .collect()
}

#[derive(Debug, Clone, Copy, Deserialize)]
struct CameraEntry {
    azimuth: f64,
    elevation: f64,
}

/// Renders a masked view of `scene`: alpha above one half is foreground.
pub fn render_masked(
    scene: &GaussianCloud,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<MaskedImage, PipelineError> {
    let out = rasterize(scene, cam, opts);
    Ok(MaskedImage::new(out.color, out.alpha)?)
}

fn composite(rgba: &ImageBuffer, background: [f64; 3]) -> Result<MaskedImage, PipelineError> {
    let m = MaskedImage::from_rgba(rgba)?;
    let img = ImageBuffer::from_fn(rgba.width(), rgba.height(), 3, |x, y, c| {
        let a = rgba.get(x, y, 3);
        a * rgba.get(x, y, c) + (1.0 - a) * background[c]
    });
    Ok(MaskedImage::new(img, m.mask().clone())?)
}

fn load_masked(
    path: &Path,
    mask: Option<&Path>,
    background: [f64; 3],
) -> Result<MaskedImage, PipelineError> {
    let img = ImageBuffer::load_png(path)?;
    match (img.channels(), mask) {
        (4, None) => composite(&img, background),
        (_, Some(mpath)) => {
            let m = ImageBuffer::load_png(mpath)?;
            let m1 = ImageBuffer::from_fn(m.width(), m.height(), 1, |x, y, _| m.get(x, y, 0));
            let rgb = if img.channels() == 1 {
                ImageBuffer::from_fn(img.width(), img.height(), 3, |x, y, _| img.get(x, y, 0))
            } else {
                img.take_channels(3)
            };
            Ok(MaskedImage::new(rgb, m1)?)
        }
        (n, None) => Err(PipelineError::Input(format!(
            "{} has {n} channels and no mask; provide RGBA or a mask file",
            path.display()
        ))),
    }
}

/// Loads or renders the reference and aux views described by `cfg`.
pub fn load_views(cfg: &Config) -> Result<ViewSet, PipelineError> {
    let v = &cfg.views;
    let opts = RenderOptions::with_background(v.background);
    if let Some(reference) = &v.reference {
        let reference = load_masked(reference, v.reference_mask.as_deref(), v.background)?;
        let ref_cam = reference_camera(v, reference.width(), reference.height())?;
        let cams = match &v.aux_cameras {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
                let entries: Vec<CameraEntry> = serde_json::from_str(&text)
                    .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
                entries
                    .iter()
                    .map(|e| ref_cam.at(e.azimuth, e.elevation))
                    .collect()
            }
            None => aux_cameras(v.aux.len(), v.aux_elevation, &ref_cam),
        };
        if cams.len() != v.aux.len() {
            return Err(PipelineError::Input(format!(
                "{} aux images but {} aux cameras",
                v.aux.len(),
                cams.len()
            )));
        }
        let mut aux = Vec::with_capacity(cams.len());
        for (path, cam) in v.aux.iter().zip(cams) {
            let img = load_masked(path, None, v.background)?;
            let cam = Camera {
                width: img.width(),
                height: img.height(),
                ..cam
            };
            aux.push((img, cam));
        }
        return Ok(ViewSet {
            reference,
            reference_cam: ref_cam,
            aux,
        });
    }
    let Some(scene_path) = &v.scene else {
        return Err(PipelineError::Config(
            "set views.reference or views.scene".into(),
        ));
    };
    let scene = ply::read_cloud(scene_path)?;
    let ref_cam = reference_camera(v, v.width, v.height)?;
    let reference = render_masked(&scene, &ref_cam, &opts)?;
    let aux = aux_cameras(v.n_aux, v.aux_elevation, &ref_cam)
        .into_iter()
        .map(|cam| Ok((render_masked(&scene, &cam, &opts)?, cam)))
        .collect::<Result<_, PipelineError>>()?;
    Ok(ViewSet {
        reference,
        reference_cam: ref_cam,
        aux,
    })
}

/// Instantiates the provider described by `prior`.
pub fn build_provider(
    prior: &PriorConfig,
    cfg: &Config,
    views: &ViewSet,
    schedule: &NoiseSchedule,
) -> Result<Box<dyn ScoreProvider>, PipelineError> {
    let encoder = cfg.views.encoder;
    Ok(match prior.kind {
        config::ProviderKind::SceneOracle => {
            let path = prior
                .scene
                .as_ref()
                .or(cfg.views.scene.as_ref())
                .ok_or_else(|| {
                    PipelineError::Config(
                        "scene_oracle provider needs prior.scene or views.scene".into(),
                    )
                })?;
            let scene = ply::read_cloud(path)?;
            Box::new(SceneOracleProvider::new(
                scene,
                views.reference_cam,
                RenderOptions::with_background(cfg.views.background),
                encoder,
                schedule.clone(),
            ))
        }
        config::ProviderKind::Synthetic => Box::new(SyntheticProvider::new(
            encoder.encode(views.reference.image()),
            schedule.clone(),
        )?),
        config::ProviderKind::Fixture => {
            let path = prior.fixture.as_ref().ok_or_else(|| {
                PipelineError::Config("fixture provider needs a fixture path".into())
            })?;
            Box::new(FixtureProvider::load(path)?)
        }
        config::ProviderKind::Remote => Box::new(RemoteProvider::connect(
            &prior.endpoint,
            std::time::Duration::from_millis(prior.timeout_ms),
        )?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub iterations: usize,
    pub n_gaussians: usize,
    pub final_loss_ref: f64,
    pub final_psnr_ref: f64,
    pub degenerate_steps: usize,
    pub elapsed_s: f64,
    pub ply: PathBuf,
}

/// Runs `f` on a dedicated pool when a thread count is forced.
pub fn with_threads<T: Send>(
    threads: usize,
    f: impl FnOnce() -> T + Send,
) -> Result<T, PipelineError> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// The full reconstruction: init, staged optimization, export.
pub fn run_generate(cfg: &Config) -> Result<GenerateSummary, PipelineError> {
    let threads = if cfg.run.oracle { 1 } else { cfg.run.threads };
    with_threads(threads, || generate_inner(cfg))?
}

fn generate_inner(cfg: &Config) -> Result<GenerateSummary, PipelineError> {
    let start = Instant::now();
    let out = &cfg.run.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved.toml"), cfg.to_toml()?)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let mut cloud = init_gaussians(&cfg.init, &mut rng)?;
    let views = load_views(cfg)?;
    let schedule = cfg.noise_schedule()?;
    let plan = cfg.plan();

    let mut metrics = csv::Writer::from_path(out.join("metrics.csv"))?;
    let mut summary = GenerateSummary {
        iterations: cfg.run.iterations,
        n_gaussians: cloud.len(),
        final_loss_ref: f64::NAN,
        final_psnr_ref: f64::NAN,
        degenerate_steps: 0,
        elapsed_s: 0.0,
        ply: out.join("cloud.ply"),
    };
    if cfg.run.iterations > 0 {
        let lf = build_provider(&cfg.prior_3d, cfg, &views, &schedule)?;
        let hf = build_provider(&cfg.prior_2d, cfg, &views, &schedule)?;
        let providers = Providers {
            lf: lf.as_ref(),
            hf: hf.as_ref(),
        };
        let mut opt = HybridOptimizer::new(plan, schedule, cloud.len())?;
        while !opt.is_done() {
            let m = opt.step(&mut cloud, providers, &views)?;
            metrics.serialize(&m)?;
            if m.degenerate {
                summary.degenerate_steps += 1;
            }
            if cfg.run.log_every > 0 && m.iteration % cfg.run.log_every == 0 {
                log::info!(
                    "iter {} stage {} loss_ref {:.5} psnr_ref {:.2} residual {:.3} cutoff {:.3}",
                    m.iteration,
                    m.stage,
                    m.loss_ref,
                    m.psnr_ref,
                    m.sds_residual_norm,
                    m.cutoff
                );
            }
            summary.final_loss_ref = m.loss_ref;
            summary.final_psnr_ref = m.psnr_ref;
        }
    }
    metrics.flush()?;

    ply::write_cloud(&summary.ply, &cloud)?;
    let renders = out.join("renders");
    render_orbit(
        &cloud,
        &cfg.orbit,
        &cfg.views,
        &renders,
        views.reference.width(),
        views.reference.height(),
    )?;
    summary.elapsed_s = start.elapsed().as_secs_f64();
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

/// Orbit cameras from the orbit and view settings.
pub fn orbit_camera_list(
    orbit: &OrbitConfig,
    v: &ViewsConfig,
    width: usize,
    height: usize,
) -> Result<Vec<Camera>, PipelineError> {
    Ok(orbit_cameras(
        orbit.n_azimuth,
        &orbit.elevations,
        v.distance,
        v.fov_y,
        width,
        height,
    )?)
}

/// Writes `view_NNN.png` for every orbit camera.
pub fn render_orbit(
    cloud: &GaussianCloud,
    orbit: &OrbitConfig,
    v: &ViewsConfig,
    dir: &Path,
    width: usize,
    height: usize,
) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(dir)?;
    let opts = RenderOptions::with_background(v.background);
    let mut paths = Vec::new();
    for (i, cam) in orbit_camera_list(orbit, v, width, height)?
        .iter()
        .enumerate()
    {
        let path = dir.join(format!("view_{i:03}.png"));
        rasterize(cloud, cam, &opts).color.save_png(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
