use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{orbit_camera_list, Config, OrbitConfig, PipelineError, ViewsConfig};
use crate::evaluation::{geometry_metrics, psnr, ssim, GeometryMetrics, ViewMetrics};
use crate::frequency::{adaptive_cutoff, dft2, radial_profile, FrequencyError, RadialStep};
use crate::render::{rasterize, RenderOptions};
use crate::scene::{ply, GaussianCloud, ImageBuffer};

const CONVENTIONS: &str =
    "cd: mean of the two mean nearest-neighbour L2 distances; prediction aligned to ground truth by bounding box";

/// Parses `"n,e1,e2,..."` into an azimuth count and elevations in degrees.
pub fn parse_orbit(spec: &str) -> Result<(usize, Vec<f64>), PipelineError> {
    let mut parts = spec.split(',').map(str::trim);
    let n = parts
        .next()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .ok_or_else(|| {
            PipelineError::Input(format!("orbit '{spec}': expected n_azimuth,elev,..."))
        })?;
    let elevs = parts
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| PipelineError::Input(format!("orbit '{spec}': bad elevation '{s}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if elevs.is_empty() {
        return Err(PipelineError::Input(format!(
            "orbit '{spec}': no elevations"
        )));
    }
    Ok((n, elevs))
}

/// Renders `ply` along an orbit into `out/view_NNN.png`.
pub fn run_render(
    ply_path: &Path,
    orbit: &OrbitConfig,
    views: &ViewsConfig,
    out: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    let cloud = ply::read_cloud(ply_path)?;
    super::render_orbit(&cloud, orbit, views, out, views.width, views.height)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub conventions: String,
    pub views: Vec<ViewMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub geometry: Option<GeometryMetrics>,
}

enum Source {
    Cloud(GaussianCloud),
    Images(Vec<(String, ImageBuffer)>),
}

fn to_rgb(img: ImageBuffer) -> ImageBuffer {
    match img.channels() {
        3 => img,
        1 => ImageBuffer::from_fn(img.width(), img.height(), 3, |x, y, _| img.get(x, y, 0)),
        _ => img.take_channels(3),
    }
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn load_source(path: &Path) -> Result<Source, PipelineError> {
    if path.is_dir() {
        let files = png_files(path)?;
        if files.is_empty() {
            return Err(PipelineError::Input(format!(
                "{} contains no PNG files",
                path.display()
            )));
        }
        let imgs = files
            .iter()
            .map(|f| {
                let id = f
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok((id, to_rgb(ImageBuffer::load_png(f)?)))
            })
            .collect::<Result<_, PipelineError>>()?;
        Ok(Source::Images(imgs))
    } else if path.exists() {
        Ok(Source::Cloud(ply::read_cloud(path)?))
    } else {
        Err(PipelineError::Io(format!(
            "{} does not exist",
            path.display()
        )))
    }
}

fn render_views(
    cloud: &GaussianCloud,
    cfg: &Config,
    w: usize,
    h: usize,
) -> Result<Vec<(String, ImageBuffer)>, PipelineError> {
    let opts = RenderOptions::with_background(cfg.views.background);
    Ok(orbit_camera_list(&cfg.orbit, &cfg.views, w, h)?
        .iter()
        .enumerate()
        .map(|(i, cam)| (format!("view_{i:03}"), rasterize(cloud, cam, &opts).color))
        .collect())
}

/// Compares a prediction with ground truth. Each side is a Gaussian PLY
/// (rendered along the configured orbit) or a folder of PNG renders paired
/// by sorted file name. Geometry metrics need PLYs on both sides.
pub fn run_eval(
    pred: &Path,
    gt: &Path,
    out: &Path,
    cfg: &Config,
) -> Result<EvalReport, PipelineError> {
    let (p, g) = (load_source(pred)?, load_source(gt)?);
    let (w, h) = match (&p, &g) {
        (_, Source::Images(v)) | (Source::Images(v), _) => (v[0].1.width(), v[0].1.height()),
        _ => (cfg.views.width, cfg.views.height),
    };
    let geometry = match (&p, &g) {
        (Source::Cloud(a), Source::Cloud(b)) => Some(geometry_metrics(
            a,
            b,
            cfg.orbit.eval_points,
            cfg.orbit.fscore_threshold,
            cfg.run.seed,
        )?),
        _ => None,
    };
    let images = |s: Source| match s {
        Source::Cloud(c) => render_views(&c, cfg, w, h),
        Source::Images(v) => Ok(v),
    };
    let (pi, gi) = (images(p)?, images(g)?);
    if pi.len() != gi.len() {
        return Err(PipelineError::Input(format!(
            "{} predicted views vs {} ground-truth views",
            pi.len(),
            gi.len()
        )));
    }
    let mut views = Vec::with_capacity(pi.len());
    for ((id, a), (_, b)) in pi.iter().zip(&gi) {
        views.push(ViewMetrics {
            view_id: id.clone(),
            psnr_db: psnr(a, b)?,
            ssim: ssim(a, b)?,
        });
    }
    let n = views.len() as f64;
    let report = EvalReport {
        conventions: CONVENTIONS.into(),
        mean_psnr_db: views.iter().map(|v| v.psnr_db).sum::<f64>() / n,
        mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        views,
        geometry,
    };
    fs::create_dir_all(out)?;
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let mut w = csv::Writer::from_path(out.join("views.csv"))?;
    for v in &report.views {
        w.serialize(v)?;
    }
    w.flush()?;
    if let Some(geo) = &report.geometry {
        let mut w = csv::Writer::from_path(out.join("geometry.csv"))?;
        w.serialize(geo)?;
        w.flush()?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumImageReport {
    pub image: String,
    pub width: usize,
    pub height: usize,
    /// `(energy_fraction, cutoff)` pairs.
    pub cutoffs: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumSummary {
    pub images: Vec<SpectrumImageReport>,
    /// Mean cumulative profile, present when all images share one size.
    pub mean_profile: Option<Vec<(f64, f64)>>,
}

fn write_profile(path: &Path, profile: &[RadialStep]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "radius",
        "energy_fraction",
        "energy_fraction_no_dc",
        "bin_fraction",
    ])?;
    for s in profile {
        w.write_record(
            [
                s.radius,
                s.energy_fraction,
                s.energy_fraction_no_dc,
                s.bin_fraction,
            ]
            .map(|v| v.to_string()),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Log-amplitude heat map summed over channels, scaled to `[0, 1]`.
fn amplitude_map(img: &ImageBuffer) -> ImageBuffer {
    let amp = dft2(img).amplitude();
    let mut out = ImageBuffer::from_fn(amp.width(), amp.height(), 1, |x, y, _| {
        (0..amp.channels())
            .map(|c| amp.get(x, y, c))
            .sum::<f64>()
            .ln_1p()
    });
    let max = out.data().iter().fold(0.0f64, |m, v| m.max(*v));
    if max > 0.0 {
        out.data_mut().iter_mut().for_each(|v| *v /= max);
    }
    out
}

/// Amplitude spectra, cumulative radial energy and adaptive cutoffs for
/// every PNG in `input`.
pub fn run_analyze_spectrum(
    input: &Path,
    out: &Path,
    fractions: &[f64],
) -> Result<SpectrumSummary, PipelineError> {
    let files = png_files(input)?;
    if files.is_empty() {
        return Err(PipelineError::Input(format!(
            "{} contains no PNG files",
            input.display()
        )));
    }
    fs::create_dir_all(out)?;
    let mut images = Vec::new();
    let mut profiles = Vec::new();
    for f in &files {
        let stem = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let img = to_rgb(ImageBuffer::load_png(f)?);
        let spec = dft2(&img);
        amplitude_map(&img).save_png(out.join(format!("{stem}_amplitude.png")))?;
        let profile = radial_profile(&spec);
        write_profile(&out.join(format!("{stem}_profile.csv")), &profile)?;
        let cutoffs = fractions
            .iter()
            .map(|&fr| match adaptive_cutoff(&spec, fr) {
                Ok(c) => Ok((fr, c)),
                Err(FrequencyError::DegenerateSpectrum) => Ok((fr, 0.0)),
                Err(e) => Err(PipelineError::from(e)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        images.push(SpectrumImageReport {
            image: stem,
            width: img.width(),
            height: img.height(),
            cutoffs,
        });
        profiles.push(profile);
    }

    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    let mut header = vec!["image".to_string(), "width".into(), "height".into()];
    header.extend(fractions.iter().map(|f| format!("cutoff_{f}")));
    w.write_record(&header)?;
    for r in &images {
        let mut row = vec![r.image.clone(), r.width.to_string(), r.height.to_string()];
        row.extend(r.cutoffs.iter().map(|(_, c)| c.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let same_size = images
        .iter()
        .all(|r| (r.width, r.height) == (images[0].width, images[0].height));
    let mean_profile = same_size.then(|| {
        let n = profiles.len() as f64;
        (0..profiles[0].len())
            .map(|i| {
                let e = profiles.iter().map(|p| p[i].energy_fraction).sum::<f64>() / n;
                (profiles[0][i].radius, e)
            })
            .collect::<Vec<_>>()
    });
    if let Some(mp) = &mean_profile {
        let mut w = csv::Writer::from_path(out.join("mean_profile.csv"))?;
        w.write_record(["radius", "mean_energy_fraction"])?;
        for (r, e) in mp {
            w.write_record([r.to_string(), e.to_string()])?;
        }
        w.flush()?;
    }
    let summary = SpectrumSummary {
        images,
        mean_profile,
    };
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orbit_spec_parsing() {
        assert_eq!(
            parse_orbit("7,-30,0,30").unwrap(),
            (7, vec![-30.0, 0.0, 30.0])
        );
        assert!(parse_orbit("0,10").is_err());
        assert!(parse_orbit("4").is_err());
        assert!(parse_orbit("4,x").is_err());
    }
}
