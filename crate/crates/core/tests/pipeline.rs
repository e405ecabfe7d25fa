use std::fs;
use std::path::Path;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use freqsplat::distillation::HfConditioning;
use freqsplat::frequency::{dft2, radial_profile};
use freqsplat::pipeline::{
    run_analyze_spectrum, run_eval, run_generate, run_render, Config, PipelineError, ProviderKind,
};
use freqsplat::scene::{ply, Gaussian, GaussianCloud, ImageBuffer};

fn scene(seed: u64, n: usize) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::with_capacity(n);
    for _ in 0..n {
        cloud
            .push(Gaussian {
                position: Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)),
                scale: Vector3::from_fn(|_, _| rng.random_range(0.04..0.12)),
                rotation: Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize(),
                color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
                opacity: rng.random_range(0.5..0.95),
            })
            .unwrap();
    }
    cloud
}

fn oracle_config(dir: &Path, iterations: usize) -> Config {
    let gt = dir.join("gt.ply");
    ply::write_cloud(&gt, &scene(1, 30)).unwrap();
    let mut cfg = Config::defaults();
    cfg.run.output_dir = dir.join("out");
    cfg.run.iterations = iterations;
    cfg.run.oracle = true;
    cfg.init.count = 64;
    cfg.views.width = 24;
    cfg.views.height = 24;
    cfg.views.scene = Some(gt);
    cfg.views.n_aux = 2;
    cfg.prior_3d.kind = ProviderKind::SceneOracle;
    cfg.prior_2d.kind = ProviderKind::SceneOracle;
    cfg.prior_2d.conditioning = HfConditioning::View;
    cfg.orbit.n_azimuth = 3;
    cfg.orbit.elevations = vec![0.0];
    cfg
}

#[test]
fn shipped_config_lists_every_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(Config::from_toml_str(&text).unwrap(), Config::defaults());
    let shipped: toml::Table = text.parse().unwrap();
    let defaults = toml::Table::try_from(Config::defaults()).unwrap();
    for (section, keys) in &defaults {
        let shipped = shipped[section].as_table().unwrap();
        for key in keys.as_table().unwrap().keys() {
            assert!(
                shipped.contains_key(key),
                "{section}.{key} missing from shipped config"
            );
        }
    }
}

#[test]
fn zero_iterations_exports_the_initial_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = oracle_config(dir.path(), 0);
    let summary = run_generate(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let init = freqsplat::pipeline::init_gaussians(&cfg.init, &mut rng).unwrap();
    let expected = dir.path().join("init.ply");
    ply::write_cloud(&expected, &init).unwrap();
    assert_eq!(
        fs::read(&summary.ply).unwrap(),
        fs::read(&expected).unwrap()
    );
    let out_dir = &cfg.run.output_dir;
    assert!(out_dir.join("config.resolved.toml").exists());
    assert!(out_dir.join("metrics.csv").exists());
    assert_eq!(fs::read_dir(out_dir.join("renders")).unwrap().count(), 3);
}

#[test]
fn generate_is_reproducible_from_its_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = oracle_config(dir.path(), 6);
    let first = run_generate(&cfg).unwrap();
    assert_eq!(first.iterations, 6);
    let metrics = fs::read_to_string(cfg.run.output_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 7);

    let snapshot = fs::read_to_string(cfg.run.output_dir.join("config.resolved.toml")).unwrap();
    let mut again = Config::from_toml_str(&snapshot).unwrap();
    assert_eq!(again, cfg);
    again.run.output_dir = dir.path().join("again");
    let second = run_generate(&again).unwrap();
    assert_eq!(fs::read(first.ply).unwrap(), fs::read(second.ply).unwrap());
}

#[test]
fn unreachable_remote_prior_is_a_provider_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = oracle_config(dir.path(), 2);
    cfg.prior_3d.kind = ProviderKind::Remote;
    cfg.prior_3d.endpoint = "127.0.0.1:1".into();
    cfg.prior_3d.timeout_ms = 500;
    let err = run_generate(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}

#[test]
fn eval_of_identical_inputs_hits_the_sentinels() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.ply");
    ply::write_cloud(&gt, &scene(4, 40)).unwrap();
    let mut cfg = Config::defaults();
    cfg.views.width = 16;
    cfg.views.height = 16;
    cfg.orbit.eval_points = 2000;
    let report = run_eval(&gt, &gt, &dir.path().join("eval"), &cfg).unwrap();
    assert_eq!(report.views.len(), 21);
    assert_eq!(report.mean_psnr_db, 99.0);
    assert!((report.mean_ssim - 1.0).abs() < 1e-12);
    let geo = report.geometry.unwrap();
    assert_eq!(geo.cd, 0.0);
    assert_eq!(geo.fscore, 1.0);

    let csv = fs::read_to_string(dir.path().join("eval/views.csv")).unwrap();
    assert_eq!(csv.lines().count(), 22);
    assert!(dir.path().join("eval/report.json").exists());
    assert!(dir.path().join("eval/geometry.csv").exists());
}

#[test]
fn eval_pairs_render_folders_and_rejects_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.ply");
    ply::write_cloud(&gt, &scene(5, 20)).unwrap();
    let mut cfg = Config::defaults();
    cfg.views.width = 16;
    cfg.views.height = 16;
    let renders = dir.path().join("renders");
    let paths = run_render(&gt, &cfg.orbit, &cfg.views, &renders).unwrap();
    assert_eq!(paths.len(), 21);

    let report = run_eval(&renders, &gt, &dir.path().join("eval"), &cfg).unwrap();
    assert_eq!(report.views.len(), 21);
    assert!(report.geometry.is_none());
    assert!(report.mean_psnr_db > 40.0, "{}", report.mean_psnr_db);

    fs::remove_file(&paths[0]).unwrap();
    let err = run_eval(&renders, &gt, &dir.path().join("eval2"), &cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Input(_)), "{err}");
}

fn write_folder(dir: &Path, images: &[ImageBuffer]) {
    fs::create_dir_all(dir).unwrap();
    for (i, img) in images.iter().enumerate() {
        img.save_png(dir.join(format!("img_{i:02}.png"))).unwrap();
    }
}

#[test]
fn spectrum_of_constant_images_has_zero_cutoffs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    write_folder(
        &input,
        &[
            ImageBuffer::filled(32, 32, 3, 0.4),
            ImageBuffer::filled(32, 32, 3, 0.0),
        ],
    );
    let out = dir.path().join("out");
    let summary = run_analyze_spectrum(&input, &out, &[0.5, 0.9, 0.99]).unwrap();
    for r in &summary.images {
        assert!(r.cutoffs.iter().all(|(_, c)| *c == 0.0), "{r:?}");
    }
    for f in [
        "img_00_amplitude.png",
        "img_00_profile.csv",
        "summary.csv",
        "mean_profile.csv",
        "summary.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn white_noise_energy_tracks_bin_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = ImageBuffer::from_fn(64, 64, 3, |_, _, _| rng.random_range(0.0..1.0));
    let profile = radial_profile(&dft2(&img));
    let n = profile.last().unwrap();
    let total_bins = 64.0 * 64.0;
    let mut worst: f64 = 0.0;
    for s in &profile[1..] {
        let ac_bins = (s.bin_fraction * total_bins - 1.0) / (total_bins - 1.0);
        worst = worst.max((s.energy_fraction_no_dc - ac_bins).abs());
    }
    assert_eq!(n.bin_fraction, 1.0);
    assert!(worst < 0.05, "worst deviation {worst}");
}

fn box_blur(img: &ImageBuffer, r: usize) -> ImageBuffer {
    let (w, h) = (img.width() as isize, img.height() as isize);
    ImageBuffer::from_fn(img.width(), img.height(), img.channels(), |x, y, c| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for dy in -(r as isize)..=r as isize {
            for dx in -(r as isize)..=r as isize {
                let (xx, yy) = (x as isize + dx, y as isize + dy);
                if (0..w).contains(&xx) && (0..h).contains(&yy) {
                    acc += img.get(xx as usize, yy as usize, c);
                    n += 1.0;
                }
            }
        }
        acc / n
    })
}

#[test]
fn blurring_lowers_the_cutoff() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..5 {
        // overlapping high-contrast rectangles with sensor noise
        let mut photo = ImageBuffer::filled(48, 48, 3, 0.5);
        for _ in 0..12 {
            let (x0, y0) = (rng.random_range(0..40), rng.random_range(0..40));
            let (x1, y1) = (x0 + rng.random_range(4..24), y0 + rng.random_range(4..24));
            let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            for y in y0..y1.min(48) {
                for x in x0..x1.min(48) {
                    (0..3).for_each(|c| photo.set(x, y, c, color[c]));
                }
            }
        }
        for v in photo.data_mut() {
            *v = (*v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
        }
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in");
        write_folder(&input, &[photo.clone(), box_blur(&photo, 2)]);
        let summary = run_analyze_spectrum(&input, &dir.path().join("out"), &[0.9]).unwrap();
        let (sharp, blurred) = (
            summary.images[0].cutoffs[0].1,
            summary.images[1].cutoffs[0].1,
        );
        assert!(
            blurred < sharp,
            "trial {trial}: blurred {blurred} vs sharp {sharp}"
        );
    }
}

#[test]
fn empty_spectrum_folder_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_analyze_spectrum(dir.path(), &dir.path().join("out"), &[0.9]).unwrap_err();
    assert_eq!(err.exit_code(), 6);
}
