use std::io::{Cursor, Read, Write};

use nalgebra::{Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use freqsplat::distillation::{
    sds_pixel_gradient, sds_step_grad, Band, NoiseDraw, ResidualMode, SdsBranch, SdsSettings,
};
use freqsplat::evaluation::{align_normalize, chamfer, f_score, psnr, sample_points, ssim};
use freqsplat::frequency::{adaptive_cutoff, bandlimit, dft2, idft2, make_masks};
use freqsplat::priors::{
    add_noise, cfg_combine, ddim_step, wire, Conditioning, Encoder, Latent, NoiseSchedule,
    SceneOracleProvider, ScoreRequest, SyntheticProvider, ViewCondition, Weighting,
};
use freqsplat::render::{rasterize, RenderOptions};
use freqsplat::scene::{Camera, Gaussian, GaussianCloud, ImageBuffer};

fn image(seed: u64, w: usize, h: usize, c: usize) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBuffer::from_fn(w, h, c, |_, _, _| rng.random_range(-1.0..1.0))
}

fn cloud(seed: u64, n: usize) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::with_capacity(n);
    for _ in 0..n {
        cloud
            .push(Gaussian {
                position: Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)),
                scale: Vector3::from_fn(|_, _| rng.random_range(0.05..0.2)),
                rotation: Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize(),
                color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
                opacity: rng.random_range(0.2..0.9),
            })
            .unwrap();
    }
    cloud
}

fn points(seed: u64, n: usize, offset: f64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0) + offset))
        .collect()
}

fn noise_latent(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Latent {
    Latent::new(ImageBuffer::from_fn(w, h, 3, |_, _, _| {
        rng.sample(StandardNormal)
    }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parseval_holds(seed in any::<u64>(), w in 1usize..20, h in 1usize..20) {
        let img = image(seed, w, h, 2);
        let spatial: f64 = img.data().iter().map(|v| v * v).sum();
        let spectral: f64 = dft2(&img).amplitude().data().iter().map(|a| a * a).sum::<f64>() / (w * h) as f64;
        prop_assert!((spatial - spectral).abs() <= 1e-9 * spatial.max(1e-300));
    }

    #[test]
    fn dft_round_trip(seed in any::<u64>(), w in 1usize..20, h in 1usize..20) {
        let img = image(seed, w, h, 3);
        let back = idft2(&dft2(&img)).unwrap();
        prop_assert!(back.max_abs_diff(&img) < 1e-9);
    }

    #[test]
    fn cutoff_is_monotone_in_fraction(seed in any::<u64>(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let spec = dft2(&image(seed, 12, 10, 3));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(adaptive_cutoff(&spec, lo).unwrap() <= adaptive_cutoff(&spec, hi).unwrap());
    }

    #[test]
    fn amplitude_ignores_circular_shifts(seed in any::<u64>(), dx in 0usize..9, dy in 0usize..7) {
        let img = image(seed, 9, 7, 2);
        let shifted = ImageBuffer::from_fn(9, 7, 2, |x, y, c| img.get((x + dx) % 9, (y + dy) % 7, c));
        let diff = dft2(&img).amplitude().max_abs_diff(&dft2(&shifted).amplitude());
        prop_assert!(diff < 1e-9);
    }

    #[test]
    fn complementary_bands_partition_the_image(seed in any::<u64>(), cutoff in 0.0f64..=1.0, soft in 0.0f64..4.0) {
        let img = image(seed, 11, 8, 3);
        let (low, high) = make_masks(11, 8, cutoff, soft).unwrap();
        let sum = bandlimit(&img, &low).unwrap().zip_map(&bandlimit(&img, &high).unwrap(), |a, b| a + b);
        prop_assert!(sum.max_abs_diff(&img) < 1e-9);
    }

    #[test]
    fn raising_opacity_never_lowers_own_weight(seed in any::<u64>(), pick in 0usize..4, bump in 0.01f64..0.5) {
        // Gaussian `pick` is white, the rest and the background black, so the
        // rendered value is exactly its accumulated weight αᵢ·Tᵢ.
        let mut c = cloud(seed, 4);
        for i in 0..4 {
            c.colors_mut()[i] = Vector3::repeat(if i == pick { 1.0 } else { 0.0 });
        }
        let cam = Camera::new(30.0, 10.0, 1.5, 49.1, 16, 16).unwrap();
        let opts = RenderOptions::oracle([0.0; 3]);
        let before = rasterize(&c, &cam, &opts).color;
        let mut g = c.gaussian(pick);
        g.opacity = (g.opacity + bump).min(0.99);
        let mut raised = GaussianCloud::with_capacity(4);
        for i in 0..4 {
            raised.push(if i == pick { g } else { c.gaussian(i) }).unwrap();
        }
        let after = rasterize(&raised, &cam, &opts).color;
        for (b, a) in before.data().iter().zip(after.data()) {
            prop_assert!(*a >= *b - 1e-15, "weight fell from {b} to {a}");
        }
    }

    #[test]
    fn perfect_ddim_inversion(seed in any::<u64>(), t in 0usize..1000) {
        let sched = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = noise_latent(&mut rng, 5, 4);
        let eps = noise_latent(&mut rng, 5, 4);
        let z_t = add_noise(&z, &eps, t, &sched).unwrap();
        let back = ddim_step(&z_t, &eps, t, None, &sched).unwrap();
        prop_assert!(back.max_abs_diff(&z) < 1e-9);
    }

    #[test]
    fn cfg_is_affine_in_scale(a in -64i32..64, b in -64i32..64, s1 in -32i32..32, s2 in -32i32..32) {
        // Dyadic inputs keep every intermediate exactly representable.
        let lat = |v: i32| Latent::new(ImageBuffer::filled(2, 2, 1, v as f64 / 8.0));
        let (u, c) = (lat(a), lat(b));
        let (s1, s2) = (s1 as f64 / 4.0, s2 as f64 / 4.0);
        let lhs = cfg_combine(&u, &c, s1 + s2).unwrap().zip_map(&cfg_combine(&u, &c, s1).unwrap(), |x, y| x - y);
        let rhs = c.zip_map(&u, |cv, uv| s2 * (cv - uv));
        prop_assert_eq!(lhs.data(), rhs.data());
    }

    #[test]
    fn chamfer_is_symmetric(sa in any::<u64>(), sb in any::<u64>(), na in 1usize..60, nb in 1usize..60) {
        let (p, q) = (points(sa, na, 0.0), points(sb, nb, 0.3));
        prop_assert_eq!(chamfer(&p, &q).unwrap(), chamfer(&q, &p).unwrap());
    }

    #[test]
    fn adding_the_target_never_raises_chamfer(sa in any::<u64>(), sb in any::<u64>(), na in 1usize..60, nb in 1usize..60) {
        let (p, q) = (points(sa, na, 0.0), points(sb, nb, 0.5));
        let union: Vec<_> = p.iter().chain(&q).copied().collect();
        prop_assert!(chamfer(&p, &union).unwrap() <= chamfer(&p, &q).unwrap());
    }

    #[test]
    fn f_score_is_monotone_in_threshold(sa in any::<u64>(), sb in any::<u64>(), t1 in 0.0f64..2.0, t2 in 0.0f64..2.0) {
        let (p, q) = (points(sa, 40, 0.0), points(sb, 50, 0.2));
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(f_score(&p, &q, lo).unwrap() <= f_score(&p, &q, hi).unwrap());
    }

    #[test]
    fn psnr_ignores_shared_pixel_permutations(sa in any::<u64>(), sb in any::<u64>(), shuffle in any::<u64>()) {
        let (a, b) = (image(sa, 8, 6, 3).map(|v| v.abs()), image(sb, 8, 6, 3).map(|v| v.abs()));
        let mut perm: Vec<usize> = (0..48).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        for i in (1..48).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permute = |img: &ImageBuffer| ImageBuffer::from_fn(8, 6, 3, |x, y, c| {
            let p = perm[y * 8 + x];
            img.get(p % 8, p / 8, c)
        });
        let (d, e) = (psnr(&a, &b).unwrap(), psnr(&permute(&a), &permute(&b)).unwrap());
        prop_assert!((d - e).abs() < 1e-12);
    }

    #[test]
    fn ssim_ignores_shared_flips_and_transposes(sa in any::<u64>(), sb in any::<u64>(), op in 0usize..3) {
        let a = image(sa, 16, 16, 3).map(|v| 0.5 + 0.5 * v);
        let b = a.zip_map(&image(sb, 16, 16, 3), |x, n| (x + 0.2 * n).clamp(0.0, 1.0));
        let f = |img: &ImageBuffer| ImageBuffer::from_fn(16, 16, 3, |x, y, c| match op {
            0 => img.get(15 - x, y, c),
            1 => img.get(x, 15 - y, c),
            _ => img.get(y, x, c),
        });
        let (s, t) = (ssim(&a, &b).unwrap(), ssim(&f(&a), &f(&b)).unwrap());
        prop_assert!((s - t).abs() < 1e-12, "{s} vs {t}");
    }

    #[test]
    fn alignment_undoes_axis_affine_maps(seed in any::<u64>(), sx in 0.1f64..5.0, sy in 0.1f64..5.0, sz in 0.1f64..5.0,
                                         tx in -3.0f64..3.0, ty in -3.0f64..3.0, tz in -3.0f64..3.0) {
        let gt = points(seed, 80, 0.0);
        let moved: Vec<_> = gt.iter().map(|p| Vector3::new(sx * p.x + tx, sy * p.y + ty, sz * p.z + tz)).collect();
        let aligned = align_normalize(&moved, &gt).unwrap();
        let bounds = |v: &[Vector3<f64>]| v.iter().fold((v[0], v[0]), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        let ((alo, ahi), (glo, ghi)) = (bounds(&aligned), bounds(&gt));
        prop_assert!((alo - glo).amax() < 1e-9 && (ahi - ghi).amax() < 1e-9);
    }
}

#[test]
fn isotropic_samples_center_on_the_mean() {
    let mut c = GaussianCloud::with_capacity(1);
    let sigma = 0.3;
    c.push(Gaussian {
        position: Vector3::new(0.5, -1.0, 2.0),
        scale: Vector3::repeat(sigma),
        rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
        color: Vector3::repeat(0.5),
        opacity: 0.7,
    })
    .unwrap();
    for seed in 0..5 {
        let n = 4000;
        let pts = sample_points(&c, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mean = pts.iter().sum::<Vector3<f64>>() / n as f64;
        let bound = 3.0 * sigma / (n as f64).sqrt();
        assert!(
            (mean - c.positions()[0]).amax() < bound,
            "seed {seed}: mean {mean:?}"
        );
    }
}

#[test]
fn synthetic_residual_shrinks_along_descent() {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let target = ImageBuffer::from_fn(6, 5, 3, |_, _, _| rng.random_range(0.0..1.0));
    let provider = SyntheticProvider::new(Latent::new(target.clone()), sched.clone()).unwrap();
    let branch = SdsBranch {
        provider: &provider,
        conditioning: Conditioning::Unconditional,
        guidance_scale: 1.0,
        band: Band::AllPass,
    };
    let settings = SdsSettings::default();
    let mut x = ImageBuffer::filled(6, 5, 3, 0.5);
    // fixed (t, ε) so the residual is a function of x alone
    let draw = NoiseDraw {
        timestep: 400,
        noise: noise_latent(&mut rng, 6, 5),
    };
    let mut last = f64::INFINITY;
    for step in 0..60 {
        let g = sds_pixel_gradient(&x, &branch, &settings, &draw).unwrap();
        let norm = g.residual.norm();
        assert!(norm < last, "step {step}: residual {norm} after {last}");
        last = norm;
        x = x.zip_map(&g.pixel_grad, |v, d| v - 0.5 * d);
    }
    assert!(x.max_abs_diff(&target) < 0.1);
}

fn oracle_setup(w: usize) -> (GaussianCloud, Camera, Camera, RenderOptions, NoiseSchedule) {
    let scene = cloud(77, 6);
    let ref_cam = Camera::new(0.0, 0.0, 1.5, 49.1, w, w).unwrap();
    let cam = ref_cam.at(70.0, 15.0);
    (
        scene,
        ref_cam,
        cam,
        RenderOptions::oracle([1.0; 3]),
        NoiseSchedule::default(),
    )
}

#[test]
fn exact_noise_prediction_gives_zero_gradient() {
    let (scene, ref_cam, cam, opts, sched) = oracle_setup(12);
    let provider = SceneOracleProvider::new(
        scene.clone(),
        ref_cam,
        opts,
        Encoder::Identity,
        sched.clone(),
    );
    let reference = rasterize(&scene, &ref_cam, &opts).color;
    let branch = SdsBranch {
        provider: &provider,
        conditioning: Conditioning::View(
            ViewCondition::relative(reference, &ref_cam, &cam).unwrap(),
        ),
        guidance_scale: 5.0,
        band: Band::AllPass,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in [20, 300, 900] {
        let draw = NoiseDraw {
            timestep: t,
            noise: noise_latent(&mut rng, 12, 12),
        };
        let (grads, info, _) =
            sds_step_grad(&scene, &cam, &opts, &branch, &SdsSettings::default(), &draw).unwrap();
        assert!(
            info.residual.norm() < 1e-9,
            "t {t}: residual {}",
            info.residual.norm()
        );
        let worst = (0..scene.len())
            .flat_map(|i| grads.flat(i))
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-9, "t {t}: gradient {worst}");
    }
}

#[test]
fn doubling_the_weight_doubles_the_gradient() {
    let (scene, ref_cam, cam, opts, sched) = oracle_setup(10);
    let target = cloud(78, 5);
    let provider =
        SceneOracleProvider::new(target, ref_cam, opts, Encoder::Identity, sched.clone());
    let reference = rasterize(&scene, &ref_cam, &opts).color;
    let branch = SdsBranch {
        provider: &provider,
        conditioning: Conditioning::View(
            ViewCondition::relative(reference, &ref_cam, &cam).unwrap(),
        ),
        guidance_scale: 5.0,
        band: Band::Low {
            cutoff: freqsplat::distillation::CutoffRule::Fixed(0.4),
            softness: 2.0,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draw = NoiseDraw {
        timestep: 500,
        noise: noise_latent(&mut rng, 10, 10),
    };
    let with = |w: f64| {
        let settings = SdsSettings {
            weighting: Weighting::Constant(w),
            mode: ResidualMode::Filtered,
            ..SdsSettings::default()
        };
        sds_step_grad(&scene, &cam, &opts, &branch, &settings, &draw)
            .unwrap()
            .0
    };
    let (one, two) = (with(0.7), with(1.4));
    for i in 0..scene.len() {
        let doubled = one.flat(i).map(|v| 2.0 * v);
        assert_eq!(two.flat(i), doubled, "gaussian {i}");
    }
}

/// In-memory duplex: reads from `input`, collects writes.
struct Pipe {
    input: Cursor<Vec<u8>>,
    output: Vec<u8>,
}

impl Read for Pipe {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        self.input.read(buf)
    }
}

impl Write for Pipe {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.output.write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn encode_request_bytes(req: &ScoreRequest) -> Vec<u8> {
    let mut out = Vec::new();
    wire::write_request(&mut out, req).unwrap();
    out
}

/// Runs the server over `bytes`; returns its served count (if it ended
/// cleanly) and the number of frames it wrote.
fn serve_bytes(provider: &SyntheticProvider, bytes: Vec<u8>) -> (Option<usize>, usize) {
    let mut pipe = Pipe {
        input: Cursor::new(bytes),
        output: Vec::new(),
    };
    let served = wire::serve(&mut pipe, provider, 1 << 16).ok();
    let mut replies = Cursor::new(pipe.output);
    let mut frames = 0;
    while wire::read_frame(&mut replies, usize::MAX).is_ok() {
        frames += 1;
    }
    (served, frames)
}

#[test]
fn every_valid_request_gets_exactly_one_response() {
    let sched = NoiseSchedule::default();
    let provider = SyntheticProvider::new(Latent::zeros(4, 3, 2), sched).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..6 {
        let mut bytes = Vec::new();
        for i in 0..k {
            let req = ScoreRequest {
                latent: Latent::new(ImageBuffer::from_fn(4, 3, 2, |_, _, _| {
                    rng.random_range(-1.0..1.0)
                })),
                timestep: 100 * i + 7,
                conditioning: Conditioning::Text(vec![0.5; 3]),
                guidance_scale: 7.5,
            };
            bytes.extend(encode_request_bytes(&req));
        }
        let (served, replies) = serve_bytes(&provider, bytes);
        assert_eq!(served, Some(k));
        assert_eq!(replies, k);
    }
}

#[test]
fn fuzzed_frames_never_crash_the_server() {
    let provider =
        SyntheticProvider::new(Latent::zeros(2, 2, 1), NoiseSchedule::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let valid = encode_request_bytes(&ScoreRequest {
        latent: Latent::zeros(2, 2, 1),
        timestep: 3,
        conditioning: Conditioning::Unconditional,
        guidance_scale: 1.0,
    });
    for i in 0..10_000 {
        let bytes: Vec<u8> = if i % 2 == 0 {
            let n = rng.random_range(0..256);
            (0..n).map(|_| rng.random()).collect()
        } else {
            // corrupt a valid request in a few places
            let mut b = valid.clone();
            for _ in 0..rng.random_range(1..4) {
                let j = rng.random_range(0..b.len());
                b[j] = rng.random();
            }
            b.truncate(rng.random_range(0..=b.len()));
            b
        };
        let _ = serve_bytes(&provider, bytes);
    }
}
