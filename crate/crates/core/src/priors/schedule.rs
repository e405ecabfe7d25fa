use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Latent, PriorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    /// β linear in t.
    Linear,
    /// √β linear in t.
    ScaledLinear,
}

/// Per-timestep SDS weight ω(t).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    OneMinusAlphaBar,
    Constant(f64),
}

/// Cumulative noise schedule ᾱ_t for t in `0..num_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bars: Vec<f64>,
}

pub const DEFAULT_BETA_START: f64 = 8.5e-4;
pub const DEFAULT_BETA_END: f64 = 1.2e-2;
pub const DEFAULT_NUM_STEPS: usize = 1000;

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(
            BetaSchedule::Linear,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
            DEFAULT_NUM_STEPS,
        )
        .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn new(
        kind: BetaSchedule,
        beta_start: f64,
        beta_end: f64,
        num_steps: usize,
    ) -> Result<Self, PriorError> {
        if num_steps < 2 {
            return Err(PriorError::Schedule("need at least 2 steps".into()));
        }
        if !(beta_start > 0.0 && beta_end > beta_start && beta_end < 1.0) {
            return Err(PriorError::Schedule(format!(
                "betas must satisfy 0 < start < end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let last = (num_steps - 1) as f64;
        let mut acc = 1.0;
        let mut alpha_bars = Vec::with_capacity(num_steps);
        for t in 0..num_steps {
            let f = t as f64 / last;
            let beta = match kind {
                BetaSchedule::Linear => beta_start + f * (beta_end - beta_start),
                BetaSchedule::ScaledLinear => {
                    let s = beta_start.sqrt() + f * (beta_end.sqrt() - beta_start.sqrt());
                    s * s
                }
            };
            acc *= 1.0 - beta;
            alpha_bars.push(acc);
        }
        if alpha_bars[0] < 0.999 {
            return Err(PriorError::Schedule(format!(
                "alpha_bar_0 = {} is below 0.999",
                alpha_bars[0]
            )));
        }
        Ok(Self { alpha_bars })
    }

    /// Schedule from explicit ᾱ values, which must lie in `(0, 1]` and be
    /// strictly decreasing.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self, PriorError> {
        if alpha_bars.is_empty() {
            return Err(PriorError::Schedule("empty schedule".into()));
        }
        if alpha_bars.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(PriorError::Schedule("alpha_bar outside (0, 1]".into()));
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(PriorError::Schedule(
                "alpha_bar must strictly decrease".into(),
            ));
        }
        Ok(Self { alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, PriorError> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(PriorError::InvalidTimestep(t, self.num_steps()))
    }

    pub fn weight(&self, t: usize, weighting: Weighting) -> Result<f64, PriorError> {
        let a = self.alpha_bar(t)?;
        Ok(match weighting {
            Weighting::OneMinusAlphaBar => 1.0 - a,
            Weighting::Constant(c) => c,
        })
    }
}

/// `z_t = √ᾱ_t·z + √(1−ᾱ_t)·ε`.
pub fn add_noise(
    z: &Latent,
    eps: &Latent,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Latent, PriorError> {
    z.check_shape(eps)?;
    let a = sched.alpha_bar(t)?;
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(z.zip_map(eps, |zv, ev| sa * zv + sb * ev))
}

/// Deterministic DDIM update from `t` to `t_prev`; `None` denotes the clean
/// endpoint with ᾱ = 1.
pub fn ddim_step(
    z_t: &Latent,
    eps_pred: &Latent,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
) -> Result<Latent, PriorError> {
    z_t.check_shape(eps_pred)?;
    let a_t = sched.alpha_bar(t)?;
    if !(a_t > 0.0) {
        return Err(PriorError::Schedule(format!("alpha_bar_{t} = {a_t}")));
    }
    let a_prev = match t_prev {
        Some(tp) if tp > t => {
            return Err(PriorError::Schedule(format!("t_prev {tp} exceeds t {t}")));
        }
        Some(tp) if tp == t => return Ok(z_t.clone()),
        Some(tp) => sched.alpha_bar(tp)?,
        None => 1.0,
    };
    let (sa_t, sb_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (sa_p, sb_p) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    Ok(z_t.zip_map(eps_pred, |z, e| {
        let z0 = (z - sb_t * e) / sa_t;
        sa_p * z0 + sb_p * e
    }))
}

/// Uniform timestep sampling over a fraction range of the schedule whose
/// upper bound anneals linearly with run progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimestepSampler {
    pub min_fraction: f64,
    pub max_fraction: f64,
    /// Upper bound reached at the end of the run.
    pub annealed_max_fraction: f64,
}

impl Default for TimestepSampler {
    fn default() -> Self {
        Self {
            min_fraction: 0.02,
            max_fraction: 0.98,
            annealed_max_fraction: 0.5,
        }
    }
}

impl TimestepSampler {
    pub fn validate(&self) -> Result<(), PriorError> {
        let ok = (0.0..=1.0).contains(&self.min_fraction)
            && (0.0..=1.0).contains(&self.max_fraction)
            && (0.0..=1.0).contains(&self.annealed_max_fraction)
            && self.min_fraction <= self.max_fraction
            && self.min_fraction <= self.annealed_max_fraction;
        if ok {
            Ok(())
        } else {
            Err(PriorError::Schedule(format!(
                "invalid timestep range {self:?}"
            )))
        }
    }

    /// Upper fraction at `progress` in `[0, 1]`.
    pub fn upper(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.max_fraction + (self.annealed_max_fraction - self.max_fraction) * p
    }

    pub fn sample(&self, rng: &mut impl Rng, progress: f64, num_steps: usize) -> usize {
        let last = (num_steps - 1) as f64;
        let lo = (self.min_fraction * last).round() as usize;
        let hi = ((self.upper(progress) * last).round() as usize).max(lo);
        rng.random_range(lo..=hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ImageBuffer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn latent(v: f64) -> Latent {
        Latent::new(ImageBuffer::filled(2, 2, 1, v))
    }

    #[test]
    fn default_schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.num_steps(), 1000);
        assert!(s.alpha_bar(0).unwrap() >= 0.999);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(matches!(
            s.alpha_bar(1000),
            Err(PriorError::InvalidTimestep(1000, 1000))
        ));
        let scaled = NoiseSchedule::new(BetaSchedule::ScaledLinear, 8.5e-4, 1.2e-2, 1000).unwrap();
        assert!(scaled.alpha_bar(999).unwrap() > s.alpha_bar(999).unwrap());
    }

    #[test]
    fn add_noise_examples() {
        let s = NoiseSchedule::from_alpha_bars(vec![1.0, 0.64, 1e-12]).unwrap();
        let z = latent(1.0);
        let eps = latent(0.3);
        assert_eq!(add_noise(&z, &eps, 0, &s).unwrap(), z);
        let mid = add_noise(&z, &latent(0.0), 1, &s).unwrap();
        assert!(mid.data().iter().all(|v| (v - 0.8).abs() < 1e-15));
        let end = add_noise(&z, &eps, 2, &s).unwrap();
        assert!(end.max_abs_diff(&eps) < 1e-5);
        assert!(add_noise(&z, &eps, 3, &s).is_err());
    }

    #[test]
    fn ddim_inverts_true_noise() {
        let s = NoiseSchedule::default();
        let z = Latent::new(ImageBuffer::from_fn(3, 2, 3, |x, y, c| {
            (x + 2 * y + c) as f64 * 0.1
        }));
        let eps = Latent::new(ImageBuffer::from_fn(3, 2, 3, |x, y, c| {
            (x as f64 - y as f64) * 0.7 + c as f64
        }));
        let zt = add_noise(&z, &eps, 600, &s).unwrap();
        let back = ddim_step(&zt, &eps, 600, None, &s).unwrap();
        assert!(back.max_abs_diff(&z) < 1e-9);
        assert_eq!(ddim_step(&zt, &eps, 600, Some(600), &s).unwrap(), zt);
        assert!(ddim_step(&zt, &eps, 600, Some(700), &s).is_err());
    }

    #[test]
    fn ddim_matches_closed_form() {
        let s = NoiseSchedule::default();
        let zt = Latent::new(ImageBuffer::from_fn(2, 2, 1, |x, y, _| {
            0.3 + x as f64 - 0.2 * y as f64
        }));
        let e = Latent::new(ImageBuffer::from_fn(2, 2, 1, |x, y, _| {
            0.1 * x as f64 + 0.4 * y as f64
        }));
        let (t, tp) = (500, 200);
        let out = ddim_step(&zt, &e, t, Some(tp), &s).unwrap();
        let (a, b) = (s.alpha_bar(t).unwrap(), s.alpha_bar(tp).unwrap());
        for (i, v) in out.data().iter().enumerate() {
            let x0 = (zt.data()[i] - (1.0 - a).sqrt() * e.data()[i]) / a.sqrt();
            let expected = b.sqrt() * x0 + (1.0 - b).sqrt() * e.data()[i];
            assert!((v - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn sampler_respects_annealed_range() {
        let sampler = TimestepSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..2000 {
            let progress = i as f64 / 2000.0;
            let t = sampler.sample(&mut rng, progress, 1000);
            assert!(t >= 20);
            assert!(t as f64 <= sampler.upper(progress) * 999.0 + 0.5);
        }
        assert_eq!(sampler.upper(1.0), 0.5);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(NoiseSchedule::from_alpha_bars(vec![0.9, 0.95]).is_err());
        assert!(NoiseSchedule::from_alpha_bars(vec![1.2]).is_err());
        assert!(NoiseSchedule::new(BetaSchedule::Linear, 0.1, 0.2, 1000).is_err());
    }
}
