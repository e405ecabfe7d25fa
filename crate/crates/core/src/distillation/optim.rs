use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::render::CloudGradients;
use crate::scene::GaussianCloud;

/// Learning rates per parameter group. The position rate decays
/// exponentially from `position` to `position_final` over the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    pub position_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub color: f64,
    pub opacity: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1e-4,
            position_final: 2e-5,
            scale: 5e-3,
            rotation: 1e-3,
            color: 1e-2,
            opacity: 5e-2,
        }
    }
}

impl LearningRates {
    pub fn position_at(&self, progress: f64) -> f64 {
        if self.position <= 0.0 || self.position_final <= 0.0 {
            return self.position.max(0.0) * (1.0 - progress.clamp(0.0, 1.0));
        }
        let p = progress.clamp(0.0, 1.0);
        self.position * (self.position_final / self.position).powf(p)
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.position,
            self.position_final,
            self.scale,
            self.rotation,
            self.color,
            self.opacity,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(format!("learning rates must be finite and >= 0: {self:?}"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adaptive moment estimation over the unconstrained cloud parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: CloudGradients,
    v: CloudGradients,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            m: CloudGradients::zeros(n),
            v: CloudGradients::zeros(n),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update, then renormalizes quaternions and clamps colors.
    pub fn step(
        &mut self,
        cloud: &mut GaussianCloud,
        grads: &CloudGradients,
        lr: &LearningRates,
        progress: f64,
    ) {
        assert_eq!(cloud.len(), grads.len());
        assert_eq!(self.m.len(), grads.len());
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        let update = |param: &mut f64, g: f64, m: &mut f64, v: &mut f64, rate: f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            if rate > 0.0 {
                *param -= rate * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        };
        let pos_lr = lr.position_at(progress);
        for i in 0..cloud.len() {
            step_vec3(
                &mut cloud.positions_mut()[i],
                &grads.positions[i],
                &mut self.m.positions[i],
                &mut self.v.positions[i],
                pos_lr,
                &update,
            );
            step_vec3(
                &mut cloud.log_scales_mut()[i],
                &grads.log_scales[i],
                &mut self.m.log_scales[i],
                &mut self.v.log_scales[i],
                lr.scale,
                &update,
            );
            step_vec4(
                &mut cloud.raw_rotations_mut()[i],
                &grads.rotations[i],
                &mut self.m.rotations[i],
                &mut self.v.rotations[i],
                lr.rotation,
                &update,
            );
            step_vec3(
                &mut cloud.colors_mut()[i],
                &grads.colors[i],
                &mut self.m.colors[i],
                &mut self.v.colors[i],
                lr.color,
                &update,
            );
            update(
                &mut cloud.opacity_logits_mut()[i],
                grads.opacity_logits[i],
                &mut self.m.opacity_logits[i],
                &mut self.v.opacity_logits[i],
                lr.opacity,
            );
        }
        cloud.project_constraints();
    }
}

fn step_vec3(
    p: &mut Vector3<f64>,
    g: &Vector3<f64>,
    m: &mut Vector3<f64>,
    v: &mut Vector3<f64>,
    rate: f64,
    update: &impl Fn(&mut f64, f64, &mut f64, &mut f64, f64),
) {
    for k in 0..3 {
        update(&mut p[k], g[k], &mut m[k], &mut v[k], rate);
    }
}

fn step_vec4(
    p: &mut Vector4<f64>,
    g: &Vector4<f64>,
    m: &mut Vector4<f64>,
    v: &mut Vector4<f64>,
    rate: f64,
    update: &impl Fn(&mut f64, f64, &mut f64, &mut f64, f64),
) {
    for k in 0..4 {
        update(&mut p[k], g[k], &mut m[k], &mut v[k], rate);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian;

    #[test]
    fn position_rate_decays_between_endpoints() {
        let lr = LearningRates::default();
        assert_eq!(lr.position_at(0.0), 1e-4);
        assert!((lr.position_at(1.0) - 2e-5).abs() < 1e-18);
        assert!(lr.position_at(0.5) < 1e-4 && lr.position_at(0.5) > 2e-5);
    }

    #[test]
    fn first_step_moves_each_parameter_by_its_rate() {
        let mut cloud = GaussianCloud::new();
        cloud
            .push(Gaussian {
                position: Vector3::zeros(),
                scale: Vector3::new(0.1, 0.1, 0.1),
                rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                color: Vector3::new(0.5, 0.5, 0.5),
                opacity: 0.5,
            })
            .unwrap();
        let mut g = CloudGradients::zeros(1);
        g.positions[0] = Vector3::new(3.0, -2.0, 0.0);
        g.colors[0] = Vector3::new(1.0, 1.0, -1.0);
        g.opacity_logits[0] = 0.5;
        let lr = LearningRates::default();
        let mut adam = Adam::new(AdamConfig::default(), 1);
        adam.step(&mut cloud, &g, &lr, 0.0);
        let p = cloud.positions()[0];
        assert!((p.x + 1e-4).abs() < 1e-9 && (p.y - 1e-4).abs() < 1e-9 && p.z == 0.0);
        assert!((cloud.colors()[0].x - 0.49).abs() < 1e-8);
        assert!((cloud.opacity_logits()[0] + 5e-2).abs() < 1e-8);
    }

    #[test]
    fn zero_rate_freezes_group() {
        let mut cloud = GaussianCloud::new();
        cloud.push_raw(
            Vector3::zeros(),
            Vector3::zeros(),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            Vector3::zeros(),
            0.0,
        );
        let mut g = CloudGradients::zeros(1);
        g.positions[0] = Vector3::new(1.0, 1.0, 1.0);
        let lr = LearningRates {
            position: 0.0,
            position_final: 0.0,
            ..LearningRates::default()
        };
        Adam::new(AdamConfig::default(), 1).step(&mut cloud, &g, &lr, 0.3);
        assert_eq!(cloud.positions()[0], Vector3::zeros());
    }
}
