//! Forward-diffusion noise schedules.
//!
//! Both kinds are parameterized by a schedule time `t ∈ [0, 1]`. A sample at
//! time `t` is `x_t = scale(t) · x_0 + sigma(t) · ε`. For the
//! variance-exploding kind `scale ≡ 1`; for the variance-preserving kind
//! `scale² + sigma² = 1` and the noise-to-signal ratio at `t = 0` equals
//! `sigma_min`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    VarianceExploding,
    VariancePreserving,
}

/// How the noise level is spread over `t` (variance-exploding only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Linear,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub t: f64,
    pub scale: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub spacing: Spacing,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl DiffusionSchedule {
    /// Variance-exploding schedule with `sigma(t)` linear in `t`.
    pub fn ve_linear(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::VarianceExploding, Spacing::Linear, sigma_min, sigma_max, 64)
    }

    /// Variance-exploding schedule with `sigma(t)` geometric in `t`.
    pub fn ve_geometric(sigma_min: f64, sigma_max: f64, num_steps: usize) -> Result<Self> {
        Self::new(
            ScheduleKind::VarianceExploding,
            Spacing::Geometric,
            sigma_min,
            sigma_max,
            num_steps,
        )
    }

    /// Variance-preserving schedule with linear `beta` between `beta_min` and `beta_max`.
    pub fn vp(sigma_min: f64, beta_min: f64, beta_max: f64, num_steps: usize) -> Result<Self> {
        let s = Self {
            kind: ScheduleKind::VariancePreserving,
            spacing: Spacing::Linear,
            sigma_min,
            sigma_max: f64::NAN,
            num_steps,
            beta_min,
            beta_max,
        };
        s.validate()?;
        Ok(Self {
            sigma_max: s.noise_level(1.0).sigma / s.noise_level(1.0).scale,
            ..s
        })
    }

    pub fn new(
        kind: ScheduleKind,
        spacing: Spacing,
        sigma_min: f64,
        sigma_max: f64,
        num_steps: usize,
    ) -> Result<Self> {
        let s = Self {
            kind,
            spacing,
            sigma_min,
            sigma_max,
            num_steps,
            beta_min: 0.1,
            beta_max: 20.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Input("schedule needs at least one step".into()));
        }
        if !(self.sigma_min >= 0.0) || !self.sigma_min.is_finite() {
            return Err(Error::Input(format!("sigma_min must be >= 0, got {}", self.sigma_min)));
        }
        match self.kind {
            ScheduleKind::VarianceExploding => {
                if !(self.sigma_max > self.sigma_min) || !self.sigma_max.is_finite() {
                    return Err(Error::Input(format!(
                        "sigma_max ({}) must exceed sigma_min ({})",
                        self.sigma_max, self.sigma_min
                    )));
                }
                if self.spacing == Spacing::Geometric && self.sigma_min <= 0.0 {
                    return Err(Error::Input("geometric spacing needs sigma_min > 0".into()));
                }
            }
            ScheduleKind::VariancePreserving => {
                if !(self.beta_min > 0.0 && self.beta_max >= self.beta_min) {
                    return Err(Error::Input("VP schedule needs 0 < beta_min <= beta_max".into()));
                }
                if (1.0 + self.sigma_min * self.sigma_min).ln()
                    >= self.beta_min + 0.5 * (self.beta_max - self.beta_min)
                {
                    return Err(Error::Input("VP sigma_min exceeds the terminal noise level".into()));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, t: f64) -> bool {
        (0.0..=1.0).contains(&t)
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !self.contains(t) {
            return Err(Error::Input(format!("time {t} outside schedule range [0, 1]")));
        }
        Ok(())
    }

    fn vp_integrated_beta(&self, s: f64) -> f64 {
        self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s * s
    }

    /// Physical VP time where the noise-to-signal ratio equals `sigma_min`.
    fn vp_start(&self) -> f64 {
        let target = (1.0 + self.sigma_min * self.sigma_min).ln();
        let a = 0.5 * (self.beta_max - self.beta_min);
        let b = self.beta_min;
        if a.abs() < 1e-300 {
            target / b
        } else {
            (-b + (b * b + 4.0 * a * target).sqrt()) / (2.0 * a)
        }
    }

    fn vp_physical(&self, t: f64) -> f64 {
        let s0 = self.vp_start();
        s0 + t * (1.0 - s0)
    }

    pub fn noise_level(&self, t: f64) -> NoiseLevel {
        match self.kind {
            ScheduleKind::VarianceExploding => {
                let sigma = match self.spacing {
                    Spacing::Linear => self.sigma_min + (self.sigma_max - self.sigma_min) * t,
                    Spacing::Geometric => {
                        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
                    }
                };
                NoiseLevel { t, scale: 1.0, sigma }
            }
            ScheduleKind::VariancePreserving => {
                let b = self.vp_integrated_beta(self.vp_physical(t));
                let scale = (-0.5 * b).exp();
                let sigma = (-(-b).exp_m1()).sqrt();
                NoiseLevel { t, scale, sigma }
            }
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.noise_level(t).sigma
    }

    /// `beta` expressed per unit of schedule time (VP drift coefficient).
    pub fn vp_beta(&self, t: f64) -> f64 {
        let s0 = self.vp_start();
        let s = self.vp_physical(t);
        (self.beta_min + (self.beta_max - self.beta_min) * s) * (1.0 - s0)
    }

    /// Decreasing time grid `1 = t_0 > … > t_steps = 0`.
    pub fn time_grid(&self, steps: usize) -> Vec<f64> {
        let steps = steps.max(1);
        (0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect()
    }
}

impl Default for DiffusionSchedule {
    /// Geometric VE schedule from 50 down to 0.02 with 64 steps.
    fn default() -> Self {
        Self::ve_geometric(0.02, 50.0, 64).expect("valid default schedule")
    }
}
