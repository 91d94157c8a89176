//! Cumulative signal-retention schedule ᾱ_t.

use crate::error::{DereflectError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Upper bound on the terminal signal fraction.
pub const TERMINAL_ALPHA_BAR_MAX: f64 = 0.01;

/// ᾱ_t for t ∈ [0, t_max], with ᾱ_0 = 1 exactly and a near-zero terminal.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Scaled-linear beta schedule: β interpolates linearly in √β space.
    pub fn scaled_linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(DereflectError::Validation("t_max must be at least 2".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(DereflectError::Validation(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let sqrt_s = beta_start.sqrt();
        let sqrt_e = beta_end.sqrt();
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0f64;
        for i in 0..t_max {
            let frac = i as f64 / (t_max - 1) as f64;
            let beta = (sqrt_s + (sqrt_e - sqrt_s) * frac).powi(2);
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        let sched = Self {
            t_max,
            beta_start,
            beta_end,
            alpha_bar,
        };
        sched.validate()?;
        Ok(sched)
    }

    /// Desk-scale default: 64 steps.
    pub fn toy() -> Result<Self> {
        Self::scaled_linear(64, 0.02, 0.16)
    }

    /// Full-scale reference parameters (1,000 steps).
    pub fn reference() -> Result<Self> {
        Self::scaled_linear(1000, 0.00085, 0.012)
    }

    /// Checks the schedule invariants.
    pub fn validate(&self) -> Result<()> {
        if self.alpha_bar.len() != self.t_max + 1 {
            return Err(DereflectError::Validation(format!(
                "alpha_bar has {} entries for t_max {}",
                self.alpha_bar.len(),
                self.t_max
            )));
        }
        if self.alpha_bar[0] != 1.0 {
            return Err(DereflectError::Validation("alpha_bar[0] must be exactly 1".into()));
        }
        for t in 1..=self.t_max {
            let (prev, cur) = (self.alpha_bar[t - 1], self.alpha_bar[t]);
            if !(cur > 0.0 && cur < prev && cur <= 1.0) {
                return Err(DereflectError::Validation(format!(
                    "alpha_bar not strictly decreasing in (0,1] at t={t}: {prev} -> {cur}"
                )));
            }
        }
        let terminal = self.alpha_bar[self.t_max];
        if terminal >= TERMINAL_ALPHA_BAR_MAX {
            return Err(DereflectError::Validation(format!(
                "terminal alpha_bar {terminal} must be below {TERMINAL_ALPHA_BAR_MAX}"
            )));
        }
        Ok(())
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sched: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        sched.validate()?;
        Ok(sched)
    }
}
