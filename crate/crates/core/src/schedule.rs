//! Discrete variance schedules and reverse-step subsequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `β_1..β_T` with the derived `α_t = 1 − β_t` and `ᾱ_t = ∏_{s≤t} α_s`.
///
/// Step indices are 1-based; index 0 is the clean-data endpoint with `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::contract("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::contract(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::contract(format!(
                "step index {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Linearly spaced betas from `beta_start` to `beta_end` over `steps` steps.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::contract("schedule needs T >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::contract(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// `count` evenly spaced step indices in increasing order, always ending at `T`.
///
/// Index `i` (1-based) is `ceil(i·T/count)`; callers traverse the list in reverse.
pub fn pick_substeps(schedule: &NoiseSchedule, count: usize) -> Result<Vec<usize>> {
    let t = schedule.len();
    if count == 0 || count > t {
        return Err(Error::contract(format!(
            "substep count {count} outside 1..={t}"
        )));
    }
    Ok((1..=count).map(|i| (i * t).div_ceil(count)).collect())
}
