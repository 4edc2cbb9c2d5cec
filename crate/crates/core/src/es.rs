//! Early stopping by windowed moving variance of the reconstructions.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsConfig {
    pub window: usize,
    pub patience: usize,
    pub enabled: bool,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self::super_resolution()
    }
}

impl EsConfig {
    /// Window 10, patience 100.
    pub fn super_resolution() -> Self {
        Self {
            window: 10,
            patience: 100,
            enabled: true,
        }
    }

    /// Window 50, patience 300.
    pub fn nonlinear_deblur() -> Self {
        Self {
            window: 50,
            patience: 300,
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::super_resolution()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsDecision {
    Continue,
    Stop,
}

/// Detector state; `S` is whatever snapshot lets the caller replay the best point.
#[derive(Debug, Clone)]
pub struct EsState<S> {
    config: EsConfig,
    queue: VecDeque<Tensor>,
    var_min: f64,
    last_var: Option<f64>,
    best: Option<(usize, S)>,
    stagnation: usize,
    pushes: usize,
}

impl<S> EsState<S> {
    pub fn new(config: EsConfig) -> Result<Self> {
        if config.window < 2 {
            return Err(Error::contract(format!("window must be at least 2, got {}", config.window)));
        }
        Ok(Self {
            config,
            queue: VecDeque::with_capacity(config.window + 1),
            var_min: f64::INFINITY,
            last_var: None,
            best: None,
            stagnation: 0,
            pushes: 0,
        })
    }

    pub fn config(&self) -> &EsConfig {
        &self.config
    }

    pub fn queue(&self) -> &VecDeque<Tensor> {
        &self.queue
    }

    pub fn var_min(&self) -> f64 {
        self.var_min
    }

    /// VAR of the most recent full window.
    pub fn last_var(&self) -> Option<f64> {
        self.last_var
    }

    /// Push index and snapshot at the lowest VAR so far.
    pub fn best(&self) -> Option<&(usize, S)> {
        self.best.as_ref()
    }

    pub fn into_best(self) -> Option<(usize, S)> {
        self.best
    }

    /// Pushes a reconstruction and decides whether to stop.
    ///
    /// `snapshot` is only called when the VAR reaches a new minimum.
    pub fn update(&mut self, recon: &Tensor, snapshot: impl FnOnce() -> S) -> EsDecision {
        let index = self.pushes;
        self.pushes += 1;
        self.queue.push_back(recon.clone());
        if self.queue.len() > self.config.window {
            self.queue.pop_front();
        }
        if self.queue.len() < self.config.window {
            self.last_var = None;
            return EsDecision::Continue;
        }
        let var = window_variance(self.queue.iter());
        self.last_var = Some(var);
        if var < self.var_min {
            self.var_min = var;
            self.best = Some((index, snapshot()));
            self.stagnation = 0;
        } else {
            self.stagnation += 1;
        }
        if self.stagnation >= self.config.patience {
            EsDecision::Stop
        } else {
            EsDecision::Continue
        }
    }
}

/// `(1/W) Σ_w ‖x_w − x̄‖²` over the window.
pub fn window_variance<'a>(window: impl Iterator<Item = &'a Tensor> + Clone) -> f64 {
    let count = window.clone().count();
    let Some(first) = window.clone().next() else {
        return 0.0;
    };
    let mut mean = vec![0.0; first.numel()];
    for x in window.clone() {
        for (m, v) in mean.iter_mut().zip(x.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    window
        .map(|x| {
            x.data()
                .iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>()
        })
        .sum::<f64>()
        / count as f64
}
