//! Discrete reverse steps and the composed sampler `R(z)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::prior::NoisePredictor;
use crate::rng::SeedStream;
use crate::schedule::{pick_substeps, NoiseSchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// η = 0: no injected noise, `R` is a pure function of the seed.
    DdimDeterministic,
    DdpmStochastic,
}

#[derive(Clone)]
pub struct ReverseProcess {
    prior: Arc<dyn NoisePredictor>,
    schedule: NoiseSchedule,
    substeps: Vec<usize>,
    variant: Variant,
}

impl std::fmt::Debug for ReverseProcess {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReverseProcess")
            .field("dim", &self.prior.dim())
            .field("steps", &self.schedule.len())
            .field("substeps", &self.substeps)
            .field("variant", &self.variant)
            .finish()
    }
}

impl ReverseProcess {
    /// `substeps` must be strictly increasing within `1..=T`.
    pub fn new(
        prior: Arc<dyn NoisePredictor>,
        schedule: NoiseSchedule,
        substeps: Vec<usize>,
        variant: Variant,
    ) -> Result<Self> {
        if substeps.is_empty() {
            return Err(Error::contract("reverse process needs at least one step"));
        }
        if substeps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("substeps must be strictly increasing"));
        }
        for &t in &substeps {
            schedule.check_step(t)?;
        }
        Ok(Self {
            prior,
            schedule,
            substeps,
            variant,
        })
    }

    /// `k` evenly spaced steps ending at `T`.
    pub fn with_steps(
        prior: Arc<dyn NoisePredictor>,
        schedule: NoiseSchedule,
        k: usize,
        variant: Variant,
    ) -> Result<Self> {
        let substeps = pick_substeps(&schedule, k)?;
        Self::new(prior, schedule, substeps, variant)
    }

    pub fn prior(&self) -> &Arc<dyn NoisePredictor> {
        &self.prior
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn substeps(&self) -> &[usize] {
        &self.substeps
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    /// `(t, t_prev)` pairs in execution order, ending with `t_prev = 0`.
    pub fn step_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::with_capacity(self.substeps.len());
        for i in (0..self.substeps.len()).rev() {
            let prev = if i == 0 { 0 } else { self.substeps[i - 1] };
            pairs.push((self.substeps[i], prev));
        }
        pairs
    }

    /// Noise prediction for any tensor whose size is a multiple of the prior dimension.
    pub fn epsilon<'t>(&self, x: Var<'t>, t: usize) -> Result<Var<'t>> {
        let shape = x.shape();
        let d = self.prior.dim();
        let numel: usize = shape.iter().product();
        if numel % d != 0 {
            return Err(Error::shape(
                "reverse_process",
                format!("input {shape:?} is not a batch of {d}-vectors"),
            ));
        }
        if shape.len() == 2 && shape[1] == d {
            return self.prior.epsilon(x.tape(), &self.schedule, t, x);
        }
        let flat = x.reshape(&[numel / d, d])?;
        self.prior
            .epsilon(x.tape(), &self.schedule, t, flat)?
            .reshape(&shape)
    }

    /// `x̂_0` from `x_t` and a noise prediction.
    pub fn x0_from_eps<'t>(&self, x: Var<'t>, eps: Var<'t>, t: usize) -> Result<Var<'t>> {
        self.schedule.check_step(t)?;
        let ab = self.schedule.alpha_bar(t);
        x.sub(eps.scale((1.0 - ab).sqrt()))
            .map(|v| v.scale(1.0 / ab.sqrt()))
    }

    pub fn predict_x0<'t>(&self, x: Var<'t>, t: usize) -> Result<Var<'t>> {
        let eps = self.epsilon(x, t)?;
        self.x0_from_eps(x, eps, t)
    }

    /// Deterministic recombination `√ᾱ' x̂_0 + √(1 − ᾱ') ε`; exactly `x̂_0` at `t_prev = 0`.
    pub fn ddim_combine<'t>(&self, x0: Var<'t>, eps: Var<'t>, t_prev: usize) -> Result<Var<'t>> {
        if t_prev == 0 {
            return Ok(x0);
        }
        let ab = self.schedule.alpha_bar(t_prev);
        x0.scale(ab.sqrt()).add(eps.scale((1.0 - ab).sqrt()))
    }

    pub fn ddim_step<'t>(&self, x: Var<'t>, t: usize, t_prev: usize) -> Result<Var<'t>> {
        if t_prev >= t {
            return Err(Error::contract(format!("ddim step needs t_prev < t, got {t_prev} >= {t}")));
        }
        let eps = self.epsilon(x, t)?;
        let x0 = self.x0_from_eps(x, eps, t)?;
        self.ddim_combine(x0, eps, t_prev)
    }

    /// Ancestral step from `t` to `t_prev`.
    ///
    /// For skipped steps the effective `α = ᾱ_t / ᾱ_{t_prev}` is used, which is
    /// exactly `α_t` when `t_prev = t − 1`. No noise is added on the final step.
    pub fn ddpm_step<'t>(
        &self,
        x: Var<'t>,
        t: usize,
        t_prev: usize,
        rng: &mut SeedStream,
    ) -> Result<Var<'t>> {
        if t_prev >= t {
            return Err(Error::contract(format!("ddpm step needs t_prev < t, got {t_prev} >= {t}")));
        }
        self.schedule.check_step(t)?;
        let (alpha, beta) = if t_prev + 1 == t {
            (self.schedule.alpha(t), self.schedule.beta(t))
        } else {
            let a = self.schedule.alpha_bar(t) / self.schedule.alpha_bar(t_prev);
            (a, 1.0 - a)
        };
        let ab = self.schedule.alpha_bar(t);
        let eps = self.epsilon(x, t)?;
        let mean = x
            .sub(eps.scale(beta / (1.0 - ab).sqrt()))?
            .scale(1.0 / alpha.sqrt());
        if t_prev == 0 {
            return Ok(mean);
        }
        let noise = rng.normal_tensor(&x.shape()).scale(beta.sqrt());
        mean.add(x.tape().constant(noise))
    }

    /// `R(z)`: the deterministic chain over all substeps, on the tape of `z`.
    pub fn reverse_fn<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        if self.variant == Variant::DdpmStochastic {
            return Err(Error::contract(
                "the stochastic variant has no deterministic reverse function; use sample",
            ));
        }
        let mut x = z;
        for (t, prev) in self.step_pairs() {
            x = self.ddim_step(x, t, prev)?;
        }
        Ok(x)
    }

    /// Every intermediate state of the deterministic chain, starting with `z`.
    pub fn trajectory(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        let mut states = vec![z.clone()];
        let mut x = z.clone();
        for (t, prev) in self.step_pairs() {
            let tape = Tape::new();
            x = self.ddim_step(tape.constant(x), t, prev)?.value().as_ref().clone();
            states.push(x.clone());
        }
        Ok(states)
    }

    /// Evaluates `R(z)` without recording gradients.
    pub fn eval(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.reverse_fn(tape.constant(z.clone()))?.value().as_ref().clone())
    }

    /// Runs the chain from explicit seeds (any shape); stochastic steps draw from `rng`.
    pub fn run_chain(&self, z: &Tensor, rng: &mut SeedStream) -> Result<Tensor> {
        let tape = Tape::new();
        let mut x = tape.constant(z.clone());
        for (t, prev) in self.step_pairs() {
            x = match self.variant {
                Variant::DdimDeterministic => self.ddim_step(x, t, prev)?,
                Variant::DdpmStochastic => self.ddpm_step(x, t, prev, rng)?,
            };
        }
        Ok(x.value().as_ref().clone())
    }

    /// `n` samples as the rows of an `[n, d]` tensor.
    ///
    /// Seeds come from the `sample/seed` stream of `rng` and ancestral noise
    /// from `sample/noise`.
    pub fn sample(&self, n: usize, rng: &SeedStream) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::contract("sample count must be positive"));
        }
        let z = rng.derive("sample/seed").normal_tensor(&[n, self.dim()]);
        self.run_chain(&z, &mut rng.derive("sample/noise"))
    }
}
