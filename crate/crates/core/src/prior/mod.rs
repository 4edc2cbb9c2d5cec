//! Score priors: the closed-form mixture oracle and the trainable network.

mod gmm;
mod neural;

pub use gmm::GmmPrior;
pub use neural::NeuralScore;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState, ParamGroup};
use crate::rng::SeedStream;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Anything that predicts the injected noise `ε` from `x_t`.
///
/// `x` is `[n, d]`; the output has the same shape and stays on the tape.
pub trait NoisePredictor: Send + Sync {
    fn dim(&self) -> usize;

    fn epsilon<'t>(
        &self,
        tape: &'t Tape,
        schedule: &NoiseSchedule,
        t: usize,
        x: Var<'t>,
    ) -> Result<Var<'t>>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ScorePrior {
    Analytic(GmmPrior),
    Neural(NeuralScore),
}

impl NoisePredictor for ScorePrior {
    fn dim(&self) -> usize {
        match self {
            ScorePrior::Analytic(g) => g.dim(),
            ScorePrior::Neural(n) => n.dim(),
        }
    }

    fn epsilon<'t>(
        &self,
        tape: &'t Tape,
        schedule: &NoiseSchedule,
        t: usize,
        x: Var<'t>,
    ) -> Result<Var<'t>> {
        match self {
            ScorePrior::Analytic(g) => g.epsilon(tape, schedule, t, x),
            ScorePrior::Neural(n) => n.epsilon(tape, schedule, t, x),
        }
    }
}

impl NoisePredictor for GmmPrior {
    fn dim(&self) -> usize {
        GmmPrior::dim(self)
    }

    fn epsilon<'t>(&self, tape: &'t Tape, schedule: &NoiseSchedule, t: usize, x: Var<'t>) -> Result<Var<'t>> {
        GmmPrior::epsilon(self, tape, schedule, t, x)
    }
}

/// Exact `ε` of a Gaussian-mixture prior; see [`GmmPrior`].
pub fn analytic_epsilon<'t>(
    prior: &GmmPrior,
    schedule: &NoiseSchedule,
    t: usize,
    x: Var<'t>,
) -> Result<Var<'t>> {
    prior.epsilon(x.tape(), schedule, t, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4_000,
            batch: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: NeuralScore,
    /// Denoising loss of every step's minibatch.
    pub losses: Vec<f64>,
}

/// Denoising score matching: minimise `‖ε − ε_θ(√ᾱ_t x_0 + √(1 − ᾱ_t) ε, t)‖²`.
///
/// `dataset` is `[N, d]`. Deterministic given `config.seed`.
pub fn train_score(
    dataset: &Tensor,
    schedule: &NoiseSchedule,
    net: NeuralScore,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let [n, d] = dataset.shape()[..] else {
        return Err(Error::shape("train_score", format!("dataset {:?}", dataset.shape())));
    };
    if d != net.dim() {
        return Err(Error::shape(
            "train_score",
            format!("dataset dim {d} vs network dim {}", net.dim()),
        ));
    }
    if net.steps() != schedule.len() {
        return Err(Error::contract("network time table does not match schedule"));
    }
    if config.batch == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let root = SeedStream::new(config.seed);
    let mut batch_rng = root.derive("train/batch");
    let mut time_rng = root.derive("train/time");
    let mut noise_rng = root.derive("train/noise");

    let mut groups = vec![ParamGroup::new("network", net.params().to_vec(), config.lr)?];
    let mut adam = AdamState::new(AdamConfig::default());
    let mut losses = Vec::with_capacity(config.steps);
    let mut net = net;
    for step in 0..config.steps {
        let rows: Vec<usize> = (0..config.batch).map(|_| batch_rng.below(n)).collect();
        let times: Vec<usize> = (0..config.batch)
            .map(|_| 1 + time_rng.below(schedule.len()))
            .collect();
        let noise = noise_rng.normal_tensor(&[config.batch, d]);
        let mut noisy = vec![0.0; config.batch * d];
        for (b, (&r, &t)) in rows.iter().zip(&times).enumerate() {
            let ab = schedule.alpha_bar(t);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            for c in 0..d {
                noisy[b * d + c] = sa * dataset.data()[r * d + c] + sn * noise.data()[b * d + c];
            }
        }
        let tape = Tape::new();
        let params: Vec<Var<'_>> = groups[0].params.iter().map(|p| tape.leaf(p.clone())).collect();
        let x = tape.constant(Tensor::from_parts(vec![config.batch, d], noisy));
        let target = tape.constant(noise);
        let pred = net.forward(&params, x, &times, schedule)?;
        let loss = pred.mse(target)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = params.iter().map(|p| grads.wrt(*p)).collect();
        adam_step(&mut groups, &[g], &mut adam).map_err(|e| match e {
            Error::NonFiniteGradient { .. } => Error::Diverged { step },
            other => other,
        })?;
    }
    net.params_mut().clone_from_slice(&groups[0].params);
    Ok(TrainOutcome { net, losses })
}
