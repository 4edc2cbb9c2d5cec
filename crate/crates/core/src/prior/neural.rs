//! MLP noise predictor `ε_θ(x, t)` on flattened inputs.
//!
//! Time enters through a learned embedding table with one row per schedule
//! step; the row is added to the first hidden pre-activation.
//!
//! The MLP output is added to the exact `ε` of an independent per-coordinate
//! Gaussian with the dataset's mean and variance,
//! `√(1 − ᾱ_t) (x − √ᾱ_t m) / (ᾱ_t v + 1 − ᾱ_t)`, so the network only learns
//! the correlations. The last layer starts at zero.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralScore {
    dim: usize,
    widths: Vec<usize>,
    steps: usize,
    /// `time_embedding`, then `weight`/`bias` per layer.
    params: Vec<Tensor>,
    /// Per-coordinate data mean and variance, `[1, dim]` each.
    data_mean: Tensor,
    data_var: Tensor,
}

impl NeuralScore {
    /// Randomly initialised network: `dim → widths… → dim`, time table of `steps` rows.
    pub fn new(dim: usize, widths: &[usize], steps: usize, rng: &mut SeedStream) -> Result<Self> {
        if dim == 0 || steps == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::contract(format!(
                "invalid network layout: dim {dim}, widths {widths:?}, steps {steps}"
            )));
        }
        let mut params = Vec::new();
        params.push(rng.normal_tensor(&[steps, widths[0]]).scale(0.1));
        let mut fan_in = dim;
        for &w in widths {
            let std = (1.0 / fan_in as f64).sqrt();
            params.push(rng.normal_tensor(&[fan_in, w]).scale(std));
            params.push(Tensor::zeros(&[1, w]));
            fan_in = w;
        }
        params.push(Tensor::zeros(&[fan_in, dim]));
        params.push(Tensor::zeros(&[1, dim]));
        Ok(Self {
            dim,
            widths: widths.to_vec(),
            steps,
            params,
            data_mean: Tensor::zeros(&[1, dim]),
            data_var: Tensor::ones(&[1, dim]),
        })
    }

    /// Replaces the closed-form part's statistics; both are `[1, dim]`, variances nonnegative.
    pub fn with_data_stats(mut self, mean: Tensor, var: Tensor) -> Result<Self> {
        for (name, t) in [("mean", &mean), ("variance", &var)] {
            if t.shape() != [1, self.dim] {
                return Err(Error::shape("neural_score", format!("data {name} {:?}", t.shape())));
            }
        }
        if !mean.is_finite() || var.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::contract("data statistics must be finite with nonnegative variance"));
        }
        self.data_mean = mean;
        self.data_var = var;
        Ok(self)
    }

    /// Sets the statistics to the column means and (population) variances of `[N, dim]` data.
    pub fn fit_data_stats(self, dataset: &Tensor) -> Result<Self> {
        let [n, d] = dataset.shape()[..] else {
            return Err(Error::shape("neural_score", format!("dataset {:?}", dataset.shape())));
        };
        if d != self.dim || n == 0 {
            return Err(Error::shape("neural_score", format!("dataset {:?} for dim {}", dataset.shape(), self.dim)));
        }
        let col = |c: usize| dataset.data()[c..].iter().step_by(d).copied();
        let mean: Vec<f64> = (0..d).map(|c| col(c).sum::<f64>() / n as f64).collect();
        let var: Vec<f64> = (0..d)
            .map(|c| col(c).map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n as f64)
            .collect();
        self.with_data_stats(Tensor::from_parts(vec![1, d], mean), Tensor::from_parts(vec![1, d], var))
    }

    pub fn data_mean(&self) -> &Tensor {
        &self.data_mean
    }

    pub fn data_var(&self) -> &Tensor {
        &self.data_var
    }

    /// Rebuilds a network from stored parameters, checking every shape.
    pub fn from_parts(dim: usize, widths: Vec<usize>, steps: usize, params: Vec<Tensor>) -> Result<Self> {
        let expected = Self::param_shapes(dim, &widths, steps);
        if params.len() != expected.len() {
            return Err(Error::shape(
                "neural_score",
                format!("{} tensors for {} slots", params.len(), expected.len()),
            ));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "neural_score",
                    format!("{name}: expected {shape:?}, got {:?}", p.shape()),
                ));
            }
        }
        Ok(Self {
            dim,
            widths,
            steps,
            params,
            data_mean: Tensor::zeros(&[1, dim]),
            data_var: Tensor::ones(&[1, dim]),
        })
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(dim: usize, widths: &[usize], steps: usize) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("time_embedding".to_string(), vec![steps, widths[0]])];
        let mut fan_in = dim;
        for (i, &w) in widths.iter().chain(std::iter::once(&dim)).enumerate() {
            out.push((format!("layer{i}.weight"), vec![fan_in, w]));
            out.push((format!("layer{i}.bias"), vec![1, w]));
            fan_in = w;
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        Self::param_shapes(self.dim, &self.widths, self.steps)
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.params)
            .collect()
    }

    /// Forward pass with explicit parameter handles; `steps_per_row[i]` is the 1-based step of row `i`.
    pub fn forward<'t>(
        &self,
        params: &[Var<'t>],
        x: Var<'t>,
        steps_per_row: &[usize],
        schedule: &NoiseSchedule,
    ) -> Result<Var<'t>> {
        if schedule.len() != self.steps {
            return Err(Error::contract(format!(
                "network trained for {} steps, schedule has {}",
                self.steps,
                schedule.len()
            )));
        }
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dim || shape[0] != steps_per_row.len() {
            return Err(Error::shape(
                "neural_score",
                format!(
                    "expected [{}, {}], got {shape:?}",
                    steps_per_row.len(),
                    self.dim
                ),
            ));
        }
        if let Some(bad) = steps_per_row.iter().find(|&&t| t == 0 || t > self.steps) {
            return Err(Error::contract(format!(
                "step {bad} outside 1..={}",
                self.steps
            )));
        }
        let rows: Vec<usize> = steps_per_row.iter().map(|t| t - 1).collect();
        let embed = params[0].gather_rows(&rows)?;
        let layers = self.widths.len() + 1;
        let d = self.dim;
        let mut shift = Vec::with_capacity(rows.len() * d);
        let mut gain = Vec::with_capacity(rows.len() * d);
        for &t in steps_per_row {
            let ab = schedule.alpha_bar(t);
            for c in 0..d {
                shift.push(ab.sqrt() * self.data_mean.data()[c]);
                gain.push((1.0 - ab).sqrt() / (ab * self.data_var.data()[c] + 1.0 - ab));
            }
        }
        let tape = x.tape();
        let skip = x
            .sub(tape.constant(Tensor::from_parts(vec![rows.len(), d], shift)))?
            .mul(tape.constant(Tensor::from_parts(vec![rows.len(), d], gain)))?;
        let mut h = x;
        for l in 0..layers {
            let (w, b) = (params[1 + 2 * l], params[2 + 2 * l]);
            h = h.matmul(w)?.add(b)?;
            if l == 0 {
                h = h.add(embed)?;
            }
            if l + 1 < layers {
                h = h.silu();
            }
        }
        h.add(skip)
    }

    /// Frozen-weight evaluation for rows of `x` (`[n, d]`) at a single step `t`.
    pub fn epsilon<'t>(&self, tape: &'t Tape, schedule: &NoiseSchedule, t: usize, x: Var<'t>) -> Result<Var<'t>> {
        let params: Vec<Var<'t>> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let n = x.shape().first().copied().unwrap_or(0);
        self.forward(&params, x, &vec![t; n], schedule)
    }
}
