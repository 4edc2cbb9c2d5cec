//! ADAM and L-BFGS over named parameter groups.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tensors that share one learning rate.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<Tensor>,
    pub lr: f64,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, params: Vec<Tensor>, lr: f64) -> Result<Self> {
        let name = name.into();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!(
                "group `{name}` needs a positive learning rate, got {lr}"
            )));
        }
        Ok(Self { name, params, lr })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators, allocated on the first step.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<Tensor>>,
    second: Vec<Vec<Tensor>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

fn check_alignment(groups: &[ParamGroup], grads: &[Vec<Tensor>]) -> Result<()> {
    if groups.len() != grads.len() {
        return Err(Error::contract(format!(
            "{} gradient groups for {} parameter groups",
            grads.len(),
            groups.len()
        )));
    }
    for (group, g) in groups.iter().zip(grads) {
        if group.params.len() != g.len() {
            return Err(Error::contract(format!(
                "group `{}` has {} tensors but {} gradients",
                group.name,
                group.params.len(),
                g.len()
            )));
        }
        for (p, gt) in group.params.iter().zip(g) {
            if p.shape() != gt.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("group `{}`: {:?} vs {:?}", group.name, p.shape(), gt.shape()),
                ));
            }
        }
        if g.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteGradient {
                group: group.name.clone(),
            });
        }
    }
    Ok(())
}

/// One bias-corrected ADAM update, in place.
pub fn adam_step(groups: &mut [ParamGroup], grads: &[Vec<Tensor>], state: &mut AdamState) -> Result<()> {
    check_alignment(groups, grads)?;
    if state.step == 0 {
        let zeros = |gs: &[ParamGroup]| -> Vec<Vec<Tensor>> {
            gs.iter()
                .map(|g| g.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect()
        };
        state.first = zeros(groups);
        state.second = zeros(groups);
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let step = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = 1.0 - beta1.powi(step);
    let c2 = 1.0 - beta2.powi(step);
    for (gi, group) in groups.iter_mut().enumerate() {
        for (pi, param) in group.params.iter_mut().enumerate() {
            let g = grads[gi][pi].data();
            let m = state.first[gi][pi].data_mut();
            let v = state.second[gi][pi].data_mut();
            for (((p, &gk), mk), vk) in param.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mk = beta1 * *mk + (1.0 - beta1) * gk;
                *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
                let m_hat = *mk / c1;
                let v_hat = *vk / c2;
                *p -= group.lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsConfig {
    /// Number of curvature pairs kept.
    pub memory: usize,
    pub max_iter: usize,
    /// Halvings tried before the line search gives up.
    pub max_backtracks: usize,
    /// Initial step length along the quasi-Newton direction.
    pub lr: f64,
    /// Sufficient-decrease constant of the Armijo condition.
    pub armijo_c1: f64,
    /// Stop once the largest gradient entry falls below this.
    pub grad_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 5_000,
            max_backtracks: 40,
            lr: 1.0,
            armijo_c1: 1e-4,
            grad_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStep {
    /// A point with sufficient decrease was accepted.
    Accepted,
    /// Gradient already below tolerance; nothing moved.
    Converged,
    /// Backtracking exhausted; parameters hold the best point so far.
    LineSearchFailed,
}

/// Curvature history plus the cached loss and gradient at the current point.
#[derive(Debug, Clone)]
pub struct LbfgsState {
    pub config: LbfgsConfig,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    current: Option<(f64, Vec<f64>)>,
    iterations: usize,
}

/// Objective returning the loss and per-group gradients at the given parameters.
pub trait Objective {
    fn evaluate(&mut self, groups: &[ParamGroup]) -> Result<(f64, Vec<Vec<Tensor>>)>;
}

impl<F> Objective for F
where
    F: FnMut(&[ParamGroup]) -> Result<(f64, Vec<Vec<Tensor>>)>,
{
    fn evaluate(&mut self, groups: &[ParamGroup]) -> Result<(f64, Vec<Vec<Tensor>>)> {
        self(groups)
    }
}

fn flatten(groups: &[ParamGroup]) -> Vec<f64> {
    groups
        .iter()
        .flat_map(|g| g.params.iter().flat_map(|p| p.data().iter().copied()))
        .collect()
}

fn flatten_grads(grads: &[Vec<Tensor>]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.iter().flat_map(|t| t.data().iter().copied()))
        .collect()
}

fn write_back(groups: &mut [ParamGroup], flat: &[f64]) {
    let mut offset = 0;
    for g in groups.iter_mut() {
        for p in g.params.iter_mut() {
            let n = p.numel();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LbfgsState {
    pub fn new(config: LbfgsConfig) -> Self {
        Self {
            config,
            pairs: VecDeque::new(),
            current: None,
            iterations: 0,
        }
    }

    pub fn history_len(&self) -> usize {
        self.pairs.len()
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Loss at the current point, if it has been evaluated.
    pub fn current_loss(&self) -> Option<f64> {
        self.current.as_ref().map(|(f, _)| *f)
    }

    fn evaluate(
        groups: &mut [ParamGroup],
        objective: &mut dyn Objective,
    ) -> Result<(f64, Vec<f64>)> {
        let (f, grads) = objective.evaluate(groups)?;
        check_alignment(groups, &grads)?;
        Ok((f, flatten_grads(&grads)))
    }

    /// Two-loop recursion: returns `-H g`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// One outer iteration: direction, Armijo backtracking, history update.
    pub fn step(&mut self, groups: &mut [ParamGroup], objective: &mut dyn Objective) -> Result<LbfgsStep> {
        let (f, g) = match self.current.take() {
            Some(c) => c,
            None => Self::evaluate(groups, objective)?,
        };
        if !f.is_finite() {
            return Err(Error::contract(format!("objective returned {f}")));
        }
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax <= self.config.grad_tol {
            self.current = Some((f, g));
            return Ok(LbfgsStep::Converged);
        }
        let mut d = self.direction(&g);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            self.pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let mut t = if self.pairs.is_empty() {
            let l1: f64 = g.iter().map(|v| v.abs()).sum();
            self.config.lr * (1.0f64).min(1.0 / l1)
        } else {
            self.config.lr
        };
        let x0 = flatten(groups);
        for _ in 0..=self.config.max_backtracks {
            let trial: Vec<f64> = x0.iter().zip(&d).map(|(x, di)| x + t * di).collect();
            write_back(groups, &trial);
            let (f_new, g_new) = Self::evaluate(groups, objective)?;
            if f_new.is_finite() && f_new <= f + self.config.armijo_c1 * t * slope {
                let s: Vec<f64> = d.iter().map(|v| t * v).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&y, &y).max(f64::MIN_POSITIVE) && sy > 0.0 {
                    self.pairs.push_back((s, y, 1.0 / sy));
                    if self.pairs.len() > self.config.memory {
                        self.pairs.pop_front();
                    }
                }
                self.current = Some((f_new, g_new));
                self.iterations += 1;
                return Ok(LbfgsStep::Accepted);
            }
            t *= 0.5;
        }
        write_back(groups, &x0);
        self.current = Some((f, g));
        Ok(LbfgsStep::LineSearchFailed)
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    /// Loss after every accepted iteration.
    pub history: Vec<f64>,
    pub converged: bool,
    /// Set when the line search gave up; parameters are the best point found.
    pub line_search_failed: bool,
}

/// Runs L-BFGS until convergence, `max_iter`, or a failed line search.
pub fn lbfgs_minimize(
    mut objective: impl Objective,
    groups: &mut [ParamGroup],
    config: LbfgsConfig,
) -> Result<LbfgsOutcome> {
    let mut state = LbfgsState::new(config);
    let mut history = Vec::new();
    let mut outcome = LbfgsOutcome {
        history: Vec::new(),
        converged: false,
        line_search_failed: false,
    };
    for _ in 0..config.max_iter {
        let status = state.step(groups, &mut objective)?;
        match status {
            LbfgsStep::Accepted => history.push(state.current_loss().expect("cached")),
            LbfgsStep::Converged => {
                outcome.converged = true;
                break;
            }
            LbfgsStep::LineSearchFailed => {
                log::warn!("L-BFGS line search failed after {} iterations", state.iterations());
                outcome.line_search_failed = true;
                break;
            }
        }
    }
    outcome.history = history;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(name: &str, values: &[f64], lr: f64) -> ParamGroup {
        ParamGroup::new(name, vec![Tensor::from_vec(values.to_vec())], lr).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut groups = vec![group("z", &[1.0, -2.0], 0.1)];
        let mut state = AdamState::default();
        for _ in 0..5 {
            adam_step(&mut groups, &[vec![Tensor::zeros(&[2])]], &mut state).unwrap();
        }
        assert_eq!(groups[0].params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_solves_scalar_quadratic() {
        let mut groups = vec![group("x", &[0.0], 0.1)];
        let mut state = AdamState::default();
        for _ in 0..500 {
            let x = groups[0].params[0].data()[0];
            let g = Tensor::from_vec(vec![2.0 * (x - 3.0)]);
            adam_step(&mut groups, &[vec![g]], &mut state).unwrap();
        }
        let x = groups[0].params[0].data()[0];
        assert!((x - 3.0).abs() < 1e-3, "{x}");
    }

    #[test]
    fn first_step_is_learning_rate_per_unit_gradient() {
        let mut groups = vec![group("z", &[0.0], 1e-2), group("phi", &[0.0], 1e-7)];
        let mut state = AdamState::default();
        let unit = || vec![Tensor::from_vec(vec![1.0])];
        adam_step(&mut groups, &[unit(), unit()], &mut state).unwrap();
        let dz = groups[0].params[0].data()[0].abs();
        let dphi = groups[1].params[0].data()[0].abs();
        assert!((dz - 1e-2).abs() < 1e-6);
        assert!((dphi - 1e-7).abs() < 1e-6);
        assert!((dz / dphi / 1e5 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_group() {
        let mut groups = vec![group("z", &[0.0], 0.1), group("kernel", &[0.0], 0.1)];
        let mut state = AdamState::default();
        let err = adam_step(
            &mut groups,
            &[
                vec![Tensor::from_vec(vec![1.0])],
                vec![Tensor::from_vec(vec![f64::NAN])],
            ],
            &mut state,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref group } if group == "kernel"));
    }

    #[test]
    fn group_rejects_non_positive_lr() {
        assert!(ParamGroup::new("z", vec![], 0.0).is_err());
        assert!(ParamGroup::new("z", vec![], -1.0).is_err());
    }

    fn quadratic(groups: &[ParamGroup]) -> Result<(f64, Vec<Vec<Tensor>>)> {
        // f = 0.5 xᵀ A x - bᵀ x with A = [[3, 1], [1, 2]], b = [1, -1]
        let x = groups[0].params[0].data();
        let ax = [3.0 * x[0] + x[1], x[0] + 2.0 * x[1]];
        let f = 0.5 * (x[0] * ax[0] + x[1] * ax[1]) - (x[0] - x[1]);
        let g = vec![ax[0] - 1.0, ax[1] + 1.0];
        Ok((f, vec![vec![Tensor::from_vec(g)]]))
    }

    #[test]
    fn lbfgs_quadratic_converges_fast() {
        let mut groups = vec![group("x", &[5.0, -7.0], 1.0)];
        let mut state = LbfgsState::new(LbfgsConfig::default());
        let mut obj = quadratic;
        let mut gnorm = f64::INFINITY;
        for _ in 0..20 {
            if state.step(&mut groups, &mut obj).unwrap() == LbfgsStep::Converged {
                break;
            }
            let (_, g) = quadratic(&groups).unwrap();
            gnorm = g[0][0].norm();
            if gnorm < 1e-8 {
                break;
            }
        }
        assert!(gnorm < 1e-8, "{gnorm}");
        // closed form: A⁻¹ b = [3/5, -4/5]
        let x = groups[0].params[0].data();
        assert!((x[0] - 0.6).abs() < 1e-8 && (x[1] + 0.8).abs() < 1e-8);
    }

    fn rosenbrock(groups: &[ParamGroup]) -> Result<(f64, Vec<Vec<Tensor>>)> {
        let p = groups[0].params[0].data();
        let (x, y) = (p[0], p[1]);
        let f = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
        let gx = -2.0 * (1.0 - x) - 400.0 * x * (y - x * x);
        let gy = 200.0 * (y - x * x);
        Ok((f, vec![vec![Tensor::from_vec(vec![gx, gy])]]))
    }

    #[test]
    fn lbfgs_rosenbrock() {
        let mut groups = vec![group("x", &[-1.2, 1.0], 1.0)];
        let config = LbfgsConfig {
            max_iter: 200,
            ..LbfgsConfig::default()
        };
        let out = lbfgs_minimize(rosenbrock, &mut groups, config).unwrap();
        let (f, _) = rosenbrock(&groups).unwrap();
        assert!(f < 1e-6, "f = {f} after {} iterations", out.history.len());
        assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lbfgs_stationary_start_is_a_no_op() {
        let mut groups = vec![group("x", &[1.0, 1.0], 1.0)];
        let out = lbfgs_minimize(rosenbrock, &mut groups, LbfgsConfig::default()).unwrap();
        assert!(out.converged);
        assert_eq!(groups[0].params[0].data(), &[1.0, 1.0]);
    }

    #[test]
    fn lbfgs_is_deterministic() {
        let run = || {
            let mut groups = vec![group("x", &[-1.2, 1.0], 1.0)];
            let out = lbfgs_minimize(rosenbrock, &mut groups, LbfgsConfig { max_iter: 50, ..Default::default() })
                .unwrap();
            (out.history, groups[0].params[0].data().to_vec())
        };
        assert_eq!(run(), run());
    }
}
