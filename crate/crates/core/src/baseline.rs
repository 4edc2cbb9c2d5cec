//! Interleaved guidance baseline: unconditional DDIM steps alternated with a
//! data-consistency correction at every step.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::operators::{BlindParams, ForwardOperator};
use crate::reverse::{ReverseProcess, Variant};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    /// Subtract `ζ_i ∇_{x_t} ‖y − A(x̂_0)‖²` with `ζ_i = ζ' / ‖y − A(x̂_0)‖`.
    GradientUpdate,
    /// Replace `x̂_0` by its projection onto `{x : A x = y}` (linear operators only).
    ProjectionLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterleaveConfig {
    /// Step-size scale `ζ'`; zero disables guidance.
    pub zeta: f64,
    pub guidance: Guidance,
    /// Conjugate-gradient iterations for the projection variant.
    pub cg_iters: usize,
}

impl Default for InterleaveConfig {
    fn default() -> Self {
        Self {
            zeta: 1.0,
            guidance: Guidance::GradientUpdate,
            cg_iters: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InterleaveResult {
    pub recon: Tensor,
    /// `‖y − A(x̂_0)‖ / ‖y‖` at every reverse step, then for the final output.
    pub residuals: Vec<f64>,
}

impl InterleaveResult {
    pub fn final_residual(&self) -> f64 {
        *self.residuals.last().expect("at least one step")
    }
}

fn relative_residual(op: &ForwardOperator, x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(op.apply_tensor(x)?.sub(y)?.norm() / y.norm().max(f64::MIN_POSITIVE))
}

/// `Aᵀ v` for a linear operator via reverse mode.
fn adjoint(op: &ForwardOperator, shape: &[usize], v: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(shape));
    let out = op.apply(x, BlindParams::default())?;
    let loss = out.mul(tape.constant(v.clone()))?.sum();
    Ok(tape.backward(loss)?.wrt(x))
}

/// Least-norm correction: `x + Aᵀ (A Aᵀ)⁺ (y − A x)` by conjugate gradients.
fn project(op: &ForwardOperator, x: &Tensor, y: &Tensor, iters: usize) -> Result<Tensor> {
    if let ForwardOperator::Inpaint(mask) = op {
        let m = mask.tensor();
        return Ok(Tensor::from_fn(x.shape(), |i| {
            if m.data()[i] == 1.0 {
                y.data()[i]
            } else {
                x.data()[i]
            }
        }));
    }
    let r = y.sub(&op.apply_tensor(x)?)?;
    let mut u = Tensor::zeros(r.shape());
    let mut res = r.clone();
    let mut dir = res.clone();
    let mut rs = res.dot(&res);
    let tol = 1e-24 * r.dot(&r).max(f64::MIN_POSITIVE);
    for _ in 0..iters {
        if rs <= tol {
            break;
        }
        let ad = op.apply_tensor(&adjoint(op, x.shape(), &dir)?)?;
        let alpha = rs / dir.dot(&ad);
        u.axpy(alpha, &dir)?;
        res.axpy(-alpha, &ad)?;
        let next = res.dot(&res);
        dir = res.add(&dir.scale(next / rs))?;
        rs = next;
    }
    x.add(&adjoint(op, x.shape(), &u)?)
}

/// Runs the guided reverse chain from a seed drawn like [`ReverseProcess::sample`].
///
/// With `zeta = 0` the trajectory is bitwise that of unguided sampling.
pub fn interleave_solve(
    y: &Tensor,
    op: &ForwardOperator,
    rp: &ReverseProcess,
    config: &InterleaveConfig,
    shape: &[usize],
    rng: &SeedStream,
) -> Result<InterleaveResult> {
    if rp.variant() != Variant::DdimDeterministic {
        return Err(Error::contract("interleaving uses the deterministic sampler"));
    }
    if config.guidance == Guidance::ProjectionLinear && !op.is_linear() {
        return Err(Error::contract(format!(
            "projection needs a linear operator, `{}` is not",
            op.name()
        )));
    }
    if !(config.zeta >= 0.0) {
        return Err(Error::contract(format!("zeta must be nonnegative, got {}", config.zeta)));
    }
    let numel: usize = shape.iter().product();
    if numel % rp.dim() != 0 {
        return Err(Error::shape("interleave_solve", format!("{shape:?} vs prior dim {}", rp.dim())));
    }
    let seed = rng.derive("sample/seed").normal_tensor(&[numel / rp.dim(), rp.dim()]);
    let mut x = seed.reshape(shape)?;
    let mut residuals = Vec::with_capacity(rp.substeps().len() + 1);
    for (t, prev) in rp.step_pairs() {
        let tape = Tape::new();
        let xv: Var<'_> = tape.leaf(x.clone());
        let eps = rp.epsilon(xv, t)?;
        let x0 = rp.x0_from_eps(xv, eps, t)?;
        let x0_val = x0.value().as_ref().clone();
        let resid = op.apply(x0, BlindParams::default())?.sub(tape.constant(y.clone()))?;
        let resid_norm = resid.value().norm();
        residuals.push(resid_norm / y.norm().max(f64::MIN_POSITIVE));
        x = match config.guidance {
            Guidance::GradientUpdate => {
                let proposal = rp.ddim_combine(x0, eps, prev)?.value().as_ref().clone();
                if config.zeta > 0.0 && resid_norm > 0.0 {
                    let grad = tape.backward(resid.square().sum())?.wrt(xv);
                    let mut next = proposal;
                    next.axpy(-config.zeta / resid_norm, &grad)?;
                    next
                } else {
                    proposal
                }
            }
            Guidance::ProjectionLinear => {
                let corrected = project(op, &x0_val, y, config.cg_iters)?;
                let tape2 = Tape::new();
                let eps_val = tape2.constant(eps.value().as_ref().clone());
                rp.ddim_combine(tape2.constant(corrected), eps_val, prev)?
                    .value()
                    .as_ref()
                    .clone()
            }
        };
        if !x.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: residuals.len() - 1,
                trace: Box::default(),
            });
        }
    }
    residuals.push(relative_residual(op, &x, y)?);
    Ok(InterleaveResult { recon: x, residuals })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::fixtures::smooth_images;
    use crate::operators::{gaussian_kernel, Mask};
    use crate::schedule::make_linear_schedule;

    fn rp(steps: usize) -> (ReverseProcess, Tensor) {
        let imgs = smooth_images(1, 8, 1.2, 0.15, 3).unwrap();
        let prior = imgs.prior().unwrap();
        let rp = ReverseProcess::with_steps(
            Arc::new(prior),
            make_linear_schedule(1000, 1e-4, 0.02).unwrap(),
            steps,
            Variant::DdimDeterministic,
        )
        .unwrap();
        (rp, imgs.image(0))
    }

    #[test]
    fn zero_guidance_is_plain_sampling() {
        let (rp, truth) = rp(20);
        let op = ForwardOperator::ConvBlur(gaussian_kernel(3, 1.0).unwrap());
        let y = op.apply_tensor(&truth).unwrap();
        let rng = SeedStream::new(4);
        let cfg = InterleaveConfig {
            zeta: 0.0,
            ..InterleaveConfig::default()
        };
        let out = interleave_solve(&y, &op, &rp, &cfg, &[8, 8], &rng).unwrap();
        let sampled = rp.sample(1, &rng).unwrap();
        assert_eq!(out.recon.data(), sampled.data());
        assert_eq!(out.residuals.len(), 21);
    }

    #[test]
    fn inpaint_projection_keeps_observed_pixels() {
        let (rp, truth) = rp(20);
        let mask = Mask::random(&[8, 8], 0.5, &mut SeedStream::new(1)).unwrap();
        let op = ForwardOperator::Inpaint(mask.clone());
        let y = op.apply_tensor(&truth).unwrap();
        let cfg = InterleaveConfig {
            guidance: Guidance::ProjectionLinear,
            ..InterleaveConfig::default()
        };
        let out = interleave_solve(&y, &op, &rp, &cfg, &[8, 8], &SeedStream::new(2)).unwrap();
        for i in 0..64 {
            if mask.tensor().data()[i] == 1.0 {
                assert_eq!(out.recon.data()[i], y.data()[i]);
            }
        }
        assert!(out.final_residual() < 1e-15);
    }

    #[test]
    fn generic_projection_solves_linear_constraint() {
        let (rp, truth) = rp(5);
        let op = ForwardOperator::Downsample { factor: 2 };
        let y = op.apply_tensor(&truth).unwrap();
        let x = SeedStream::new(3).normal_tensor(&[8, 8]);
        let p = project(&op, &x, &y, 100).unwrap();
        assert!(op.apply_tensor(&p).unwrap().sub(&y).unwrap().max_abs() < 1e-10);
        let cfg = InterleaveConfig {
            guidance: Guidance::ProjectionLinear,
            ..InterleaveConfig::default()
        };
        let out = interleave_solve(&y, &op, &rp, &cfg, &[8, 8], &SeedStream::new(2)).unwrap();
        assert!(out.final_residual() < 1e-8);
    }

    #[test]
    fn projection_rejects_nonlinear_operators() {
        let (rp, truth) = rp(3);
        let op = ForwardOperator::NonlinearBlur {
            kernel: gaussian_kernel(3, 1.0).unwrap(),
            gamma: 2.2,
        };
        let y = op.apply_tensor(&truth).unwrap();
        let cfg = InterleaveConfig {
            guidance: Guidance::ProjectionLinear,
            ..InterleaveConfig::default()
        };
        assert!(interleave_solve(&y, &op, &rp, &cfg, &[8, 8], &SeedStream::new(0)).is_err());
    }

    #[test]
    fn guidance_reduces_residual() {
        let (rp, truth) = rp(100);
        let op = ForwardOperator::ConvBlur(gaussian_kernel(3, 1.0).unwrap());
        let y = op.apply_tensor(&truth).unwrap();
        let rng = SeedStream::new(5);
        let off = interleave_solve(&y, &op, &rp, &InterleaveConfig { zeta: 0.0, ..Default::default() }, &[8, 8], &rng).unwrap();
        let on = interleave_solve(&y, &op, &rp, &InterleaveConfig::default(), &[8, 8], &rng).unwrap();
        assert!(on.final_residual() < off.final_residual());
    }
}
