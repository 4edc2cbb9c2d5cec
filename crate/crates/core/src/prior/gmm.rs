//! Exact noise predictor for Gaussian-mixture data.
//!
//! For data `x_0 ~ Σ_j π_j N(μ_j, Σ_j)` the time-`t` marginal is the mixture of
//! `N(√ᾱ_t μ_j, ᾱ_t Σ_j + (1 − ᾱ_t) I)`, so the score is available in closed
//! form and `ε(x, t) = −√(1 − ᾱ_t) ∇ log p_t(x)`.
//!
//! Each covariance is stored through its eigendecomposition `Σ_j = V Λ Vᵀ`;
//! the time-`t` precision is then `V diag(1 / (ᾱ λ + 1 − ᾱ)) Vᵀ` and never
//! has to be formed explicitly.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Component {
    weight: f64,
    mean: Vec<f64>,
    /// Eigenvectors as columns, row-major `[d, d]`.
    basis: Tensor,
    basis_t: Tensor,
    spectrum: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmPrior {
    dim: usize,
    components: Vec<Component>,
}

impl GmmPrior {
    /// Mixture with the given weights, means (`d`-vectors) and symmetric PSD covariances (`[d, d]`).
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Tensor>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::contract(format!(
                "mixture needs matching non-empty weights/means/covariances, got {k}/{}/{}",
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::contract("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("mixture weights sum to {total}")));
        }
        let dim = means[0].len();
        let mut components = Vec::with_capacity(k);
        for ((w, mean), cov) in weights.into_iter().zip(means).zip(covariances) {
            if mean.len() != dim || cov.shape() != [dim, dim] {
                return Err(Error::shape(
                    "gmm_prior",
                    format!("mean {} / covariance {:?} for dim {dim}", mean.len(), cov.shape()),
                ));
            }
            let m = DMatrix::from_row_slice(dim, dim, cov.data());
            let asym = (&m - m.transpose()).amax();
            if asym > 1e-9 * m.amax().max(1.0) {
                return Err(Error::contract("covariance is not symmetric"));
            }
            let eig = SymmetricEigen::new(m);
            let scale = eig.eigenvalues.amax().max(1.0);
            if eig.eigenvalues.iter().any(|&l| l < -1e-9 * scale) {
                return Err(Error::contract("covariance is not positive semidefinite"));
            }
            let spectrum = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
            let mut basis = vec![0.0; dim * dim];
            for r in 0..dim {
                for c in 0..dim {
                    basis[r * dim + c] = eig.eigenvectors[(r, c)];
                }
            }
            let basis = Tensor::from_parts(vec![dim, dim], basis);
            components.push(Component {
                weight: w,
                mean,
                basis_t: basis.transpose()?,
                basis,
                spectrum,
            });
        }
        Ok(Self { dim, components })
    }

    /// Single Gaussian `N(mean, covariance)`.
    pub fn gaussian(mean: Vec<f64>, covariance: Tensor) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![covariance])
    }

    /// `N(0, I_d)`.
    pub fn standard_normal(dim: usize) -> Self {
        let mut eye = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            eye.data_mut()[i * dim + i] = 1.0;
        }
        Self::gaussian(vec![0.0; dim], eye).expect("identity is a valid covariance")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    /// Eigenvalues of component `j`'s covariance (ascending).
    pub fn spectrum(&self, j: usize) -> &[f64] {
        &self.components[j].spectrum
    }

    /// Eigenvectors of component `j` as the columns of a `[d, d]` tensor.
    pub fn basis(&self, j: usize) -> &Tensor {
        &self.components[j].basis
    }

    /// Noise prediction for rows of `x` (`[n, d]`) at step `t`.
    pub fn epsilon<'t>(
        &self,
        tape: &'t Tape,
        schedule: &NoiseSchedule,
        t: usize,
        x: Var<'t>,
    ) -> Result<Var<'t>> {
        schedule.check_step(t)?;
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::shape(
                "analytic_epsilon",
                format!("expected [n, {}], got {shape:?}", self.dim),
            ));
        }
        let ab = schedule.alpha_bar(t);
        let root_ab = ab.sqrt();
        let mut logits = Vec::with_capacity(self.components.len());
        let mut whitened = Vec::with_capacity(self.components.len());
        for comp in &self.components {
            let marginal: Vec<f64> = comp.spectrum.iter().map(|l| ab * l + (1.0 - ab)).collect();
            if let Some(bad) = marginal.iter().find(|&&v| !(v > 0.0)) {
                return Err(Error::domain(
                    "analytic_epsilon",
                    format!("singular marginal covariance at t = {t} (eigenvalue {bad})"),
                ));
            }
            let centre = tape.constant(Tensor::from_parts(
                vec![1, self.dim],
                comp.mean.iter().map(|m| root_ab * m).collect(),
            ));
            let inv = tape.constant(Tensor::from_parts(
                vec![1, self.dim],
                marginal.iter().map(|v| 1.0 / v).collect(),
            ));
            let diff = x.sub(centre)?;
            let proj = diff.matmul(tape.constant(comp.basis.clone()))?;
            let scaled = proj.mul(inv)?;
            let precision_diff = scaled.matmul(tape.constant(comp.basis_t.clone()))?;
            if self.components.len() > 1 {
                let log_det: f64 = marginal.iter().map(|v| v.ln()).sum();
                let quad = proj.mul(scaled)?.sum_axis(1)?;
                logits.push(quad.scale(-0.5).add_scalar(comp.weight.ln() - 0.5 * log_det));
            }
            whitened.push(precision_diff);
        }
        let mut eps = if self.components.len() == 1 {
            whitened[0]
        } else {
            let resp = tape.concat(&logits, 1)?.softmax_last();
            let mut acc: Option<Var<'t>> = None;
            for (j, pd) in whitened.into_iter().enumerate() {
                let term = resp.slice(1, j, 1)?.mul(pd)?;
                acc = Some(match acc {
                    Some(a) => a.add(term)?,
                    None => term,
                });
            }
            acc.expect("at least one component")
        };
        eps = eps.scale((1.0 - ab).sqrt());
        Ok(eps)
    }
}
