//! Measurement noise models for images in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Additive Gaussian with explicit standard deviation.
    GaussianSigma,
    /// Additive Gaussian parameterised by variance.
    GaussianVar,
    /// Salt-and-pepper replacement with probability `p`.
    Impulse,
    /// `Poisson(λ x) / λ`.
    Shot,
    /// Multiplicative `x (1 + ε)`, `ε ~ N(0, v)`.
    Speckle,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gaussian_sigma" => Self::GaussianSigma,
            "gaussian_var" => Self::GaussianVar,
            "impulse" => Self::Impulse,
            "shot" => Self::Shot,
            "speckle" => Self::Speckle,
            other => return Err(Error::contract(format!("unknown noise kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedLevel {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseLevel {
    Named(NamedLevel),
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub level: NoiseLevel,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, level: NoiseLevel) -> Self {
        Self { kind, level }
    }

    pub fn gaussian_sigma(sigma: f64) -> Self {
        Self::new(NoiseKind::GaussianSigma, NoiseLevel::Value(sigma))
    }

    pub fn parse(kind: &str, level: NoiseLevel) -> Result<Self> {
        Ok(Self::new(kind.parse()?, level))
    }

    /// Resolved parameter: σ, variance, probability or rate depending on the kind.
    pub fn parameter(&self) -> Result<f64> {
        use NamedLevel::*;
        use NoiseKind::*;
        let value = match (self.kind, self.level) {
            (_, NoiseLevel::Value(v)) => v,
            (GaussianSigma, NoiseLevel::Named(_)) => {
                return Err(Error::contract("gaussian_sigma needs an explicit sigma"))
            }
            (GaussianVar, NoiseLevel::Named(Low)) => 0.08,
            (GaussianVar, NoiseLevel::Named(High)) => 0.12,
            (Impulse, NoiseLevel::Named(Low)) => 0.03,
            (Impulse, NoiseLevel::Named(High)) => 0.06,
            (Shot, NoiseLevel::Named(Low)) => 60.0,
            (Shot, NoiseLevel::Named(High)) => 25.0,
            (Speckle, NoiseLevel::Named(Low)) => 0.15,
            (Speckle, NoiseLevel::Named(High)) => 0.20,
        };
        let valid = match self.kind {
            Impulse => (0.0..=1.0).contains(&value),
            Shot => value > 0.0,
            _ => value >= 0.0,
        };
        if !valid || !value.is_finite() {
            return Err(Error::contract(format!("invalid {:?} parameter {value}", self.kind)));
        }
        Ok(value)
    }
}

/// Corruption before clipping.
pub fn corrupt_raw(x: &Tensor, spec: &NoiseSpec, rng: &mut SeedStream) -> Result<Tensor> {
    if x.data().iter().any(|v| !(-1e-12..=1.0 + 1e-12).contains(v)) {
        return Err(Error::domain("corrupt", "input must lie in [0, 1]"));
    }
    let p = spec.parameter()?;
    let each = |f: &mut dyn FnMut(f64) -> f64| Tensor::from_fn(x.shape(), |i| f(x.data()[i]));
    Ok(match spec.kind {
        NoiseKind::GaussianSigma => each(&mut |v| v + p * rng.normal()),
        NoiseKind::GaussianVar => {
            let sd = p.sqrt();
            each(&mut |v| v + sd * rng.normal())
        }
        NoiseKind::Impulse => each(&mut |v| {
            if rng.bernoulli(p) {
                if rng.bernoulli(0.5) {
                    1.0
                } else {
                    0.0
                }
            } else {
                v
            }
        }),
        NoiseKind::Shot => each(&mut |v| rng.poisson(p * v.max(0.0)) / p),
        NoiseKind::Speckle => {
            let sd = p.sqrt();
            each(&mut |v| v * (1.0 + sd * rng.normal()))
        }
    })
}

/// Corrupts `x` and clips the result to `[0, 1]`.
pub fn corrupt(x: &Tensor, spec: &NoiseSpec, rng: &mut SeedStream) -> Result<Tensor> {
    Ok(corrupt_raw(x, spec, rng)?.clip(0.0, 1.0))
}
