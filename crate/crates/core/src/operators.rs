//! Measurement operators `A`, all differentiable in their image input and
//! in any trainable kernel logits or tilt field.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

/// Binary observation mask; every channel plane is identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask(Tensor);

impl Mask {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("mask entries must be 0 or 1"));
        }
        let (h, w) = values.hw()?;
        let plane = h * w;
        let first = &values.data()[..plane];
        if values.data().chunks(plane).any(|p| p != first) {
            return Err(Error::contract("mask channel planes must be identical"));
        }
        Ok(Self(values))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self(Tensor::ones(shape))
    }

    /// Drops each pixel independently with probability `drop_fraction`.
    pub fn random(shape: &[usize], drop_fraction: f64, rng: &mut SeedStream) -> Result<Self> {
        if !(0.0..=1.0).contains(&drop_fraction) {
            return Err(Error::contract(format!("drop fraction {drop_fraction} outside [0, 1]")));
        }
        let probe = Tensor::zeros(shape);
        let (h, w) = probe.hw()?;
        let plane: Vec<f64> = (0..h * w)
            .map(|_| if rng.bernoulli(drop_fraction) { 0.0 } else { 1.0 })
            .collect();
        let data = plane.iter().cycle().take(probe.numel()).copied().collect();
        Ok(Self(Tensor::from_parts(shape.to_vec(), data)))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Square kernel with odd side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurKernel(Tensor);

impl BlurKernel {
    pub fn new(values: Tensor) -> Result<Self> {
        match values.shape() {
            [a, b] if a == b && a % 2 == 1 => {}
            other => {
                return Err(Error::contract(format!(
                    "kernel must be square with odd side, got {other:?}"
                )))
            }
        }
        if !values.is_finite() {
            return Err(Error::contract("kernel entries must be finite"));
        }
        Ok(Self(values))
    }

    /// Unit impulse at the centre.
    pub fn delta(side: usize) -> Result<Self> {
        let mut k = Tensor::zeros(&[side.max(1), side.max(1)]);
        k.data_mut()[side * side / 2] = 1.0;
        Self::new(k)
    }

    pub fn side(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Nonnegative with unit sum (within `1e-6`).
    pub fn is_simplex(&self) -> bool {
        self.0.data().iter().all(|&v| v >= 0.0) && (self.0.sum() - 1.0).abs() < 1e-6
    }

    /// Total-variation distance `½ Σ |a − b|` between two kernels of equal side.
    pub fn tv_distance(&self, other: &BlurKernel) -> Result<f64> {
        let d = self.0.sub(&other.0)?;
        Ok(0.5 * d.data().iter().map(|v| v.abs()).sum::<f64>())
    }
}

/// Discretised isotropic Gaussian normalised to unit sum.
pub fn gaussian_kernel(side: usize, sigma: f64) -> Result<BlurKernel> {
    if side % 2 == 0 || !(sigma > 0.0) {
        return Err(Error::contract(format!(
            "gaussian kernel needs odd side and positive sigma, got {side}, {sigma}"
        )));
    }
    let c = (side / 2) as f64;
    let mut k = Tensor::from_fn(&[side, side], |i| {
        let (r, q) = ((i / side) as f64 - c, (i % side) as f64 - c);
        (-(r * r + q * q) / (2.0 * sigma * sigma)).exp()
    });
    let total = k.sum();
    k.data_mut().iter_mut().for_each(|v| *v /= total);
    BlurKernel::new(k)
}

/// Free kernel parameters; the kernel is their softmax over all entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelLogits(Tensor);

impl KernelLogits {
    pub fn new(values: Tensor) -> Result<Self> {
        BlurKernel::new(values.clone())?;
        Ok(Self(values))
    }

    pub fn zeros(side: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[side, side]))
    }

    /// Logits `log k` of a strictly positive simplex kernel.
    pub fn from_kernel(k: &BlurKernel) -> Result<Self> {
        if k.tensor().data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::domain("kernel_logits", "kernel entries must be positive to take logs"));
        }
        Self::new(k.tensor().map(f64::ln))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn kernel(&self) -> BlurKernel {
        let tape = Tape::new();
        let k = softmax_kernel(tape.constant(self.0.clone())).value();
        BlurKernel(k.as_ref().clone())
    }
}

/// Per-pixel displacement `[2, H, W]` (row, column) with bounded magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltField {
    field: Tensor,
    max_shift: f64,
}

pub const DEFAULT_MAX_SHIFT: f64 = 2.0;

impl TiltField {
    pub fn new(field: Tensor, max_shift: f64) -> Result<Self> {
        if field.ndim() != 3 || field.shape()[0] != 2 {
            return Err(Error::shape("tilt_field", format!("expected [2, H, W], got {:?}", field.shape())));
        }
        if !field.is_finite() {
            return Err(Error::contract("tilt field must be finite"));
        }
        if magnitude_max(&field) > max_shift + 1e-12 {
            return Err(Error::contract(format!("tilt exceeds the {max_shift} pixel bound")));
        }
        Ok(Self { field, max_shift })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            field: Tensor::zeros(&[2, h, w]),
            max_shift: DEFAULT_MAX_SHIFT,
        }
    }

    /// Independent `N(0, std²)` displacements, projected into the bound.
    pub fn random(h: usize, w: usize, std: f64, max_shift: f64, rng: &mut SeedStream) -> Result<Self> {
        let mut field = rng.normal_tensor(&[2, h, w]).scale(std);
        project_tilt(&mut field, max_shift);
        Self::new(field, max_shift)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.field
    }

    pub fn max_shift(&self) -> f64 {
        self.max_shift
    }
}

fn magnitude_max(field: &Tensor) -> f64 {
    let hw = field.numel() / 2;
    let (a, b) = field.data().split_at(hw);
    a.iter().zip(b).map(|(u, v)| u.hypot(*v)).fold(0.0, f64::max)
}

/// Shrinks every displacement vector longer than `max_shift` onto the bound.
pub fn project_tilt(field: &mut Tensor, max_shift: f64) {
    let hw = field.numel() / 2;
    let (a, b) = field.data_mut().split_at_mut(hw);
    for (u, v) in a.iter_mut().zip(b.iter_mut()) {
        let m = u.hypot(*v);
        if m > max_shift {
            *u *= max_shift / m;
            *v *= max_shift / m;
        }
    }
}

pub fn downsample<'t>(x: Var<'t>, factor: usize) -> Result<Var<'t>> {
    x.avg_pool2d(factor)
}

pub fn apply_mask<'t>(x: Var<'t>, mask: &Mask) -> Result<Var<'t>> {
    if x.shape() != mask.tensor().shape() {
        return Err(Error::shape(
            "apply_mask",
            format!("image {:?} vs mask {:?}", x.shape(), mask.tensor().shape()),
        ));
    }
    x.mul(x.tape().constant(mask.tensor().clone()))
}

pub fn conv_blur<'t>(x: Var<'t>, kernel: Var<'t>) -> Result<Var<'t>> {
    x.conv2d_same(kernel)
}

pub fn softmax_kernel(logits: Var<'_>) -> Var<'_> {
    logits.softmax_flat()
}

/// Backward warp: output pixel `p` reads `x` at `p − φ(p)`.
pub fn tilt_warp<'t>(x: Var<'t>, tilt: Var<'t>) -> Result<Var<'t>> {
    x.bilinear_warp(tilt)
}

/// Pointwise power followed by convolution.
pub fn nonlinear_blur<'t>(x: Var<'t>, kernel: Var<'t>, gamma: f64) -> Result<Var<'t>> {
    if !(gamma > 0.0) {
        return Err(Error::contract(format!("gamma must be positive, got {gamma}")));
    }
    x.powf(gamma)?.conv2d_same(kernel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardOperator {
    Identity,
    Downsample { factor: usize },
    Inpaint(Mask),
    ConvBlur(BlurKernel),
    NonlinearBlur { kernel: BlurKernel, gamma: f64 },
    BlindBlur { logits: KernelLogits },
    TiltThenBlur { logits: KernelLogits, tilt: TiltField },
}

/// Trainable stand-ins for an operator's stored kernel logits and tilt field.
#[derive(Debug, Clone, Copy, Default)]
pub struct BlindParams<'t> {
    pub logits: Option<Var<'t>>,
    pub tilt: Option<Var<'t>>,
}

impl ForwardOperator {
    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            Self::Identity | Self::Downsample { .. } | Self::Inpaint(_) | Self::ConvBlur(_)
        )
    }

    pub fn is_blind(&self) -> bool {
        matches!(self, Self::BlindBlur { .. } | Self::TiltThenBlur { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Downsample { .. } => "downsample",
            Self::Inpaint(_) => "inpaint",
            Self::ConvBlur(_) => "conv_blur",
            Self::NonlinearBlur { .. } => "nonlinear_blur",
            Self::BlindBlur { .. } => "blind_blur",
            Self::TiltThenBlur { .. } => "tilt_then_blur",
        }
    }

    /// Applies the operator; blind variants use `params` when given, else their stored values.
    pub fn apply<'t>(&self, x: Var<'t>, params: BlindParams<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        match self {
            Self::Identity => Ok(x),
            Self::Downsample { factor } => downsample(x, *factor),
            Self::Inpaint(mask) => apply_mask(x, mask),
            Self::ConvBlur(k) => conv_blur(x, tape.constant(k.tensor().clone())),
            Self::NonlinearBlur { kernel, gamma } => {
                nonlinear_blur(x, tape.constant(kernel.tensor().clone()), *gamma)
            }
            Self::BlindBlur { logits } => {
                let b = params.logits.unwrap_or_else(|| tape.constant(logits.tensor().clone()));
                conv_blur(x, softmax_kernel(b))
            }
            Self::TiltThenBlur { logits, tilt } => {
                let b = params.logits.unwrap_or_else(|| tape.constant(logits.tensor().clone()));
                let phi = params.tilt.unwrap_or_else(|| tape.constant(tilt.tensor().clone()));
                conv_blur(tilt_warp(x, phi)?, softmax_kernel(b))
            }
        }
    }

    /// Off-tape evaluation with stored parameters.
    pub fn apply_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self
            .apply(tape.constant(x.clone()), BlindParams::default())?
            .value()
            .as_ref()
            .clone())
    }

    /// Stored kernel (the softmax of the logits for blind variants).
    pub fn kernel(&self) -> Option<BlurKernel> {
        match self {
            Self::ConvBlur(k) | Self::NonlinearBlur { kernel: k, .. } => Some(k.clone()),
            Self::BlindBlur { logits } | Self::TiltThenBlur { logits, .. } => Some(logits.kernel()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests;
