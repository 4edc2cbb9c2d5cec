//! Seeded synthetic datasets with known generating distributions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::GmmPrior;
use crate::rng::SeedStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    Gmm,
    LowrankGaussian,
    SmoothImages,
}

impl std::str::FromStr for FixtureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm" => Ok(Self::Gmm),
            "lowrank_gaussian" => Ok(Self::LowrankGaussian),
            "smooth_images" => Ok(Self::SmoothImages),
            other => Err(Error::Config(format!("unknown fixture kind {other:?}"))),
        }
    }
}

/// Samples from a mixture, one row per draw: `[n, d]`.
pub fn sample_gmm(prior: &GmmPrior, n: usize, rng: &mut SeedStream) -> Tensor {
    let d = prior.dim();
    let weights = prior.weights();
    let means = prior.means();
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut j = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                j = i;
                break;
            }
        }
        let basis = prior.basis(j);
        let spectrum = prior.spectrum(j);
        let w: Vec<f64> = spectrum.iter().map(|l| l.sqrt() * rng.normal()).collect();
        for r in 0..d {
            let offset: f64 = (0..d).map(|c| basis.data()[r * d + c] * w[c]).sum();
            out.push(means[j][r] + offset);
        }
    }
    Tensor::from_parts(vec![n, d], out)
}

#[derive(Debug, Clone)]
pub struct GmmFixture {
    pub prior: GmmPrior,
    pub samples: Tensor,
}

/// `components` well-separated clusters in `dim` dimensions.
pub fn gmm_fixture(dim: usize, components: usize, count: usize, seed: u64) -> Result<GmmFixture> {
    if dim == 0 || components == 0 {
        return Err(Error::contract("gmm fixture needs positive dim and component count"));
    }
    let root = SeedStream::new(seed);
    let mut rng = root.derive("fixture/gmm/params");
    let mut means = Vec::with_capacity(components);
    let mut covs = Vec::with_capacity(components);
    for j in 0..components {
        let angle = 2.0 * std::f64::consts::PI * j as f64 / components as f64;
        let mut m: Vec<f64> = (0..dim).map(|_| 0.3 * rng.normal()).collect();
        m[0] += 2.0 * angle.cos();
        if dim > 1 {
            m[1] += 2.0 * angle.sin();
        }
        means.push(m);
        let a = rng.normal_tensor(&[dim, dim]).scale(0.25 / (dim as f64).sqrt());
        let mut cov = a.matmul(&a.transpose()?)?;
        for i in 0..dim {
            cov.data_mut()[i * dim + i] += 0.02;
        }
        covs.push(cov);
    }
    let raw: Vec<f64> = (0..components).map(|_| 0.5 + rng.uniform()).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let prior = GmmPrior::new(weights, means, covs)?;
    let samples = sample_gmm(&prior, count, &mut root.derive("fixture/gmm/samples"));
    Ok(GmmFixture { prior, samples })
}

/// Degenerate Gaussian `μ + U diag(s) w`, `w ~ N(0, I_r)`.
#[derive(Debug, Clone)]
pub struct LowRankFixture {
    pub mean: Vec<f64>,
    /// Orthonormal columns, `[d, r]`.
    pub basis: Tensor,
    pub scales: Vec<f64>,
    pub samples: Tensor,
}

impl LowRankFixture {
    /// The generating distribution as an analytic prior.
    pub fn prior(&self) -> Result<GmmPrior> {
        let (d, r) = (self.basis.shape()[0], self.basis.shape()[1]);
        let scaled = Tensor::from_fn(&[d, r], |i| self.basis.data()[i] * self.scales[i % r]);
        let cov = scaled.matmul(&scaled.transpose()?)?;
        let sym = cov.add(&cov.transpose()?)?.scale(0.5);
        GmmPrior::gaussian(self.mean.clone(), sym)
    }

    /// Euclidean distance of a `d`-vector from the affine span `μ + range(U)`.
    pub fn distance_to_span(&self, x: &[f64]) -> f64 {
        let (d, r) = (self.basis.shape()[0], self.basis.shape()[1]);
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let mut resid = diff.clone();
        for c in 0..r {
            let coef: f64 = (0..d).map(|i| self.basis.data()[i * r + c] * diff[i]).sum();
            for i in 0..d {
                resid[i] -= coef * self.basis.data()[i * r + c];
            }
        }
        resid.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn lowrank_fixture(dim: usize, rank: usize, count: usize, seed: u64) -> Result<LowRankFixture> {
    if rank == 0 || rank > dim {
        return Err(Error::contract(format!("rank {rank} outside 1..={dim}")));
    }
    let root = SeedStream::new(seed);
    let mut rng = root.derive("fixture/lowrank/params");
    let mean: Vec<f64> = (0..dim).map(|_| 0.5 * rng.normal()).collect();
    let raw = rng.normal_tensor(&[dim, rank]);
    let q = DMatrix::from_row_slice(dim, rank, raw.data()).qr().q();
    let basis = Tensor::from_fn(&[dim, rank], |i| q[(i / rank, i % rank)]);
    let scales: Vec<f64> = (0..rank)
        .map(|i| 1.5 - i as f64 / rank as f64)
        .collect();
    let mut srng = root.derive("fixture/lowrank/samples");
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let w: Vec<f64> = scales.iter().map(|s| s * srng.normal()).collect();
        for i in 0..dim {
            let off: f64 = (0..rank).map(|c| basis.data()[i * rank + c] * w[c]).sum();
            data.push(mean[i] + off);
        }
    }
    Ok(LowRankFixture {
        mean,
        basis,
        scales,
        samples: Tensor::from_parts(vec![count, dim], data),
    })
}

/// Low-pass filtered noise images around mid-gray.
///
/// Each image is `0.5 + amplitude · G w` with `w` white noise and `G` a
/// circular Gaussian filter scaled to unit per-pixel variance, then clipped
/// to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SmoothImages {
    pub side: usize,
    pub amplitude: f64,
    /// `[n, side, side]`.
    pub images: Tensor,
    filter: Tensor,
}

impl SmoothImages {
    /// The Gaussian the unclipped images are drawn from, on flattened pixels.
    pub fn prior(&self) -> Result<GmmPrior> {
        let n = self.side * self.side;
        let cov = self.filter.matmul(&self.filter.transpose()?)?.scale(self.amplitude * self.amplitude);
        let sym = cov.add(&cov.transpose()?)?.scale(0.5);
        GmmPrior::gaussian(vec![0.5; n], sym)
    }

    /// Image `i` as `[side, side]`.
    pub fn image(&self, i: usize) -> Tensor {
        let n = self.side * self.side;
        Tensor::from_parts(
            vec![self.side, self.side],
            self.images.data()[i * n..(i + 1) * n].to_vec(),
        )
    }

    /// All images flattened to `[count, side²]`.
    pub fn flattened(&self) -> Tensor {
        let n = self.side * self.side;
        Tensor::from_parts(vec![self.images.shape()[0], n], self.images.data().to_vec())
    }
}

pub fn smooth_images(count: usize, side: usize, width: f64, amplitude: f64, seed: u64) -> Result<SmoothImages> {
    if side == 0 || !(width > 0.0) {
        return Err(Error::contract("smooth images need positive side and filter width"));
    }
    let n = side * side;
    let wrap = |a: usize, b: usize| {
        let d = (a + side - b) % side;
        d.min(side - d) as f64
    };
    let mut filter = Tensor::zeros(&[n, n]);
    for p in 0..n {
        for q in 0..n {
            let (dy, dx) = (wrap(p / side, q / side), wrap(p % side, q % side));
            filter.data_mut()[p * n + q] = (-(dy * dy + dx * dx) / (2.0 * width * width)).exp();
        }
    }
    let row_norm = filter.data()[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
    let filter = filter.scale(1.0 / row_norm);
    let mut rng = SeedStream::new(seed).derive("fixture/smooth_images");
    let mut images = Vec::with_capacity(count * n);
    for _ in 0..count {
        let w = rng.normal_tensor(&[n, 1]);
        let g = filter.matmul(&w)?;
        images.extend(g.data().iter().map(|v| (0.5 + amplitude * v).clamp(0.0, 1.0)));
    }
    Ok(SmoothImages {
        side,
        amplitude,
        images: Tensor::from_parts(vec![count, side, side], images),
        filter,
    })
}
