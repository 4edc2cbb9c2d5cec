//! Reconstruction quality metrics on images with unit dynamic range.

use crate::error::{Error, Result};
use crate::solver::SolveTrace;
use crate::tensor::Tensor;

const SSIM_SIDE: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB for peak value 1; `f64::INFINITY` when the images agree.
pub fn psnr(x: &Tensor, reference: &Tensor) -> Result<f64> {
    x.expect_same_shape(reference, "psnr")?;
    let mse = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.numel() as f64;
    if mse < 1e-12 {
        Ok(f64::INFINITY)
    } else {
        Ok(-10.0 * mse.log10())
    }
}

fn ssim_window() -> Vec<f64> {
    let c = (SSIM_SIDE / 2) as f64;
    let g: Vec<f64> = (0..SSIM_SIDE)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w: Vec<f64> = (0..SSIM_SIDE * SSIM_SIDE)
        .map(|i| g[i / SSIM_SIDE] * g[i % SSIM_SIDE])
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean structural similarity over all valid 11×11 Gaussian windows.
///
/// Leading dimensions are treated as separate planes and averaged.
pub fn ssim(x: &Tensor, reference: &Tensor) -> Result<f64> {
    x.expect_same_shape(reference, "ssim")?;
    let (h, w) = reference.hw()?;
    if h < SSIM_SIDE || w < SSIM_SIDE {
        return Err(Error::contract(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_SIDE}x{SSIM_SIDE} window"
        )));
    }
    let window = ssim_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (oh, ow) = (h - SSIM_SIDE + 1, w - SSIM_SIDE + 1);
    let planes = x.numel() / (h * w);
    let mut total = 0.0;
    for p in 0..planes {
        let a = &x.data()[p * h * w..(p + 1) * h * w];
        let b = &reference.data()[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..SSIM_SIDE {
                    for dj in 0..SSIM_SIDE {
                        let wt = window[di * SSIM_SIDE + dj];
                        let idx = (i + di) * w + j + dj;
                        let (va, vb) = (a[idx], b[idx]);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (planes * oh * ow) as f64)
}

/// `|max PSNR − PSNR[es_index]|` over the iterations that recorded PSNR.
pub fn psnr_gap(trace: &SolveTrace, es_index: usize) -> Result<f64> {
    let peak = trace
        .records
        .iter()
        .filter_map(|r| r.psnr)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or_else(|| Error::contract("psnr_gap: trace has no PSNR values"))?;
    let at = trace
        .records
        .get(es_index)
        .and_then(|r| r.psnr)
        .ok_or_else(|| Error::contract(format!("psnr_gap: no PSNR at iteration {es_index}")))?;
    Ok((peak - at).abs())
}
