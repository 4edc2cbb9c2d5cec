//! Radix-2 2-D Fourier transform and radial frequency-band errors.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_BANDS: usize = 5;

/// Mean relative spectral error per radial band, lowest frequencies first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandErrors(pub [f64; NUM_BANDS]);

impl BandErrors {
    pub fn values(&self) -> &[f64; NUM_BANDS] {
        &self.0
    }
}

fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    if n <= 1 {
        return;
    }
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let step = Complex64::from_polar(1.0, sign * 2.0 * std::f64::consts::PI / len as f64);
        for start in (0..n).step_by(len) {
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let a = buf[start + k];
                let b = buf[start + k + len / 2] * w;
                buf[start + k] = a + b;
                buf[start + k + len / 2] = a - b;
                w *= step;
            }
        }
        len <<= 1;
    }
}

fn transform(data: &mut [Complex64], n: usize, inverse: bool) {
    for row in data.chunks_mut(n) {
        fft_in_place(row, inverse);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = data[r * n + c];
        }
        fft_in_place(&mut col, inverse);
        for r in 0..n {
            data[r * n + c] = col[r];
        }
    }
}

fn square_side(x: &Tensor, op: &'static str) -> Result<usize> {
    match x.shape() {
        [h, w] if h == w && h.is_power_of_two() => Ok(*h),
        other => Err(Error::contract(format!(
            "{op}: expected a power-of-two square image, got {other:?}"
        ))),
    }
}

/// Unnormalised forward transform of an `N × N` image (`N` a power of two), row-major.
pub fn dft2(x: &Tensor) -> Result<Vec<Complex64>> {
    let n = square_side(x, "dft2")?;
    let mut data: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut data, n, false);
    Ok(data)
}

/// Inverse of [`dft2`]; returns the full complex image.
pub fn idft2(spectrum: &[Complex64]) -> Result<Vec<Complex64>> {
    let n = (spectrum.len() as f64).sqrt().round() as usize;
    if n * n != spectrum.len() || !n.is_power_of_two() {
        return Err(Error::contract(format!(
            "idft2: {} bins do not form a power-of-two square",
            spectrum.len()
        )));
    }
    let mut data = spectrum.to_vec();
    transform(&mut data, n, true);
    let scale = 1.0 / (n * n) as f64;
    data.iter_mut().for_each(|v| *v *= scale);
    Ok(data)
}

/// Radial band of bin `(u, v)` in an `n × n` spectrum.
///
/// Frequencies are taken as signed indices, the radius is normalised by the
/// Nyquist radius `n / 2`, and bands are the annuli `[0.2 k, 0.2 (k + 1))`.
/// Corner bins beyond the Nyquist circle fall into the last band.
pub fn band_of(u: usize, v: usize, n: usize) -> usize {
    let signed = |i: usize| if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
    let (fu, fv) = (signed(u), signed(v));
    let r = (fu * fu + fv * fv).sqrt() / (n as f64 / 2.0);
    ((r / 0.2).floor() as usize).min(NUM_BANDS - 1)
}

/// Mean `|F(ref) − F(xhat)| / |F(ref)|` over each radial band.
pub fn fbe(xhat: &Tensor, reference: &Tensor) -> Result<BandErrors> {
    xhat.expect_same_shape(reference, "fbe")?;
    let n = square_side(reference, "fbe")?;
    let fx = dft2(xhat)?;
    let fr = dft2(reference)?;
    let mut sums = [0.0; NUM_BANDS];
    let mut counts = [0usize; NUM_BANDS];
    for u in 0..n {
        for v in 0..n {
            let i = u * n + v;
            let mag = fr[i].norm();
            if mag < 1e-12 {
                continue;
            }
            let b = band_of(u, v, n);
            sums[b] += (fr[i] - fx[i]).norm() / mag;
            counts[b] += 1;
        }
    }
    let mut out = [0.0; NUM_BANDS];
    for b in 0..NUM_BANDS {
        if counts[b] == 0 {
            return Err(Error::contract(format!(
                "fbe: band {} has no usable reference bins",
                b + 1
            )));
        }
        out[b] = sums[b] / counts[b] as f64;
    }
    Ok(BandErrors(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn naive_dft(x: &Tensor) -> Vec<Complex64> {
        let n = x.shape()[0];
        let mut out = vec![Complex64::new(0.0, 0.0); n * n];
        for u in 0..n {
            for v in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in 0..n {
                    for c in 0..n {
                        let phase = -2.0 * std::f64::consts::PI * ((u * r + v * c) as f64) / n as f64;
                        acc += Complex64::from_polar(x.data()[r * n + c], phase);
                    }
                }
                out[u * n + v] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_direct_transform() {
        let x = SeedStream::new(1).normal_tensor(&[8, 8]);
        let fast = dft2(&x).unwrap();
        let slow = naive_dft(&x);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn constant_image_has_only_dc() {
        let spec = dft2(&Tensor::full(&[16, 16], 0.3)).unwrap();
        assert!((spec[0].re - 0.3 * 256.0).abs() < 1e-10);
        assert!(spec[1..].iter().all(|v| v.norm() < 1e-10));
    }

    #[test]
    fn round_trip_and_parseval() {
        let x = SeedStream::new(2).normal_tensor(&[32, 32]);
        let spec = dft2(&x).unwrap();
        let back = idft2(&spec).unwrap();
        for (a, b) in back.iter().zip(x.data()) {
            assert!((a.re - b).abs() < 1e-10 && a.im.abs() < 1e-10);
        }
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let spectral: f64 = spec.iter().map(|v| v.norm_sqr()).sum::<f64>() / 1024.0;
        assert!((energy - spectral).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(dft2(&Tensor::zeros(&[6, 6])).is_err());
        assert!(dft2(&Tensor::zeros(&[8, 4])).is_err());
        assert!(idft2(&[Complex64::new(0.0, 0.0); 12]).is_err());
    }

    #[test]
    fn identical_inputs_give_zero_bands() {
        let x = SeedStream::new(3).normal_tensor(&[16, 16]);
        assert_eq!(fbe(&x, &x).unwrap().0, [0.0; 5]);
    }

    #[test]
    fn dc_offset_only_touches_first_band() {
        let x = SeedStream::new(4).normal_tensor(&[16, 16]);
        let shifted = x.map(|v| v + 0.25);
        let e = fbe(&shifted, &x).unwrap().0;
        assert!(e[0] > 0.0);
        assert!(e[1..].iter().all(|v| v.abs() < 1e-12), "{e:?}");
    }

    #[test]
    fn invariant_to_joint_circular_shift() {
        let mut rng = SeedStream::new(5);
        let a = rng.normal_tensor(&[16, 16]);
        let b = rng.normal_tensor(&[16, 16]);
        let roll = |t: &Tensor| Tensor::from_fn(&[16, 16], |i| {
            let (r, c) = (i / 16, i % 16);
            t.data()[((r + 3) % 16) * 16 + (c + 5) % 16]
        });
        let e1 = fbe(&a, &b).unwrap().0;
        let e2 = fbe(&roll(&a), &roll(&b)).unwrap().0;
        for (x, y) in e1.iter().zip(&e2) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn bands_partition_by_radius() {
        assert_eq!(band_of(0, 0, 16), 0);
        assert_eq!(band_of(8, 0, 16), 4);
        assert_eq!(band_of(8, 8, 16), 4);
        assert_eq!(band_of(0, 2, 16), 1);
        assert_eq!(band_of(0, 14, 16), 1);
    }

    #[test]
    fn empty_band_is_reported() {
        let x = Tensor::full(&[8, 8], 1.0);
        let err = fbe(&x, &x).unwrap_err().to_string();
        assert!(err.contains("band 2"), "{err}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn joint_shift_leaves_bands_unchanged(seed in 0u64..1_000, dy in 0usize..8, dx in 0usize..8) {
                let mut rng = SeedStream::new(seed);
                let a = rng.normal_tensor(&[8, 8]);
                let b = rng.normal_tensor(&[8, 8]);
                let roll = |t: &Tensor| Tensor::from_fn(&[8, 8], |i| t.data()[((i / 8 + dy) % 8) * 8 + (i % 8 + dx) % 8]);
                let e1 = fbe(&a, &b).unwrap().0;
                let e2 = fbe(&roll(&a), &roll(&b)).unwrap().0;
                for (x, y) in e1.iter().zip(&e2) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
                prop_assert!(e1.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
