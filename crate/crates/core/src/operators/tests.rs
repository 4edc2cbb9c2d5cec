use super::*;

fn eval(f: impl for<'t> FnOnce(&'t Tape) -> Result<Var<'t>>) -> Tensor {
    let tape = Tape::new();
    f(&tape).unwrap().value().as_ref().clone()
}

fn brute_conv(x: &Tensor, k: &Tensor) -> Tensor {
    let (h, w) = x.hw().unwrap();
    let s = k.shape()[0] as isize;
    let c = s / 2;
    Tensor::from_fn(&[h, w], |p| {
        let (i, j) = ((p / w) as isize, (p % w) as isize);
        let mut acc = 0.0;
        for a in 0..s {
            for b in 0..s {
                let (r, q) = (i + c - a, j + c - b);
                if r >= 0 && q >= 0 && r < h as isize && q < w as isize {
                    acc += k.data()[(a * s + b) as usize] * x.data()[(r * w as isize + q) as usize];
                }
            }
        }
        acc
    })
}

#[test]
fn downsample_block_means() {
    let x = Tensor::from_fn(&[4, 4], |i| i as f64);
    let out = eval(|t| downsample(t.constant(x.clone()), 2));
    assert_eq!(out.data(), &[2.5, 4.5, 10.5, 12.5]);
    assert_eq!(eval(|t| downsample(t.constant(x.clone()), 1)), x);
    let c = eval(|t| downsample(t.constant(Tensor::full(&[6, 6], 0.3)), 3));
    assert!(c.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    let tape = Tape::new();
    assert!(downsample(tape.constant(Tensor::zeros(&[5, 4])), 2).is_err());
}

#[test]
fn mask_behaviour() {
    let x = SeedStream::new(1).normal_tensor(&[8, 8]);
    assert_eq!(eval(|t| apply_mask(t.constant(x.clone()), &Mask::ones(&[8, 8]))), x);
    let zero = Mask::new(Tensor::zeros(&[8, 8])).unwrap();
    assert!(eval(|t| apply_mask(t.constant(x.clone()), &zero)).data().iter().all(|&v| v == 0.0));
    let m = Mask::random(&[64, 64], 0.7, &mut SeedStream::new(2)).unwrap();
    let frac = m.tensor().data().iter().filter(|&&v| v == 0.0).count() as f64 / 4096.0;
    assert!((frac - 0.7).abs() < 0.03, "{frac}");
    let tape = Tape::new();
    assert!(apply_mask(tape.constant(Tensor::zeros(&[4, 4])), &m).is_err());
    assert!(Mask::new(Tensor::full(&[2, 2], 0.5)).is_err());
}

#[test]
fn multichannel_mask_planes_match() {
    let m = Mask::random(&[3, 8, 8], 0.5, &mut SeedStream::new(3)).unwrap();
    let d = m.tensor().data();
    assert_eq!(&d[..64], &d[64..128]);
    assert_eq!(&d[..64], &d[128..]);
    let mut bad = Tensor::ones(&[2, 2, 2]);
    bad.data_mut()[5] = 0.0;
    assert!(Mask::new(bad).is_err());
}

#[test]
fn convolution_matches_brute_force() {
    let mut rng = SeedStream::new(4);
    let x = rng.normal_tensor(&[16, 16]);
    for side in [1, 3, 5, 9] {
        let k = rng.normal_tensor(&[side, side]);
        let fast = eval(|t| conv_blur(t.constant(x.clone()), t.constant(k.clone())));
        let slow = brute_conv(&x, &k);
        assert!(fast.sub(&slow).unwrap().max_abs() < 1e-12);
    }
    let delta = BlurKernel::delta(5).unwrap();
    assert_eq!(eval(|t| conv_blur(t.constant(x.clone()), t.constant(delta.tensor().clone()))), x);
    let tape = Tape::new();
    assert!(conv_blur(tape.constant(x.clone()), tape.constant(Tensor::zeros(&[4, 4]))).is_err());
}

#[test]
fn uniform_kernel_keeps_constant_interior() {
    let k = Tensor::full(&[3, 3], 1.0 / 9.0);
    let out = eval(|t| conv_blur(t.constant(Tensor::full(&[8, 8], 0.4)), t.constant(k.clone())));
    for i in 1..7 {
        for j in 1..7 {
            assert!((out.data()[i * 8 + j] - 0.4).abs() < 1e-15);
        }
    }
}

#[test]
fn softmax_kernel_properties() {
    let uniform = KernelLogits::zeros(5).unwrap().kernel();
    assert!(uniform.tensor().data().iter().all(|v| (v - 1.0 / 25.0).abs() < 1e-15));
    let b = SeedStream::new(5).normal_tensor(&[5, 5]);
    let k1 = KernelLogits::new(b.clone()).unwrap().kernel();
    let k2 = KernelLogits::new(b.map(|v| v + 7.5)).unwrap().kernel();
    assert!(k1.tensor().sub(k2.tensor()).unwrap().max_abs() < 1e-15);
    assert!(k1.is_simplex());
    let mut peaked = Tensor::zeros(&[5, 5]);
    peaked.data_mut()[7] = 20.0;
    let k = KernelLogits::new(peaked).unwrap().kernel();
    let expected = 1.0 / (1.0 + 24.0 * (-20.0f64).exp());
    assert!((k.tensor().data()[7] - expected).abs() < 1e-14 && expected > 0.999);
    let huge = KernelLogits::new(Tensor::full(&[3, 3], 1e4)).unwrap().kernel();
    assert!(huge.is_simplex());
}

#[test]
fn tilt_identity_and_integer_shift() {
    let x = SeedStream::new(6).normal_tensor(&[6, 6]);
    assert_eq!(eval(|t| tilt_warp(t.constant(x.clone()), t.constant(Tensor::zeros(&[2, 6, 6])))), x);
    let mut flow = Tensor::zeros(&[2, 6, 6]);
    flow.data_mut()[..36].iter_mut().for_each(|v| *v = 1.0);
    let out = eval(|t| tilt_warp(t.constant(x.clone()), t.constant(flow.clone())));
    for i in 0..6 {
        for j in 0..6 {
            let expected = if i == 0 { 0.0 } else { x.data()[(i - 1) * 6 + j] };
            assert!((out.data()[i * 6 + j] - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn tilt_gradient_matches_finite_differences() {
    let mut rng = SeedStream::new(7);
    let x = rng.normal_tensor(&[6, 6]);
    let flow = Tensor::from_fn(&[2, 6, 6], |_| 0.2 + 0.6 * rng.uniform());
    let w = rng.normal_tensor(&[6, 6]);
    let f = |phi: &Tensor| eval(|t| tilt_warp(t.constant(x.clone()), t.constant(phi.clone()))).dot(&w);
    let tape = Tape::new();
    let pv = tape.leaf(flow.clone());
    let loss = tilt_warp(tape.constant(x.clone()), pv).unwrap().mul(tape.constant(w.clone())).unwrap().sum();
    let g = tape.backward(loss).unwrap().wrt(pv);
    let num: Vec<f64> = (0..flow.numel())
        .map(|i| {
            let mut p = flow.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = flow.clone();
            m.data_mut()[i] -= 1e-6;
            (f(&p) - f(&m)) / 2e-6
        })
        .collect();
    let err: f64 = num.iter().zip(g.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(err / scale < 1e-4);
}

#[test]
fn tilt_field_bound() {
    let mut f = Tensor::zeros(&[2, 3, 3]);
    f.data_mut()[0] = 3.0;
    assert!(TiltField::new(f.clone(), 2.0).is_err());
    project_tilt(&mut f, 2.0);
    assert!((f.data()[0] - 2.0).abs() < 1e-15);
    assert!(TiltField::new(f, 2.0).is_ok());
    let r = TiltField::random(4, 4, 0.01, 2.0, &mut SeedStream::new(1)).unwrap();
    assert!(r.tensor().max_abs() < 0.1);
    assert!(TiltField::new(Tensor::zeros(&[3, 3]), 2.0).is_err());
}

#[test]
fn nonlinear_blur_cases() {
    let mut rng = SeedStream::new(8);
    let x = Tensor::from_fn(&[8, 8], |_| rng.uniform());
    let g = gaussian_kernel(3, 1.0).unwrap();
    let gt = g.tensor().clone();
    let lin = eval(|t| conv_blur(t.constant(x.clone()), t.constant(gt.clone())));
    let nl1 = eval(|t| nonlinear_blur(t.constant(x.clone()), t.constant(gt.clone()), 1.0));
    assert!(lin.sub(&nl1).unwrap().max_abs() < 1e-15);
    let delta = BlurKernel::delta(3).unwrap().tensor().clone();
    let sq = eval(|t| nonlinear_blur(t.constant(x.clone()), t.constant(delta.clone()), 2.0));
    assert!(sq.sub(&x.mul(&x).unwrap()).unwrap().max_abs() < 1e-15);
    let half = eval(|t| nonlinear_blur(t.constant(Tensor::full(&[8, 8], 0.5)), t.constant(gt.clone()), 2.2));
    assert!((half.data()[3 * 8 + 3] - 0.5f64.powf(2.2)).abs() < 1e-12);
    assert!((0.5f64.powf(2.2) - 0.2176).abs() < 1e-4);
    let tape = Tape::new();
    let neg = tape.constant(Tensor::full(&[4, 4], -0.1));
    assert!(matches!(
        nonlinear_blur(neg, tape.constant(delta.clone()), 2.2),
        Err(Error::Domain { .. })
    ));
    assert!(nonlinear_blur(tape.constant(x.clone()), tape.constant(delta), 0.0).is_err());
}

#[test]
fn gaussian_kernel_cases() {
    assert_eq!(gaussian_kernel(1, 2.0).unwrap().tensor().data(), &[1.0]);
    let k = gaussian_kernel(9, 1.0).unwrap();
    let d = k.tensor().data();
    for i in 0..9 {
        for j in 0..9 {
            assert_eq!(d[i * 9 + j], d[(8 - i) * 9 + 8 - j]);
        }
    }
    let mut norm = 0.0;
    for i in -4i32..=4 {
        for j in -4i32..=4 {
            norm += (-f64::from(i * i + j * j) / 2.0).exp();
        }
    }
    assert!((d[40] - 1.0 / norm).abs() < 1e-15);
    assert!(k.is_simplex());
    assert!(gaussian_kernel(4, 1.0).is_err());
    assert!(gaussian_kernel(3, 0.0).is_err());
}

#[test]
fn dispatch_cases() {
    let mut rng = SeedStream::new(9);
    let x = Tensor::from_fn(&[8, 8], |_| rng.uniform());
    assert_eq!(ForwardOperator::Inpaint(Mask::ones(&[8, 8])).apply_tensor(&x).unwrap(), x);
    let mut peaked = Tensor::zeros(&[3, 3]);
    peaked.data_mut()[4] = 60.0;
    let op = ForwardOperator::TiltThenBlur {
        logits: KernelLogits::new(peaked).unwrap(),
        tilt: TiltField::zeros(8, 8),
    };
    let out = op.apply_tensor(&x).unwrap();
    for i in 1..7 {
        for j in 1..7 {
            assert!((out.data()[i * 8 + j] - x.data()[i * 8 + j]).abs() < 1e-12);
        }
    }
    let k = gaussian_kernel(5, 1.2).unwrap();
    let blind = ForwardOperator::BlindBlur {
        logits: KernelLogits::from_kernel(&k).unwrap(),
    };
    let known = ForwardOperator::ConvBlur(k);
    let diff = blind.apply_tensor(&x).unwrap().sub(&known.apply_tensor(&x).unwrap()).unwrap();
    assert!(diff.max_abs() < 1e-9);
}

fn gradient_check(op: &ForwardOperator, x: &Tensor, logits: Option<&Tensor>, tilt: Option<&Tensor>, w: &Tensor) {
    let f = |x: &Tensor, l: Option<&Tensor>, p: Option<&Tensor>| {
        let tape = Tape::new();
        let params = BlindParams {
            logits: l.map(|v| tape.constant(v.clone())),
            tilt: p.map(|v| tape.constant(v.clone())),
        };
        op.apply(tape.constant(x.clone()), params).unwrap().value().dot(w)
    };
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let lv = logits.map(|v| tape.leaf(v.clone()));
    let pv = tilt.map(|v| tape.leaf(v.clone()));
    let out = op.apply(xv, BlindParams { logits: lv, tilt: pv }).unwrap();
    let grads = tape.backward(out.mul(tape.constant(w.clone())).unwrap().sum()).unwrap();
    let check = |analytic: Tensor, perturb: &dyn Fn(usize, f64) -> f64| {
        let num: Vec<f64> = (0..analytic.numel())
            .map(|i| (perturb(i, 1e-6) - perturb(i, -1e-6)) / 2e-6)
            .collect();
        let err: f64 = num.iter().zip(analytic.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        assert!(err / scale < 1e-5, "{}: {}", op.name(), err / scale);
    };
    check(grads.wrt(xv), &|i, h| {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        f(&p, logits, tilt)
    });
    if let (Some(l), Some(lv)) = (logits, lv) {
        check(grads.wrt(lv), &|i, h| {
            let mut p = l.clone();
            p.data_mut()[i] += h;
            f(x, Some(&p), tilt)
        });
    }
    if let (Some(t), Some(pv)) = (tilt, pv) {
        check(grads.wrt(pv), &|i, h| {
            let mut p = t.clone();
            p.data_mut()[i] += h;
            f(x, logits, Some(&p))
        });
    }
}

#[test]
fn every_operator_is_differentiable() {
    let mut rng = SeedStream::new(10);
    let x = Tensor::from_fn(&[8, 8], |_| 0.1 + 0.8 * rng.uniform());
    let w8 = rng.normal_tensor(&[8, 8]);
    let w4 = rng.normal_tensor(&[4, 4]);
    let k = gaussian_kernel(3, 0.8).unwrap();
    let logits = rng.normal_tensor(&[3, 3]);
    let tilt = Tensor::from_fn(&[2, 8, 8], |_| 0.1 + 0.3 * rng.uniform());
    let ops = [
        ForwardOperator::Identity,
        ForwardOperator::Inpaint(Mask::random(&[8, 8], 0.5, &mut rng).unwrap()),
        ForwardOperator::ConvBlur(k.clone()),
        ForwardOperator::NonlinearBlur { kernel: k, gamma: 2.2 },
    ];
    for op in &ops {
        gradient_check(op, &x, None, None, &w8);
    }
    gradient_check(&ForwardOperator::Downsample { factor: 2 }, &x, None, None, &w4);
    let blind = ForwardOperator::BlindBlur {
        logits: KernelLogits::zeros(3).unwrap(),
    };
    gradient_check(&blind, &x, Some(&logits), None, &w8);
    let turb = ForwardOperator::TiltThenBlur {
        logits: KernelLogits::zeros(3).unwrap(),
        tilt: TiltField::zeros(8, 8),
    };
    gradient_check(&turb, &x, Some(&logits), Some(&tilt), &w8);
}

#[test]
fn linear_operators_are_linear() {
    let mut rng = SeedStream::new(11);
    let (x1, x2) = (rng.normal_tensor(&[8, 8]), rng.normal_tensor(&[8, 8]));
    let (a, b) = (0.7, -1.3);
    let ops = [
        ForwardOperator::Downsample { factor: 2 },
        ForwardOperator::Inpaint(Mask::random(&[8, 8], 0.3, &mut rng).unwrap()),
        ForwardOperator::ConvBlur(gaussian_kernel(5, 1.0).unwrap()),
    ];
    for op in &ops {
        assert!(op.is_linear());
        let lhs = op.apply_tensor(&x1.scale(a).add(&x2.scale(b)).unwrap()).unwrap();
        let rhs = op
            .apply_tensor(&x1)
            .unwrap()
            .scale(a)
            .add(&op.apply_tensor(&x2).unwrap().scale(b))
            .unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10);
    }
}

#[test]
fn kernel_scale_ambiguity() {
    let mut rng = SeedStream::new(12);
    let x = rng.normal_tensor(&[8, 8]);
    let k = gaussian_kernel(3, 1.0).unwrap().tensor().clone();
    let c = 3.7;
    let a = eval(|t| conv_blur(t.constant(x.scale(1.0 / c)), t.constant(k.scale(c))));
    let b = eval(|t| conv_blur(t.constant(x.clone()), t.constant(k.clone())));
    assert!(a.sub(&b).unwrap().max_abs() < 1e-10);
}

#[test]
fn kernel_distance() {
    let a = BlurKernel::delta(3).unwrap();
    let b = KernelLogits::zeros(3).unwrap().kernel();
    assert!((a.tv_distance(&b).unwrap() - 8.0 / 9.0).abs() < 1e-15);
    assert!(KernelLogits::from_kernel(&a).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_kernel_stays_on_simplex(vals in proptest::collection::vec(-50.0f64..50.0, 25)) {
            let k = KernelLogits::new(Tensor::new(vec![5, 5], vals).unwrap()).unwrap().kernel();
            prop_assert!(k.is_simplex());
        }
    }
}

mod linearity_props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn linear_operators_superpose(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = SeedStream::new(seed);
            let (x1, x2) = (rng.normal_tensor(&[8, 8]), rng.normal_tensor(&[8, 8]));
            let ops = [
                ForwardOperator::Downsample { factor: 2 },
                ForwardOperator::Inpaint(Mask::random(&[8, 8], 0.5, &mut rng).unwrap()),
                ForwardOperator::ConvBlur(gaussian_kernel(3, 0.5 + rng.uniform()).unwrap()),
            ];
            for op in &ops {
                let lhs = op.apply_tensor(&x1.scale(a).add(&x2.scale(b)).unwrap()).unwrap();
                let rhs = op.apply_tensor(&x1).unwrap().scale(a).add(&op.apply_tensor(&x2).unwrap().scale(b)).unwrap();
                prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10);
            }
        }

        #[test]
        fn kernel_scale_trades_against_image_scale(seed in 0u64..10_000, c in 0.01f64..100.0) {
            let mut rng = SeedStream::new(seed);
            let x = rng.normal_tensor(&[8, 8]);
            let k = KernelLogits::new(rng.normal_tensor(&[3, 3])).unwrap().kernel().tensor().clone();
            let a = eval(|t| conv_blur(t.constant(x.scale(1.0 / c)), t.constant(k.scale(c))));
            let b = eval(|t| conv_blur(t.constant(x.clone()), t.constant(k.clone())));
            prop_assert!(a.sub(&b).unwrap().max_abs() < 1e-10 * x.max_abs().max(1.0));
        }
    }
}
