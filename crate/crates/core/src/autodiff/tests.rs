use proptest::prelude::*;

use super::*;
use crate::rng::SeedStream;

/// Central differences of `f` at `x` with step `h`.
fn numeric_grad(x: &Tensor, h: f64, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.sub(b).unwrap().norm();
    diff / a.norm().max(b.norm()).max(1e-12)
}

/// Checks the gradient of `loss = sum(w * f(x))` with a random weight `w`.
fn check_unary(x: Tensor, f: &dyn for<'t> Fn(Var<'t>) -> Var<'t>) -> f64 {
    let mut rng = SeedStream::new(99);
    let probe = {
        let tape = Tape::new();
        let y = f(tape.constant(x.clone()));
        rng.normal_tensor(&y.shape())
    };
    let loss_of = |xv: &Tensor| {
        let tape = Tape::new();
        let y = f(tape.constant(xv.clone()));
        y.value().dot(&probe)
    };
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let w = tape.constant(probe.clone());
    let loss = f(xv).mul(w).unwrap().sum();
    let g = tape.backward(loss).unwrap().wrt(xv);
    rel_err(&g, &numeric_grad(&x, 1e-6, &loss_of))
}

fn check_binary(
    a: Tensor,
    b: Tensor,
    f: &dyn for<'t> Fn(Var<'t>, Var<'t>) -> Var<'t>,
) -> (f64, f64) {
    let ea = check_unary(a.clone(), &|x| f(x, x.tape().constant(b.clone())));
    let eb = check_unary(b.clone(), &|y| f(y.tape().constant(a.clone()), y));
    (ea, eb)
}

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    SeedStream::new(seed).normal_tensor(shape)
}

fn positive(seed: u64, shape: &[usize]) -> Tensor {
    randn(seed, shape).map(|v| 0.5 + v.abs())
}

#[test]
fn square_at_three_has_gradient_six() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = x.mul(x).unwrap();
    assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 6.0);
}

#[test]
fn unreachable_leaf_gets_zero() {
    let tape = Tape::new();
    let x = tape.leaf(randn(1, &[3]));
    let w = tape.leaf(randn(2, &[4, 2]));
    let loss = x.square().sum();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(w), Tensor::zeros(&[4, 2]));
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(randn(1, &[3]));
    assert!(matches!(tape.backward(x.exp()), Err(Error::Contract(_))));
}

#[test]
fn foreign_tape_rejected() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let a = t1.leaf(randn(1, &[2]));
    let b = t2.leaf(randn(2, &[2]));
    assert!(a.add(b).is_err());
}

#[test]
fn shape_and_domain_errors() {
    let tape = Tape::new();
    let a = tape.leaf(randn(1, &[2, 3]));
    let b = tape.leaf(randn(2, &[3, 2]));
    assert!(matches!(a.add(b), Err(Error::Shape { .. })));
    assert!(matches!(a.matmul(a), Err(Error::Shape { .. })));
    let neg = tape.constant(Tensor::from_vec(vec![1.0, -1.0]));
    assert!(matches!(neg.log(), Err(Error::Domain { .. })));
    assert!(matches!(neg.sqrt(), Err(Error::Domain { .. })));
    assert!(matches!(neg.powf(2.2), Err(Error::Domain { .. })));
    assert!(neg.powf(2.0).is_ok());
    let zero = tape.constant(Tensor::from_vec(vec![0.0, 1.0]));
    assert!(matches!(neg.div(zero), Err(Error::Domain { .. })));
}

#[test]
fn conv_with_delta_kernel_is_identity() {
    let x = randn(5, &[6, 7]);
    let mut k = Tensor::zeros(&[3, 3]);
    k.data_mut()[4] = 1.0;
    let tape = Tape::new();
    let y = tape
        .constant(x.clone())
        .conv2d_same(tape.constant(k))
        .unwrap();
    assert_eq!(*y.value(), x);
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let (ea, eb) = check_binary(randn(1, &[3, 4]), randn(2, &[4, 2]), &|a, b| {
        a.matmul(b).unwrap()
    });
    assert!(ea < 1e-6 && eb < 1e-6, "{ea} {eb}");
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    let s = [3, 4];
    let cases: Vec<(&str, f64)> = vec![
        ("exp", check_unary(randn(1, &s), &|x| x.exp())),
        ("log", check_unary(positive(2, &s), &|x| x.log().unwrap())),
        ("sqrt", check_unary(positive(3, &s), &|x| x.sqrt().unwrap())),
        ("tanh", check_unary(randn(4, &s), &|x| x.tanh())),
        ("silu", check_unary(randn(5, &s), &|x| x.silu())),
        ("powf", check_unary(positive(6, &s), &|x| x.powf(2.2).unwrap())),
        ("scale", check_unary(randn(7, &s), &|x| x.scale(-1.7))),
        ("add_scalar", check_unary(randn(8, &s), &|x| x.add_scalar(0.3))),
        ("neg", check_unary(randn(9, &s), &|x| x.neg())),
        ("sum", check_unary(randn(10, &s), &|x| x.sum())),
        ("mean", check_unary(randn(11, &s), &|x| x.mean())),
        ("sum_axis0", check_unary(randn(12, &s), &|x| x.sum_axis(0).unwrap())),
        ("sum_axis1", check_unary(randn(13, &s), &|x| x.sum_axis(1).unwrap())),
        ("reshape", check_unary(randn(14, &s), &|x| x.reshape(&[2, 6]).unwrap())),
        ("broadcast", check_unary(randn(15, &[1, 4]), &|x| x.broadcast_to(&[3, 4]).unwrap())),
        ("slice", check_unary(randn(16, &s), &|x| x.slice(1, 1, 2).unwrap())),
        ("softmax_flat", check_unary(randn(17, &s), &|x| x.softmax_flat())),
        ("softmax_last", check_unary(randn(18, &s), &|x| x.softmax_last())),
        ("avg_pool", check_unary(randn(19, &[2, 4, 6]), &|x| x.avg_pool2d(2).unwrap())),
        ("gather", check_unary(randn(20, &[5, 3]), &|x| x.gather_rows(&[4, 0, 4]).unwrap())),
        (
            "concat",
            check_unary(randn(21, &s), &|x| {
                let other = x.tape().constant(Tensor::ones(&[3, 2]));
                x.tape().concat(&[x, other, x], 1).unwrap()
            }),
        ),
    ];
    for (name, err) in cases {
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn binary_primitives_match_finite_differences() {
    let s = [3, 4];
    let cases: Vec<(&str, (f64, f64))> = vec![
        ("add", check_binary(randn(1, &s), randn(2, &[4]), &|a, b| a.add(b).unwrap())),
        ("sub", check_binary(randn(3, &s), randn(4, &[3, 1]), &|a, b| a.sub(b).unwrap())),
        ("mul", check_binary(randn(5, &s), randn(6, &s), &|a, b| a.mul(b).unwrap())),
        ("div", check_binary(randn(7, &s), positive(8, &s), &|a, b| a.div(b).unwrap())),
        ("mse", check_binary(randn(9, &s), randn(10, &s), &|a, b| a.mse(b).unwrap())),
        (
            "conv",
            check_binary(randn(11, &[2, 6, 5]), randn(12, &[3, 3]), &|a, b| {
                a.conv2d_same(b).unwrap()
            }),
        ),
        (
            "conv_circular",
            check_binary(randn(13, &[5, 6]), randn(14, &[5, 5]), &|a, b| {
                a.conv2d_circular(b).unwrap()
            }),
        ),
    ];
    for (name, (ea, eb)) in cases {
        assert!(ea < 1e-6 && eb < 1e-6, "{name}: {ea} {eb}");
    }
}

#[test]
fn bilinear_warp_gradients_at_non_integer_offsets() {
    let x = randn(1, &[2, 6, 6]);
    // offsets kept away from integers so no sample crosses a bilinear kink
    let flow = SeedStream::new(2)
        .normal_tensor(&[2, 6, 6])
        .map(|v| 0.3 * v.tanh() + 0.45);
    let (ex, ef) = check_binary(x, flow, &|a, f| a.bilinear_warp(f).unwrap());
    assert!(ex < 1e-6 && ef < 1e-6, "{ex} {ef}");
}

#[test]
fn backward_is_deterministic_across_tapes() {
    let x0 = randn(3, &[4, 4]);
    let k0 = randn(4, &[3, 3]);
    let run = || {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let k = tape.leaf(k0.clone());
        let loss = x.conv2d_same(k).unwrap().tanh().square().mean();
        let g = tape.backward(loss).unwrap();
        (g.wrt(x), g.wrt(k))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn chain_rule_through_affine_maps() {
    // f(u) = A u + a, g(x) = B x + b, loss = sum(w * f(g(x))); gradient = B^T A^T w
    let a = randn(1, &[3, 4]);
    let b = randn(2, &[4, 5]);
    let w = randn(3, &[1, 3]);
    let x0 = randn(4, &[1, 5]);
    let tape = Tape::new();
    let x = tape.leaf(x0);
    let gx = x
        .matmul(tape.constant(b.transpose().unwrap()))
        .unwrap()
        .add(tape.constant(randn(5, &[1, 4])))
        .unwrap();
    let fx = gx
        .matmul(tape.constant(a.transpose().unwrap()))
        .unwrap()
        .add(tape.constant(randn(6, &[1, 3])))
        .unwrap();
    let loss = fx.mul(tape.constant(w.clone())).unwrap().sum();
    let got = tape.backward(loss).unwrap().wrt(x);
    let expected = w.matmul(&a).unwrap().matmul(&b).unwrap();
    assert!(rel_err(&got, &expected) < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composite_gradients_match_finite_differences(
        seed in 0u64..10_000,
        rows in 1usize..4,
        cols in 1usize..5,
    ) {
        let x = randn(seed, &[rows, cols]);
        let w = randn(seed + 1, &[cols, 3]);
        let err = check_unary(x, &|v| {
            let wv = v.tape().constant(w.clone());
            v.matmul(wv).unwrap().silu().softmax_last().scale(2.0).exp()
        });
        prop_assert!(err < 1e-5, "{}", err);
    }

    #[test]
    fn forward_evaluation_is_bitwise_deterministic(seed in 0u64..10_000) {
        let x = randn(seed, &[5, 5]);
        let k = randn(seed + 7, &[3, 3]);
        let eval = || {
            let tape = Tape::new();
            let y = tape.constant(x.clone()).conv2d_same(tape.constant(k.clone())).unwrap();
            y.tanh().value().data().to_vec()
        };
        prop_assert_eq!(eval(), eval());
    }
}
