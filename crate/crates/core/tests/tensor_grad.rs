//! Finite-difference checks for every differentiable tensor op.

use lavatar_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f32 = 1e-3;

/// Weighted f64 sum of an op's output, so the probe loss adds no f32 rounding.
fn probe_loss(y: &Tensor, w: &[f32]) -> f64 {
    y.data().iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Compares the taped gradient of `sum(w * f(inputs))` with central differences
/// for every input element. Returns the worst relative error.
fn check(inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).shape()
    };
    let weights = Tensor::rand_uniform(&out_shape, -1.0, 1.0, &mut rng);

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&tape, &vars);
    let loss = y.mul(tape.constant(weights.clone())).unwrap().sum();
    let grads = tape.backward(loss).unwrap();

    // Returns the probe loss and the perturbation actually representable in f32.
    let eval = |k: usize, i: usize, delta: f32| {
        let tape = Tape::new();
        let vars: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let mut t = t.clone();
                if j == k {
                    t.data_mut()[i] += delta;
                }
                tape.constant(t)
            })
            .collect();
        let x = inputs[k].data()[i] + delta;
        (probe_loss(&f(&tape, &vars).value(), weights.data()), x as f64)
    };

    // Elements whose gradient is tiny compared with the rest of the tensor are
    // measured against the tensor's gradient scale: f32 forward rounding puts a
    // floor of roughly ulp(y) / h under any central difference.
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let g = grads.get_or_zeros(*v);
        let rms = (g.data().iter().map(|&a| (a as f64).powi(2)).sum::<f64>() / g.numel() as f64).sqrt();
        for i in 0..inputs[k].numel() {
            let ((lp, xp), (lm, xm)) = (eval(k, i, H), eval(k, i, -H));
            let fd = (lp - lm) / (xp - xm);
            let an = g.data()[i] as f64;
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(rms).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Values bounded away from zero, so kinked ops are probed on smooth branches.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m: f32 = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

macro_rules! grad_test {
    ($name:ident, $inputs:expr, $f:expr) => {
        #[test]
        fn $name() {
            let err = check(&$inputs, $f, 11);
            assert!(err < 1e-3, "relative error {err}");
        }
    };
}

grad_test!(add_broadcast, [randn(&[3, 4], 1), randn(&[4], 2)], |_, v| v[0].add(v[1]).unwrap());
grad_test!(sub_broadcast, [randn(&[2, 1, 3], 3), randn(&[4, 1], 4)], |_, v| v[0].sub(v[1]).unwrap());
grad_test!(mul_broadcast, [randn(&[2, 3], 5), randn(&[2, 1], 6)], |_, v| v[0].mul(v[1]).unwrap());
grad_test!(scale_and_shift, [randn(&[5], 7)], |_, v| v[0].scale(-1.7).add_scalar(0.3));
grad_test!(square, [randn(&[6], 8)], |_, v| v[0].square());
grad_test!(sigmoid, [randn(&[3, 3], 9)], |_, v| v[0].sigmoid());
grad_test!(tanh, [randn(&[3, 3], 10)], |_, v| v[0].tanh());
grad_test!(relu, [away_from_zero(&[8], 11)], |_, v| v[0].relu());
grad_test!(silu, [randn(&[2, 5], 12)], |_, v| v[0].silu());
grad_test!(huber_both_branches, [away_from_zero(&[10], 13), Tensor::zeros(&[10])], |_, v| {
    v[0].scale(0.3).huber(v[1], 0.1).unwrap()
});
grad_test!(sum, [randn(&[2, 3], 14)], |_, v| v[0].sum());
grad_test!(mean, [randn(&[4, 2], 15)], |_, v| v[0].mean());
grad_test!(matmul, [randn(&[3, 4], 16), randn(&[4, 2], 17)], |_, v| v[0].matmul(v[1]).unwrap());
grad_test!(reshape, [randn(&[2, 6], 18)], |_, v| v[0].reshape(&[3, 4]).unwrap().square());
grad_test!(narrow, [randn(&[2, 5, 3], 19)], |_, v| v[0].narrow(1, 1, 3).unwrap().square());
grad_test!(concat, [randn(&[2, 2], 20), randn(&[2, 3], 21)], |_, v| {
    Var::concat(&[v[0], v[1]], 1).unwrap().square()
});
grad_test!(
    conv2d,
    [randn(&[2, 3, 5, 4], 22), randn(&[2, 3, 3, 3], 23), randn(&[2], 24)],
    |_, v| v[0].conv2d(v[1], Some(v[2])).unwrap()
);
grad_test!(conv2d_pointwise, [randn(&[1, 4, 3, 3], 25), randn(&[5, 4, 1, 1], 26)], |_, v| {
    v[0].conv2d(v[1], None).unwrap()
});
grad_test!(bilinear_sample, [randn(&[2, 4, 5], 27)], |_, v| {
    v[0].bilinear_sample(&[[0.31, 0.77], [0.05, 0.5], [0.93, 0.12], [0.5, 0.5]]).unwrap()
});
grad_test!(
    batch_norm_train,
    [randn(&[2, 3, 2, 2], 28), randn(&[3], 29), randn(&[3], 30)],
    |_, v| v[0].batch_norm_train(v[1], v[2], 1e-5).unwrap().0
);
grad_test!(
    batch_norm_frozen,
    [randn(&[1, 2, 3, 3], 31), randn(&[2], 32), randn(&[2], 33)],
    |_, v| v[0].batch_norm_frozen(v[1], v[2], &[0.1, -0.3], &[0.5, 2.0], 1e-5).unwrap()
);

#[test]
fn square_derivative_at_three() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let g = tape.backward(x.square().sum()).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn sum_sigmoid_gradient_matches_differences() {
    let x = randn(&[4, 4], 40);
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let g = tape.backward(v.sigmoid().sum()).unwrap();
    let g = g.get(v).unwrap();
    let f = |t: &Tensor| -> f64 {
        t.data()
            .iter()
            .map(|&a| 1.0 / (1.0 + (-(a as f64)).exp()))
            .sum()
    };
    for i in 0..16 {
        let mut p = x.clone();
        let mut m = x.clone();
        p.data_mut()[i] += H;
        m.data_mut()[i] -= H;
        let fd = (f(&p) - f(&m)) / (p.data()[i] as f64 - m.data()[i] as f64);
        let an = g.data()[i] as f64;
        assert!((an - fd).abs() / an.abs().max(fd.abs()) < 1e-4, "{i}: {an} vs {fd}");
    }
}

#[test]
fn huber_linear_branch_slope() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let zero = tape.constant(Tensor::scalar(0.0));
    let g = tape.backward(x.huber(zero, 1.0).unwrap().sum()).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 1.0);
}

#[test]
fn sigmoid_at_zero() {
    let tape = Tape::new();
    assert_eq!(tape.constant(Tensor::scalar(0.0)).sigmoid().item(), 0.5);
}

#[test]
fn identity_matmul() {
    let a = randn(&[3, 3], 41);
    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let tape = Tape::new();
    let y = tape.constant(eye).matmul(tape.constant(a.clone())).unwrap();
    assert_eq!(*y.value(), a);
}

#[test]
fn backward_requires_taped_scalar() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(tape.backward(c).is_err());
    let v = tape.leaf(Tensor::zeros(&[2]));
    assert!(tape.backward(v.square()).is_err());
}

#[test]
fn replay_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = Tensor::randn(&[1, 3, 8, 8], &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], &mut rng);
        let tape = Tape::new();
        let (xv, wv) = (tape.leaf(x), tape.leaf(w));
        let loss = xv.conv2d(wv, None).unwrap().silu().square().mean();
        let g = tape.backward(loss).unwrap();
        (loss.item().to_bits(), g.get(wv).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}
