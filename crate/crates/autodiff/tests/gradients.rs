use autodiff::{
    attention, finite_diff_check, finite_diff_check_params, ParamSet, Result, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts a tensor with fixed pseudo-random weights so every input
/// coordinate receives a distinct, non-vanishing gradient.
fn probe<'t>(v: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = Tensor::uniform(v.shape(), 0.5, 1.5, &mut rng(seed ^ 0x9e37));
    v.dot(&v.tape().constant(w))
}

#[test]
fn square_has_derivative_two_x() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let g = tape.grad(x.mul(&x).unwrap(), &[x]).unwrap();
    assert_eq!(g[0].item().unwrap(), 6.0);
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let tape = Tape::new();
    let x = tape.param(Tensor::randn(vec![5], 2.0, &mut rng(3)));
    let loss = x.softmax().unwrap().sum();
    let g = tape.grad(loss, &[x]).unwrap();
    assert!(g[0].data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn squared_norm_gradient_matches_central_differences() {
    let x = Tensor::new(vec![3], vec![0.3, -1.2, 0.5]).unwrap();
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = xv.l2_norm().square();
    let g = tape.grad(loss, &[xv]).unwrap().remove(0);
    for (a, e) in g.data().iter().zip([0.6, -2.4, 1.0]) {
        assert!((a - e).abs() < 1e-12);
    }
    // Central-difference oracle, step 1e-5.
    let f = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    for i in 0..3 {
        let mut p = x.data().to_vec();
        let mut m = x.data().to_vec();
        p[i] += 1e-5;
        m[i] -= 1e-5;
        let fd = (f(&p) - f(&m)) / 2e-5;
        assert!((fd - g.data()[i]).abs() < 1e-8);
    }
}

#[test]
fn finite_diff_check_examples() {
    let err = finite_diff_check(|_, x| Ok(x.square().sum()), &Tensor::scalar(3.0), 1e-5).unwrap();
    assert!(err < 1e-6, "quadratic: {err}");

    let x = Tensor::new(vec![2], vec![0.1, 0.2]).unwrap();
    let err = finite_diff_check(|_, x| Ok(x.sum().exp()), &x, 1e-5).unwrap();
    assert!(err < 1e-5, "exp-sum: {err}");

    let mut r = rng(42);
    let w = Tensor::randn(vec![4, 3], 1.0, &mut r);
    let x = Tensor::randn(vec![2, 4], 1.0, &mut r);
    let err = finite_diff_check(
        move |tape, x| {
            let w = tape.constant(w.clone());
            let s = x.matmul(&w)?.softmax()?;
            probe(s, 42)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "softmax+matmul: {err}");
}

#[test]
fn finite_diff_check_rejects_bad_step_and_nan() {
    let x = Tensor::scalar(1.0);
    assert!(finite_diff_check(|_, x| Ok(x.square()), &x, 0.0).is_err());
    assert!(finite_diff_check(|_, x| Ok(x.square()), &x, 0.1).is_err());
    let bad = Tensor::scalar(-1.0);
    assert!(finite_diff_check(|_, x| Ok(x.ln()), &bad, 1e-5).is_err());
}

#[test]
fn attention_matches_scalar_loop() {
    let mut r = rng(7);
    let q = Tensor::randn(vec![2, 4], 1.0, &mut r);
    let k = Tensor::randn(vec![3, 4], 1.0, &mut r);
    let v = Tensor::randn(vec![3, 2], 1.0, &mut r);
    let tape = Tape::new();
    let out = attention(
        &tape.constant(q.clone()),
        &tape.constant(k.clone()),
        &tape.constant(v.clone()),
    )
    .unwrap()
    .value();

    for i in 0..2 {
        let mut logits = [0.0; 3];
        for j in 0..3 {
            let mut s = 0.0;
            for c in 0..4 {
                s += q.get(&[i, c]).unwrap() * k.get(&[j, c]).unwrap();
            }
            logits[j] = s / 2.0;
        }
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for c in 0..2 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += (logits[j] - m).exp() / z * v.get(&[j, c]).unwrap();
            }
            assert!((out.get(&[i, c]).unwrap() - acc).abs() < 1e-12);
        }
    }
}

type Primitive = for<'t> fn(&'t Tape, Var<'t>, u64) -> Result<Var<'t>>;

fn primitive_suite() -> Vec<(&'static str, Vec<usize>, Primitive)> {
    fn c<'t>(tape: &'t Tape, shape: Vec<usize>, seed: u64) -> Var<'t> {
        tape.constant(Tensor::uniform(shape, 0.5, 1.5, &mut rng(seed)))
    }
    vec![
        ("add", vec![3, 4], |t, x, s| x.add(&c(t, vec![4], s))),
        ("sub", vec![3, 4], |t, x, s| c(t, vec![3, 4], s).sub(&x)),
        ("mul", vec![3, 4], |t, x, s| x.mul(&c(t, vec![3, 4], s))),
        ("div", vec![3, 4], |t, x, s| {
            c(t, vec![4], s).div(&x.add_scalar(3.0))
        }),
        ("exp", vec![5], |_, x, _| Ok(x.exp())),
        ("log", vec![5], |_, x, _| Ok(x.add_scalar(4.0).ln())),
        ("powf", vec![5], |_, x, _| Ok(x.add_scalar(4.0).powf(1.7))),
        ("sqrt", vec![5], |_, x, _| Ok(x.add_scalar(4.0).sqrt())),
        ("silu", vec![6], |_, x, _| Ok(x.silu())),
        ("tanh", vec![6], |_, x, _| Ok(x.tanh())),
        ("sigmoid", vec![6], |_, x, _| Ok(x.sigmoid())),
        ("sum", vec![2, 3], |_, x, _| Ok(x.sum().square())),
        ("mean", vec![2, 3], |_, x, _| Ok(x.mean().square())),
        ("sum_axis", vec![2, 3, 2], |_, x, _| x.sum_axis(1)),
        ("mean_axis", vec![2, 3, 2], |_, x, _| x.mean_axis(0)),
        ("expand_axis", vec![2, 3], |_, x, _| {
            Ok(x.expand_axis(1, 4)?.square())
        }),
        ("softmax", vec![3, 5], |_, x, _| x.softmax()),
        ("matmul", vec![3, 4], |t, x, s| {
            x.matmul(&c(t, vec![4, 2], s))
        }),
        ("matmul_rhs", vec![4, 2], |t, x, s| {
            c(t, vec![3, 4], s).matmul(&x)
        }),
        ("bmm", vec![2, 3, 4], |t, x, s| {
            x.bmm(&c(t, vec![2, 4, 3], s))
        }),
        ("transpose", vec![2, 3, 4], |_, x, _| {
            Ok(x.transpose()?.square())
        }),
        ("permute", vec![2, 3, 4], |_, x, _| {
            Ok(x.permute(&[2, 0, 1])?.square())
        }),
        ("reshape", vec![2, 6], |_, x, _| {
            Ok(x.reshape(&[3, 4])?.square())
        }),
        ("concat", vec![2, 3], |t, x, s| {
            Ok(Var::concat(&[x, c(t, vec![2, 2], s), x.square()], 1)?.square())
        }),
        ("slice", vec![4, 3], |_, x, _| {
            Ok(x.slice(0, 1, 2)?.square())
        }),
        ("l2_norm", vec![4], |_, x, _| Ok(x.l2_norm())),
        ("dot", vec![4], |t, x, s| x.square().dot(&c(t, vec![4], s))),
        ("bilinear_grid", vec![3, 4, 2], |t, x, s| {
            let coords = t.constant(Tensor::uniform(vec![5, 2], 0.05, 0.95, &mut rng(s)));
            Var::bilinear(&x, &coords)
        }),
        ("bilinear_coords", vec![5, 2], |t, x, s| {
            let grid = c(t, vec![3, 4, 2], s);
            Var::bilinear(&grid, &x.sigmoid().scale(0.9).add_scalar(0.05))
        }),
        ("conv2d_input", vec![2, 5, 4, 2], |t, x, s| {
            let w = c(t, vec![3, 3, 2, 3], s);
            let b = c(t, vec![3], s + 1);
            x.conv2d(&w, &b, 2, 1)
        }),
        ("conv2d_weight", vec![3, 3, 2, 3], |t, w, s| {
            let x = c(t, vec![1, 4, 4, 2], s);
            let b = c(t, vec![3], s + 1);
            x.conv2d(&w, &b, 1, 1)
        }),
        ("upsample2x", vec![1, 2, 3, 2], |_, x, _| {
            Ok(x.upsample2x()?.square())
        }),
        ("gather_rows", vec![4, 3], |_, x, _| {
            x.gather_rows(&[2, 0, 2])
        }),
    ]
}

#[test]
fn every_primitive_passes_finite_differences_on_ten_seeds() {
    for (name, shape, f) in primitive_suite() {
        for seed in 0..10u64 {
            let x = Tensor::uniform(shape.clone(), -1.0, 1.0, &mut rng(100 + seed));
            let err = finite_diff_check(|t, x| probe(f(t, x, seed)?, seed), &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{name} seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn gradient_of_sum_of_losses_is_sum_of_gradients() {
    let x = Tensor::randn(vec![3, 4], 1.0, &mut rng(5));
    let w = Tensor::randn(vec![4, 2], 1.0, &mut rng(6));
    let grad_of = |which: u8| {
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let w = tape.constant(w.clone());
        let l1 = xv.matmul(&w).unwrap().softmax().unwrap().square().sum();
        let l2 = xv.tanh().mean();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => l1.add(&l2).unwrap(),
        };
        tape.grad(loss, &[xv]).unwrap().remove(0)
    };
    let (g1, g2, g12) = (grad_of(0), grad_of(1), grad_of(2));
    let sum = g1.zip_with(&g2, |a, b| a + b).unwrap();
    assert!(sum.max_abs_diff(&g12).unwrap() < 1e-12);
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut r = rng(9);
        let tape = Tape::new();
        let x = tape.param(Tensor::randn(vec![4, 6], 1.0, &mut r));
        let w = tape.constant(Tensor::randn(vec![6, 6], 1.0, &mut r));
        let y = x.matmul(&w).unwrap().silu().softmax().unwrap();
        let loss = y.square().sum();
        (
            y.value().data().to_vec(),
            tape.grad(loss, &[x]).unwrap().remove(0),
        )
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

#[test]
fn param_set_check_covers_all_parameters() {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::randn(vec![3, 2], 0.5, &mut rng(11)));
    params.insert("b", Tensor::randn(vec![2], 0.5, &mut rng(12)));
    let x = Tensor::randn(vec![4, 3], 1.0, &mut rng(13));
    let err = finite_diff_check_params(
        |p| {
            let x = p.tape().constant(x.clone());
            let y = x.matmul(&p.get("w")?)?.add(&p.get("b")?)?.tanh();
            probe(y, 1)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

proptest! {
    #[test]
    fn softmax_rows_are_probability_vectors(values in prop::collection::vec(-30.0f64..30.0, 12)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], values).unwrap());
        let y = x.softmax().unwrap().value();
        for row in y.data().chunks(4) {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(values in prop::collection::vec(-1.0f64..1.0, 24)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3, 4], values.clone()).unwrap());
        let y = x.permute(&[1, 2, 0]).unwrap().permute(&[2, 0, 1]).unwrap();
        let out = y.value();
        prop_assert_eq!(out.data(), &values[..]);
    }
}
