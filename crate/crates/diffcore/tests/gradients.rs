use graf_diffcore::{finite_diff_check, finite_diff_check_multi, OpKind, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;
const INSTANCES: usize = 50;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Values bounded away from zero so piecewise-linear kinks stay out of reach
/// of the finite-difference stencil.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = random(rng, shape, 0.05, 2.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn small_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// Contracts the output with fixed random weights so every output element
/// contributes a distinct coefficient to the scalar.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn check_op(name: &str, seed: u64, inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let report = finite_diff_check_multi(
        |tape, xs| {
            let y = op(tape, xs)?;
            weighted_sum(tape, y, seed ^ 0xabcdef)
        },
        &inputs,
        STEP,
    )
    .unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(
        report.max_rel_error < TOL,
        "{name} (seed {seed}): max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

fn for_instances(tag: u64, mut f: impl FnMut(&mut ChaCha8Rng, u64)) {
    for i in 0..INSTANCES as u64 {
        let seed = tag * 1000 + i;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f(&mut rng, seed);
    }
}

#[test]
fn elementwise_binary_ops_match_finite_differences() {
    for (tag, kind) in [(1, OpKind::Add), (2, OpKind::Sub), (3, OpKind::Mul), (4, OpKind::Div)] {
        for_instances(tag, |rng, seed| {
            let rank = rng.random_range(1..=3);
            let shape = small_shape(rng, rank);
            let a = random(rng, &shape, -2.0, 2.0);
            // Half the instances broadcast the second operand over its leading axis.
            let b_shape = if seed % 2 == 0 {
                shape.clone()
            } else {
                shape[1..].to_vec()
            };
            let b = if kind == OpKind::Div {
                random(rng, &b_shape, 0.5, 2.0)
            } else {
                random(rng, &b_shape, -2.0, 2.0)
            };
            let kind = kind.clone();
            check_op(&format!("{kind:?}"), seed, vec![a, b], move |t, xs| {
                t.op_apply(&kind, xs)
            });
        });
    }
}

#[test]
fn smooth_unary_ops_match_finite_differences() {
    let kinds = [
        (10, OpKind::Sigmoid, -3.0, 3.0),
        (11, OpKind::Softplus, -3.0, 3.0),
        (12, OpKind::Exp, -2.0, 2.0),
        (13, OpKind::Log, 0.3, 3.0),
        (14, OpKind::Sin, -3.0, 3.0),
        (15, OpKind::Cos, -3.0, 3.0),
        (16, OpKind::Square, -2.0, 2.0),
        (17, OpKind::Sqrt, 0.3, 3.0),
    ];
    for (tag, kind, lo, hi) in kinds {
        for_instances(tag, |rng, seed| {
            let rank = rng.random_range(1..=3);
            let shape = small_shape(rng, rank);
            let x = random(rng, &shape, lo, hi);
            let kind = kind.clone();
            check_op(&format!("{kind:?}"), seed, vec![x], move |t, xs| t.op_apply(&kind, xs));
        });
    }
}

#[test]
fn piecewise_linear_ops_match_finite_differences() {
    for (tag, kind) in [(20, OpKind::Relu), (21, OpKind::LeakyRelu(0.2))] {
        for_instances(tag, |rng, seed| {
            let shape = small_shape(rng, 2);
            let x = random_off_zero(rng, &shape);
            let kind = kind.clone();
            check_op(&format!("{kind:?}"), seed, vec![x], move |t, xs| t.op_apply(&kind, xs));
        });
    }
}

#[test]
fn matmul_matches_finite_differences_for_all_transposes() {
    for_instances(30, |rng, seed| {
        let (m, k, n) = (
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        );
        let (ta, tb) = (rng.random_bool(0.5), rng.random_bool(0.5));
        let a = random(rng, &if ta { [k, m] } else { [m, k] }, -1.0, 1.0);
        let b = random(rng, &if tb { [n, k] } else { [k, n] }, -1.0, 1.0);
        check_op("matmul", seed, vec![a, b], move |t, xs| {
            t.matmul_t(xs[0], xs[1], ta, tb)
        });
    });
}

#[test]
fn random_matmul_sum_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 3], -1.0, 1.0);
    let b = random(&mut rng, &[3, 3], -1.0, 1.0);
    let report = finite_diff_check_multi(
        |t, xs| {
            let y = t.matmul(xs[0], xs[1])?;
            t.sum_all(y)
        },
        &[a, b],
        STEP,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6);
}

#[test]
fn conv2d_matches_finite_differences() {
    for_instances(31, |rng, seed| {
        let (batch, cin, cout) = (
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        );
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=1);
        let hw = rng.random_range(k.max(2)..=5);
        let x = random(rng, &[batch, cin, hw, hw], -1.0, 1.0);
        let w = random(rng, &[cout, cin, k, k], -1.0, 1.0);
        let b = random(rng, &[cout], -1.0, 1.0);
        check_op("conv2d", seed, vec![x, w, b], move |t, xs| {
            t.op_apply(&OpKind::Conv2d { stride, pad }, xs)
        });
    });
}

#[test]
fn reductions_and_layout_ops_match_finite_differences() {
    for_instances(40, |rng, seed| {
        let shape = small_shape(rng, 3);
        let axis = rng.random_range(0..3);
        let x = random(rng, &shape, -1.0, 1.0);
        check_op("sum", seed, vec![x.clone()], move |t, xs| {
            t.op_apply(&OpKind::Sum(axis), xs)
        });
        check_op("mean", seed, vec![x.clone()], move |t, xs| {
            t.op_apply(&OpKind::Mean(axis), xs)
        });

        let mut other = shape.clone();
        other[axis] = rng.random_range(1..=3);
        let y = random(rng, &other, -1.0, 1.0);
        check_op("concat", seed, vec![x.clone(), y], move |t, xs| {
            t.op_apply(&OpKind::Concat(axis), xs)
        });

        let start = rng.random_range(0..shape[axis]);
        let len = rng.random_range(1..=shape[axis] - start);
        check_op("slice", seed, vec![x.clone()], move |t, xs| {
            t.op_apply(&OpKind::Slice { axis, start, len }, xs)
        });
        check_op("pad", seed, vec![x.clone()], move |t, xs| {
            t.pad(xs[0], axis, 1, shape[axis] + 2)
        });

        let n = x.numel();
        check_op("reshape", seed, vec![x.clone()], move |t, xs| {
            t.op_apply(&OpKind::Reshape(vec![n]), xs)
        });
        check_op("permute", seed, vec![x.clone()], |t, xs| t.permute(xs[0], &[2, 0, 1]));

        let (exclusive, reverse) = (rng.random_bool(0.5), rng.random_bool(0.5));
        check_op("cumsum", seed, vec![x.clone()], move |t, xs| {
            t.cumsum(xs[0], axis, exclusive, reverse)
        });

        let small = random(rng, &[1, x.shape()[2]], -1.0, 1.0);
        let target = vec![rng.random_range(1..=3), x.shape()[1], x.shape()[2]];
        let tgt = target.clone();
        check_op("broadcast", seed, vec![small], move |t, xs| {
            t.op_apply(&OpKind::Broadcast(tgt.clone()), xs)
        });
        let big = random(rng, &target, -1.0, 1.0);
        let last = target[2];
        check_op("reduce_to", seed, vec![big], move |t, xs| {
            t.reduce_to(xs[0], &[1, last])
        });
    });
}

#[test]
fn gradient_is_linear_in_the_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = random(&mut rng, &[5], -1.0, 1.0);
    let grad_of = |which: u8| -> Vec<f64> {
        let mut t = Tape::<f64>::new();
        let x = t.param("x", x0.clone());
        let s = t.sin(x);
        let f = t.sum_all(s).unwrap();
        let e = t.exp(x);
        let g = t.mean_all(e).unwrap();
        let root = match which {
            0 => f,
            1 => g,
            _ => t.add(f, g).unwrap(),
        };
        t.backward(root).unwrap()["x"].data().to_vec()
    };
    let (gf, gg, gs) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..5 {
        assert!((gf[i] + gg[i] - gs[i]).abs() < 1e-15);
    }
}

#[test]
fn replaying_a_tape_is_bit_identical() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::<f32>::new();
        let x = t.param("x", random(&mut rng, &[6, 4], -1.0, 1.0).cast());
        let w = t.param("w", random(&mut rng, &[4, 3], -1.0, 1.0).cast());
        let h = t.matmul(x, w).unwrap();
        let h = t.softplus(h);
        let root = t.mean_all(h).unwrap();
        let value = t.value(root).item().to_bits();
        let grads: Vec<u32> = t
            .backward(root)
            .unwrap()
            .values()
            .flat_map(|g| g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        (value, grads)
    };
    assert_eq!(build(), build());
}

/// ‖∂D/∂x‖² for a small nonlinear "discriminator" D(x; w); differentiated
/// with respect to w through the recorded backward pass.
fn penalty(t: &mut Tape<f64>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let h = t.conv2d(x, w1, None, 1, 1)?;
    let h = t.softplus(h);
    let h = t.reshape(h, &[1, 2 * 9])?;
    let logit = t.matmul(h, w2)?;
    let logit = t.sigmoid(logit);
    let root = t.sum_all(logit)?;
    let gx = t.grad(root, &[x])?[0];
    let sq = t.square(gx);
    t.sum_all(sq)
}

#[test]
fn gradient_of_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[1, 1, 3, 3], -1.0, 1.0);
    let w1 = random(&mut rng, &[2, 1, 3, 3], -1.0, 1.0);
    let w2 = random(&mut rng, &[18, 1], -1.0, 1.0);
    let report = finite_diff_check_multi(
        |t, ws| {
            let x = t.variable(x.clone());
            penalty(t, x, ws[0], ws[1])
        },
        &[w1, w2],
        STEP,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn exp_check_at_zero() {
    let err = finite_diff_check(
        |t, x| {
            let e = t.exp(x);
            t.sum_all(e)
        },
        &Tensor::<f64>::zeros(vec![4]),
        STEP,
    )
    .unwrap();
    assert!(err < 1e-8);
}

proptest! {
    #[test]
    fn broadcast_and_reduce_are_adjoint(
        rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[cols], -1.0, 1.0);
        let y = random(&mut rng, &[rows, cols], -1.0, 1.0);
        let mut t = Tape::<f64>::new();
        let xv = t.constant(x.clone());
        let yv = t.constant(y.clone());
        let bx = t.broadcast_to(xv, &[rows, cols]).unwrap();
        let ry = t.reduce_to(yv, &[cols]).unwrap();
        let lhs: f64 = t.value(bx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(t.value(ry).data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }
}
