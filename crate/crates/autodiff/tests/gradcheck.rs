//! Finite-difference verification of every differentiable op, first and
//! second order. The numeric oracle re-evaluates the forward pass from
//! scratch, independent of the tape's backward rules.

use ndarray::IxDyn;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use vaemap_autodiff::check::{central_diff, max_abs_diff};
use vaemap_autodiff::{Arr, ConvGeom, Tape, Var};

fn random_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
    Arr::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-2.0..2.0))
}

/// Checks d(f)/dx against central differences at one random point.
fn check_grad(
    name: &str,
    shape: &[usize],
    build: impl Fn(&Tape, &Var) -> Var,
    seed: u64,
    tol: f64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = random_arr(shape, &mut rng);

    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let y = build(&tape, &x);
    let analytic = tape.grad(&y, &[&x])[0]
        .clone()
        .unwrap_or_else(|| panic!("{name}: output does not depend on input"))
        .value();

    let numeric = central_diff(
        |v| {
            let t = Tape::new();
            let x = t.leaf(v.clone());
            build(&t, &x).scalar()
        },
        &x0,
        1e-5,
    );

    let err = max_abs_diff(&analytic, &numeric);
    assert!(err < tol, "{name}: gradient mismatch, max abs err {err:.3e}");
}

/// Checks d2(f)/dx2 (diagonal via ones-projection of the first gradient)
/// against central differences of the *analytic* first gradient.
fn check_grad_grad(
    name: &str,
    shape: &[usize],
    build: impl Fn(&Tape, &Var) -> Var,
    seed: u64,
    tol: f64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = random_arr(shape, &mut rng);

    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let y = build(&tape, &x);
    let g1 = tape.grad(&y, &[&x])[0].clone().unwrap();
    let proj = g1.sum_all();
    let analytic = tape.grad(&proj, &[&x])[0]
        .clone()
        .unwrap_or_else(|| panic!("{name}: first gradient is constant in input"))
        .value();

    let numeric = central_diff(
        |v| {
            let t = Tape::new();
            let x = t.leaf(v.clone());
            let y = build(&t, &x);
            t.grad(&y, &[&x])[0].clone().unwrap().sum_all().scalar()
        },
        &x0,
        1e-5,
    );

    let err = max_abs_diff(&analytic, &numeric);
    assert!(err < tol, "{name}: grad-of-grad mismatch, max abs err {err:.3e}");
}

#[test]
fn elementwise_ops_first_order() {
    let shape = &[2, 3];
    check_grad("exp", shape, |_, x| x.exp().sum_all(), 1, 1e-6);
    check_grad("sqrt", shape, |_, x| x.abs().add_scalar(0.5).sqrt().sum_all(), 2, 1e-6);
    check_grad("sigmoid", shape, |_, x| x.sigmoid().sum_all(), 3, 1e-6);
    check_grad("softplus", shape, |_, x| x.softplus().sum_all(), 4, 1e-6);
    check_grad("ln", shape, |_, x| x.square().add_scalar(1.0).ln().sum_all(), 5, 1e-6);
    check_grad("neg_scale", shape, |_, x| x.neg().scale(3.5).sum_all(), 6, 1e-6);
    check_grad("div", shape, |t, x| {
        let ones = t.leaf(Arr::ones(IxDyn(shape)));
        ones.div(&x.square().add_scalar(1.0)).sum_all()
    }, 7, 1e-6);
}

#[test]
fn piecewise_ops_first_order() {
    // Random points are almost surely away from the kinks, where the
    // subgradient choice cannot disturb the comparison.
    let shape = &[3, 3];
    check_grad("relu", shape, |_, x| x.relu().square().sum_all(), 8, 1e-6);
    check_grad("abs", shape, |_, x| x.abs().sum_all(), 9, 1e-6);
    check_grad("min_elem", shape, |t, x| {
        let c = t.leaf(Arr::from_elem(IxDyn(shape), 0.3));
        x.min_elem(&c).sum_all()
    }, 10, 1e-6);
}

#[test]
fn structural_ops_first_order() {
    check_grad("reshape_transpose", &[2, 6], |_, x| {
        x.reshape(&[3, 4]).t().matmul(&x.reshape(&[3, 4])).sum_all()
    }, 11, 1e-6);
    check_grad("broadcast", &[3], |_, x| {
        x.reshape(&[1, 3]).broadcast_to(&[4, 3]).square().sum_all()
    }, 12, 1e-6);
    check_grad("sum_to", &[4, 3], |_, x| x.sum_to(&[1, 3]).square().sum_all(), 13, 1e-6);
    check_grad("matmul", &[3, 3], |t, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = t.leaf(random_arr(&[3, 2], &mut rng));
        x.matmul(&w).square().sum_all()
    }, 14, 1e-6);
}

#[test]
fn conv_patch_ops_first_order() {
    let g = ConvGeom {
        batch: 1,
        height: 5,
        width: 5,
        channels: 2,
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    check_grad("im2col", &g.image_shape(), |_, x| x.im2col(g).square().sum_all(), 15, 1e-6);
    let cols = g.cols_shape();
    check_grad("col2im", &[cols[0], cols[1]], |_, x| {
        x.col2im(g).square().sum_all()
    }, 16, 1e-6);
}

#[test]
fn composite_expression_second_order() {
    check_grad_grad("poly", &[4], |_, x| x.square().mul(x).sum_all(), 20, 1e-5);
    check_grad_grad("exp_prod", &[2, 2], |_, x| x.exp().mul(x).sum_all(), 21, 1e-5);
    check_grad_grad("sigmoid_chain", &[3], |_, x| {
        x.sigmoid().square().sum_all()
    }, 22, 1e-5);
    check_grad_grad("matmul_quad", &[3, 3], |t, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let w = t.leaf(random_arr(&[3, 3], &mut rng));
        x.matmul(&w).matmul(&x.t()).square().sum_all()
    }, 23, 1e-4);
    check_grad_grad("conv_pipeline", &[1, 4, 4, 1], |t, x| {
        let g = ConvGeom {
            batch: 1,
            height: 4,
            width: 4,
            channels: 1,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(124);
        let w = t.leaf(random_arr(&[9, 2], &mut rng));
        x.im2col(g).matmul(&w).sigmoid().square().sum_all()
    }, 24, 1e-5);
}

#[test]
fn relu_masks_stay_constant_under_second_order() {
    // d/dx of relu'(x)*c is zero away from the kink; the second-order sweep
    // must treat the mask as constant rather than fail or invent curvature.
    let tape = Tape::new();
    let x = tape.leaf(ndarray::arr1(&[1.0, -2.0, 3.0]).into_dyn());
    let y = x.relu().square().sum_all();
    let g1 = tape.grad(&y, &[&x])[0].clone().unwrap();
    let g2 = tape.grad(&g1.sum_all(), &[&x])[0].clone().unwrap();
    // y = sum(relu(x)^2), g1 = 2*relu(x)*mask, g2 = 2*mask.
    assert_eq!(g2.value(), ndarray::arr1(&[2.0, 0.0, 2.0]).into_dyn());
}

#[test]
fn gradient_lineage_supports_mixed_order_expressions() {
    // An expression mixing the forward value and its own gradient, as the
    // attention-overlap training objective does, must differentiate cleanly.
    let tape = Tape::new();
    let x = tape.leaf_scalar(0.7);
    let y = x.square().mul(&x); // x^3
    let g = tape.grad(&y, &[&x])[0].clone().unwrap(); // 3x^2
    let mixed = y.add(&g.square()); // x^3 + 9x^4
    let total = tape.grad(&mixed, &[&x])[0].clone().unwrap();
    let want = 3.0 * 0.7f64.powi(2) + 36.0 * 0.7f64.powi(3);
    assert!(
        (total.scalar() - want).abs() < 1e-12,
        "got {}, want {want}",
        total.scalar()
    );
}
