use ndarray::{Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{Tape, ValueId};

fn rand_arr(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Central finite differences of a scalar-valued function.
fn numeric_grad(f: impl Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, eps: f64) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let flat = probe.as_slice_mut().unwrap();
        let orig = flat[idx];
        flat[idx] = orig + eps;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - eps;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * eps);
    }
    grad
}

fn assert_close(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, tol: f64, what: &str) {
    let denom = numeric.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-8);
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let rel = (a - n).abs() / denom;
        assert!(rel <= tol, "{what}: analytic {a} vs numeric {n} (rel {rel})");
    }
}

/// Checks the tape gradient of `build` (a scalar graph over one input)
/// against central differences.
fn check_grad(
    shape: &[usize],
    seed: u64,
    tol: f64,
    what: &str,
    build: impl Fn(&Tape<f64>, ValueId) -> ValueId,
) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let x0 = rand_arr(shape, &mut rng);

    let tape = Tape::<f64>::new();
    let x = tape.leaf_grad(x0.clone());
    let loss = build(&tape, x);
    let grads = tape.backward(loss);
    let analytic = grads.wrt(x).expect("input gradient").clone();

    let numeric = numeric_grad(
        |probe| {
            let t = Tape::<f64>::new();
            let xi = t.leaf(probe.clone());
            let l = build(&t, xi);
            t.scalar(l)
        },
        &x0,
        1e-6,
    );
    assert_close(&analytic, &numeric, tol, what);
}

#[test]
fn fd_elementwise_chain() {
    check_grad(&[3, 4], 1, 1e-6, "relu(abs+mul)", |t, x| {
        let a = t.abs(x);
        let b = t.scale(x, 0.7);
        let c = t.mul(a, b);
        let d = t.relu(c);
        t.sum_all(d)
    });
}

#[test]
fn fd_div_sigmoid() {
    check_grad(&[2, 5], 2, 1e-6, "div+sigmoid", |t, x| {
        let s = t.sigmoid(x);
        let denom = t.add_const(t.abs(x), 1.5);
        let q = t.div(s, denom);
        t.mean_all(q)
    });
}

#[test]
fn fd_leaky_relu_sub() {
    check_grad(&[4, 4], 3, 1e-6, "leaky_relu", |t, x| {
        let a = t.leaky_relu(x, 0.2);
        let b = t.scale(x, 0.3);
        let d = t.sub(a, b);
        t.sum_all(d)
    });
}

#[test]
fn fd_softmax_select() {
    check_grad(&[2, 3, 2, 2], 4, 1e-6, "softmax_ch+select_ch", |t, x| {
        let p = t.softmax_ch(x);
        let fg = t.select_ch(p, 1);
        let sq = t.mul(fg, fg);
        t.mean_all(sq)
    });
}

#[test]
fn fd_conv2d_input_weight_bias() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let x0 = rand_arr(&[2, 3, 6, 5], &mut rng);
    let w0 = rand_arr(&[4, 3, 3, 3], &mut rng);
    let b0 = rand_arr(&[4], &mut rng);
    let proj = rand_arr(&[2, 4, 3, 3], &mut rng); // stride 2, pad 1: 6x5 -> 3x3

    let eval = |xa: &ArrayD<f64>, wa: &ArrayD<f64>, ba: &ArrayD<f64>| -> f64 {
        let t = Tape::<f64>::new();
        let x = t.leaf(xa.clone());
        let w = t.leaf(wa.clone());
        let b = t.leaf(ba.clone());
        let y = t.conv2d(x, w, b, 2, 1);
        let p = t.leaf(proj.clone());
        let l = t.sum_all(t.mul(y, p));
        t.scalar(l)
    };

    let t = Tape::<f64>::new();
    let x = t.leaf_grad(x0.clone());
    let w = t.leaf_grad(w0.clone());
    let b = t.leaf_grad(b0.clone());
    let y = t.conv2d(x, w, b, 2, 1);
    let p = t.leaf(proj.clone());
    let l = t.sum_all(t.mul(y, p));
    let grads = t.backward(l);

    let nx = numeric_grad(|v| eval(v, &w0, &b0), &x0, 1e-6);
    let nw = numeric_grad(|v| eval(&x0, v, &b0), &w0, 1e-6);
    let nb = numeric_grad(|v| eval(&x0, &w0, v), &b0, 1e-6);
    assert_close(grads.wrt(x).unwrap(), &nx, 1e-6, "conv2d dx");
    assert_close(grads.wrt(w).unwrap(), &nw, 1e-6, "conv2d dw");
    assert_close(grads.wrt(b).unwrap(), &nb, 1e-6, "conv2d db");
}

#[test]
fn fd_linear_all_inputs() {
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let x0 = rand_arr(&[3, 4], &mut rng);
    let w0 = rand_arr(&[4, 2], &mut rng);
    let b0 = rand_arr(&[2], &mut rng);

    let eval = |xa: &ArrayD<f64>, wa: &ArrayD<f64>, ba: &ArrayD<f64>| -> f64 {
        let t = Tape::<f64>::new();
        let y = t.linear(t.leaf(xa.clone()), t.leaf(wa.clone()), t.leaf(ba.clone()));
        let s = t.sigmoid(y);
        t.scalar(t.mean_all(s))
    };

    let t = Tape::<f64>::new();
    let (x, w, b) = (t.leaf_grad(x0.clone()), t.leaf_grad(w0.clone()), t.leaf_grad(b0.clone()));
    let y = t.linear(x, w, b);
    let s = t.sigmoid(y);
    let l = t.mean_all(s);
    let grads = t.backward(l);

    assert_close(grads.wrt(x).unwrap(), &numeric_grad(|v| eval(v, &w0, &b0), &x0, 1e-6), 1e-6, "linear dx");
    assert_close(grads.wrt(w).unwrap(), &numeric_grad(|v| eval(&x0, v, &b0), &w0, 1e-6), 1e-6, "linear dw");
    assert_close(grads.wrt(b).unwrap(), &numeric_grad(|v| eval(&x0, &w0, v), &b0, 1e-6), 1e-6, "linear db");
}

#[test]
fn fd_max_pool_and_min_elem() {
    check_grad(&[1, 2, 5, 5], 7, 1e-6, "max_pool_s1", |t, x| {
        let p = t.max_pool_s1(x, 3, 3);
        t.mean_all(p)
    });
    check_grad(&[1, 1, 4, 6], 8, 1e-6, "min_pool+min_elem", |t, x| {
        let a = t.min_pool_s1(x, 3, 1);
        let b = t.min_pool_s1(x, 1, 3);
        let m = t.min_elem(a, b);
        t.sum_all(m)
    });
}

#[test]
fn fd_upsample_and_gap() {
    check_grad(&[2, 3, 3, 4], 9, 1e-6, "upsample2x", |t, x| {
        let u = t.upsample2x(x);
        let s = t.mul(u, u);
        t.mean_all(s)
    });
    check_grad(&[2, 4, 4, 4], 10, 1e-6, "global_avg_pool", |t, x| {
        let g = t.global_avg_pool(x);
        let s = t.mul(g, g);
        t.sum_all(s)
    });
}

#[test]
fn fd_bce_with_logits() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let target = ArrayD::from_shape_fn(IxDyn(&[6]), |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
    let tgt = target.clone();
    check_grad(&[6], 12, 1e-6, "bce_with_logits", move |t, x| {
        let scaled = t.scale(x, 3.0);
        t.bce_with_logits(scaled, tgt.clone())
    });
    drop(target);
}

#[test]
fn fd_soft_ce_ch() {
    let mut rng = ChaCha12Rng::seed_from_u64(13);
    // Random normalized target distribution per pixel.
    let mut target = Array4::from_shape_fn((2, 4, 3, 3), |_| rng.random::<f64>() + 0.1);
    for mut lane in target.lanes_mut(ndarray::Axis(1)) {
        let s = lane.sum();
        lane.mapv_inplace(|v| v / s);
    }
    let tgt = target.clone();
    check_grad(&[2, 4, 3, 3], 14, 1e-6, "soft_ce_ch", move |t, x| {
        let wide = t.scale(x, 2.0);
        t.soft_ce_ch(wide, tgt.clone())
    });
}

#[test]
fn grl_forward_is_identity() {
    let mut rng = ChaCha12Rng::seed_from_u64(15);
    let x0 = rand_arr(&[2, 3, 4], &mut rng);
    let t = Tape::<f64>::new();
    let x = t.leaf_grad(x0.clone());
    let y = t.grl(x, 0.7);
    assert_eq!(t.value(y), x0);
}

#[test]
fn grl_backward_negates_and_scales() {
    let mut rng = ChaCha12Rng::seed_from_u64(16);
    let x0 = rand_arr(&[3, 3], &mut rng);
    for &lambda in &[0.0, 0.5, 1.0] {
        // Base gradient without the reversal.
        let t = Tape::<f64>::new();
        let x = t.leaf_grad(x0.clone());
        let l = t.mean_all(t.mul(x, x));
        let base = t.backward(l).wrt(x).unwrap().clone();

        let t = Tape::<f64>::new();
        let x = t.leaf_grad(x0.clone());
        let r = t.grl(x, lambda);
        let l = t.mean_all(t.mul(r, r));
        let through = t.backward(l).wrt(x).unwrap().clone();

        let expected = base.mapv(|g| -lambda * g);
        for (a, b) in through.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "lambda {lambda}: {a} vs {b}");
        }
    }
}

#[test]
fn grl_scaling_example() {
    // Upstream gradient [2, -4] with lambda 0.5 lands as [-1, 2].
    let t = Tape::<f64>::new();
    let x = t.leaf_grad(ArrayD::from_shape_vec(IxDyn(&[2]), vec![2.0, -4.0]).unwrap());
    let r = t.grl(x, 0.5);
    // Loss 0.5*sum(x^2) has gradient x itself.
    let half = t.scale(t.mul(r, r), 0.5);
    let l = t.sum_all(half);
    let g = t.backward(l).wrt(x).unwrap().clone();
    assert_eq!(g.as_slice().unwrap(), &[-1.0, 2.0]);
}

#[test]
fn param_grads_accumulate_for_shared_parameters() {
    // The same named parameter used on two paths sums its gradients.
    let t = Tape::<f64>::new();
    let v = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 2.0]).unwrap();
    let p1 = t.param("w", v.clone());
    let p2 = t.param("w", v.clone());
    let s = t.add(p1, p2);
    let l = t.sum_all(s);
    let grads = t.backward(l);
    let by_name = t.param_grads(&grads);
    assert_eq!(by_name["w"].as_slice().unwrap(), &[2.0, 2.0]);
}

#[test]
fn backward_stops_at_constant_leaves() {
    let t = Tape::<f64>::new();
    let a = t.leaf(ArrayD::from_elem(IxDyn(&[3]), 1.5));
    let b = t.leaf_grad(ArrayD::from_elem(IxDyn(&[3]), 2.0));
    let l = t.sum_all(t.mul(a, b));
    let grads = t.backward(l);
    assert!(grads.wrt(a).is_none());
    assert!(grads.wrt(b).is_some());
}
