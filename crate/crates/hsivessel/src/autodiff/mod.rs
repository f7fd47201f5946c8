//! A small reverse-mode autodiff tape over `ndarray`.
//!
//! Every forward op appends a node holding its value and enough context to
//! push gradients back to its parents. Values are dynamic-dimensional float
//! arrays; scalars are shape-`[1]` nodes. The tape is generic over `f32`
//! (training) and `f64` (gradient checks in tests).
//!
//! Parameters enter a graph via [`Tape::param`], which also records the
//! parameter name so [`Gradients::by_param`] can hand the optimizer one
//! accumulated gradient per name — a parameter used twice in one graph (the
//! generators in a cycle both see their weights on two paths) sums its
//! contributions.

mod kernels;

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{Array1, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

pub use kernels::{area_downsample, conv_out_len};

/// Float scalar usable on the tape.
pub trait Real: ndarray::NdFloat + num_traits::FromPrimitive {}
impl Real for f32 {}
impl Real for f64 {}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op<F: Real> {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    Scale(ValueId, F),
    AddConst(ValueId, F),
    Abs(ValueId),
    Relu(ValueId),
    LeakyRelu(ValueId, F),
    Sigmoid(ValueId),
    /// Softmax over the channel axis (axis 1) of a (B, C, H, W) tensor.
    SoftmaxCh(ValueId),
    /// Extracts channel `ch` of (B, C, H, W) as (B, 1, H, W).
    SelectCh(ValueId, usize),
    SumAll(ValueId),
    MeanAll(ValueId),
    /// Identity forward; backward multiplies the gradient by −λ.
    Grl(ValueId, F),
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    },
    Upsample2x(ValueId),
    MaxPoolS1 {
        x: ValueId,
        kh: usize,
        kw: usize,
    },
    MinElem(ValueId, ValueId),
    GlobalAvgPool(ValueId),
    Linear {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    /// Mean binary cross-entropy of logits against a constant target.
    BceWithLogits { x: ValueId, target: ArrayD<F> },
    /// Mean soft-label cross-entropy over the channel axis of (B, C, H, W)
    /// logits against a constant per-pixel target distribution.
    SoftCeCh { x: ValueId, target: Array4<F> },
}

struct Node<F: Real> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    params: RefCell<Vec<(String, ValueId)>>,
    frozen: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(Vec::new()), frozen: false }
    }

    /// An inference-only tape: parameters enter as plain constants, so no
    /// gradients are tracked and `backward` has nothing to do.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(Vec::new()), frozen: true }
    }

    fn push(&self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> ValueId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        ValueId(nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes.borrow()[id.0].needs_grad
    }

    /// Constant input; gradients do not flow into it.
    pub fn leaf(&self, value: ArrayD<F>) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input (used directly in tests; parameters should go
    /// through [`Tape::param`]).
    pub fn leaf_grad(&self, value: ArrayD<F>) -> ValueId {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a named trainable parameter as a graph input. On an
    /// inference tape the parameter is an anonymous constant instead.
    pub fn param(&self, name: &str, value: ArrayD<F>) -> ValueId {
        if self.frozen {
            return self.push(value, Op::Leaf, false);
        }
        let id = self.push(value, Op::Leaf, true);
        self.params.borrow_mut().push((name.to_string(), id));
        id
    }

    pub fn value(&self, id: ValueId) -> ArrayD<F> {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape(&self, id: ValueId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    /// Scalar value of a shape-`[1]` node.
    pub fn scalar(&self, id: ValueId) -> F {
        let nodes = self.nodes.borrow();
        let v = &nodes[id.0].value;
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().next().copied().unwrap()
    }

    fn with_value<R>(&self, id: ValueId, f: impl FnOnce(&ArrayD<F>) -> R) -> R {
        f(&self.nodes.borrow()[id.0].value)
    }

    fn assert_same_shape(&self, a: ValueId, b: ValueId, what: &str) {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[a.0].value.shape(),
            nodes[b.0].value.shape(),
            "{what}: operand shapes differ"
        );
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&self, a: ValueId, b: ValueId) -> ValueId {
        self.assert_same_shape(a, b, "add");
        let v = self.with_value(a, |av| self.with_value(b, |bv| av + bv));
        self.push(v, Op::Add(a, b), self.needs(a) || self.needs(b))
    }

    pub fn sub(&self, a: ValueId, b: ValueId) -> ValueId {
        self.assert_same_shape(a, b, "sub");
        let v = self.with_value(a, |av| self.with_value(b, |bv| av - bv));
        self.push(v, Op::Sub(a, b), self.needs(a) || self.needs(b))
    }

    pub fn mul(&self, a: ValueId, b: ValueId) -> ValueId {
        self.assert_same_shape(a, b, "mul");
        let v = self.with_value(a, |av| self.with_value(b, |bv| av * bv));
        self.push(v, Op::Mul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn div(&self, a: ValueId, b: ValueId) -> ValueId {
        self.assert_same_shape(a, b, "div");
        let v = self.with_value(a, |av| self.with_value(b, |bv| av / bv));
        self.push(v, Op::Div(a, b), self.needs(a) || self.needs(b))
    }

    pub fn scale(&self, a: ValueId, c: F) -> ValueId {
        let v = self.with_value(a, |av| av.mapv(|x| x * c));
        self.push(v, Op::Scale(a, c), self.needs(a))
    }

    pub fn add_const(&self, a: ValueId, c: F) -> ValueId {
        let v = self.with_value(a, |av| av.mapv(|x| x + c));
        self.push(v, Op::AddConst(a, c), self.needs(a))
    }

    pub fn neg(&self, a: ValueId) -> ValueId {
        self.scale(a, -F::one())
    }

    pub fn abs(&self, a: ValueId) -> ValueId {
        let v = self.with_value(a, |av| av.mapv(|x| x.abs()));
        self.push(v, Op::Abs(a), self.needs(a))
    }

    pub fn relu(&self, a: ValueId) -> ValueId {
        let v = self.with_value(a, |av| av.mapv(|x| if x > F::zero() { x } else { F::zero() }));
        self.push(v, Op::Relu(a), self.needs(a))
    }

    pub fn leaky_relu(&self, a: ValueId, alpha: F) -> ValueId {
        let v = self.with_value(a, |av| av.mapv(|x| if x > F::zero() { x } else { x * alpha }));
        self.push(v, Op::LeakyRelu(a, alpha), self.needs(a))
    }

    pub fn sigmoid(&self, a: ValueId) -> ValueId {
        let v = self.with_value(a, |av| av.mapv(sigmoid_stable));
        self.push(v, Op::Sigmoid(a), self.needs(a))
    }

    /// Elementwise minimum; ties route the gradient to the first operand.
    pub fn min_elem(&self, a: ValueId, b: ValueId) -> ValueId {
        self.assert_same_shape(a, b, "min_elem");
        let v = self.with_value(a, |av| {
            self.with_value(b, |bv| {
                let mut out = av.clone();
                out.zip_mut_with(bv, |x, &y| {
                    if y < *x {
                        *x = y;
                    }
                });
                out
            })
        });
        self.push(v, Op::MinElem(a, b), self.needs(a) || self.needs(b))
    }

    // ---- shape/reduction -------------------------------------------------

    pub fn softmax_ch(&self, a: ValueId) -> ValueId {
        let v = self.with_value(a, |av| {
            let x = av.view().into_dimensionality::<Ix4>().expect("softmax_ch needs BCHW");
            let mut out = x.to_owned();
            for mut lane in out.lanes_mut(Axis(1)) {
                let max = lane.iter().copied().fold(F::neg_infinity(), F::max);
                lane.mapv_inplace(|v| (v - max).exp());
                let sum = lane.sum();
                lane.mapv_inplace(|v| v / sum);
            }
            out.into_dyn()
        });
        self.push(v, Op::SoftmaxCh(a), self.needs(a))
    }

    pub fn select_ch(&self, a: ValueId, ch: usize) -> ValueId {
        let v = self.with_value(a, |av| {
            let x = av.view().into_dimensionality::<Ix4>().expect("select_ch needs BCHW");
            x.slice(ndarray::s![.., ch..ch + 1, .., ..]).to_owned().into_dyn()
        });
        self.push(v, Op::SelectCh(a, ch), self.needs(a))
    }

    pub fn sum_all(&self, a: ValueId) -> ValueId {
        let v = self.with_value(a, |av| ArrayD::from_elem(IxDyn(&[1]), av.sum()));
        self.push(v, Op::SumAll(a), self.needs(a))
    }

    pub fn mean_all(&self, a: ValueId) -> ValueId {
        let v = self.with_value(a, |av| {
            ArrayD::from_elem(IxDyn(&[1]), av.sum() / F::from_usize(av.len()).unwrap())
        });
        self.push(v, Op::MeanAll(a), self.needs(a))
    }

    /// Gradient reversal: identity forward, −λ·g backward.
    pub fn grl(&self, a: ValueId, lambda: F) -> ValueId {
        let v = self.value(a);
        self.push(v, Op::Grl(a, lambda), self.needs(a))
    }

    // ---- network ops -----------------------------------------------------

    /// 2-D convolution of (B, Cin, H, W) with weights (Cout, Cin, kh, kw)
    /// and bias (Cout,).
    pub fn conv2d(&self, x: ValueId, w: ValueId, b: ValueId, stride: usize, pad: usize) -> ValueId {
        let v = self.with_value(x, |xv| {
            self.with_value(w, |wv| {
                self.with_value(b, |bv| {
                    let x4 = xv.view().into_dimensionality::<Ix4>().expect("conv2d input BCHW");
                    let w4 = wv.view().into_dimensionality::<Ix4>().expect("conv2d weight OIKK");
                    let bias = bv.view().into_dimensionality::<Ix1>().expect("conv2d bias (Cout,)");
                    let (bsz, cin, h, wd) = x4.dim();
                    let (cout, cin_w, kh, kw) = w4.dim();
                    assert_eq!(cin, cin_w, "conv2d channel mismatch");
                    let oh = conv_out_len(h, kh, stride, pad);
                    let ow = conv_out_len(wd, kw, stride, pad);
                    let w_mat = w4.to_shape((cout, cin * kh * kw)).expect("weight reshape");
                    let mut out = Array4::<F>::zeros((bsz, cout, oh, ow));
                    for bi in 0..bsz {
                        let cols = kernels::im2col(&x4.index_axis(Axis(0), bi), kh, kw, stride, pad);
                        let mut prod = ndarray::Array2::<F>::zeros((cout, oh * ow));
                        ndarray::linalg::general_mat_mul(F::one(), &w_mat, &cols, F::zero(), &mut prod);
                        let mut slab = out.index_axis_mut(Axis(0), bi);
                        for co in 0..cout {
                            let bias_v = bias[co];
                            let row = prod.index_axis(Axis(0), co);
                            let mut plane = slab.index_axis_mut(Axis(0), co);
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    plane[[oy, ox]] = row[oy * ow + ox] + bias_v;
                                }
                            }
                        }
                    }
                    out.into_dyn()
                })
            })
        });
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    /// Nearest-neighbour 2× spatial upsampling of (B, C, H, W).
    pub fn upsample2x(&self, a: ValueId) -> ValueId {
        let v = self.with_value(a, |av| {
            let x = av.view().into_dimensionality::<Ix4>().expect("upsample2x needs BCHW");
            let (b, c, h, w) = x.dim();
            let mut out = Array4::<F>::zeros((b, c, 2 * h, 2 * w));
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let val = x[[bi, ci, y, xx]];
                            out[[bi, ci, 2 * y, 2 * xx]] = val;
                            out[[bi, ci, 2 * y, 2 * xx + 1]] = val;
                            out[[bi, ci, 2 * y + 1, 2 * xx]] = val;
                            out[[bi, ci, 2 * y + 1, 2 * xx + 1]] = val;
                        }
                    }
                }
            }
            out.into_dyn()
        });
        self.push(v, Op::Upsample2x(a), self.needs(a))
    }

    /// Stride-1 max pool with shape-preserving implicit −∞ padding.
    pub fn max_pool_s1(&self, a: ValueId, kh: usize, kw: usize) -> ValueId {
        let v = self.with_value(a, |av| {
            let x = av.view().into_dimensionality::<Ix4>().expect("max_pool_s1 needs BCHW");
            kernels::max_pool_s1(&x, kh, kw).into_dyn()
        });
        self.push(v, Op::MaxPoolS1 { x: a, kh, kw }, self.needs(a))
    }

    /// Stride-1 min pool, expressed through the max pool.
    pub fn min_pool_s1(&self, a: ValueId, kh: usize, kw: usize) -> ValueId {
        let neg = self.neg(a);
        let pooled = self.max_pool_s1(neg, kh, kw);
        self.neg(pooled)
    }

    pub fn global_avg_pool(&self, a: ValueId) -> ValueId {
        let v = self.with_value(a, |av| {
            let x = av.view().into_dimensionality::<Ix4>().expect("global_avg_pool needs BCHW");
            let (b, c, h, w) = x.dim();
            let norm = F::from_usize(h * w).unwrap();
            let mut out = ndarray::Array2::<F>::zeros((b, c));
            for bi in 0..b {
                for ci in 0..c {
                    out[[bi, ci]] = x.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum() / norm;
                }
            }
            out.into_dyn()
        });
        self.push(v, Op::GlobalAvgPool(a), self.needs(a))
    }

    /// Dense layer: (B, Fin) × (Fin, Fout) + (Fout,).
    pub fn linear(&self, x: ValueId, w: ValueId, b: ValueId) -> ValueId {
        let v = self.with_value(x, |xv| {
            self.with_value(w, |wv| {
                self.with_value(b, |bv| {
                    let x2 = xv.view().into_dimensionality::<Ix2>().expect("linear input (B,F)");
                    let w2 = wv.view().into_dimensionality::<Ix2>().expect("linear weight (F,O)");
                    let b1 = bv.view().into_dimensionality::<Ix1>().expect("linear bias (O,)");
                    let mut out = ndarray::Array2::<F>::zeros((x2.dim().0, w2.dim().1));
                    ndarray::linalg::general_mat_mul(F::one(), &x2, &w2, F::zero(), &mut out);
                    out += &b1;
                    out.into_dyn()
                })
            })
        });
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, Op::Linear { x, w, b }, needs)
    }

    /// Mean binary cross-entropy with logits against a constant target.
    pub fn bce_with_logits(&self, x: ValueId, target: ArrayD<F>) -> ValueId {
        let v = self.with_value(x, |xv| {
            assert_eq!(xv.shape(), target.shape(), "bce_with_logits shape mismatch");
            let n = F::from_usize(xv.len()).unwrap();
            let mut acc = F::zero();
            for (&logit, &t) in xv.iter().zip(target.iter()) {
                // max(x,0) − t·x + ln(1 + e^{−|x|})
                let pos = if logit > F::zero() { logit } else { F::zero() };
                acc = acc + pos - t * logit + (F::one() + (-logit.abs()).exp()).ln();
            }
            ArrayD::from_elem(IxDyn(&[1]), acc / n)
        });
        self.push(v, Op::BceWithLogits { x, target }, self.needs(x))
    }

    /// Mean soft-label cross-entropy over channels of (B, C, H, W) logits.
    pub fn soft_ce_ch(&self, x: ValueId, target: Array4<F>) -> ValueId {
        let v = self.with_value(x, |xv| {
            let x4 = xv.view().into_dimensionality::<Ix4>().expect("soft_ce_ch needs BCHW");
            assert_eq!(x4.dim(), target.dim(), "soft_ce_ch shape mismatch");
            let (b, _c, h, w) = x4.dim();
            let n = F::from_usize(b * h * w).unwrap();
            let mut acc = F::zero();
            for (lane, t_lane) in x4.lanes(Axis(1)).into_iter().zip(target.lanes(Axis(1))) {
                let max = lane.iter().copied().fold(F::neg_infinity(), F::max);
                let log_z = lane.iter().map(|&v| (v - max).exp()).fold(F::zero(), |a, b| a + b).ln() + max;
                for (&logit, &t) in lane.iter().zip(t_lane.iter()) {
                    acc = acc - t * (logit - log_z);
                }
            }
            ArrayD::from_elem(IxDyn(&[1]), acc / n)
        });
        self.push(v, Op::SoftCeCh { x, target }, self.needs(x))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar root. Returns one gradient slot per node.
    pub fn backward(&self, root: ValueId) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[1]), F::one()));

        for i in (0..=root.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                grads[i] = Some(grad);
                continue;
            }
            let mut send = |id: ValueId, contribution: ArrayD<F>| {
                debug_assert_eq!(
                    nodes[id.0].value.shape(),
                    contribution.shape(),
                    "gradient shape mismatch"
                );
                if !nodes[id.0].needs_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(existing) => *existing += &contribution,
                    slot @ None => *slot = Some(contribution),
                }
            };

            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(*a, grad.clone());
                    send(*b, grad.clone());
                }
                Op::Sub(a, b) => {
                    send(*a, grad.clone());
                    send(*b, grad.mapv(|g| -g));
                }
                Op::Mul(a, b) => {
                    send(*a, &grad * &nodes[b.0].value);
                    send(*b, &grad * &nodes[a.0].value);
                }
                Op::Div(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    send(*a, &grad / bv);
                    let gb = ndarray::Zip::from(&grad)
                        .and(av)
                        .and(bv)
                        .map_collect(|&g, &x, &y| -g * x / (y * y));
                    send(*b, gb);
                }
                Op::Scale(a, c) => send(*a, grad.mapv(|g| g * *c)),
                Op::AddConst(a, _) => send(*a, grad.clone()),
                Op::Abs(a) => {
                    let av = &nodes[a.0].value;
                    let mut gi = grad.clone();
                    gi.zip_mut_with(av, |g, &x| {
                        if x < F::zero() {
                            *g = -*g;
                        } else if x == F::zero() {
                            *g = F::zero();
                        }
                    });
                    send(*a, gi);
                }
                Op::Relu(a) => {
                    let av = &nodes[a.0].value;
                    let mut gi = grad.clone();
                    gi.zip_mut_with(av, |g, &x| {
                        if x <= F::zero() {
                            *g = F::zero();
                        }
                    });
                    send(*a, gi);
                }
                Op::LeakyRelu(a, alpha) => {
                    let av = &nodes[a.0].value;
                    let mut gi = grad.clone();
                    gi.zip_mut_with(av, |g, &x| {
                        if x <= F::zero() {
                            *g = *g * *alpha;
                        }
                    });
                    send(*a, gi);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let gi = &grad * &(y * &y.mapv(|v| F::one() - v));
                    send(*a, gi);
                }
                Op::SoftmaxCh(a) => {
                    let y = node.value.view().into_dimensionality::<Ix4>().unwrap();
                    let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let mut gi = Array4::<F>::zeros(y.dim());
                    for ((y_lane, g_lane), mut o_lane) in y
                        .lanes(Axis(1))
                        .into_iter()
                        .zip(g4.lanes(Axis(1)))
                        .zip(gi.lanes_mut(Axis(1)))
                    {
                        let dot = y_lane
                            .iter()
                            .zip(g_lane.iter())
                            .fold(F::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for ((o, &yv), &gv) in o_lane.iter_mut().zip(y_lane.iter()).zip(g_lane.iter()) {
                            *o = yv * (gv - dot);
                        }
                    }
                    send(*a, gi.into_dyn());
                }
                Op::SelectCh(a, ch) => {
                    let ashape = nodes[a.0].value.shape().to_vec();
                    let mut gi = Array4::<F>::zeros((ashape[0], ashape[1], ashape[2], ashape[3]));
                    let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
                    gi.slice_mut(ndarray::s![.., *ch..*ch + 1, .., ..]).assign(&g4);
                    send(*a, gi.into_dyn());
                }
                Op::SumAll(a) => {
                    let g = grad[[0]];
                    send(*a, ArrayD::from_elem(nodes[a.0].value.raw_dim(), g));
                }
                Op::MeanAll(a) => {
                    let n = F::from_usize(nodes[a.0].value.len()).unwrap();
                    let g = grad[[0]] / n;
                    send(*a, ArrayD::from_elem(nodes[a.0].value.raw_dim(), g));
                }
                Op::Grl(a, lambda) => send(*a, grad.mapv(|g| -(*lambda) * g)),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xv = nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                    let wv = nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
                    let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let (bsz, cin, h, wd) = xv.dim();
                    let (cout, _, kh, kw) = wv.dim();
                    let (_, _, oh, ow) = g4.dim();
                    let w_mat = wv.to_shape((cout, cin * kh * kw)).unwrap();

                    let mut dw = ndarray::Array2::<F>::zeros((cout, cin * kh * kw));
                    let mut dx = Array4::<F>::zeros((bsz, cin, h, wd));
                    for bi in 0..bsz {
                        let g_mat = g4
                            .index_axis(Axis(0), bi)
                            .to_shape((cout, oh * ow))
                            .unwrap()
                            .to_owned();
                        let cols = kernels::im2col(&xv.index_axis(Axis(0), bi), kh, kw, *stride, *pad);
                        if nodes[w.0].needs_grad {
                            ndarray::linalg::general_mat_mul(F::one(), &g_mat, &cols.t(), F::one(), &mut dw);
                        }
                        if nodes[x.0].needs_grad {
                            let mut dcols = ndarray::Array2::<F>::zeros(cols.raw_dim());
                            ndarray::linalg::general_mat_mul(F::one(), &w_mat.t(), &g_mat, F::zero(), &mut dcols);
                            let dxb = kernels::col2im(&dcols, cin, h, wd, kh, kw, *stride, *pad);
                            dx.index_axis_mut(Axis(0), bi).assign(&dxb);
                        }
                    }
                    if nodes[b.0].needs_grad {
                        let db: Array1<F> = kernels::sum_over_bhw(&g4);
                        send(*b, db.into_dyn());
                    }
                    if nodes[w.0].needs_grad {
                        send(*w, dw.into_shape_with_order((cout, cin, kh, kw)).unwrap().into_dyn());
                    }
                    send(*x, dx.into_dyn());
                }
                Op::Upsample2x(a) => {
                    let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let (b, c, h2, w2) = g4.dim();
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut gi = Array4::<F>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            for y in 0..h {
                                for xx in 0..w {
                                    gi[[bi, ci, y, xx]] = g4[[bi, ci, 2 * y, 2 * xx]]
                                        + g4[[bi, ci, 2 * y, 2 * xx + 1]]
                                        + g4[[bi, ci, 2 * y + 1, 2 * xx]]
                                        + g4[[bi, ci, 2 * y + 1, 2 * xx + 1]];
                                }
                            }
                        }
                    }
                    send(*a, gi.into_dyn());
                }
                Op::MaxPoolS1 { x, kh, kw } => {
                    let xv = nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                    let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let gi = kernels::max_pool_s1_backward(&xv, &g4, *kh, *kw);
                    send(*x, gi.into_dyn());
                }
                Op::MinElem(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let mut ga = grad.clone();
                    let mut gb = grad.clone();
                    // Ties go to the first operand.
                    ndarray::Zip::from(&mut ga).and(av).and(bv).for_each(|g, &x, &y| {
                        if y < x {
                            *g = F::zero();
                        }
                    });
                    ndarray::Zip::from(&mut gb).and(av).and(bv).for_each(|g, &x, &y| {
                        if x <= y {
                            *g = F::zero();
                        }
                    });
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::GlobalAvgPool(a) => {
                    let ashape = nodes[a.0].value.shape().to_vec();
                    let (b, c, h, w) = (ashape[0], ashape[1], ashape[2], ashape[3]);
                    let norm = F::from_usize(h * w).unwrap();
                    let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
                    let mut gi = Array4::<F>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            let val = g2[[bi, ci]] / norm;
                            gi.slice_mut(ndarray::s![bi, ci, .., ..]).fill(val);
                        }
                    }
                    send(*a, gi.into_dyn());
                }
                Op::Linear { x, w, b } => {
                    let xv = nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
                    let wv = nodes[w.0].value.view().into_dimensionality::<Ix2>().unwrap();
                    let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
                    if nodes[x.0].needs_grad {
                        let mut dx = ndarray::Array2::<F>::zeros(xv.raw_dim());
                        ndarray::linalg::general_mat_mul(F::one(), &g2, &wv.t(), F::zero(), &mut dx);
                        send(*x, dx.into_dyn());
                    }
                    if nodes[w.0].needs_grad {
                        let mut dw = ndarray::Array2::<F>::zeros(wv.raw_dim());
                        ndarray::linalg::general_mat_mul(F::one(), &xv.t(), &g2, F::zero(), &mut dw);
                        send(*w, dw.into_dyn());
                    }
                    if nodes[b.0].needs_grad {
                        send(*b, g2.sum_axis(Axis(0)).into_dyn());
                    }
                }
                Op::BceWithLogits { x, target } => {
                    let xv = &nodes[x.0].value;
                    let n = F::from_usize(xv.len()).unwrap();
                    let g = grad[[0]];
                    let mut gi = xv.mapv(sigmoid_stable);
                    gi.zip_mut_with(target, |s, &t| *s = (*s - t) * g / n);
                    send(*x, gi);
                }
                Op::SoftCeCh { x, target } => {
                    let xv = nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                    let (b, _c, h, w) = xv.dim();
                    let n = F::from_usize(b * h * w).unwrap();
                    let g = grad[[0]];
                    let mut gi = Array4::<F>::zeros(xv.dim());
                    for ((x_lane, t_lane), mut o_lane) in xv
                        .lanes(Axis(1))
                        .into_iter()
                        .zip(target.lanes(Axis(1)))
                        .zip(gi.lanes_mut(Axis(1)))
                    {
                        let max = x_lane.iter().copied().fold(F::neg_infinity(), F::max);
                        let z = x_lane.iter().map(|&v| (v - max).exp()).fold(F::zero(), |a, b| a + b);
                        let t_sum = t_lane.iter().fold(F::zero(), |a, &b| a + b);
                        for ((o, &logit), &t) in o_lane.iter_mut().zip(x_lane.iter()).zip(t_lane.iter()) {
                            let softmax = (logit - max).exp() / z;
                            *o = (softmax * t_sum - t) * g / n;
                        }
                    }
                    send(*x, gi.into_dyn());
                }
            }
            grads[i] = Some(grad);
        }

        Gradients { grads }
    }

    /// Accumulated gradient per registered parameter name.
    pub fn param_grads(&self, grads: &Gradients<F>) -> HashMap<String, ArrayD<F>> {
        let mut out: HashMap<String, ArrayD<F>> = HashMap::new();
        for (name, id) in self.params.borrow().iter() {
            if let Some(g) = grads.wrt(*id) {
                match out.get_mut(name) {
                    Some(acc) => *acc += g,
                    None => {
                        out.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        out
    }
}

fn sigmoid_stable<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Result of a backward pass.
pub struct Gradients<F: Real> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, id: ValueId) -> Option<&ArrayD<F>> {
        self.grads[id.0].as_ref()
    }
}

#[cfg(test)]
mod tests;
