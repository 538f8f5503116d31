use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{Axis, Ix2, IxDyn};

use crate::conv::{col2im, im2col, ConvGeom};
use crate::Arr;

/// Recording of a computation. Operations append nodes; `grad` replays them
/// backwards. Gradients are appended to the same tape as ordinary nodes, so
/// calling `grad` on an expression built from earlier gradients yields
/// higher-order derivatives.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

struct TapeInner {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    op: Op,
    value: Arr,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MinElem(usize, usize),
    MatMul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    Abs(usize),
    Transpose(usize),
    Reshape(usize),
    BroadcastTo(usize),
    SumTo(usize),
    Im2col(usize, ConvGeom),
    Col2im(usize, ConvGeom),
}

/// Handle to one tape node. Cloning is cheap; the array data lives on the tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(id={}, shape={:?})", self.id, self.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input with no dependencies. Leaves are both trainable
    /// parameters and constants; the distinction is only which ones the
    /// caller asks `grad` about.
    pub fn leaf(&self, value: Arr) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn leaf_scalar(&self, value: f64) -> Var {
        self.leaf(ndarray::arr0(value).into_dyn())
    }

    fn push(&self, op: Op, value: Arr) -> Var {
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, value });
        Var {
            tape: self.clone(),
            id,
        }
    }

    fn var(&self, id: usize) -> Var {
        Var {
            tape: self.clone(),
            id,
        }
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Gradients of scalar `y` with respect to each of `xs`.
    ///
    /// Returns `None` for an `x` that `y` does not depend on; callers decide
    /// whether that is an error. Gradients are recorded onto the tape, so a
    /// scalar built from a returned `Var` can be differentiated again.
    pub fn grad(&self, y: &Var, xs: &[&Var]) -> Vec<Option<Var>> {
        assert!(self.same_tape(&y.tape), "output is not on this tape");
        for x in xs {
            assert!(self.same_tape(&x.tape), "input is not on this tape");
        }
        let y_len = self.inner.nodes.borrow()[y.id].value.len();
        assert_eq!(y_len, 1, "grad target must be a scalar, got {y_len} elements");

        let mut grads: Vec<Option<Var>> = vec![None; y.id + 1];
        let seed_shape = self.inner.nodes.borrow()[y.id].value.raw_dim();
        grads[y.id] = Some(self.leaf(Arr::ones(seed_shape)));

        for id in (0..=y.id).rev() {
            let Some(gy) = grads[id].clone() else { continue };
            let op = self.inner.nodes.borrow()[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, gy.clone());
                    accumulate(&mut grads, b, gy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a, gy.clone());
                    accumulate(&mut grads, b, gy.neg());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.var(a), self.var(b));
                    accumulate(&mut grads, a, gy.mul(&vb));
                    accumulate(&mut grads, b, gy.mul(&va));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.var(a), self.var(b));
                    accumulate(&mut grads, a, gy.div(&vb));
                    accumulate(&mut grads, b, gy.mul(&va).div(&vb.mul(&vb)).neg());
                }
                Op::MinElem(a, b) => {
                    // Ties route the gradient to the first argument.
                    let (mask_a, mask_b) = {
                        let nodes = self.inner.nodes.borrow();
                        let (x, y_) = (&nodes[a].value, &nodes[b].value);
                        let mut m = x.clone();
                        m.zip_mut_with(y_, |ma, &vb| *ma = if *ma <= vb { 1.0 } else { 0.0 });
                        let inv = m.mapv(|v| 1.0 - v);
                        (m, inv)
                    };
                    accumulate(&mut grads, a, gy.mul(&self.leaf(mask_a)));
                    accumulate(&mut grads, b, gy.mul(&self.leaf(mask_b)));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.var(a), self.var(b));
                    accumulate(&mut grads, a, gy.matmul(&vb.t()));
                    accumulate(&mut grads, b, va.t().matmul(&gy));
                }
                Op::Neg(a) => accumulate(&mut grads, a, gy.neg()),
                Op::Scale(a, c) => accumulate(&mut grads, a, gy.scale(c)),
                Op::AddScalar(a) => accumulate(&mut grads, a, gy),
                Op::Exp(a) => accumulate(&mut grads, a, gy.mul(&self.var(id))),
                Op::Ln(a) => accumulate(&mut grads, a, gy.div(&self.var(a))),
                Op::Sqrt(a) => {
                    let out = self.var(id);
                    accumulate(&mut grads, a, gy.div(&out).scale(0.5));
                }
                Op::Sigmoid(a) => {
                    let out = self.var(id);
                    let one_minus = out.neg().add_scalar(1.0);
                    accumulate(&mut grads, a, gy.mul(&out).mul(&one_minus));
                }
                Op::Softplus(a) => {
                    accumulate(&mut grads, a, gy.mul(&self.var(a).sigmoid()));
                }
                Op::Relu(a) => {
                    // The mask is a constant: second derivatives through the
                    // kink are zero almost everywhere.
                    let mask = {
                        let nodes = self.inner.nodes.borrow();
                        nodes[a].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
                    };
                    accumulate(&mut grads, a, gy.mul(&self.leaf(mask)));
                }
                Op::Abs(a) => {
                    let sign = {
                        let nodes = self.inner.nodes.borrow();
                        nodes[a].value.mapv(|v| {
                            if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        })
                    };
                    accumulate(&mut grads, a, gy.mul(&self.leaf(sign)));
                }
                Op::Transpose(a) => accumulate(&mut grads, a, gy.t()),
                Op::Reshape(a) => {
                    let shape = self.shape_of(a);
                    accumulate(&mut grads, a, gy.reshape(&shape));
                }
                Op::BroadcastTo(a) => {
                    let shape = self.shape_of(a);
                    accumulate(&mut grads, a, gy.sum_to(&shape));
                }
                Op::SumTo(a) => {
                    let shape = self.shape_of(a);
                    accumulate(&mut grads, a, gy.broadcast_to(&shape));
                }
                Op::Im2col(a, g) => accumulate(&mut grads, a, gy.col2im(g)),
                Op::Col2im(a, g) => accumulate(&mut grads, a, gy.im2col(g)),
            }
        }
        xs.iter().map(|x| grads[x.id].clone()).collect()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.inner.nodes.borrow()[id].value.shape().to_vec()
    }
}

fn accumulate(grads: &mut [Option<Var>], id: usize, g: Var) {
    grads[id] = Some(match grads[id].take() {
        Some(old) => old.add(&g),
        None => g,
    });
}

impl Var {
    pub fn value(&self) -> Arr {
        self.tape.inner.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn scalar(&self) -> f64 {
        let nodes = self.tape.inner.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "scalar() on a {:?} array", v.shape());
        *v.iter().next().unwrap()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn binary(&self, rhs: &Var, op: Op, f: impl FnOnce(&Arr, &Arr) -> Arr) -> Var {
        assert!(
            self.tape.same_tape(&rhs.tape),
            "operands live on different tapes"
        );
        let value = {
            let nodes = self.tape.inner.nodes.borrow();
            f(&nodes[self.id].value, &nodes[rhs.id].value)
        };
        self.tape.push(op, value)
    }

    fn elementwise(&self, rhs: &Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        self.binary(rhs, op, |a, b| {
            assert_eq!(
                a.shape(),
                b.shape(),
                "elementwise operands must have equal shapes; broadcast explicitly"
            );
            let mut out = a.clone();
            out.zip_mut_with(b, |x, &y| *x = f(*x, y));
            out
        })
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Arr) -> Arr) -> Var {
        let value = {
            let nodes = self.tape.inner.nodes.borrow();
            f(&nodes[self.id].value)
        };
        self.tape.push(op, value)
    }

    pub fn add(&self, rhs: &Var) -> Var {
        self.elementwise(rhs, Op::Add(self.id, rhs.id), |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        self.elementwise(rhs, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        self.elementwise(rhs, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }

    pub fn div(&self, rhs: &Var) -> Var {
        self.elementwise(rhs, Op::Div(self.id, rhs.id), |a, b| a / b)
    }

    /// Elementwise minimum. Under `grad`, ties send the gradient to `self`.
    pub fn min_elem(&self, rhs: &Var) -> Var {
        self.elementwise(rhs, Op::MinElem(self.id, rhs.id), f64::min)
    }

    pub fn matmul(&self, rhs: &Var) -> Var {
        self.binary(rhs, Op::MatMul(self.id, rhs.id), |a, b| {
            let a2 = a
                .view()
                .into_dimensionality::<Ix2>()
                .expect("matmul lhs must be 2-D");
            let b2 = b
                .view()
                .into_dimensionality::<Ix2>()
                .expect("matmul rhs must be 2-D");
            assert_eq!(
                a2.ncols(),
                b2.nrows(),
                "matmul inner dimensions differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            );
            a2.dot(&b2).into_dyn()
        })
    }

    pub fn neg(&self) -> Var {
        self.unary(Op::Neg(self.id), |a| -a)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(Op::Scale(self.id, c), |a| a * c)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(Op::AddScalar(self.id), |a| a + c)
    }

    pub fn exp(&self) -> Var {
        self.unary(Op::Exp(self.id), |a| a.mapv(f64::exp))
    }

    pub fn ln(&self) -> Var {
        self.unary(Op::Ln(self.id), |a| a.mapv(f64::ln))
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Op::Sqrt(self.id), |a| a.mapv(f64::sqrt))
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(Op::Sigmoid(self.id), |a| a.mapv(stable_sigmoid))
    }

    /// `ln(1 + exp(x))`, computed without overflow for large `|x|`.
    pub fn softplus(&self) -> Var {
        self.unary(Op::Softplus(self.id), |a| {
            a.mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p())
        })
    }

    pub fn relu(&self) -> Var {
        self.unary(Op::Relu(self.id), |a| a.mapv(|x| x.max(0.0)))
    }

    pub fn abs(&self) -> Var {
        self.unary(Op::Abs(self.id), |a| a.mapv(f64::abs))
    }

    /// 2-D transpose.
    pub fn t(&self) -> Var {
        self.unary(Op::Transpose(self.id), |a| {
            assert_eq!(a.ndim(), 2, "transpose expects a 2-D array");
            a.t().to_owned().into_dyn()
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        self.unary(Op::Reshape(self.id), |a| {
            a.as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(shape))
                .unwrap_or_else(|_| {
                    panic!("cannot reshape {:?} to {:?}", a.shape(), shape)
                })
        })
    }

    /// NumPy-style broadcast (align trailing axes, repeat length-1 axes).
    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        self.unary(Op::BroadcastTo(self.id), |a| broadcast_value(a, shape))
    }

    /// Adjoint of `broadcast_to`: sums axes so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        self.unary(Op::SumTo(self.id), |a| sum_to_value(a, shape))
    }

    /// Sum of all elements, as a 0-dimensional array.
    pub fn sum_all(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean_all(&self) -> Var {
        let n = {
            let nodes = self.tape.inner.nodes.borrow();
            nodes[self.id].value.len()
        };
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn im2col(&self, geom: ConvGeom) -> Var {
        self.unary(Op::Im2col(self.id, geom), |a| {
            assert!(geom.is_valid(), "invalid conv geometry {geom:?}");
            assert_eq!(a.shape(), geom.image_shape(), "im2col input shape mismatch");
            im2col(a, &geom)
        })
    }

    pub fn col2im(&self, geom: ConvGeom) -> Var {
        self.unary(Op::Col2im(self.id, geom), |a| {
            assert!(geom.is_valid(), "invalid conv geometry {geom:?}");
            assert_eq!(a.shape(), geom.cols_shape(), "col2im input shape mismatch");
            col2im(a, &geom)
        })
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_value(a: &Arr, shape: &[usize]) -> Arr {
    a.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape))
        .to_owned()
}

fn sum_to_value(a: &Arr, shape: &[usize]) -> Arr {
    assert!(
        a.ndim() >= shape.len(),
        "sum_to target {:?} has more axes than source {:?}",
        shape,
        a.shape()
    );
    let mut out = a.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (i, &want) in shape.iter().enumerate() {
        let have = out.shape()[i];
        if have != want {
            assert_eq!(
                want,
                1,
                "sum_to {:?} incompatible with source {:?}",
                shape,
                a.shape()
            );
            out = out.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    out
}
