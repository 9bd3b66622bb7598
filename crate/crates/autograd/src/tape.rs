//! Reverse-mode autodiff over a recording tape.
//!
//! Gradients produced by [`Tape::grad`] are themselves recorded on the tape,
//! so they can be differentiated again. That is what a gradient penalty on a
//! critic needs: the penalty is a function of `d critic / d input`, and its
//! gradient with respect to the critic weights goes through that derivative.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::conv::{self, ConvGeom};
use crate::tensor::numel;
use crate::{Float, Tensor};

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize),
    MulConst(usize, Arc<Tensor<T>>),
    Recip(usize),
    Sqrt(usize),
    Ln(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    LeakyRelu(usize, T),
    Reshape(usize),
    Sum(usize),
    Expand(usize),
    SumPerSample(usize),
    ExpandPerSample(usize),
    SumPerChannel(usize),
    ExpandPerChannel(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Conv { x: usize, w: usize, geom: ConvGeom },
    ConvBwdData { gy: usize, w: usize, geom: ConvGeom },
    ConvBwdFilter { x: usize, gy: usize, geom: ConvGeom },
}

impl<T> Op<T> {
    fn inputs(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) => [Some(a), Some(b)],
            Neg(a) | Scale(a, _) | AddScalar(a) | MulConst(a, _) | Recip(a) | Sqrt(a) | Ln(a)
            | Tanh(a) | Sigmoid(a) | Softplus(a) | LeakyRelu(a, _) | Reshape(a) | Sum(a)
            | Expand(a) | SumPerSample(a) | ExpandPerSample(a) | SumPerChannel(a)
            | ExpandPerChannel(a) => [Some(a), None],
            MatMul { a, b, .. } => [Some(a), Some(b)],
            Conv { x, w, .. } => [Some(x), Some(w)],
            ConvBwdData { gy, w, .. } => [Some(gy), Some(w)],
            ConvBwdFilter { x, gy, .. } => [Some(x), Some(gy)],
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
}

/// Append-only record of every value computed in one forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&self, value: Arc<Tensor<T>>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Record an input. Whether its gradient is computed is decided by the
    /// `wrt` list passed to [`Tape::grad`], not here.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    pub fn var_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push_shared(value, Op::Leaf)
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned vars live on this tape and can be differentiated again.
    /// An input that `output` does not depend on gets an all-zero gradient.
    pub fn grad<'t>(&'t self, output: Var<'t, T>, wrt: &[Var<'t, T>]) -> Vec<Var<'t, T>> {
        assert!(std::ptr::eq(output.tape, self), "output belongs to another tape");
        assert_eq!(
            output.value().numel(),
            1,
            "grad() needs a scalar output, got shape {:?}",
            output.shape()
        );
        let n = output.id + 1;

        // Only nodes on a path from some `wrt` entry need a gradient.
        let mut relevant = vec![false; n];
        for v in wrt {
            if v.id < n {
                relevant[v.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..n {
                if !relevant[id] {
                    relevant[id] = nodes[id].op.inputs().iter().flatten().any(|&i| relevant[i]);
                }
            }
        }

        let mut grads: Vec<Option<Var<'t, T>>> = vec![None; n];
        let out_shape = output.shape();
        grads[output.id] = Some(self.var(Tensor::ones(out_shape)));

        for id in (0..n).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let y = Var { tape: self, id };
            for (input, contrib) in self.backward(&op, y, g, &relevant) {
                grads[input] = Some(match grads[input] {
                    Some(acc) => acc.add(contrib),
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|v| match grads.get(v.id).copied().flatten() {
                Some(g) => g,
                None => self.var(Tensor::zeros(v.shape())),
            })
            .collect()
    }

    fn backward<'t>(
        &'t self,
        op: &Op<T>,
        y: Var<'t, T>,
        g: Var<'t, T>,
        relevant: &[bool],
    ) -> Vec<(usize, Var<'t, T>)> {
        let v = |id: usize| Var { tape: self, id };
        let need = |id: usize| relevant[id];
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(*a) {
                    out.push((*a, g));
                }
                if need(*b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    out.push((*a, g));
                }
                if need(*b) {
                    out.push((*b, g.neg()));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    out.push((*a, g.mul(v(*b))));
                }
                if need(*b) {
                    out.push((*b, g.mul(v(*a))));
                }
            }
            Op::Neg(a) => out.push((*a, g.neg())),
            Op::Scale(a, c) => out.push((*a, g.scale(*c))),
            Op::AddScalar(a) => out.push((*a, g)),
            Op::MulConst(a, m) => out.push((*a, g.mul_const(m.clone()))),
            Op::Recip(a) => out.push((*a, g.mul(y.mul(y)).neg())),
            Op::Sqrt(a) => out.push((*a, g.mul(y.recip()).scale(T::of(0.5)))),
            Op::Ln(a) => out.push((*a, g.mul(v(*a).recip()))),
            Op::Tanh(a) => out.push((*a, g.mul(y.mul(y).neg().add_scalar(T::one())))),
            Op::Sigmoid(a) => out.push((*a, g.mul(y.mul(y.neg().add_scalar(T::one()))))),
            Op::Softplus(a) => out.push((*a, g.mul(v(*a).sigmoid()))),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let mask = self
                    .value_of(*a)
                    .map(|x| if x > T::zero() { T::one() } else { s });
                out.push((*a, g.mul_const(Arc::new(mask))));
            }
            Op::Reshape(a) => out.push((*a, g.reshape(v(*a).shape()))),
            Op::Sum(a) => out.push((*a, g.expand(&v(*a).shape()))),
            Op::Expand(a) => out.push((*a, g.sum().reshape(v(*a).shape()))),
            Op::SumPerSample(a) => out.push((*a, g.expand_per_sample(&v(*a).shape()))),
            Op::ExpandPerSample(a) => out.push((*a, g.sum_per_sample())),
            Op::SumPerChannel(a) => out.push((*a, g.expand_per_channel(&v(*a).shape()))),
            Op::ExpandPerChannel(a) => out.push((*a, g.sum_per_channel())),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (v(*a), v(*b));
                if need(*a) {
                    let ga = if *ta {
                        bv.matmul(g, *tb, true)
                    } else {
                        g.matmul(bv, false, !*tb)
                    };
                    out.push((*a, ga));
                }
                if need(*b) {
                    let gb = if *tb {
                        g.matmul(av, true, *ta)
                    } else {
                        av.matmul(g, !*ta, false)
                    };
                    out.push((*b, gb));
                }
            }
            Op::Conv { x, w, geom } => {
                if need(*x) {
                    out.push((*x, g.conv2d_bwd_data(v(*w), geom)));
                }
                if need(*w) {
                    out.push((*w, v(*x).conv2d_bwd_filter(g, geom)));
                }
            }
            Op::ConvBwdData { gy, w, geom } => {
                if need(*gy) {
                    out.push((*gy, g.conv2d(v(*w), geom)));
                }
                if need(*w) {
                    out.push((*w, g.conv2d_bwd_filter(v(*gy), geom)));
                }
            }
            Op::ConvBwdFilter { x, gy, geom } => {
                if need(*x) {
                    out.push((*x, v(*gy).conv2d_bwd_data(g, geom)));
                }
                if need(*gy) {
                    out.push((*gy, v(*x).conv2d(g, geom)));
                }
            }
        }
        out
    }
}

fn unary<T: Float>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Float>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn same_tape(&self, other: &Self) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn record(&self, value: Tensor<T>, op: Op<T>) -> Self {
        self.tape.push(value, op)
    }

    pub fn add(self, o: Self) -> Self {
        self.same_tape(&o);
        let v = self.value().zip_map(&o.value(), |a, b| a + b);
        self.record(v, Op::Add(self.id, o.id))
    }

    pub fn sub(self, o: Self) -> Self {
        self.same_tape(&o);
        let v = self.value().zip_map(&o.value(), |a, b| a - b);
        self.record(v, Op::Sub(self.id, o.id))
    }

    pub fn mul(self, o: Self) -> Self {
        self.same_tape(&o);
        let v = self.value().zip_map(&o.value(), |a, b| a * b);
        self.record(v, Op::Mul(self.id, o.id))
    }

    pub fn square(self) -> Self {
        self.mul(self)
    }

    pub fn neg(self) -> Self {
        let v = unary(&self.value(), |a| -a);
        self.record(v, Op::Neg(self.id))
    }

    pub fn scale(self, c: T) -> Self {
        let v = unary(&self.value(), |a| a * c);
        self.record(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Self {
        let v = unary(&self.value(), |a| a + c);
        self.record(v, Op::AddScalar(self.id))
    }

    /// Elementwise product with a constant that is not differentiated.
    pub fn mul_const(self, m: Arc<Tensor<T>>) -> Self {
        let v = self.value().zip_map(&m, |a, b| a * b);
        self.record(v, Op::MulConst(self.id, m))
    }

    pub fn recip(self) -> Self {
        let v = unary(&self.value(), |a| T::one() / a);
        self.record(v, Op::Recip(self.id))
    }

    pub fn sqrt(self) -> Self {
        let v = unary(&self.value(), |a| a.sqrt());
        self.record(v, Op::Sqrt(self.id))
    }

    pub fn ln(self) -> Self {
        let v = unary(&self.value(), |a| a.ln());
        self.record(v, Op::Ln(self.id))
    }

    pub fn tanh(self) -> Self {
        let v = unary(&self.value(), |a| a.tanh());
        self.record(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Self {
        let v = unary(&self.value(), sigmoid);
        self.record(v, Op::Sigmoid(self.id))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Self {
        let v = unary(&self.value(), softplus);
        self.record(v, Op::Softplus(self.id))
    }

    pub fn leaky_relu(self, slope: T) -> Self {
        let v = unary(&self.value(), |a| if a > T::zero() { a } else { a * slope });
        self.record(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn relu(self) -> Self {
        self.leaky_relu(T::zero())
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Self {
        let v = (*self.value()).clone().reshape(shape);
        self.record(v, Op::Reshape(self.id))
    }

    /// Sum of all elements, as a scalar (shape `[]`).
    pub fn sum(self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        self.record(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let n = self.value().numel();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn expand(self, shape: &[usize]) -> Self {
        let x = self.value();
        assert_eq!(x.numel(), 1, "expand() needs a one-element tensor");
        let v = Tensor::full(shape.to_vec(), x.item());
        self.record(v, Op::Expand(self.id))
    }

    /// `[N, ...] -> [N]`.
    pub fn sum_per_sample(self) -> Self {
        let x = self.value();
        let n = x.batch();
        let v = Tensor::from_fn(vec![n], |i| x.sample(i).iter().copied().sum());
        self.record(v, Op::SumPerSample(self.id))
    }

    /// `[N] -> shape`, where `shape[0] == N`.
    pub fn expand_per_sample(self, shape: &[usize]) -> Self {
        let x = self.value();
        assert_eq!(x.shape(), &shape[..1], "expand_per_sample shape");
        let per = numel(&shape[1..]);
        let v = Tensor::from_fn(shape.to_vec(), |i| x.data()[i / per]);
        self.record(v, Op::ExpandPerSample(self.id))
    }

    /// `[N, C, ...] -> [C]`.
    pub fn sum_per_channel(self) -> Self {
        let x = self.value();
        let shape = x.shape();
        assert!(shape.len() >= 2, "sum_per_channel needs [N, C, ...]");
        let (n, c, inner) = (shape[0], shape[1], numel(&shape[2..]));
        let mut out = vec![T::zero(); c];
        let d = x.data();
        for s in 0..n {
            for (ch, acc) in out.iter_mut().enumerate() {
                let base = (s * c + ch) * inner;
                *acc += d[base..base + inner].iter().copied().sum::<T>();
            }
        }
        self.record(Tensor::new(vec![c], out), Op::SumPerChannel(self.id))
    }

    /// `[C] -> shape`, where `shape[1] == C`.
    pub fn expand_per_channel(self, shape: &[usize]) -> Self {
        let x = self.value();
        assert!(shape.len() >= 2 && x.shape() == [shape[1]], "expand_per_channel shape");
        let (c, inner) = (shape[1], numel(&shape[2..]));
        let v = Tensor::from_fn(shape.to_vec(), |i| x.data()[(i / inner) % c]);
        self.record(v, Op::ExpandPerChannel(self.id))
    }

    /// 2-D product `op(self) * op(o)`; `ta`/`tb` transpose the operands.
    pub fn matmul(self, o: Self, ta: bool, tb: bool) -> Self {
        self.same_tape(&o);
        let (a, b) = (self.value(), o.value());
        assert!(a.shape().len() == 2 && b.shape().len() == 2, "matmul needs 2-D operands");
        let (m, k) = if ta {
            (a.shape()[1], a.shape()[0])
        } else {
            (a.shape()[0], a.shape()[1])
        };
        let (k2, n) = if tb {
            (b.shape()[1], b.shape()[0])
        } else {
            (b.shape()[0], b.shape()[1])
        };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut c = vec![T::zero(); m * n];
        T::gemm(ta, tb, m, n, k, T::one(), a.data(), b.data(), T::zero(), &mut c);
        self.record(
            Tensor::new(vec![m, n], c),
            Op::MatMul {
                a: self.id,
                b: o.id,
                ta,
                tb,
            },
        )
    }

    /// `self: [N, in_c, in_h, in_w]`, `w: [out_c, in_c, k, k]`.
    pub fn conv2d(self, w: Self, geom: &ConvGeom) -> Self {
        self.same_tape(&w);
        let (x, wv) = (self.value(), w.value());
        let n = x.batch();
        assert_eq!(x.shape(), geom.input_shape(n), "conv2d input shape");
        assert_eq!(wv.shape(), geom.weight_shape(), "conv2d weight shape");
        let y = conv::conv2d(geom, n, x.data(), wv.data());
        self.record(
            Tensor::new(geom.output_shape(n).to_vec(), y),
            Op::Conv {
                x: self.id,
                w: w.id,
                geom: *geom,
            },
        )
    }

    /// `self: [N, out_c, out_h, out_w]` back to `[N, in_c, in_h, in_w]`.
    pub fn conv2d_bwd_data(self, w: Self, geom: &ConvGeom) -> Self {
        self.same_tape(&w);
        let (gy, wv) = (self.value(), w.value());
        let n = gy.batch();
        assert_eq!(gy.shape(), geom.output_shape(n), "conv2d_bwd_data input shape");
        assert_eq!(wv.shape(), geom.weight_shape(), "conv2d_bwd_data weight shape");
        let x = conv::conv2d_bwd_data(geom, n, gy.data(), wv.data());
        self.record(
            Tensor::new(geom.input_shape(n).to_vec(), x),
            Op::ConvBwdData {
                gy: self.id,
                w: w.id,
                geom: *geom,
            },
        )
    }

    /// Weight gradient of a convolution with input `self` and output grad `gy`.
    pub fn conv2d_bwd_filter(self, gy: Self, geom: &ConvGeom) -> Self {
        self.same_tape(&gy);
        let (x, g) = (self.value(), gy.value());
        let n = x.batch();
        assert_eq!(x.shape(), geom.input_shape(n), "conv2d_bwd_filter input shape");
        assert_eq!(g.shape(), geom.output_shape(n), "conv2d_bwd_filter grad shape");
        let w = conv::conv2d_bwd_filter(geom, n, x.data(), g.data());
        self.record(
            Tensor::new(geom.weight_shape().to_vec(), w),
            Op::ConvBwdFilter {
                x: self.id,
                gy: gy.id,
                geom: *geom,
            },
        )
    }
}
