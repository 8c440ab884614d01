//! Reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation pushes a node
//! holding its value and the ids of its inputs. [`Tape::backward`] walks the
//! arena in reverse and expresses each vector-Jacobian product *as new tape
//! operations*, so gradients are themselves differentiable values: calling
//! `backward` on an expression built from earlier gradients yields
//! second-order derivatives. The gradient penalty of a WGAN-GP critic relies
//! on exactly this.
//!
//! Nonlinearity masks (leaky ReLU slopes, L1 signs) enter the gradient graph
//! as constants, which is the almost-everywhere-correct convention for
//! piecewise-linear functions.

use std::cell::RefCell;

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};

use crate::kernels;

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    AddScalar(Var, f32),
    MulScalar(Var, f32),
    Recip(Var),
    Sqrt(Var),
    Abs(Var),
    Tanh(Var),
    LeakyRelu(Var, f32),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BroadcastTo(Var),
    SumTo(Var),
    SumAxes(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    PadNarrow { x: Var, axis: usize, start: usize },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, stride: usize, pad: usize, out_pad: usize },
    ConvWGrad { x: Var, gy: Var, stride: usize, pad: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::Recip(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::BroadcastTo(a)
            | Op::SumTo(a)
            | Op::SumAxes(a, _) => vec![*a],
            Op::Narrow { x, .. } | Op::PadNarrow { x, .. } => vec![*x],
            Op::Conv2d { x, w, .. } | Op::ConvT2d { x, w, .. } => vec![*x, *w],
            Op::ConvWGrad { x, gy, .. } => vec![*x, *gy],
        }
    }
}

struct Node {
    value: ArrayD<f32>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f32>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn push_op(&self, value: ArrayD<f32>, op: Op) -> Var {
        let rg = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(value, op, rg)
    }

    /// Introduces a tensor; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&self, value: ArrayD<f32>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: ArrayD<f32>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f32) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Clones the value out of the tape.
    pub fn array(&self, v: Var) -> ArrayD<f32> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&ArrayD<f32>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar_value on tensor of shape {:?}", val.shape());
        *val.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Re-enters the value as a constant, cutting the gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.array(v);
        self.constant(value)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
            va + vb
        };
        self.push_op(value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
            va - vb
        };
        self.push_op(value, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
            va * vb
        };
        self.push_op(value, Op::Mul(a, b))
    }

    pub fn neg(&self, a: Var) -> Var {
        let value = { -&self.nodes.borrow()[a.0].value };
        self.push_op(value, Op::Neg(a))
    }

    pub fn add_scalar(&self, a: Var, s: f32) -> Var {
        let value = { &self.nodes.borrow()[a.0].value + s };
        self.push_op(value, Op::AddScalar(a, s))
    }

    pub fn mul_scalar(&self, a: Var, s: f32) -> Var {
        let value = { &self.nodes.borrow()[a.0].value * s };
        self.push_op(value, Op::MulScalar(a, s))
    }

    pub fn recip(&self, a: Var) -> Var {
        let value = { self.nodes.borrow()[a.0].value.mapv(|x| 1.0 / x) };
        self.push_op(value, Op::Recip(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let value = { self.nodes.borrow()[a.0].value.mapv(f32::sqrt) };
        self.push_op(value, Op::Sqrt(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        let value = { self.nodes.borrow()[a.0].value.mapv(f32::abs) };
        self.push_op(value, Op::Abs(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = { self.nodes.borrow()[a.0].value.mapv(f32::tanh) };
        self.push_op(value, Op::Tanh(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f32) -> Var {
        let value = {
            self.nodes.borrow()[a.0]
                .value
                .mapv(|x| if x > 0.0 { x } else { slope * x })
        };
        self.push_op(value, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    // ---- linear algebra --------------------------------------------------

    /// `(n, m) x (m, k)` matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let va = nodes[a.0]
                .value
                .view()
                .into_dimensionality::<Ix2>()
                .expect("matmul: lhs must be 2-d");
            let vb = nodes[b.0]
                .value
                .view()
                .into_dimensionality::<Ix2>()
                .expect("matmul: rhs must be 2-d");
            assert_eq!(va.dim().1, vb.dim().0, "matmul: inner dims differ");
            kernels::matmul(&va, &vb).into_dyn()
        };
        self.push_op(value, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let va = nodes[a.0]
                .value
                .view()
                .into_dimensionality::<Ix2>()
                .expect("transpose: input must be 2-d");
            va.t().to_owned().into_dyn()
        };
        self.push_op(value, Op::Transpose(a))
    }

    // ---- shape -----------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            assert_eq!(
                va.len(),
                shape.iter().product::<usize>(),
                "reshape: element count mismatch {:?} -> {:?}",
                va.shape(),
                shape
            );
            va.to_shape(IxDyn(shape)).unwrap().to_owned()
        };
        self.push_op(value, Op::Reshape(a))
    }

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .value
                .broadcast(IxDyn(shape))
                .unwrap_or_else(|| {
                    panic!(
                        "broadcast_to: cannot broadcast {:?} to {:?}",
                        nodes[a.0].value.shape(),
                        shape
                    )
                })
                .to_owned()
        };
        self.push_op(value, Op::BroadcastTo(a))
    }

    /// Reduces by summation down to `shape` (the adjoint of broadcasting).
    pub fn sum_to(&self, a: Var, shape: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            sum_to_shape(&nodes[a.0].value, shape)
        };
        self.push_op(value, Op::SumTo(a))
    }

    /// Sums out `axes` (must be strictly ascending), removing them.
    pub fn sum_axes(&self, a: Var, axes: &[usize]) -> Var {
        debug_assert!(axes.windows(2).all(|w| w[0] < w[1]), "sum_axes: axes must ascend");
        let value = {
            let nodes = self.nodes.borrow();
            let mut v = nodes[a.0].value.clone();
            for &ax in axes.iter().rev() {
                v = v.sum_axis(Axis(ax));
            }
            v
        };
        self.push_op(value, Op::SumAxes(a, axes.to_vec()))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let ndim = self.shape(a).len();
        let axes: Vec<usize> = (0..ndim).collect();
        self.sum_axes(a, &axes)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.len()
        };
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n as f32)
    }

    /// Slice of length `len` along `axis` starting at `start`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .value
                .slice_axis(Axis(axis), Slice::from(start..start + len))
                .to_owned()
        };
        self.push_op(value, Op::Narrow { x: a, axis, start })
    }

    /// Embeds `a` into zeros of size `full` along `axis` at offset `start`
    /// (the adjoint of [`Tape::narrow`]).
    pub fn pad_narrow(&self, a: Var, axis: usize, start: usize, full: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            let mut shape = va.shape().to_vec();
            let len = shape[axis];
            shape[axis] = full;
            let mut out = ArrayD::<f32>::zeros(IxDyn(&shape));
            out.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(va);
            out
        };
        self.push_op(value, Op::PadNarrow { x: a, axis, start })
    }

    // ---- convolution -----------------------------------------------------

    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = nodes[x.0].value.view().into_dimensionality().expect("conv2d: x 4-d");
            let vw = nodes[w.0].value.view().into_dimensionality().expect("conv2d: w 4-d");
            kernels::conv2d(&vx, &vw, stride, pad).into_dyn()
        };
        self.push_op(value, Op::Conv2d { x, w, stride, pad })
    }

    pub fn conv_transpose2d(&self, x: Var, w: Var, stride: usize, pad: usize, out_pad: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = nodes[x.0].value.view().into_dimensionality().expect("convt: x 4-d");
            let vw = nodes[w.0].value.view().into_dimensionality().expect("convt: w 4-d");
            kernels::conv_transpose2d(&vx, &vw, stride, pad, out_pad).into_dyn()
        };
        self.push_op(value, Op::ConvT2d { x, w, stride, pad, out_pad })
    }

    pub fn conv_wgrad(&self, x: Var, gy: Var, stride: usize, pad: usize, kh: usize, kw: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = nodes[x.0].value.view().into_dimensionality().expect("wgrad: x 4-d");
            let vgy = nodes[gy.0].value.view().into_dimensionality().expect("wgrad: gy 4-d");
            kernels::conv_wgrad(&vx, &vgy, stride, pad, kh, kw).into_dyn()
        };
        self.push_op(value, Op::ConvWGrad { x, gy, stride, pad })
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse-mode gradients of scalar `root` with respect to `wrt`.
    ///
    /// Returns one `Var` per entry of `wrt` (or `None` when no gradient path
    /// exists). The gradients are ordinary tape values built from
    /// differentiable ops, so they can participate in further computation and
    /// a later `backward` call.
    pub fn backward(&self, root: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        let n = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[root.0].value.len(), 1, "backward: root must be scalar");
            nodes.len()
        };

        // Only nodes that transitively depend on a requested target need a
        // gradient; this prunes, e.g., weight gradients while differentiating
        // a critic with respect to its input alone.
        let mut depends = vec![false; root.0 + 1];
        for w in wrt {
            if w.0 <= root.0 {
                depends[w.0] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..=root.0 {
                if !depends[id] {
                    depends[id] = nodes[id].op.inputs().iter().any(|p| depends[p.0]);
                }
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; n];
        let root_shape = self.shape(root);
        grads[root.0] = Some(self.constant(ArrayD::ones(IxDyn(&root_shape))));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id] else { continue };
            if !depends[id] {
                continue;
            }
            let op = { self.nodes.borrow()[id].op.clone() };
            let this = Var(id);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(&mut grads, &depends, a, g);
                    self.accum(&mut grads, &depends, b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, &depends, a, g);
                    if self.wants(&depends, b) {
                        let gb = self.neg(g);
                        self.accum(&mut grads, &depends, b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    if self.wants(&depends, a) {
                        let ga = self.mul(g, b);
                        self.accum(&mut grads, &depends, a, ga);
                    }
                    if self.wants(&depends, b) {
                        let gb = self.mul(g, a);
                        self.accum(&mut grads, &depends, b, gb);
                    }
                }
                Op::Neg(a) => {
                    if self.wants(&depends, a) {
                        let ga = self.neg(g);
                        self.accum(&mut grads, &depends, a, ga);
                    }
                }
                Op::AddScalar(a, _) => self.accum(&mut grads, &depends, a, g),
                Op::MulScalar(a, s) => {
                    if self.wants(&depends, a) {
                        let ga = self.mul_scalar(g, s);
                        self.accum(&mut grads, &depends, a, ga);
                    }
                }
                Op::Recip(a) => {
                    if self.wants(&depends, a) {
                        let yy = self.mul(this, this);
                        let ga = self.neg(self.mul(g, yy));
                        self.accum(&mut grads, &depends, a, ga);
                    }
                }
                Op::Sqrt(a) => {
                    if self.wants(&depends, a) {
                        let inv = self.recip(this);
                        let ga = self.mul_scalar(self.mul(g, inv), 0.5);
                        self.accum(&mut grads, &depends, a, ga);
                    }
                }
                Op::Abs(a) => {
                    if self.wants(&depends, a) {
                        let sign = {
                            self.nodes.borrow()[a.0]
                                .value
                                .mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                        };
                        let sign = self.constant(sign);
                        let ga = self.mul(g, sign);
                        self.accum(&mut grads, &depends, a, ga);
                    }
                }
                Op::Tanh(a) => {
                    if self.wants(&depends, a) {
                        let yy = self.mul(this, this);
                        let one_minus = self.add_scalar(self.neg(yy), 1.0);
                        let ga = self.mul(g, one_minus);
                        self.accum(&mut grads, &depends, a, ga);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    if self.wants(&depends, a) {
                        let mask = {
                            self.nodes.borrow()[a.0]
                                .value
                                .mapv(|x| if x > 0.0 { 1.0 } else { slope })
                        };
                        let mask = self.constant(mask);
                        let ga = self.mul(g, mask);
                        self.accum(&mut grads, &depends, a, ga);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.wants(&depends, a) {
                        let bt = self.transpose(b);
                        let ga = self.matmul(g, bt);
                        self.accum(&mut grads, &depends, a, ga);
                    }
                    if self.wants(&depends, b) {
                        let at = self.transpose(a);
                        let gb = self.matmul(at, g);
                        self.accum(&mut grads, &depends, b, gb);
                    }
                }
                Op::Transpose(a) => {
                    if self.wants(&depends, a) {
                        let ga = self.transpose(g);
                        self.accum(&mut grads, &depends, a, ga);
                    }
                }
                Op::Reshape(a) => {
                    if self.wants(&depends, a) {
                        let shape = self.shape(a);
                        let ga = self.reshape(g, &shape);
                        self.accum(&mut grads, &depends, a, ga);
                    }
                }
                Op::BroadcastTo(a) => {
                    if self.wants(&depends, a) {
                        let shape = self.shape(a);
                        let ga = self.sum_to(g, &shape);
                        self.accum(&mut grads, &depends, a, ga);
                    }
                }
                Op::SumTo(a) => {
                    if self.wants(&depends, a) {
                        let shape = self.shape(a);
                        let ga = self.broadcast_to(g, &shape);
                        self.accum(&mut grads, &depends, a, ga);
                    }
                }
                Op::SumAxes(a, axes) => {
                    if self.wants(&depends, a) {
                        let full = self.shape(a);
                        let mut keep = full.clone();
                        for &ax in &axes {
                            keep[ax] = 1;
                        }
                        let gr = self.reshape(g, &keep);
                        let ga = self.broadcast_to(gr, &full);
                        self.accum(&mut grads, &depends, a, ga);
                    }
                }
                Op::Narrow { x, axis, start } => {
                    if self.wants(&depends, x) {
                        let full = self.shape(x)[axis];
                        let gx = self.pad_narrow(g, axis, start, full);
                        self.accum(&mut grads, &depends, x, gx);
                    }
                }
                Op::PadNarrow { x, axis, start } => {
                    if self.wants(&depends, x) {
                        let len = self.shape(x)[axis];
                        let gx = self.narrow(g, axis, start, len);
                        self.accum(&mut grads, &depends, x, gx);
                    }
                }
                Op::Conv2d { x, w, stride, pad } => {
                    if self.wants(&depends, x) {
                        let xs = self.shape(x);
                        let gs = self.shape(g);
                        let ws = self.shape(w);
                        let out_pad = xs[2] - kernels::convt_out_side(gs[2], ws[2], stride, pad, 0);
                        let gx = self.conv_transpose2d(g, w, stride, pad, out_pad);
                        self.accum(&mut grads, &depends, x, gx);
                    }
                    if self.wants(&depends, w) {
                        let ws = self.shape(w);
                        let gw = self.conv_wgrad(x, g, stride, pad, ws[2], ws[3]);
                        self.accum(&mut grads, &depends, w, gw);
                    }
                }
                Op::ConvT2d { x, w, stride, pad, .. } => {
                    if self.wants(&depends, x) {
                        let gx = self.conv2d(g, w, stride, pad);
                        self.accum(&mut grads, &depends, x, gx);
                    }
                    if self.wants(&depends, w) {
                        let ws = self.shape(w);
                        let gw = self.conv_wgrad(g, x, stride, pad, ws[2], ws[3]);
                        self.accum(&mut grads, &depends, w, gw);
                    }
                }
                Op::ConvWGrad { x, gy, stride, pad } => {
                    if self.wants(&depends, x) {
                        let xs = self.shape(x);
                        let gys = self.shape(gy);
                        let k = self.shape(this)[2];
                        let out_pad = xs[2] - kernels::convt_out_side(gys[2], k, stride, pad, 0);
                        let gx = self.conv_transpose2d(gy, g, stride, pad, out_pad);
                        self.accum(&mut grads, &depends, x, gx);
                    }
                    if self.wants(&depends, gy) {
                        let ggy = self.conv2d(x, g, stride, pad);
                        self.accum(&mut grads, &depends, gy, ggy);
                    }
                }
            }
        }

        wrt.iter()
            .map(|v| if v.0 < grads.len() { grads[v.0] } else { None })
            .collect()
    }

    fn wants(&self, depends: &[bool], v: Var) -> bool {
        v.0 < depends.len() && depends[v.0]
    }

    fn accum(&self, grads: &mut [Option<Var>], depends: &[bool], v: Var, contrib: Var) {
        if !self.wants(depends, v) {
            return;
        }
        grads[v.0] = Some(match grads[v.0] {
            None => contrib,
            Some(g) => self.add(g, contrib),
        });
    }
}

fn sum_to_shape(arr: &ArrayD<f32>, shape: &[usize]) -> ArrayD<f32> {
    let mut v = arr.clone();
    while v.ndim() > shape.len() {
        v = v.sum_axis(Axis(0));
    }
    assert_eq!(v.ndim(), shape.len(), "sum_to: rank mismatch");
    for ax in 0..shape.len() {
        if shape[ax] == 1 && v.shape()[ax] != 1 {
            let mut summed = v.sum_axis(Axis(ax));
            summed = summed.insert_axis(Axis(ax));
            v = summed;
        } else {
            assert_eq!(v.shape()[ax], shape[ax], "sum_to: incompatible shapes");
        }
    }
    v
}
