//! The recording tape.
//!
//! Every operation appends a node holding its output value. Nodes only ever
//! reference earlier nodes, so indices form a topological order. The backward
//! pass (see `backward.rs`) records its vector-Jacobian products as ordinary
//! nodes on the same tape, which makes gradients themselves differentiable.

use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, ConvGeom, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, T, T),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    Sqrt(Var),
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Pad {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Broadcast(Var),
    ReduceTo(Var),
    Permute(Var, Vec<usize>),
    CumSum {
        x: Var,
        axis: usize,
        exclusive: bool,
        reverse: bool,
    },
    Im2Col(Var, ConvGeom),
    Col2Im(Var, ConvGeom),
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Affine(x, ..)
            | Relu(x)
            | LeakyRelu(x, _)
            | Sigmoid(x)
            | Softplus(x)
            | Exp(x)
            | Log(x)
            | Sin(x)
            | Cos(x)
            | Square(x)
            | Sqrt(x)
            | Reshape(x)
            | Broadcast(x)
            | ReduceTo(x)
            | Permute(x, _)
            | Im2Col(x, _)
            | Col2Im(x, _) => vec![*x],
            Sum { x, .. } | Mean { x, .. } | Slice { x, .. } | Pad { x, .. } | CumSum { x, .. } => vec![*x],
            Concat { xs, .. } => xs.clone(),
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
}

/// Operation kinds accepted by [`Tape::op_apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind<T> {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Conv2d { stride: usize, pad: usize },
    Relu,
    LeakyRelu(T),
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sin,
    Cos,
    Sum(usize),
    Mean(usize),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    Reshape(Vec<usize>),
    Broadcast(Vec<usize>),
    Square,
    Sqrt,
}

pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) named: Vec<(String, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            named: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Differentiable leaf reported by name from [`Tape::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.variable(value);
        self.named.push((name.into(), v));
        v
    }

    pub fn named_vars(&self) -> &[(String, Var)] {
        &self.named
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// True when a path of recorded operations leads from `leaf` to `root`.
    pub fn depends_on(&self, root: Var, leaf: Var) -> bool {
        if leaf.0 > root.0 {
            return false;
        }
        let mut reach = vec![false; root.0 + 1];
        reach[leaf.0] = true;
        for i in leaf.0 + 1..=root.0 {
            reach[i] = self.nodes[i].op.inputs().iter().any(|v| reach[v.0]);
        }
        reach[root.0]
    }

    // ---- elementwise ------------------------------------------------------

    /// Brings both operands to a common shape with explicit broadcast nodes.
    fn align(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let target = tensor::broadcast_shape(&sa, &sb).ok_or(DiffError::ShapeMismatch {
            op,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let a = if sa == target {
            a
        } else {
            self.broadcast_to(a, &target)?
        };
        let b = if sb == target {
            b
        } else {
            self.broadcast_to(b, &target)?
        };
        Ok((a, b))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl Fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (a, b) = self.align(op, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f);
        Ok(self.push(make(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align("div", a, b)?;
        let ok = self.value(a).all_finite() && self.value(b).data().iter().all(|&y| y.is_finite() && y != T::zero());
        if !ok {
            return Err(DiffError::NonFinite { op: "div" });
        }
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(Op::Div(a, b), value))
    }

    /// `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(Op::Affine(x, scale, shift), value)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::zero())
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.affine(x, T::one(), s)
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, make: impl Fn(Var) -> Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(make(x), value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { slope * v },
            move |x| Op::LeakyRelu(x, slope),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if !self.value(x).data().iter().all(|&v| v.is_finite() && v > T::zero()) {
            return Err(DiffError::NonFinite { op: "log" });
        }
        Ok(self.unary(x, T::ln, Op::Log))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, T::sin, Op::Sin)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, T::cos, Op::Cos)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if !self.value(x).data().iter().all(|&v| v.is_finite() && v >= T::zero()) {
            return Err(DiffError::NonFinite { op: "sqrt" });
        }
        Ok(self.unary(x, T::sqrt, Op::Sqrt))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        if tensor::matmul_dims(self.shape(a), self.shape(b), ta, tb).is_none() {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let value = tensor::matmul(self.value(a), self.value(b), ta, tb);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, value))
    }

    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        if self.shape(x) != geom.input_shape() {
            return Err(DiffError::ShapeMismatch {
                op: "im2col",
                lhs: self.shape(x).to_vec(),
                rhs: geom.input_shape(),
            });
        }
        let value = tensor::im2col(self.value(x), &geom);
        Ok(self.push(Op::Im2Col(x, geom), value))
    }

    pub fn col2im(&mut self, cols: Var, geom: ConvGeom) -> Result<Var> {
        if self.shape(cols) != geom.cols_shape() {
            return Err(DiffError::ShapeMismatch {
                op: "col2im",
                lhs: self.shape(cols).to_vec(),
                rhs: geom.cols_shape(),
            });
        }
        let value = tensor::col2im(self.value(cols), &geom);
        Ok(self.push(Op::Col2Im(cols, geom), value))
    }

    /// NCHW convolution (cross-correlation) of `x` with `weight`
    /// `[out, in, kh, kw]`, lowered to im2col + matmul.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        let fits = xs.len() == 4
            && ws.len() == 4
            && xs[1] == ws[1]
            && stride > 0
            && xs[2] + 2 * pad >= ws[2]
            && xs[3] + 2 * pad >= ws[3];
        if !fits {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let geom = ConvGeom {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let cols = self.im2col(x, geom)?;
        let wm = self.reshape(weight, &[ws[0], ws[1] * ws[2] * ws[3]])?;
        let mut y = self.matmul_t(cols, wm, false, true)?;
        if let Some(b) = bias {
            y = self.add(y, b)?;
        }
        let y = self.reshape(y, &[xs[0], oh, ow, ws[0]])?;
        self.permute(y, &[0, 3, 1, 2])
    }

    // ---- reductions and layout --------------------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(DiffError::AxisOutOfRange { op, axis, rank });
        }
        Ok(())
    }

    /// Sum along `axis`; the axis is kept with extent 1.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", x, axis)?;
        let value = tensor::sum_axis(self.value(x), axis);
        Ok(self.push(Op::Sum { x }, value))
    }

    /// Mean along `axis`; the axis is kept with extent 1.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", x, axis)?;
        let len = self.shape(x)[axis];
        if len == 0 {
            return Err(DiffError::InvalidShape {
                op: "mean",
                shape: self.shape(x).to_vec(),
                reason: "empty axis".into(),
            });
        }
        let inv = T::one() / T::from_usize(len).expect("axis length");
        let value = tensor::sum_axis(self.value(x), axis).map(|v| v * inv);
        Ok(self.push(Op::Mean { x, axis }, value))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        let s = self.sum(flat, 0)?;
        self.reshape(s, &[])
    }

    /// Mean of every element, as a rank-0 tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        let s = self.mean(flat, 0)?;
        self.reshape(s, &[])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or(DiffError::Arity {
            op: "concat",
            expected: 1,
            got: 0,
        })?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        for &x in &xs[1..] {
            let s = self.shape(x);
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
        }
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&x| self.value(x)).collect();
        let value = tensor::concat_axis(&parts, axis);
        Ok(self.push(Op::Concat { xs: xs.to_vec(), axis }, value))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        if start + len > self.shape(x)[axis] {
            return Err(DiffError::InvalidShape {
                op: "slice",
                shape: self.shape(x).to_vec(),
                reason: format!("range {start}..{} exceeds axis {axis}", start + len),
            });
        }
        let value = tensor::slice_axis(self.value(x), axis, start, len);
        Ok(self.push(Op::Slice { x, axis, start }, value))
    }

    /// Zero-pads `x` along `axis` so that it occupies `start..start+len` of `full`.
    pub fn pad(&mut self, x: Var, axis: usize, start: usize, full: usize) -> Result<Var> {
        self.check_axis("pad", x, axis)?;
        if start + self.shape(x)[axis] > full {
            return Err(DiffError::InvalidShape {
                op: "pad",
                shape: self.shape(x).to_vec(),
                reason: format!("does not fit at offset {start} in extent {full}"),
            });
        }
        let value = tensor::pad_axis(self.value(x), axis, start, full);
        Ok(self.push(Op::Pad { x, axis, start }, value))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(Op::Reshape(x), value))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if !tensor::can_broadcast(self.shape(x), shape) {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = tensor::broadcast_to(self.value(x), shape);
        Ok(self.push(Op::Broadcast(x), value))
    }

    /// Sums `x` down to a shape it could have been broadcast from.
    pub fn reduce_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if !tensor::can_broadcast(shape, self.shape(x)) {
            return Err(DiffError::ShapeMismatch {
                op: "reduce_to",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = tensor::reduce_to(self.value(x), shape);
        Ok(self.push(Op::ReduceTo(x), value))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank && perm.iter().all(|&p| p < rank && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(DiffError::InvalidShape {
                op: "permute",
                shape: self.shape(x).to_vec(),
                reason: format!("{perm:?} is not a permutation of the axes"),
            });
        }
        let value = tensor::permute(self.value(x), perm);
        Ok(self.push(Op::Permute(x, perm.to_vec()), value))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn cumsum(&mut self, x: Var, axis: usize, exclusive: bool, reverse: bool) -> Result<Var> {
        self.check_axis("cumsum", x, axis)?;
        let value = tensor::cumsum_axis(self.value(x), axis, exclusive, reverse);
        Ok(self.push(
            Op::CumSum {
                x,
                axis,
                exclusive,
                reverse,
            },
            value,
        ))
    }

    /// Generic dispatch over [`OpKind`].
    pub fn op_apply(&mut self, kind: &OpKind<T>, inputs: &[Var]) -> Result<Var> {
        let want = |n: usize, op: &'static str| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(DiffError::Arity {
                    op,
                    expected: n,
                    got: inputs.len(),
                })
            }
        };
        match kind {
            OpKind::Add => want(2, "add").and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => want(2, "sub").and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => want(2, "mul").and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Div => want(2, "div").and_then(|_| self.div(inputs[0], inputs[1])),
            OpKind::MatMul => want(2, "matmul").and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Conv2d { stride, pad } => {
                if inputs.len() != 2 && inputs.len() != 3 {
                    return Err(DiffError::Arity {
                        op: "conv2d",
                        expected: 2,
                        got: inputs.len(),
                    });
                }
                self.conv2d(inputs[0], inputs[1], inputs.get(2).copied(), *stride, *pad)
            }
            OpKind::Relu => want(1, "relu").map(|_| self.relu(inputs[0])),
            OpKind::LeakyRelu(s) => want(1, "leaky_relu").map(|_| self.leaky_relu(inputs[0], *s)),
            OpKind::Sigmoid => want(1, "sigmoid").map(|_| self.sigmoid(inputs[0])),
            OpKind::Softplus => want(1, "softplus").map(|_| self.softplus(inputs[0])),
            OpKind::Exp => want(1, "exp").map(|_| self.exp(inputs[0])),
            OpKind::Log => want(1, "log").and_then(|_| self.log(inputs[0])),
            OpKind::Sin => want(1, "sin").map(|_| self.sin(inputs[0])),
            OpKind::Cos => want(1, "cos").map(|_| self.cos(inputs[0])),
            OpKind::Square => want(1, "square").map(|_| self.square(inputs[0])),
            OpKind::Sqrt => want(1, "sqrt").and_then(|_| self.sqrt(inputs[0])),
            OpKind::Sum(axis) => want(1, "sum").and_then(|_| self.sum(inputs[0], *axis)),
            OpKind::Mean(axis) => want(1, "mean").and_then(|_| self.mean(inputs[0], *axis)),
            OpKind::Concat(axis) => self.concat(inputs, *axis),
            OpKind::Slice { axis, start, len } => {
                want(1, "slice").and_then(|_| self.slice(inputs[0], *axis, *start, *len))
            }
            OpKind::Reshape(shape) => want(1, "reshape").and_then(|_| self.reshape(inputs[0], shape)),
            OpKind::Broadcast(shape) => want(1, "broadcast").and_then(|_| self.broadcast_to(inputs[0], shape)),
        }
    }
}
