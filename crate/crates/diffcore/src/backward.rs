//! Reverse-mode differentiation recorded onto the tape.

use std::collections::BTreeMap;

use crate::error::{DiffError, Result};
use crate::fault;
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    /// Gradients of the scalar `root` with respect to `wrt`, returned as new
    /// nodes on this tape. Because every vector-Jacobian product is recorded
    /// with ordinary operations, the returned nodes can themselves be
    /// differentiated. Inputs with no path to `root` receive a zero constant.
    pub fn grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let root_shape = self.shape(root).to_vec();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarRoot { shape: root_shape });
        }
        let n = root.0 + 1;

        // Only nodes downstream of some `wrt` entry need adjoints.
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] && self.nodes[i].requires_grad {
                relevant[i] = self.nodes[i].op.inputs().iter().any(|v| relevant[v.0]);
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; n];
        if relevant[root.0] {
            adjoint[root.0] = Some(self.constant(Tensor::ones(root_shape)));
        }
        for i in (0..n).rev() {
            let Some(g) = adjoint[i] else { continue };
            let op = self.nodes[i].op.clone();
            for (input, contribution) in self.vjp(Var(i), &op, g, &relevant)? {
                adjoint[input.0] = Some(match adjoint[input.0] {
                    Some(acc) => self.add(acc, contribution)?,
                    None => contribution,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|&w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let zeros = Tensor::zeros(self.shape(w).to_vec());
                    self.constant(zeros)
                }
            })
            .collect())
    }

    /// Gradient values for every named parameter on the tape.
    pub fn backward(&mut self, root: Var) -> Result<BTreeMap<String, Tensor<T>>> {
        let named = self.named.clone();
        let vars: Vec<Var> = named.iter().map(|(_, v)| *v).collect();
        let grads = self.grad(root, &vars)?;
        Ok(named
            .into_iter()
            .zip(grads)
            .map(|((name, _), g)| (name, self.value(g).clone()))
            .collect())
    }

    fn mask(&mut self, x: Var, f: impl Fn(T) -> T) -> Var {
        let m = self.value(x).map(f);
        self.constant(m)
    }

    fn vjp(&mut self, out: Var, op: &Op<T>, g: Var, relevant: &[bool]) -> Result<Vec<(Var, Var)>> {
        let want = |v: &Var| relevant[v.0];
        let mut c: Vec<(Var, Var)> = Vec::with_capacity(2);
        let two = T::one() + T::one();
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(&a) {
                    c.push((a, g));
                }
                if want(&b) {
                    c.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(&a) {
                    c.push((a, g));
                }
                if want(&b) {
                    c.push((b, self.neg(g)));
                }
            }
            Op::Mul(a, b) => {
                if want(&a) {
                    c.push((a, self.mul(g, b)?));
                }
                if want(&b) {
                    c.push((b, self.mul(g, a)?));
                }
            }
            Op::Div(a, b) => {
                if want(&a) {
                    c.push((a, self.div(g, b)?));
                }
                if want(&b) {
                    // d(a/b)/db = −(a/b)/b
                    let t = self.mul(g, out)?;
                    let t = self.div(t, b)?;
                    c.push((b, self.neg(t)));
                }
            }
            Op::Affine(x, s, _) => {
                if want(&x) {
                    c.push((x, self.scale(g, s)));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                if want(&a) {
                    let ga = if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    };
                    c.push((a, ga));
                }
                if want(&b) {
                    let gb = if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    };
                    c.push((b, gb));
                }
            }
            Op::Relu(x) => {
                if want(&x) {
                    let m = self.mask(x, |v| if v > T::zero() { T::one() } else { T::zero() });
                    c.push((x, self.mul(g, m)?));
                }
            }
            Op::LeakyRelu(x, slope) => {
                if want(&x) {
                    let m = self.mask(x, |v| if v > T::zero() { T::one() } else { slope });
                    c.push((x, self.mul(g, m)?));
                }
            }
            Op::Sigmoid(x) => {
                if want(&x) {
                    let one_minus = self.one_minus(out);
                    let local = self.mul(out, one_minus)?;
                    c.push((x, self.mul(g, local)?));
                }
            }
            Op::Softplus(x) => {
                if want(&x) {
                    let s = self.sigmoid(x);
                    c.push((x, self.mul(g, s)?));
                }
            }
            Op::Exp(x) => {
                if want(&x) {
                    c.push((x, self.mul(g, out)?));
                }
            }
            Op::Log(x) => {
                if want(&x) {
                    c.push((x, self.div(g, x)?));
                }
            }
            Op::Sin(x) => {
                if want(&x) {
                    let cos = self.cos(x);
                    c.push((x, self.mul(g, cos)?));
                }
            }
            Op::Cos(x) => {
                if want(&x) {
                    let sin = self.sin(x);
                    let neg_sin = self.neg(sin);
                    c.push((x, self.mul(g, neg_sin)?));
                }
            }
            Op::Square(x) => {
                if want(&x) {
                    let twice = self.scale(x, two);
                    c.push((x, self.mul(g, twice)?));
                }
            }
            Op::Sqrt(x) => {
                if want(&x) {
                    let twice = self.scale(out, two);
                    c.push((x, self.div(g, twice)?));
                }
            }
            Op::Sum { x, .. } => {
                if want(&x) {
                    let shape = self.shape(x).to_vec();
                    c.push((x, self.broadcast_to(g, &shape)?));
                }
            }
            Op::Mean { x, axis } => {
                if want(&x) {
                    let shape = self.shape(x).to_vec();
                    let inv = T::one() / T::from_usize(shape[axis]).expect("axis length");
                    let b = self.broadcast_to(g, &shape)?;
                    c.push((x, self.scale(b, inv)));
                }
            }
            Op::Concat { ref xs, axis } => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[axis];
                    if want(&x) {
                        c.push((x, self.slice(g, axis, offset, len)?));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start, .. } => {
                if want(&x) {
                    let full = self.shape(x)[axis];
                    c.push((x, self.pad(g, axis, start, full)?));
                }
            }
            Op::Pad { x, axis, start, .. } => {
                if want(&x) {
                    let len = self.shape(x)[axis];
                    c.push((x, self.slice(g, axis, start, len)?));
                }
            }
            Op::Reshape(x) => {
                if want(&x) {
                    let shape = self.shape(x).to_vec();
                    c.push((x, self.reshape(g, &shape)?));
                }
            }
            Op::Broadcast(x) => {
                if want(&x) {
                    let shape = self.shape(x).to_vec();
                    c.push((x, self.reduce_to(g, &shape)?));
                }
            }
            Op::ReduceTo(x) => {
                if want(&x) {
                    let shape = self.shape(x).to_vec();
                    c.push((x, self.broadcast_to(g, &shape)?));
                }
            }
            Op::Permute(x, ref perm) => {
                if want(&x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    c.push((x, self.permute(g, &inverse)?));
                }
            }
            Op::CumSum {
                x,
                axis,
                exclusive,
                reverse,
            } => {
                if want(&x) {
                    let mut gx = self.cumsum(g, axis, exclusive, !reverse)?;
                    if fault::cumsum_vjp_flipped() {
                        gx = self.neg(gx);
                    }
                    c.push((x, gx));
                }
            }
            Op::Im2Col(x, geom) => {
                if want(&x) {
                    c.push((x, self.col2im(g, geom)?));
                }
            }
            Op::Col2Im(x, geom) => {
                if want(&x) {
                    c.push((x, self.im2col(g, geom)?));
                }
            }
        }
        Ok(c)
    }
}
