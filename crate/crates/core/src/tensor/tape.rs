use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{gemm, Operand, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    id: usize,
}

/// Pointwise operations accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Multiply,
    Sigmoid,
    Tanh,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Scale(usize, f64),
    Sum(usize),
    Mse(usize, usize),
    SliceCols { src: usize, start: usize },
    Propagate { blocks: Rc<[Tensor]>, src: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record-then-reverse computation tape.
///
/// A tape supports exactly one [`Tape::backward`] call; a second call is a
/// contract error. Build a fresh tape for every forward/backward pass.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Registers a leaf whose gradient is reported by `backward`.
    pub fn param(&self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, var: Var) -> Tensor {
        self.with_value(var, Tensor::clone)
    }

    pub fn with_value<R>(&self, var: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        self.check(var);
        f(&self.nodes.borrow()[var.id].value)
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.with_value(var, |t| t.shape().to_vec())
    }

    fn check(&self, var: Var) {
        assert_eq!(var.tape, self.id, "Var used with a foreign tape");
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a);
        self.check(b);
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id].value.matmul(&nodes[b.id].value)?
        };
        self.push("matmul", out, Op::MatMul(a.id, b.id), &[a.id, b.id])
    }

    /// Elementwise sum. `b` may also be a single row broadcast over every
    /// row of a rank-2 `a` (bias addition).
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a);
        self.check(b);
        let (out, op) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            if x.shape() == y.shape() {
                (x.zip_map(y, |p, q| p + q)?, Op::Add(a.id, b.id))
            } else if y.shape().len() == 2 && y.rows() == 1 && x.shape().len() == 2 && x.cols() == y.cols() {
                let c = x.cols();
                let mut out = x.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v += y.data()[i % c];
                }
                (out, Op::AddRow(a.id, b.id))
            } else {
                return Err(Error::shape(
                    "add",
                    format!("{:?} + {:?}", x.shape(), y.shape()),
                ));
            }
        };
        self.push("add", out, op, &[a.id, b.id])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |p, q| p - q)?;
        self.push("sub", out, Op::Sub(a.id, b.id), &[a.id, b.id])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |p, q| p * q)?;
        self.push("mul", out, Op::Mul(a.id, b.id), &[a.id, b.id])
    }

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check(a);
        self.check(b);
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
        if x.shape() != y.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        x.zip_map(y, f)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(sigmoid));
        self.push("sigmoid", out, Op::Sigmoid(a.id), &[a.id])
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(f64::tanh));
        self.push("tanh", out, Op::Tanh(a.id), &[a.id])
    }

    pub fn scale(&self, a: Var, k: f64) -> Result<Var> {
        let out = self.with_value(a, |t| t.map(|v| v * k));
        self.push("scale", out, Op::Scale(a.id, k), &[a.id])
    }

    pub fn elementwise(&self, op: ElementwiseOp, operands: &[Var]) -> Result<Var> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Multiply => 2,
            ElementwiseOp::Sigmoid | ElementwiseOp::Tanh => 1,
        };
        if operands.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        match op {
            ElementwiseOp::Add => self.add(operands[0], operands[1]),
            ElementwiseOp::Multiply => self.mul(operands[0], operands[1]),
            ElementwiseOp::Sigmoid => self.sigmoid(operands[0]),
            ElementwiseOp::Tanh => self.tanh(operands[0]),
        }
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let out = self.with_value(a, |t| Tensor::scalar(t.sum()));
        self.push("sum", out, Op::Sum(a.id), &[a.id])
    }

    /// Mean squared error between equally shaped tensors, as a scalar.
    pub fn mse_loss(&self, pred: Var, target: Var) -> Result<Var> {
        self.check(pred);
        self.check(target);
        let out = {
            let nodes = self.nodes.borrow();
            let (p, t) = (&nodes[pred.id].value, &nodes[target.id].value);
            if p.shape() != t.shape() {
                return Err(Error::shape(
                    "mse_loss",
                    format!("{:?} vs {:?}", p.shape(), t.shape()),
                ));
            }
            let n = p.len() as f64;
            let sq: f64 = p
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Tensor::scalar(sq / n)
        };
        self.push("mse_loss", out, Op::Mse(pred.id, target.id), &[pred.id, target.id])
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.with_value(a, |t| -> Result<Tensor> {
            let (r, c) = t.dims2()?;
            if len == 0 || start + len > c {
                return Err(Error::shape(
                    "slice_cols",
                    format!("columns {start}..{} of {c}", start + len),
                ));
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&t.row(i)[start..start + len]);
            }
            Tensor::matrix(r, len, data)
        })?;
        self.push("slice_cols", out, Op::SliceCols { src: a.id, start }, &[a.id])
    }

    /// Block-diagonal product with constant square blocks: rows
    /// `b*n..(b+1)*n` of `x` are multiplied on the left by `blocks[b]`.
    ///
    /// This is graph propagation for a batch of windows stacked row-wise;
    /// no gradient flows into the blocks.
    pub fn propagate(&self, blocks: Rc<[Tensor]>, x: Var) -> Result<Var> {
        let out = self.with_value(x, |xv| -> Result<Tensor> {
            let (rows, cols) = xv.dims2()?;
            let n = blocks.first().map(|b| b.rows()).unwrap_or(0);
            if n == 0 || blocks.iter().any(|b| b.shape() != [n, n]) || blocks.len() * n != rows {
                return Err(Error::shape(
                    "propagate",
                    format!("{} blocks against {rows} rows", blocks.len()),
                ));
            }
            let mut out = vec![0.0; rows * cols];
            for (b, block) in blocks.iter().enumerate() {
                let span = b * n * cols..(b + 1) * n * cols;
                gemm(
                    Operand::plain(block.data(), n, n),
                    Operand::plain(&xv.data()[span.clone()], n, cols),
                    &mut out[span],
                    false,
                );
            }
            Tensor::matrix(rows, cols, out)
        })?;
        self.push("propagate", out, Op::Propagate { blocks, src: x.id }, &[x.id])
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Consumes the tape: calling `backward` twice on the same tape returns
    /// [`Error::Contract`] rather than accumulating.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss);
        if self.consumed.replace(true) {
            return Err(Error::Contract("backward called twice on one tape".into()));
        }
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::new(nodes[loss.id].value.shape().to_vec(), vec![1.0])?);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let needs = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.cols();
                    if needs(*a) {
                        let ga = slot(&mut grads, *a, av.shape());
                        gemm(
                            Operand::plain(g.data(), m, n),
                            Operand::transposed(bv.data(), k, n),
                            ga.data_mut(),
                            true,
                        );
                    }
                    if needs(*b) {
                        let gb = slot(&mut grads, *b, bv.shape());
                        gemm(
                            Operand::transposed(av.data(), m, k),
                            Operand::plain(g.data(), m, n),
                            gb.data_mut(),
                            true,
                        );
                    }
                }
                Op::Add(a, b) => {
                    for i in [*a, *b] {
                        if needs(i) {
                            axpy(slot(&mut grads, i, g.shape()), 1.0, &g);
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    if needs(*a) {
                        axpy(slot(&mut grads, *a, g.shape()), 1.0, &g);
                    }
                    if needs(*b) {
                        let c = g.cols();
                        let gb = slot(&mut grads, *b, nodes[*b].value.shape());
                        for (i, v) in g.data().iter().enumerate() {
                            gb.data_mut()[i % c] += v;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        axpy(slot(&mut grads, *a, g.shape()), 1.0, &g);
                    }
                    if needs(*b) {
                        axpy(slot(&mut grads, *b, g.shape()), -1.0, &g);
                    }
                }
                Op::Mul(a, b) => {
                    for (i, other) in [(*a, *b), (*b, *a)] {
                        if needs(i) {
                            let ov = &nodes[other].value;
                            let gi = slot(&mut grads, i, g.shape());
                            for ((d, gv), o) in gi.data_mut().iter_mut().zip(g.data()).zip(ov.data()) {
                                *d += gv * o;
                            }
                        }
                    }
                }
                Op::Sigmoid(a) if needs(*a) => {
                    let y = &node.value;
                    let ga = slot(&mut grads, *a, g.shape());
                    for ((d, gv), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
                Op::Tanh(a) if needs(*a) => {
                    let y = &node.value;
                    let ga = slot(&mut grads, *a, g.shape());
                    for ((d, gv), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
                Op::Scale(a, k) if needs(*a) => {
                    axpy(slot(&mut grads, *a, g.shape()), *k, &g);
                }
                Op::Sum(a) if needs(*a) => {
                    let s = g.data()[0];
                    let ga = slot(&mut grads, *a, nodes[*a].value.shape());
                    ga.data_mut().iter_mut().for_each(|d| *d += s);
                }
                Op::Mse(p, t) => {
                    let (pv, tv) = (&nodes[*p].value, &nodes[*t].value);
                    let k = g.data()[0] * 2.0 / pv.len() as f64;
                    for (i, sign) in [(*p, 1.0), (*t, -1.0)] {
                        if needs(i) {
                            let gi = slot(&mut grads, i, pv.shape());
                            for ((d, a), b) in gi.data_mut().iter_mut().zip(pv.data()).zip(tv.data()) {
                                *d += sign * k * (a - b);
                            }
                        }
                    }
                }
                Op::SliceCols { src, start } if needs(*src) => {
                    let width = g.cols();
                    let src_shape = nodes[*src].value.shape().to_vec();
                    let src_cols = src_shape[1];
                    let gs = slot(&mut grads, *src, &src_shape);
                    for r in 0..g.rows() {
                        let dst = &mut gs.data_mut()[r * src_cols + start..r * src_cols + start + width];
                        for (d, v) in dst.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
                Op::Propagate { blocks, src } if needs(*src) => {
                    let n = blocks[0].rows();
                    let cols = g.cols();
                    let gs = slot(&mut grads, *src, g.shape());
                    for (b, block) in blocks.iter().enumerate() {
                        let span = b * n * cols..(b + 1) * n * cols;
                        gemm(
                            Operand::transposed(block.data(), n, n),
                            Operand::plain(&g.data()[span.clone()], n, cols),
                            &mut gs.data_mut()[span],
                            true,
                        );
                    }
                }
                _ => {}
            }
            grads[id] = Some(g);
        }
        // Only report gradients for nodes that track them.
        for (g, node) in grads.iter_mut().zip(nodes.iter()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], id: usize, shape: &[usize]) -> &'a mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(shape))
}

fn axpy(dst: &mut Tensor, k: f64, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += k * s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` tracks gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        assert_eq!(var.tape, self.tape, "Var used with foreign gradients");
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like it when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 3, vec![0.5; 6]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.elementwise(ElementwiseOp::Sigmoid, &[z]).unwrap();
        let t = tape.elementwise(ElementwiseOp::Tanh, &[z]).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert_eq!(tape.value(t).data(), &[0.0]);
        let a = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let c = tape.elementwise(ElementwiseOp::Add, &[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
        assert!(tape.elementwise(ElementwiseOp::Add, &[a]).is_err());
    }

    #[test]
    fn add_rejects_incompatible_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(tape.mul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn mse_value_and_gradient() {
        let tape = Tape::new();
        let p = tape.param(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let t = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let loss = tape.mse_loss(p, t).unwrap();
        assert_eq!(tape.value(loss).data(), &[12.5]);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[-3.0, -4.0]);
        assert!(g.get(t).is_none());
    }

    #[test]
    fn mse_zero_residual() {
        let tape = Tape::new();
        let p = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let loss = tape.mse_loss(p, p).unwrap();
        assert_eq!(tape.value(loss).data(), &[0.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn bias_broadcast_gradient_sums_rows() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let b = tape.param(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(f64::MAX));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn frozen_constants_get_no_gradient() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::eye(2));
        let x = tape.param(Tensor::ones(&[2, 1]));
        let y = tape.matmul(w, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }
}
