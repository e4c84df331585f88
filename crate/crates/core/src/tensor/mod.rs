//! Dense `f64` tensors with a reverse-mode tape.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation happens
//! on a [`Tape`]: leaves are registered with [`Tape::param`] (tracked) or
//! [`Tape::constant`] (untracked), operations append nodes, and
//! [`Tape::backward`] walks the nodes in reverse once.
//!
//! ```
//! use evacflow::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])?);
//! let loss = tape.sum(x)?;
//! let grads = tape.backward(loss)?;
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
//! # Ok::<(), evacflow::Error>(())
//! ```

mod checkpoint;
mod gradcheck;
mod init;
mod optim;
mod tape;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheck};
pub use init::uniform_fan_in;
pub use optim::{AdamConfig, AdamState, Parameter};
pub use tape::{ElementwiseOp, Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Every dimension is at least one and the buffer length always equals the
/// product of the shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("invalid shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-2 tensor from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row and column counts of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(
                "dims2",
                format!("expected rank 2, got {:?}", self.shape),
            )),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.cols();
        self.data[row * cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{m}x{k} times {k2}x{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            Operand::plain(&self.data, m, k),
            Operand::plain(&other.data, k, n),
            &mut out,
            false,
        );
        Tensor::matrix(m, n, out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// A rank-2 operand for [`gemm`], optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a> Operand<'a> {
    pub(crate) fn plain(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Operand {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// View a stored `rows x cols` matrix as its `cols x rows` transpose.
    pub(crate) fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Operand {
            data,
            rows: cols,
            cols: rows,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            // stored row length is self.rows (the logical row count)
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b` (or `out += a * b` when `accumulate`), row-major output.
pub(crate) fn gemm(a: Operand<'_>, b: Operand<'_>, out: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.len(), a.rows * b.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the operand buffers hold exactly rows*cols elements and the
    // strides above address them in bounds; `out` is m*n and uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let n = b.cols();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.at(i, t) * b.at(t, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn identity_and_annihilator() {
        let m = Tensor::matrix(3, 3, (0..9).map(|v| v as f64 * 0.7 - 2.0).collect()).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&m).unwrap(), m);
        let z = Tensor::zeros(&[2, 3]).matmul(&Tensor::ones(&[3, 4])).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn transposed_operands_match_naive() {
        let a = Tensor::matrix(3, 4, (0..12).map(|v| (v as f64).sin()).collect()).unwrap();
        let b = Tensor::matrix(3, 5, (0..15).map(|v| (v as f64).cos()).collect()).unwrap();
        // a^T b
        let mut out = vec![0.0; 20];
        gemm(
            Operand::transposed(a.data(), 3, 4),
            Operand::plain(b.data(), 3, 5),
            &mut out,
            false,
        );
        let expect = naive(&a.transpose().unwrap(), &b);
        for (x, y) in out.iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }
}
