//! Dense row-major tensors of 64-bit floats.
//!
//! Everything in this crate runs on `f64`: the likelihood quantities span an
//! enormous dynamic range (the blow-up experiment pushes densities past
//! `exp(90)`), so single precision is not an option.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense tensor with a row-major data layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` and `data` agree.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} expects {} entries, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major `rows x cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(vec![rows, cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// A tensor is scalar-like when it holds exactly one entry.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Entry of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Matrix product. `a` must be rank-2; `b` may be rank-2 (`[k, n]`) or rank-1
/// (`[k]`, treated as a column vector producing a rank-1 result).
///
/// Accumulation runs in the plain `i, j, k` order so that results are
/// bit-identical to the naive triple loop.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 {
        return Err(Error::shape(format!(
            "matmul expects a rank-2 left operand, got {:?}",
            a.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    match b.shape() {
        [bk] => {
            if *bk != k {
                return Err(Error::shape(format!(
                    "matmul inner dimensions disagree: {}x{} vs {}",
                    m, k, bk
                )));
            }
            let mut out = vec![0.0; m];
            for i in 0..m {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.data[i * k + kk] * b.data[kk];
                }
                out[i] = acc;
            }
            Ok(Tensor::vector(out))
        }
        [bk, n] => {
            if *bk != k {
                return Err(Error::shape(format!(
                    "matmul inner dimensions disagree: {}x{} vs {}x{}",
                    m, k, bk, n
                )));
            }
            let n = *n;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += a.data[i * k + kk] * b.data[kk * n + j];
                    }
                    out[i * n + j] = acc;
                }
            }
            Tensor::matrix(m, n, out)
        }
        other => Err(Error::shape(format!(
            "matmul right operand must be rank-1 or rank-2, got {:?}",
            other
        ))),
    }
}

/// `a^T b` for a rank-2 `a` of shape `[m, k]` and rank-1 `b` of length `m`.
pub(crate) fn matvec_transposed(a: &Tensor, b: &[f64]) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    debug_assert_eq!(b.len(), m);
    let mut out = vec![0.0; k];
    for i in 0..m {
        let bi = b[i];
        for j in 0..k {
            out[j] += a.data[i * k + j] * bi;
        }
    }
    Tensor::vector(out)
}
