//! Dense row-major tensors and their wire formats.
//!
//! A [`Tensor`] is a plain value: shape plus `f64` data, safe to clone and to
//! hand between threads. All differentiable computation happens on a
//! [`tape::Tape`], which holds tensors by value and is confined to one logical
//! thread. Double precision is the working precision everywhere; single
//! precision exists only as the opt-in [`Tensor::round_to_f32`] round-trip and
//! is never used by gradient checks.

pub mod gradcheck;
pub mod io;
pub mod tape;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, expect, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds an `m x n` matrix from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::shape("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Scalar tensors (rank 0 or single element) collapse to their value.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape("item", format!("shape {:?} is not a scalar", self.shape)))
        }
    }

    pub fn nrows(&self) -> usize {
        assert_eq!(self.rank(), 2, "nrows on non-matrix");
        self.shape[0]
    }

    pub fn ncols(&self) -> usize {
        assert_eq!(self.rank(), 2, "ncols on non-matrix");
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.rank(), 2);
        let n = self.shape[1];
        self.data[i * n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Opt-in single-precision mode: every value rounded through `f32`.
    /// Gradient acceptance checks never run on the result.
    pub fn round_to_f32(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}

/// Plain-value matrix product, used by inference fast paths. The tape has its
/// own differentiable matmul; tests check both against a third, independently
/// written loop.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.ncols() != b.nrows() {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for p in 0..k {
            let av = a.at2(i, p);
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out.data[i * n + j] += av * b.at2(p, j);
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax with max-shift stabilization. Rows of the result sum to 1.
pub fn row_softmax(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::shape("row_softmax", format!("{:?}", x.shape())));
    }
    let (m, n) = (x.nrows(), x.ncols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let row = x.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - mx).exp();
            out.data[i * n + j] = e;
            sum += e;
        }
        for j in 0..n {
            out.data[i * n + j] /= sum;
        }
    }
    Ok(out)
}
