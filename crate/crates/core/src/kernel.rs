//! Dense row-major `f64` arrays and the few bulk kernels the ensemble needs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Mismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
}

/// A dense array with row-major storage. The leading axis is the batch axis
/// wherever a batch is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ShapeError> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(ShapeError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Reshapes to `shape`, keeping the allocation. Existing entries are
    /// kept in storage order; entries past the old length are zero.
    pub fn resize(&mut self, shape: &[usize]) {
        self.shape.clear();
        self.shape.extend_from_slice(shape);
        self.data.resize(shape.iter().product(), 0.0);
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of the array viewed as `shape[0]` rows.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.row_stride();
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let stride = self.row_stride();
        &mut self.data[i * stride..(i + 1) * stride]
    }

    fn row_stride(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Flat offset of a full multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<(), ShapeError> {
        if self.shape != other.shape {
            return Err(ShapeError::Mismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, ShapeError> {
        self.same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn mul(&self, other: &Self) -> Result<Self, ShapeError> {
        self.same_shape(other, "mul")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<(), ShapeError> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Sums over the leading axis: `[n, rest..] -> [rest..]`.
    pub fn sum_axis0(&self) -> Self {
        let stride = self.row_stride();
        let mut out = vec![0.0; stride];
        for row in self.data.chunks_exact(stride.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Self {
            shape: self.shape[1..].to_vec(),
            data: out,
        }
    }

    /// Adds `row` to every leading-axis slice.
    pub fn broadcast_add_rows(&self, row: &[f64]) -> Result<Self, ShapeError> {
        let stride = self.row_stride();
        if row.len() != stride {
            return Err(ShapeError::Mismatch {
                op: "broadcast_add_rows",
                left: self.shape.clone(),
                right: vec![row.len()],
            });
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_exact_mut(stride.max(1)) {
            for (o, v) in chunk.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(out)
    }
}

/// `out[j] = Σ_f w[f, j] · x[f]` for a row-major `p × m` matrix `w`.
///
/// The feature loop is outermost so the inner loop streams contiguous columns
/// of every tree at once.
#[inline]
pub fn matvec_into(w: &[f64], x: &[f64], out: &mut [f64]) {
    let m = out.len();
    debug_assert_eq!(w.len(), x.len() * m);
    out.fill(0.0);
    for (wf, &xf) in w.chunks_exact(m).zip(x) {
        for (o, &wv) in out.iter_mut().zip(wf) {
            *o += wv * xf;
        }
    }
}

/// `out[f, j] += x[f] · delta[j]`: the rank-one update that accumulates
/// hyperplane gradients.
#[inline]
pub fn outer_accumulate(x: &[f64], delta: &[f64], out: &mut [f64]) {
    let m = delta.len();
    debug_assert_eq!(out.len(), x.len() * m);
    for (of, &xf) in out.chunks_exact_mut(m).zip(x) {
        for (o, &d) in of.iter_mut().zip(delta) {
            *o += xf * d;
        }
    }
}

/// Matrix-vector product `Wᵀx` for `W: [p, m]`, `x: [p]`.
pub fn matvec(w: &RealArray, x: &RealArray) -> Result<RealArray, ShapeError> {
    match (w.shape(), x.shape()) {
        (&[p, m], &[q]) if p == q => {
            let mut out = vec![0.0; m];
            matvec_into(w.as_slice(), x.as_slice(), &mut out);
            Ok(RealArray {
                shape: vec![m],
                data: out,
            })
        }
        _ => Err(ShapeError::Mismatch {
            op: "matvec",
            left: w.shape().to_vec(),
            right: x.shape().to_vec(),
        }),
    }
}

/// Row-wise [`matvec`] for `W: [p, m]` and `X: [B, p]`, giving `[B, m]`.
pub fn batched_matvec(w: &RealArray, xs: &RealArray) -> Result<RealArray, ShapeError> {
    match (w.shape(), xs.shape()) {
        (&[p, m], &[b, q]) if p == q => {
            let mut out = vec![0.0; b * m];
            if m > 0 {
                for (row, x) in out.chunks_exact_mut(m).zip(xs.as_slice().chunks_exact(p.max(1))) {
                    matvec_into(w.as_slice(), x, row);
                }
            }
            Ok(RealArray {
                shape: vec![b, m],
                data: out,
            })
        }
        _ => Err(ShapeError::Mismatch {
            op: "batched_matvec",
            left: w.shape().to_vec(),
            right: xs.shape().to_vec(),
        }),
    }
}
