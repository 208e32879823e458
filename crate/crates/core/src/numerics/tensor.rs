use crate::error::{Error, Result};
use crate::scalar::{Scalar, Strides};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            requires_grad: false,
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    /// Builds a matrix from rows given as `f64` literals.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend(r.iter().map(|&v| S::lit(v)));
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::ShapeMismatch {
                op: "dims2",
                left: self.shape.clone(),
                right: vec![0, 0],
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Selects rows of a rank-2 tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let (n, cols) = self.dims2()?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::IndexOutOfRange { index: r, size: n });
            }
            data.extend_from_slice(self.row(r));
        }
        Self::new(vec![rows.len(), cols], data)
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![S::zero(); m * n];
    S::gemm(
        m,
        k,
        n,
        S::one(),
        a.data(),
        Strides::row_major(k),
        b.data(),
        Strides::row_major(n),
        S::zero(),
        &mut out,
        Strides::row_major(n),
    );
    Tensor::new(vec![m, n], out)
}
