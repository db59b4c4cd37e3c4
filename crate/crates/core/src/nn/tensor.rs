use rand::Rng;

use super::scalar::Scalar;
use crate::error::{Result, XensError};

/// Dense row-major tensor. Image batches use NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::ZERO; len],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(XensError::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| F::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Leading dimension; the batch size for NCHW tensors.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of elements per leading index.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let r = self.row_len();
        &self.data[i * r..(i + 1) * r]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let r = self.row_len();
        &mut self.data[i * r..(i + 1) * r]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(XensError::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, value: F) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Gathers rows of a 2-D tensor into a new tensor, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor<F> {
        let r = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * r);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor { shape, data }
    }

    /// Concatenates 2-D tensors along the column axis.
    pub fn concat_cols(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let n = parts.first().map(|t| t.batch()).unwrap_or(0);
        if parts.iter().any(|t| t.shape.len() != 2 || t.batch() != n) {
            return Err(XensError::Shape("concat_cols needs 2-D parts with equal rows".into()));
        }
        let width: usize = parts.iter().map(|t| t.shape[1]).sum();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for t in parts {
                data.extend_from_slice(t.row(i));
            }
        }
        Ok(Tensor {
            shape: vec![n, width],
            data,
        })
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Role of a named parameter: trained by the optimizer, or a running statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub kind: ParamKind,
}

impl<F: Scalar> Param<F> {
    pub fn weight(value: Tensor<F>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            value,
            grad,
            kind: ParamKind::Weight,
        }
    }

    pub fn buffer(value: Tensor<F>) -> Self {
        Param {
            value,
            grad: Tensor::zeros(&[0]),
            kind: ParamKind::Buffer,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::ZERO);
    }
}

/// Read-only visitor over `(qualified name, parameter)` pairs.
pub type ParamVisitor<'a, F> = dyn FnMut(&str, &Param<F>) + 'a;
/// Mutable visitor over `(qualified name, parameter)` pairs.
pub type ParamVisitorMut<'a, F> = dyn FnMut(&str, &mut Param<F>) + 'a;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
