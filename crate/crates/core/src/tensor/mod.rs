//! Dense row-major arrays with a tape-based reverse-mode differentiator.
//!
//! Values are held as `f64` regardless of [`DType`]; a `Float32` tensor keeps
//! every element rounded to the nearest `f32`, so storage and checkpoints can
//! use four bytes per value without loss.

mod gradcheck;
mod graph;
mod kernels;

pub use gradcheck::{grad_check, grad_check_many};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{l2_normalize, matmul, scaled_dot_attention, AttentionMask};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
}

impl DType {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            DType::Float32 => x as f32 as f64,
            DType::Float64 => x,
        }
    }

    pub fn promote(self, other: DType) -> DType {
        if self == DType::Float64 || other == DType::Float64 {
            DType::Float64
        } else {
            DType::Float32
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Float64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, dtype: DType, mut data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        if dtype == DType::Float32 {
            for x in &mut data {
                *x = *x as f32 as f64;
            }
        }
        Ok(Tensor {
            shape,
            dtype,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f64(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape.to_vec(), DType::Float64, data)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), dtype, vec![0.0; n]).expect("zero tensor shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], DType::Float64, vec![value]).expect("scalar shape")
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Overwrites values in place, re-rounding to the tensor's dtype.
    pub fn update<F: FnMut(usize, f64) -> f64>(&mut self, mut f: F) {
        let dtype = self.dtype;
        for (i, x) in self.data.iter_mut().enumerate() {
            *x = dtype.round(f(i, *x));
        }
    }

    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::shape("set_data", "length differs"));
        }
        self.data = data;
        let dtype = self.dtype;
        for x in &mut self.data {
            *x = dtype.round(*x);
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        Tensor::new(self.shape.clone(), dtype, self.data.clone()).expect("same shape")
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of the trailing axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Selects leading-axis rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::invalid("select_rows with no rows"));
        }
        let w = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::invalid(format!("row {r} out of range")));
            }
            data.extend_from_slice(self.row(r));
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(shape, self.dtype, data)
    }

    pub fn grad_shape_ok(&self) -> bool {
        self.grad.as_ref().is_none_or(|g| g.len() == self.data.len())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
