//! Dense `f64` tensors and a reverse-mode tape.
//!
//! [`Tensor`] is a plain row-major value. Gradient tracking happens through
//! [`Var`] handles registered on a [`Tape`]: a `Var` is a tensor with a node
//! id, and `Tape::leaf` marks the ones whose gradients are wanted.

mod adam;
mod conv;
mod gradcheck;
mod ops;
mod params;
mod tape;

pub use adam::{halved_lr, AdamState};
pub use conv::Conv2dSpec;
pub use gradcheck::{check_gradients, relative_error, GradCheckOptions, GradCheckReport};
pub use ops::{concat, linear, sigmoid, softplus, GatherIndex};
pub use params::{BoundParams, Parameters};
pub use tape::{Gradients, Tape, Var};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
