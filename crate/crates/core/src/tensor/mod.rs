//! Dense matrices, named parameter sets and a reverse-mode tape covering the
//! handful of primitives the Q-network is built from.

mod checkpoint;
mod optim;
mod tape;

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

pub use checkpoint::{load_params, read_params, save_params, write_params};
pub use optim::{sgd_step, Optimizer, OptimizerKind};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Row-major dense matrix of reals.
pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Named learnable matrices with a gradient accumulator of matching shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter `{name}`")));
        }
        let grad = Matrix::zeros(value.raw_dim());
        let idx = self.params.len();
        self.index.insert(name.clone(), idx);
        self.params.push(Param { name, value, grad });
        Ok(idx)
    }

    /// Adds a `rows x cols` matrix drawn uniformly from
    /// `[-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))]`.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<usize> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Matrix::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..=limit));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<usize> {
        self.add(name, Matrix::zeros((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn param(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (idx, g) in grads.iter() {
            let p = self
                .params
                .get_mut(idx)
                .ok_or_else(|| Error::InvalidState(format!("gradient for unknown parameter #{idx}")))?;
            if p.grad.raw_dim() != g.raw_dim() {
                return Err(Error::Shape {
                    op: "accumulate",
                    detail: format!("`{}` is {:?}, gradient is {:?}", p.name, p.value.dim(), g.dim()),
                });
            }
            p.grad += g;
        }
        Ok(())
    }

    /// Overwrites every value with the matching value of `other`.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Shape { op: "copy_values_from", detail: "parameter counts differ".into() });
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.raw_dim() != src.value.raw_dim() {
                return Err(Error::Shape {
                    op: "copy_values_from",
                    detail: format!("`{}` vs `{}`", dst.name, src.name),
                });
            }
            dst.value.assign(&src.value);
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Rejects matrices that are not `rows x cols`.
pub(crate) fn expect_shape(op: &'static str, what: &str, m: &ndarray::ArrayView2<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.dim() != (rows, cols) {
        return Err(Error::Shape { op, detail: format!("{what} is {:?}, expected ({rows}, {cols})", m.dim()) });
    }
    Ok(())
}
