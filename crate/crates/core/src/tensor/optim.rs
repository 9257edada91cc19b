use serde::{Deserialize, Serialize};

use super::{Matrix, ParamSet};
use crate::error::{Error, Result};

fn check_finite(params: &ParamSet) -> Result<()> {
    for p in params.iter() {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical { param: p.name.clone() });
        }
    }
    Ok(())
}

/// `param -= learning_rate * grad` for every parameter, then zeroes the
/// gradients. Nothing is modified when any gradient is non-finite.
pub fn sgd_step(params: &mut ParamSet, learning_rate: f64) -> Result<()> {
    check_finite(params)?;
    for p in params.iter_mut() {
        p.value.scaled_add(-learning_rate, &p.grad);
        p.grad.fill(0.0);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (expected sgd or adam)"))),
        }
    }
}

/// Applies accumulated gradients. Plain SGD keeps no state; Adam keeps
/// first and second moment estimates per parameter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    moments: Vec<(Matrix, Matrix)>,
    steps: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self { kind, learning_rate, moments: Vec::new(), steps: 0 }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, self.learning_rate),
            OptimizerKind::Adam => {
                check_finite(params)?;
                if self.moments.is_empty() {
                    self.moments = params
                        .iter()
                        .map(|p| (Matrix::zeros(p.value.raw_dim()), Matrix::zeros(p.value.raw_dim())))
                        .collect();
                }
                self.steps += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.steps);
                let c2 = 1.0 - Self::BETA2.powi(self.steps);
                let lr = self.learning_rate;
                for (p, (m, v)) in params.iter_mut().zip(&mut self.moments) {
                    ndarray::Zip::from(&mut p.value).and(&mut p.grad).and(m).and(v).for_each(|w, g, m, v| {
                        *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * *g;
                        *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * *g * *g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                        *g = 0.0;
                    });
                }
                Ok(())
            }
        }
    }
}
