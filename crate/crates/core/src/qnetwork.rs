//! State construction and the set-valued Q-network.
//!
//! A state is a padded matrix whose active rows are `[task feature | worker
//! feature]` pairs (plus `[task quality, worker quality]` for the requester
//! head). The network is a stack of row-wise and self-attention layers, so
//! its per-row outputs permute exactly as the input rows do:
//!
//! ```text
//! H1 = rFF(X)          H2 = rFF(H1)
//! H3 = H2 + rFF(MultiHead(H2))
//! H4 = H3 + MultiHead'(H3)         (the skip is configurable)
//! Q  = H4 w + b                    (linear head, one value per row)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::FeatureVector;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, ParamSet, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Width of a state row.
    pub input_dim: usize,
    /// Output width of every hidden layer.
    pub width: usize,
    pub heads: usize,
    /// Adds the input of the second attention block to its output.
    pub second_residual: bool,
}

impl NetConfig {
    pub fn new(input_dim: usize, width: usize, heads: usize) -> Result<Self> {
        let cfg = Self { input_dim, width, heads, second_residual: true };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 {
            return Err(Error::Config("network input_dim and width must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.width)));
        }
        Ok(())
    }
}

/// Padded state matrix with its active-row indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    pub x: Matrix,
    pub active: Vec<bool>,
}

impl StateTensor {
    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_empty(&self) -> bool {
        self.n_active() == 0
    }

    pub fn max_t(&self) -> usize {
        self.x.nrows()
    }

    pub fn row_dim(&self) -> usize {
        self.x.ncols()
    }

    /// Active rows stacked in their original order.
    pub fn compact(&self) -> (Matrix, Vec<usize>) {
        let idx: Vec<usize> = (0..self.active.len()).filter(|&i| self.active[i]).collect();
        let mut out = Matrix::zeros((idx.len(), self.x.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&self.x.row(i));
        }
        (out, idx)
    }
}

/// Quality columns appended to each row for the requester head.
#[derive(Debug, Clone, Copy)]
pub struct QualityDims<'a> {
    pub worker: f64,
    pub tasks: &'a [f64],
}

/// Row `j` is `[f_t_j | f_w]` (then `[q_t_j, q_w]` with `quality`); rows
/// past the pool are zero padding.
pub fn state_transform(
    worker: &FeatureVector,
    tasks: &[&FeatureVector],
    max_t: usize,
    quality: Option<QualityDims<'_>>,
) -> Result<StateTensor> {
    if tasks.len() > max_t {
        return Err(Error::Capacity { pool: tasks.len(), max_t });
    }
    let task_dim = tasks.first().map_or(0, |t| t.len());
    if tasks.iter().any(|t| t.len() != task_dim) {
        return Err(Error::InvalidInput("task features differ in length".into()));
    }
    if let Some(q) = quality {
        if q.tasks.len() != tasks.len() {
            return Err(Error::InvalidInput(format!("{} task qualities for {} tasks", q.tasks.len(), tasks.len())));
        }
    }
    let qd = if quality.is_some() { 2 } else { 0 };
    let row_dim = task_dim + worker.len() + qd;
    let mut x = Matrix::zeros((max_t, row_dim));
    for (j, t) in tasks.iter().enumerate() {
        let mut row = x.row_mut(j);
        for (dst, &v) in row.iter_mut().zip(t.as_slice().iter().chain(worker.as_slice())) {
            *dst = v;
        }
        if let Some(q) = quality {
            row[task_dim + worker.len()] = q.tasks[j];
            row[task_dim + worker.len() + 1] = q.worker;
        }
    }
    let mut active = vec![false; max_t];
    active[..tasks.len()].iter_mut().for_each(|a| *a = true);
    Ok(StateTensor { x, active })
}

/// The Q-network architecture; parameters live in a separate [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    pub config: NetConfig,
}

impl QNetwork {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        let NetConfig { input_dim, width: d, heads: h, .. } = self.config;
        let mut ps = ParamSet::new();
        ps.add_glorot("rff1.w", input_dim, d, rng)?;
        ps.add_zeros("rff1.b", 1, d)?;
        ps.add_glorot("rff2.w", d, d, rng)?;
        ps.add_zeros("rff2.b", 1, d)?;
        for block in ["mha1", "mha2"] {
            for i in 0..h {
                for proj in ["q", "k", "v"] {
                    ps.add_glorot(format!("{block}.h{i}.{proj}"), d, d / h, rng)?;
                }
            }
            ps.add_glorot(format!("{block}.o"), d, d, rng)?;
            if block == "mha1" {
                ps.add_glorot("rff3.w", d, d, rng)?;
                ps.add_zeros("rff3.b", 1, d)?;
            }
        }
        ps.add_glorot("head.w", d, 1, rng)?;
        ps.add_zeros("head.b", 1, 1)?;
        Ok(ps)
    }

    fn multihead(&self, tape: &mut Tape<'_>, block: &str, x: Var, mask: &[bool]) -> Result<Var> {
        let heads = (0..self.config.heads)
            .map(|i| {
                Ok((
                    tape.param(&format!("{block}.h{i}.q"))?,
                    tape.param(&format!("{block}.h{i}.k"))?,
                    tape.param(&format!("{block}.h{i}.v"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let w_o = tape.param(&format!("{block}.o"))?;
        tape.multihead_forward(x, &heads, w_o, mask)
    }

    /// Records the network on `tape` for the rows of `x`; returns the
    /// `rows x 1` Q column. Rows with a false `mask` entry are ignored as
    /// attention keys and their outputs are meaningless.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Matrix, mask: &[bool]) -> Result<Var> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Shape {
                op: "q_forward",
                detail: format!("state rows have width {}, network expects {}", x.ncols(), self.config.input_dim),
            });
        }
        let x = tape.input(x);
        let (w, b) = (tape.param("rff1.w")?, tape.param("rff1.b")?);
        let h1 = tape.rff_forward(x, w, b)?;
        let (w, b) = (tape.param("rff2.w")?, tape.param("rff2.b")?);
        let h2 = tape.rff_forward(h1, w, b)?;
        let a1 = self.multihead(tape, "mha1", h2, mask)?;
        let (w, b) = (tape.param("rff3.w")?, tape.param("rff3.b")?);
        let r = tape.rff_forward(a1, w, b)?;
        let h3 = tape.add(h2, r)?;
        let a2 = self.multihead(tape, "mha2", h3, mask)?;
        let h4 = if self.config.second_residual { tape.add(h3, a2)? } else { a2 };
        let (w, b) = (tape.param("head.w")?, tape.param("head.b")?);
        let q = tape.matmul(h4, w)?;
        tape.add_bias(q, b)
    }

    /// Q values of the rows of a dense (unpadded) state matrix.
    pub fn eval_rows(&self, params: &ParamSet, rows: Matrix) -> Result<Vec<f64>> {
        if rows.nrows() == 0 {
            return Err(Error::InvalidInput("Q-network evaluated on an empty state".into()));
        }
        let n = rows.nrows();
        let mut tape = Tape::inference(params);
        let q = self.forward(&mut tape, rows, &vec![true; n])?;
        Ok(tape.value(q).column(0).to_vec())
    }

    /// `(row index, Q)` for every active row of `state`.
    pub fn q_forward(&self, params: &ParamSet, state: &StateTensor) -> Result<Vec<(usize, f64)>> {
        if state.is_empty() {
            return Err(Error::InvalidInput("Q-network evaluated on an empty state".into()));
        }
        let (rows, idx) = state.compact();
        let q = self.eval_rows(params, rows)?;
        Ok(idx.into_iter().zip(q).collect())
    }

    /// Same as [`QNetwork::q_forward`] but runs over the whole padded
    /// matrix, relying on attention masking to ignore padding rows.
    pub fn q_forward_masked(&self, params: &ParamSet, state: &StateTensor) -> Result<Vec<(usize, f64)>> {
        if state.is_empty() {
            return Err(Error::InvalidInput("Q-network evaluated on an empty state".into()));
        }
        let mut tape = Tape::inference(params);
        let q = self.forward(&mut tape, state.x.clone(), &state.active)?;
        let col = tape.value(q);
        Ok((0..state.active.len()).filter(|&i| state.active[i]).map(|i| (i, col[[i, 0]])).collect())
    }
}

/// Online parameters θ and target parameters θ̃ of one Q-network.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetworkParams {
    pub net: QNetwork,
    pub online: ParamSet,
    pub target: ParamSet,
}

impl QNetworkParams {
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        let net = QNetwork::new(config)?;
        let online = net.init_params(rng)?;
        let target = online.clone();
        Ok(Self { net, online, target })
    }

    /// θ̃ ← θ.
    pub fn copy_to_target(&mut self) -> Result<()> {
        self.target.copy_values_from(&self.online)
    }
}
