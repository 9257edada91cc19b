use ndarray::{s, Array2, ArrayView2, Axis};

use super::{expect_shape, Matrix, ParamSet};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    MaskedSoftmax(Var),
    ConcatCols(Vec<Var>),
    RowSlice(Var, usize),
    /// Fused `softmax(q k^T * scale, masked) v`; keeps the attention weights.
    Attention { q: Var, k: Var, v: Var, scale: f64 },
}

#[derive(Debug)]
enum Value {
    Owned(Matrix),
    Param(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Value,
    /// Attention weights, or softmax output, or key mask depending on the op.
    aux: Option<Matrix>,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    entries: Vec<(usize, Matrix)>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Matrix)> {
        self.entries.iter().map(|(i, m)| (*i, m))
    }

    pub fn get(&self, idx: usize) -> Option<&Matrix> {
        self.entries.iter().find(|(i, _)| *i == idx).map(|(_, m)| m)
    }
}

/// Ordered record of primitive operations over matrices.
///
/// Node ids grow monotonically and every op only refers to earlier nodes, so
/// walking the nodes from last to first is a reverse topological order.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    recording: bool,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::new(), recording: true }
    }

    /// A tape that only evaluates; attention weights are dropped and
    /// [`Tape::backward`] is unavailable.
    pub fn inference(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::new(), recording: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m.view(),
            Value::Param(i) => self.params.param(*i).value.view(),
        }
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.push_aux(op, value, None)
    }

    fn push_aux(&mut self, op: Op, value: Matrix, aux: Option<Matrix>) -> Var {
        debug_assert!(value.iter().all(|x| !x.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node { op, value: Value::Owned(value), aux });
        Var(self.nodes.len() - 1)
    }

    /// A constant: gradients are never propagated into it.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Op::Input, m)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{name}`")))?;
        self.nodes.push(Node { op: Op::Param(idx), value: Value::Param(idx), aux: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::Shape { op: "matmul", detail: format!("{:?} x {:?}", av.dim(), bv.dim()) });
        }
        let out = av.dot(&bv);
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(Error::Shape { op: "matmul_t", detail: format!("{:?} x {:?}^T", av.dim(), bv.dim()) });
        }
        let out = av.dot(&bv.t());
        Ok(self.push(Op::MatMulT(a, b), out))
    }

    /// Adds the `1 x cols` row `b` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        expect_shape("add_bias", "bias", &bv, 1, xv.ncols())?;
        let out = &xv + &bv;
        Ok(self.push(Op::AddBias(x, b), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(Error::Shape { op: "add", detail: format!("{:?} + {:?}", av.dim(), bv.dim()) });
        }
        let out = &av + &bv;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(Op::Relu(x), out)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).mapv(|v| v * s);
        self.push(Op::Scale(x, s), out)
    }

    /// Row-wise softmax over the columns whose `mask` entry is true; masked
    /// columns get exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.ncols() {
            return Err(Error::Shape { op: "masked_softmax", detail: format!("mask {} vs {} columns", mask.len(), xv.ncols()) });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput("masked_softmax: every column is masked".into()));
        }
        let mut out = xv.to_owned();
        softmax_rows_in_place(&mut out, mask);
        Ok(self.push(Op::MaskedSoftmax(x), out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_cols of nothing".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Shape { op: "concat_cols", detail: e.to_string() })?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// Rows `start..start+len` of `x`.
    pub fn row_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.nrows() {
            return Err(Error::Shape { op: "row_slice", detail: format!("{start}+{len} > {}", xv.nrows()) });
        }
        let out = xv.slice(s![start..start + len, ..]).to_owned();
        Ok(self.push(Op::RowSlice(x, start), out))
    }

    /// `softmax(q k^T / sqrt(d), masked) v` where `d = q.cols`; rows of `k`
    /// (and `v`) with a false mask entry receive zero attention weight.
    pub fn attention_forward(&mut self, q: Var, k: Var, v: Var, mask: &[bool]) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.ncols() != kv.ncols() {
            return Err(Error::Shape { op: "attention", detail: format!("query width {} vs key width {}", qv.ncols(), kv.ncols()) });
        }
        if kv.nrows() != vv.nrows() {
            return Err(Error::Shape { op: "attention", detail: format!("{} keys vs {} values", kv.nrows(), vv.nrows()) });
        }
        if mask.len() != kv.nrows() {
            return Err(Error::Shape { op: "attention", detail: format!("mask {} vs {} keys", mask.len(), kv.nrows()) });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput("attention over an all-masked key set".into()));
        }
        let scale = 1.0 / (qv.ncols() as f64).sqrt();
        let mut weights = qv.dot(&kv.t());
        weights.mapv_inplace(|x| x * scale);
        softmax_rows_in_place(&mut weights, mask);
        let out = weights.dot(&vv);
        let aux = self.recording.then_some(weights);
        Ok(self.push_aux(Op::Attention { q, k, v, scale }, out, aux))
    }

    /// `relu(x w + b)` applied to every row.
    pub fn rff_forward(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let z = self.add_bias(xw, b)?;
        Ok(self.relu(z))
    }

    /// `Concat(head_1..head_h) w_o` with `head_i = Att(x Wq_i, x Wk_i, x Wv_i)`.
    pub fn multihead_forward(&mut self, x: Var, heads: &[(Var, Var, Var)], w_o: Var, mask: &[bool]) -> Result<Var> {
        if heads.is_empty() {
            return Err(Error::Config("multi-head attention needs at least one head".into()));
        }
        let mut outs = Vec::with_capacity(heads.len());
        for &(wq, wk, wv) in heads {
            let q = self.matmul(x, wq)?;
            let k = self.matmul(x, wk)?;
            let v = self.matmul(x, wv)?;
            outs.push(self.attention_forward(q, k, v, mask)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { self.concat_cols(&outs)? };
        self.matmul(cat, w_o)
    }

    /// Sign pattern of every relu input; a change between two evaluations
    /// means a finite-difference probe crossed a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                pattern.extend(self.value(x).iter().map(|&v| v > 0.0));
            }
        }
        pattern
    }

    /// Propagates `seed` (the gradient of a scalar loss with respect to
    /// `output`) back through the tape.
    pub fn backward(&self, output: Var, seed: &Matrix) -> Result<Gradients> {
        if self.nodes.is_empty() || output.0 >= self.nodes.len() {
            return Err(Error::InvalidState("backward called before any forward computation".into()));
        }
        if !self.recording {
            return Err(Error::InvalidState("backward on an inference tape".into()));
        }
        let out_dim = self.value(output).dim();
        if seed.dim() != out_dim {
            return Err(Error::Shape { op: "backward", detail: format!("seed {:?} vs output {:?}", seed.dim(), out_dim) });
        }
        let mut grads: Vec<Option<Matrix>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());
        let mut param_grads: Vec<(usize, Matrix)> = Vec::new();

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => match param_grads.iter_mut().find(|(i, _)| i == p) {
                    Some((_, acc)) => *acc += &g,
                    None => param_grads.push((*p, g)),
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, g.dot(&bv.t()));
                    accumulate(&mut grads, *b, av.t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, g.dot(&bv));
                    accumulate(&mut grads, *b, g.t().dot(&av));
                }
                Op::AddBias(x, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Relu(x) => {
                    let out = self.value(Var(id));
                    let mut gx = g;
                    gx.zip_mut_with(&out, |gi, &o| {
                        if o <= 0.0 {
                            *gi = 0.0
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.mapv(|v| v * s)),
                Op::MaskedSoftmax(x) => {
                    let p = self.value(Var(id));
                    accumulate(&mut grads, *x, softmax_backward(&p, &g));
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &part in parts {
                        let w = self.value(part).ncols();
                        accumulate(&mut grads, part, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::RowSlice(x, start) => {
                    let xv = self.value(*x);
                    let mut gx = Array2::zeros(xv.raw_dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Attention { q, k, v, scale } => {
                    let w = node.aux.as_ref().expect("recording tape keeps attention weights");
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    accumulate(&mut grads, *v, w.t().dot(&g));
                    let dw = g.dot(&vv.t());
                    let mut ds = softmax_backward(&w.view(), &dw);
                    ds.mapv_inplace(|x| x * scale);
                    accumulate(&mut grads, *q, ds.dot(&kv));
                    accumulate(&mut grads, *k, ds.t().dot(&qv));
                }
            }
        }
        Ok(Gradients { entries: param_grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradient of a row-wise softmax given its output `p` and upstream `g`:
/// `p * (g - rowsum(g * p))`. Masked entries have `p = 0` and get zero.
fn softmax_backward(p: &ArrayView2<f64>, g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.raw_dim());
    for ((mut o, pr), gr) in out.rows_mut().into_iter().zip(p.rows()).zip(g.rows()) {
        let dot: f64 = pr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        for ((oi, &pi), &gi) in o.iter_mut().zip(pr.iter()).zip(gr.iter()) {
            *oi = pi * (gi - dot);
        }
    }
    out
}

pub(crate) fn softmax_rows_in_place(m: &mut Matrix, mask: &[bool]) {
    for mut row in m.rows_mut() {
        let mut max = f64::NEG_INFINITY;
        for (&x, &keep) in row.iter().zip(mask) {
            if keep && x > max {
                max = x;
            }
        }
        let mut sum = 0.0;
        for (x, &keep) in row.iter_mut().zip(mask) {
            if keep {
                *x = (*x - max).exp();
                sum += *x;
            } else {
                *x = 0.0;
            }
        }
        let inv = 1.0 / sum;
        row.mapv_inplace(|x| x * inv);
    }
}
