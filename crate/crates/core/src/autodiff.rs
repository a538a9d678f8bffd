//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass together
//! with whatever the backward rule needs. Values are identified by [`Var`]
//! handles, which are only valid on the tape that created them. Node ids are
//! assigned in creation order, so the record is topologically sorted by
//! construction and the backward sweep is a single reverse walk.
//!
//! Learnable tensors live in a [`ParamStore`]. Registering a parameter on a
//! tape snapshots its value; [`Gradients::accumulate_into`] adds the
//! gradients of every registration back onto the store.
//!
//! Discrete choices made from recorded values (such as picking the attention
//! head with the largest norm) happen outside the tape: only the chosen
//! branch is recorded, so the choice acts as a constant in backward.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gelu_grad_scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named learnable tensors, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Gelu(Var),
    /// Row-wise softmax over the last axis; the output is the saved value.
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Tensor,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    TileCols(Var, usize),
    Row(Var, usize),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mat_dims(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.id].value
    }

    fn check(&self, v: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by backward".into()));
        }
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {} belongs to tape {}, not tape {}",
                v.id, v.tape, self.id
            )));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by backward".into()));
        }
        let value = value.ensure_finite("tape record")?;
        self.nodes.push(Node { value, op });
        Ok(Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// Records a snapshot of a learnable parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).mul(self.value(b))?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).scale(c)?;
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).transpose()?;
        self.push(v, Op::Transpose(a))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let v = self.value(x).add_bias(self.value(bias))?;
        self.push(v, Op::AddBias(x, bias))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).gelu()?;
        self.push(v, Op::Gelu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let v = x.softmax(x.rank() - 1)?;
        self.push(v, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (v, x_hat, inv_std) =
            self.value(x)
                .layer_norm_parts(self.value(gamma), self.value(beta), eps)?;
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
        )
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).slice(1, start, len)?;
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals, 1)?;
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals, 0)?;
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn tile_cols(&mut self, a: Var, times: usize) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).tile_cols(times)?;
        self.push(v, Op::TileCols(a, times))
    }

    /// Row `i` of a matrix as a `[1, cols]` matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).slice(0, i, 1)?;
        self.push(v, Op::Row(a, i))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean of several scalar losses.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::Usage("mean of no values".into()))?;
        let mut acc = first;
        for &p in rest {
            acc = self.add(acc, p)?;
        }
        self.scale(acc, 1.0 / parts.len() as f64)
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        self.check(logits)?;
        let z = self.value(logits);
        let flat = z.reshape(&[z.numel()])?;
        let loss = crate::train::cross_entropy(&flat, label)?;
        let probs = flat.softmax(0)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. A tape supports exactly one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("backward called twice on one tape".into()));
        }
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.id] = Some(Tensor::ones(self.nodes[loss.id].value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Param(pid) => Some((pid, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.id].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.scale(-1.0)?)?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(val(*b))?)?;
                accumulate(grads, *b, g.mul(val(*a))?)?;
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)?)?,
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul(&val(*b).transpose()?)?)?;
                accumulate(grads, *b, val(*a).transpose()?.matmul(g)?)?;
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()?)?,
            Op::AddBias(x, b) => {
                accumulate(grads, *x, g.clone())?;
                let (rows, cols) = mat_dims(g);
                let mut gb = vec![0.0; cols];
                for r in 0..rows {
                    for (s, &v) in gb.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                        *s += v;
                    }
                }
                accumulate(grads, *b, Tensor::vector(gb))?;
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * gelu_grad_scalar(xv))
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?)?;
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (rows, cols) = mat_dims(y);
                let mut dx = vec![0.0; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot = yr.iter().zip(gr).fold(0.0, |acc, (y, g)| acc + y * g);
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), dx)?)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let gam = val(*gamma).data();
                let (rows, d) = mat_dims(x_hat);
                let dn = d as f64;
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; x_hat.numel()];
                for r in 0..rows {
                    let xh = &x_hat.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gam[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= dn;
                    mean_dxh_xh /= dn;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        dx[r * d + j] = inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                accumulate(grads, *x, Tensor::new(x_hat.shape().to_vec(), dx)?)?;
                accumulate(grads, *gamma, Tensor::vector(dgamma))?;
                accumulate(grads, *beta, Tensor::vector(dbeta))?;
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = val(*a).dims2()?;
                let (_, w) = g.dims2()?;
                let mut full = vec![0.0; rows * cols];
                for r in 0..rows {
                    full[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                accumulate(grads, *a, Tensor::new(vec![rows, cols], full)?)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    accumulate(grads, p, g.slice(1, start, w)?)?;
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = val(p).shape()[0];
                    accumulate(grads, p, g.slice(0, start, h)?)?;
                    start += h;
                }
            }
            Op::TileCols(a, times) => {
                let (rows, cols) = val(*a).dims2()?;
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for k in 0..*times {
                        let src = &g.data()[r * cols * times + k * cols..][..cols];
                        for (d, &s) in gx[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(vec![rows, cols], gx)?)?;
            }
            Op::Row(a, i) => {
                let (rows, cols) = val(*a).dims2()?;
                let mut full = vec![0.0; rows * cols];
                full[i * cols..(i + 1) * cols].copy_from_slice(g.data());
                accumulate(grads, *a, Tensor::new(vec![rows, cols], full)?)?;
            }
            Op::Reshape(a) => accumulate(grads, *a, g.reshape(val(*a).shape())?)?,
            Op::Sum(a) => {
                let x = val(*a);
                accumulate(grads, *a, Tensor::full(x.shape(), g.data()[0]))?;
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let up = g.data()[0];
                let mut d: Vec<f64> = probs.data().iter().map(|p| p * up).collect();
                d[*label] -= up;
                let shape = val(*logits).shape().to_vec();
                accumulate(grads, *logits, Tensor::new(shape, d)?)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.id] {
        Some(existing) => *existing = existing.add(&g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        self.grads[v.id].as_ref()
    }

    /// Adds the gradient of every parameter registration onto `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let p = store.get_mut(pid);
                p.grad = p.grad.add(g)?;
            }
        }
        Ok(())
    }
}
