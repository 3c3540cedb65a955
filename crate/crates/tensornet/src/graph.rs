//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every op applied to [`Var`] handles in creation order;
//! [`Graph::backward`] walks the tape in reverse. Graphs are built per step and
//! dropped afterwards. Parameters enter the tape as copies via
//! [`Graph::param`] and their gradients come back keyed by [`ParamId`].

use std::collections::BTreeMap;

use crate::kernels::{self, conv_out_dim, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannelBias(Var, Var),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Silu(Var),
    Softplus(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    ConcatChannels(Var, Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, summed per parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Global L2 norm across all parameters.
    pub fn norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.by_param.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    input_grads: Vec<Var>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Row indices used by a gather node (embedding or codebook lookup).
    pub fn gathered_indices(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::GatherRows { idx, .. } => Some(idx),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Leaf whose gradient is reported by [`Graph::input_grad`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Result<Var> {
        let v = self.push(t, Op::Leaf, true, "input")?;
        self.input_grads.push(v);
        Ok(v)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self
            .push(store.value(id).clone(), Op::Leaf, true, "param")
            .expect("parameters are finite");
        self.params.push((v, id));
        v
    }

    /// Same value, gradient stopped.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_map(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let t = self.map(a, |x| x * k);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, k), rg, "scale")
    }

    /// `x[c, ...] + b[c]` for x of shape [C, ...].
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.shape().first().copied().unwrap_or(0);
        if tb.shape() != [c] {
            return Err(TensorError::Shape {
                op: "add_channel_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let per = tx.numel() / c;
        let mut data = tx.data().to_vec();
        for (ch, row) in data.chunks_mut(per).enumerate() {
            let bv = tb.data()[ch];
            row.iter_mut().for_each(|v| *v += bv);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(b);
        self.push(t, Op::AddChannelBias(x, b), rg, "add_channel_bias")
    }

    /// `x[n, m] + b[m]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.shape().len() != 2 || tb.shape() != [tx.shape()[1]] {
            return Err(TensorError::Shape {
                op: "add_row_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let m = tx.shape()[1];
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(m) {
            row.iter_mut().zip(tb.data()).for_each(|(v, b)| *v += b);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(b);
        self.push(t, Op::AddRowBias(x, b), rg, "add_row_bias")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(TensorError::Argument(format!(
                "transpose needs a matrix, got {:?}",
                ta.shape()
            )));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg, "transpose")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(t, Op::Silu(a), rg, "silu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, softplus);
        let rg = self.rg(a);
        self.push(t, Op::Softplus(a), rg, "softplus")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg, "relu")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::abs);
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg, "abs")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x * x);
        let rg = self.rg(a);
        self.push(t, Op::Square(a), rg, "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = kernels::pairwise_sum(self.value(a).data());
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s = kernels::pairwise_sum(ta.data()) / ta.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(TensorError::Argument(format!(
                "softmax_rows needs a matrix, got {:?}",
                ta.shape()
            )));
        }
        let n = ta.shape()[1];
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg, "softmax_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg, "reshape")
    }

    /// Concatenate along the leading (channel) axis; trailing dims must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != tb.shape().len() || ta.shape()[1..] != tb.shape()[1..] {
            return Err(TensorError::Shape {
                op: "concat_channels",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut shape = ta.shape().to_vec();
        shape[0] += tb.shape()[0];
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, data), Op::ConcatChannels(a, b), rg, "concat_channels")
    }

    /// 3D convolution of x [Cin, D, H, W] with w [Cout, Cin, k, k, k], zero padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let xs = tx.shape();
        let ws = tw.shape();
        if xs.len() != 4 || ws.len() != 5 || ws[1] != xs[0] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(TensorError::Shape {
                op: "conv3d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Argument("conv3d stride must be ≥ 1".into()));
        }
        let k = ws[2];
        let mut out_dims = [0; 3];
        for i in 0..3 {
            out_dims[i] = conv_out_dim(xs[i + 1], k, stride, pad).ok_or_else(|| TensorError::Shape {
                op: "conv3d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            })?;
        }
        let geom = ConvGeom {
            cin: xs[0],
            cout: ws[0],
            k,
            stride,
            pad,
            in_dims: [xs[1], xs[2], xs[3]],
            out_dims,
        };
        let bias = match b {
            Some(bv) => {
                let tb = self.value(bv);
                if tb.shape() != [geom.cout] {
                    return Err(TensorError::Shape {
                        op: "conv3d bias",
                        lhs: ws.to_vec(),
                        rhs: tb.shape().to_vec(),
                    });
                }
                Some(tb.data())
            }
            None => None,
        };
        let out = kernels::conv3d_forward(tx.data(), tw.data(), bias, &geom);
        let shape = vec![geom.cout, out_dims[0], out_dims[1], out_dims[2]];
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|bv| self.rg(bv));
        self.push(Tensor::from_parts(shape, out), Op::Conv3d { x, w, b, geom }, rg, "conv3d")
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 {
            return Err(TensorError::Argument(format!(
                "upsample2 needs [C,D,H,W], got {s:?}"
            )));
        }
        let out = kernels::upsample2_forward(tx.data(), s[0], [s[1], s[2], s[3]]);
        let shape = vec![s[0], 2 * s[1], 2 * s[2], 2 * s[3]];
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Upsample2(x), rg, "upsample2")
    }

    /// Group normalization over x [C, ...] with per-channel affine gamma, beta [C].
    /// Statistics accumulate in f64 with pairwise sums.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.shape()[0];
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Argument(format!(
                "{c} channels not divisible into {groups} groups"
            )));
        }
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(TensorError::Shape {
                    op: "group_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let per_group = tx.numel() / groups;
        let per_channel = tx.numel() / c;
        let mut mean = Vec::with_capacity(groups);
        let mut rstd = Vec::with_capacity(groups);
        for chunk in tx.data().chunks(per_group) {
            let mu = kernels::pairwise_sum(chunk) / per_group as f64;
            let sq: Vec<f64> = chunk.iter().map(|v| (v - mu) * (v - mu)).collect();
            let var = kernels::pairwise_sum(&sq) / per_group as f64;
            mean.push(mu);
            rstd.push(1.0 / (var + eps).sqrt());
        }
        let (tg, tb) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = tx.data().to_vec();
        for (ch, row) in out.chunks_mut(per_channel).enumerate() {
            let gi = ch / (c / groups);
            let (mu, rs, ga, be) = (mean[gi], rstd[gi], tg[ch], tb[ch]);
            row.iter_mut().for_each(|v| *v = (*v - mu) * rs * ga + be);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            rg,
            "group_norm",
        )
    }

    /// Rows of table [K, D] at `idx`, giving [idx.len(), D].
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(TensorError::Argument(format!(
                "gather_rows needs a [K, D] table, got {:?}",
                tt.shape()
            )));
        }
        let (k, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(TensorError::Argument(format!(
                "row index {bad} out of range for table with {k} rows"
            )));
        }
        if idx.is_empty() {
            return Err(TensorError::Argument("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            Tensor::from_parts(vec![idx.len(), d], data),
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    /// Reverse pass from a scalar loss. Returns gradients for every parameter
    /// leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut out = Gradients::default();
        for &(v, id) in &self.params {
            if let Some(g) = &grads[v.0] {
                let shape = self.value(v).shape().to_vec();
                match out.by_param.get_mut(&id) {
                    Some(t) => t.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        out.by_param.insert(id, Tensor::from_parts(shape, g.clone()));
                    }
                }
            }
        }
        self.grads = grads;
        Ok(out)
    }

    /// Gradient of the last backward pass with respect to any node.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.value(v).shape().to_vec(), g.clone()))
    }

    /// Gradient for a leaf created by [`Graph::input_with_grad`].
    pub fn input_grad(&self, v: Var) -> Option<Tensor> {
        debug_assert!(self.input_grads.contains(&v));
        self.grad(v)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if rg(*b) {
                    accumulate_owned(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let d = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    accumulate_owned(&mut grads[a.0], d);
                }
                if rg(*b) {
                    let d = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    accumulate_owned(&mut grads[b.0], d);
                }
            }
            Op::Scale(a, k) => {
                accumulate_owned(&mut grads[a.0], g.iter().map(|v| v * k).collect());
            }
            Op::AddChannelBias(x, b) => {
                if rg(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if rg(*b) {
                    let c = self.nodes[b.0].value.numel();
                    let per = g.len() / c;
                    let d = g.chunks(per).map(kernels::pairwise_sum).collect();
                    accumulate_owned(&mut grads[b.0], d);
                }
            }
            Op::AddRowBias(x, b) => {
                if rg(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if rg(*b) {
                    let m = self.nodes[b.0].value.numel();
                    let mut d = vec![0.0; m];
                    for row in g.chunks(m) {
                        d.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    accumulate_owned(&mut grads[b.0], d);
                }
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let mut d = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, val(*b), true, &mut d, 0.0);
                    accumulate_owned(&mut grads[a.0], d);
                }
                if rg(*b) {
                    let mut d = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a), true, g, false, &mut d, 0.0);
                    accumulate_owned(&mut grads[b.0], d);
                }
            }
            Op::Transpose(a) => {
                let s = self.nodes[a.0].value.shape();
                let (m, n) = (s[0], s[1]);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Silu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Softplus(a) => {
                let d = g.iter().zip(val(*a)).map(|(g, &x)| g * sigmoid(x)).collect();
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Abs(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect();
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Square(a) => {
                let d = g.iter().zip(val(*a)).map(|(g, &x)| 2.0 * g * x).collect();
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                accumulate_owned(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                accumulate_owned(&mut grads[a.0], vec![g[0] / n as f64; n]);
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = node.value.shape()[1];
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Reshape(a) => accumulate(&mut grads[a.0], g),
            Op::ConcatChannels(a, b) => {
                let na = self.nodes[a.0].value.numel();
                if rg(*a) {
                    accumulate(&mut grads[a.0], &g[..na]);
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], &g[na..]);
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let need_db = b.is_some_and(|bv| rg(bv));
                let (dx, dw, db) =
                    kernels::conv3d_backward(val(*x), val(*w), g, geom, rg(*x), rg(*w), need_db);
                if let Some(dx) = dx {
                    accumulate_owned(&mut grads[x.0], dx);
                }
                if let Some(dw) = dw {
                    accumulate_owned(&mut grads[w.0], dw);
                }
                if let (Some(db), Some(bv)) = (db, b) {
                    accumulate_owned(&mut grads[bv.0], db);
                }
            }
            Op::Upsample2(x) => {
                let s = self.nodes[x.0].value.shape();
                let dx = kernels::upsample2_backward(g, s[0], [s[1], s[2], s[3]]);
                accumulate_owned(&mut grads[x.0], dx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xv = val(*x);
                let gam = val(*gamma);
                let c = gam.len();
                let per_channel = xv.len() / c;
                let ch_per_group = c / groups;
                let per_group = per_channel * ch_per_group;
                if rg(*gamma) || rg(*beta) {
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for ch in 0..c {
                        let gi = ch / ch_per_group;
                        let xs = &xv[ch * per_channel..(ch + 1) * per_channel];
                        let gs = &g[ch * per_channel..(ch + 1) * per_channel];
                        let mut sg = 0.0;
                        let mut sgx = 0.0;
                        for (xi, gi_) in xs.iter().zip(gs) {
                            sg += gi_;
                            sgx += gi_ * (xi - mean[gi]) * rstd[gi];
                        }
                        dgamma[ch] = sgx;
                        dbeta[ch] = sg;
                    }
                    if rg(*gamma) {
                        accumulate_owned(&mut grads[gamma.0], dgamma);
                    }
                    if rg(*beta) {
                        accumulate_owned(&mut grads[beta.0], dbeta);
                    }
                }
                if rg(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for gi in 0..*groups {
                        let range = gi * per_group..(gi + 1) * per_group;
                        let (mu, rs) = (mean[gi], rstd[gi]);
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for idx in range.clone() {
                            let ch = idx / per_channel;
                            let dxhat = g[idx] * gam[ch];
                            let xhat = (xv[idx] - mu) * rs;
                            s1 += dxhat;
                            s2 += dxhat * xhat;
                        }
                        let nf = per_group as f64;
                        for idx in range {
                            let ch = idx / per_channel;
                            let dxhat = g[idx] * gam[ch];
                            let xhat = (xv[idx] - mu) * rs;
                            dx[idx] = rs * (dxhat - s1 / nf - xhat * s2 / nf);
                        }
                    }
                    accumulate_owned(&mut grads[x.0], dx);
                }
            }
            Op::GatherRows { table, idx } => {
                let ts = self.nodes[table.0].value.shape();
                let d = ts[1];
                let mut dt = vec![0.0; ts[0] * d];
                for (r, &i) in idx.iter().enumerate() {
                    dt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                accumulate_owned(&mut grads[table.0], dt);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient_is_input() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let x = g
            .constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let p = g.mul(wv, x).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn squared_norm_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let sq = g.square(wv).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::Argument(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn shared_parameter_gradients_sum() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![1], vec![3.0]).unwrap());
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let b = g.param(&store, w);
        let p = g.mul(a, b).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![1], vec![3.0]).unwrap());
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let d = g.detach(a);
        let p = g.mul(a, d).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g
            .constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]).unwrap())
            .unwrap();
        let s = g.softmax_rows(a).unwrap();
        for row in g.value(s).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 27).map(|i| i as f64 * 0.25 - 3.0).collect();
        let x = g.constant(Tensor::new(vec![2, 3, 3, 3], data.clone()).unwrap()).unwrap();
        let w = g
            .constant(Tensor::new(vec![2, 2, 1, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let y = g.conv3d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[1], 1e300)).unwrap();
        let err = g.square(a).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite("square")));
    }
}
