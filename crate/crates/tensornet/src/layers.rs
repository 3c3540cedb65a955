//! Parameterized layers. Each layer owns [`ParamId`]s into a shared
//! [`ParamStore`] and exposes a `forward` that records onto a [`Graph`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv3d {
    /// Same-padding conv (`pad = kernel / 2`).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel * kernel;
        let weight = store.add_fan_in(
            format!("{name}.weight"),
            &[cout, cin, kernel, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = store.add_const(format!("{name}.bias"), &[cout], 0.0);
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
        }
    }

    /// Zero weights and bias; the layer outputs zeros until trained.
    pub fn new_zeroed(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let weight = store.add_const(format!("{name}.weight"), &[cout, cin, kernel, kernel, kernel], 0.0);
        let bias = store.add_const(format!("{name}.bias"), &[cout], 0.0);
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride: 1,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv3d(x, w, Some(b), self.stride, self.kernel / 2)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_fan_in(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng);
        let bias = store.add_const(format!("{name}.bias"), &[fan_out], 0.0);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// x [N, fan_in] → [N, fan_out].
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const DEFAULT_GROUPS: usize = 8;
    const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert!(
            channels % groups == 0,
            "{channels} channels not divisible by {groups} groups"
        );
        Self {
            gamma: store.add_const(format!("{name}.gamma"), &[channels], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[channels], 0.0),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let ga = g.param(store, self.gamma);
        let be = g.param(store, self.beta);
        g.group_norm(x, ga, be, self.groups, Self::EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            table: store.add_normal(format!("{name}.table"), &[rows, dim], 1.0, rng),
            rows,
            dim,
        }
    }

    /// [idx.len(), dim].
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, idx: &[usize]) -> Result<Var> {
        let t = g.param(store, self.table);
        g.gather_rows(t, idx)
    }
}

/// Per-head projections for multi-head cross-attention.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: Vec<ParamId>,
    pub heads: usize,
    pub head_dim: usize,
    pub channels: usize,
    pub context_dim: usize,
}

impl AttentionWeights {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        context_dim: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(heads > 0 && head_dim > 0);
        let mut w = Self {
            query: Vec::new(),
            key: Vec::new(),
            value: Vec::new(),
            output: Vec::new(),
            heads,
            head_dim,
            channels,
            context_dim,
        };
        for h in 0..heads {
            w.query
                .push(store.add_fan_in(format!("{name}.h{h}.q"), &[channels, head_dim], channels, rng));
            w.key
                .push(store.add_fan_in(format!("{name}.h{h}.k"), &[context_dim, head_dim], context_dim, rng));
            w.value
                .push(store.add_fan_in(format!("{name}.h{h}.v"), &[context_dim, head_dim], context_dim, rng));
            w.output.push(store.add_fan_in(
                format!("{name}.h{h}.o"),
                &[head_dim, channels],
                head_dim * heads,
                rng,
            ));
        }
        w
    }

    /// softmax(QKᵀ/√d)·V per head, summed through the output projections.
    ///
    /// `x` is a grid [C, ...] whose flattened positions are the query tokens;
    /// `context` is [M, context_dim]. Output has the shape of `x`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, context: Var) -> Result<Var> {
        let xshape = g.shape(x).to_vec();
        let c = xshape[0];
        if c != self.channels {
            return Err(TensorError::Shape {
                op: "cross_attention",
                lhs: xshape,
                rhs: vec![self.channels],
            });
        }
        let cshape = g.shape(context).to_vec();
        if cshape.len() != 2 || cshape[1] != self.context_dim {
            return Err(TensorError::Shape {
                op: "cross_attention context",
                lhs: cshape,
                rhs: vec![self.context_dim],
            });
        }
        let positions = g.value(x).numel() / c;
        let flat = g.reshape(x, &[c, positions])?;
        let tokens = g.transpose(flat)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut acc: Option<Var> = None;
        for h in 0..self.heads {
            let wq = g.param(store, self.query[h]);
            let wk = g.param(store, self.key[h]);
            let wv = g.param(store, self.value[h]);
            let wo = g.param(store, self.output[h]);
            let q = g.matmul(tokens, wq)?;
            let k = g.matmul(context, wk)?;
            let v = g.matmul(context, wv)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax_rows(scores)?;
            let o = g.matmul(attn, v)?;
            let o = g.matmul(o, wo)?;
            acc = Some(match acc {
                Some(a) => g.add(a, o)?,
                None => o,
            });
        }
        let out = g.transpose(acc.expect("at least one head"))?;
        g.reshape(out, &xshape)
    }
}

/// Convenience for tests and callers that build inputs by hand.
pub fn tensor_from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(f).collect()).expect("shape and data agree")
}
