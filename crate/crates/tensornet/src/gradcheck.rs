//! Central finite-difference gradient checking.
//!
//! The oracle only ever runs forward passes, so it stays independent of the
//! reverse-mode code it validates. The scalar probed is `Σ r ⊙ f(θ)` with a
//! fixed pseudo-random weighting `r`, which exercises every output element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Var};
use crate::layers::{AttentionWeights, Conv3d, Embedding, GroupNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// ‖g_autodiff − g_fd‖₂ / max(‖g_fd‖₂, ‖g_autodiff‖₂, 1e-8). The floor
    /// keeps exactly-zero gradients (e.g. a bias feeding a per-channel norm)
    /// from reporting rounding noise as a relative error of 1.
    pub rel_error: f64,
    pub fd_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }
}

fn weights(n: usize) -> Vec<f64> {
    // Deterministic, sign-varying, non-degenerate.
    (0..n)
        .map(|i| {
            let x = ((i as u64).wrapping_mul(2654435761) % 1000) as f64 / 1000.0;
            x * 2.0 - 1.0 + 0.1
        })
        .collect()
}

fn probe<F>(build: &F, store: &ParamStore) -> Result<(Graph, Var)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    let n = g.value(out).numel();
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(Tensor::new(shape, weights(n))?)?;
    let p = g.mul(out, r)?;
    let loss = g.sum(p)?;
    Ok((g, loss))
}

/// Compare reverse-mode gradients of every parameter in `store` against
/// central differences with step `h`.
pub fn check_gradients<F>(build: F, store: &ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let (mut g, loss) = probe(&build, store)?;
    let grads = g.backward(loss)?;
    let mut work = store.clone();
    let mut params = Vec::new();
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).numel();
        let mut fd = vec![0.0; n];
        for i in 0..n {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + h;
            let (gp, lp) = probe(&build, &work)?;
            let plus = gp.value(lp).item();
            work.value_mut(id).data_mut()[i] = orig - h;
            let (gm, lm) = probe(&build, &work)?;
            let minus = gm.value(lm).item();
            work.value_mut(id).data_mut()[i] = orig;
            fd[i] = (plus - minus) / (2.0 * h);
        }
        let ad: Vec<f64> = grads
            .get(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let diff: f64 = ad.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let fd_norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ad_norm = ad.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel_error = diff / fd_norm.max(ad_norm).max(1e-8);
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            rel_error,
            fd_norm,
        });
    }
    Ok(GradCheckReport { params })
}

/// One layer type exercised on random small shapes.
pub struct LayerCase {
    pub layer: &'static str,
    pub store: ParamStore,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>,
}

impl LayerCase {
    pub fn check(&self, h: f64) -> Result<GradCheckReport> {
        check_gradients(|g, s| (self.build)(g, s), &self.store, h)
    }
}

fn normal_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, 1.0).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

/// Values bounded away from zero so kinks (abs, relu) stay out of the
/// finite-difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.2..1.5);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Gradient-check cases covering every layer and op used by the networks.
/// Shapes are drawn from `seed`.
pub fn layer_cases(seed: u64) -> Vec<LayerCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let dim = |rng: &mut ChaCha8Rng| rng.random_range(2..=4usize);

    for (layer, k, stride) in [("conv3d_k3", 3, 1), ("conv3d_k3_stride2", 3, 2), ("conv3d_k1", 1, 1)] {
        let cin = rng.random_range(1..=3);
        let cout = rng.random_range(1..=3);
        let dims = [dim(&mut rng), dim(&mut rng), dim(&mut rng)];
        let mut store = ParamStore::new();
        let x = store.add("x", normal_tensor(&[cin, dims[0], dims[1], dims[2]], &mut rng));
        let conv = Conv3d::new(&mut store, "conv", cin, cout, k, stride, &mut rng);
        let b = store.find("conv.bias").unwrap();
        *store.value_mut(b) = normal_tensor(&[cout], &mut rng);
        cases.push(LayerCase {
            layer,
            store,
            build: Box::new(move |g, s| {
                let xv = g.param(s, x);
                conv.forward(g, s, xv)
            }),
        });
    }

    {
        let groups = rng.random_range(1..=2);
        let c = groups * rng.random_range(1..=3);
        let dims = [dim(&mut rng), dim(&mut rng), dim(&mut rng)];
        let mut store = ParamStore::new();
        let x = store.add("x", normal_tensor(&[c, dims[0], dims[1], dims[2]], &mut rng));
        let gn = GroupNorm::new(&mut store, "gn", c, groups);
        *store.value_mut(gn.gamma) = normal_tensor(&[c], &mut rng);
        *store.value_mut(gn.beta) = normal_tensor(&[c], &mut rng);
        cases.push(LayerCase {
            layer: "group_norm",
            store,
            build: Box::new(move |g, s| {
                let xv = g.param(s, x);
                gn.forward(g, s, xv)
            }),
        });
    }

    for layer in ["silu", "softplus"] {
        let mut store = ParamStore::new();
        let x = store.add("x", normal_tensor(&[dim(&mut rng), dim(&mut rng)], &mut rng));
        cases.push(LayerCase {
            layer,
            store,
            build: Box::new(move |g, s| {
                let xv = g.param(s, x);
                if layer == "silu" { g.silu(xv) } else { g.softplus(xv) }
            }),
        });
    }

    {
        let (n, fi, fo) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let mut store = ParamStore::new();
        let x = store.add("x", normal_tensor(&[n, fi], &mut rng));
        let lin = Linear::new(&mut store, "lin", fi, fo, &mut rng);
        *store.value_mut(lin.bias) = normal_tensor(&[fo], &mut rng);
        cases.push(LayerCase {
            layer: "linear",
            store,
            build: Box::new(move |g, s| {
                let xv = g.param(s, x);
                lin.forward(g, s, xv)
            }),
        });
    }

    {
        let rows = rng.random_range(2..=5);
        let d = dim(&mut rng);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, "emb", rows, d, &mut rng);
        let idx: Vec<usize> = (0..4).map(|_| rng.random_range(0..rows)).collect();
        cases.push(LayerCase {
            layer: "embedding_lookup",
            store,
            build: Box::new(move |g, s| emb.forward(g, s, &idx)),
        });
    }

    {
        let c = rng.random_range(2..=4);
        let m = rng.random_range(1..=3);
        let dc = rng.random_range(2..=4);
        let heads = rng.random_range(1..=2);
        let hd = rng.random_range(2..=3);
        let dims = [2, 2, dim(&mut rng)];
        let mut store = ParamStore::new();
        let x = store.add("x", normal_tensor(&[c, dims[0], dims[1], dims[2]], &mut rng));
        let ctx = store.add("ctx", normal_tensor(&[m, dc], &mut rng));
        let attn = AttentionWeights::new(&mut store, "attn", c, dc, heads, hd, &mut rng);
        cases.push(LayerCase {
            layer: "cross_attention",
            store,
            build: Box::new(move |g, s| {
                let xv = g.param(s, x);
                let cv = g.param(s, ctx);
                attn.forward(g, s, xv, cv)
            }),
        });
    }

    {
        let c1 = rng.random_range(1..=3);
        let c2 = rng.random_range(1..=3);
        let dims = [dim(&mut rng), dim(&mut rng), dim(&mut rng)];
        let mut store = ParamStore::new();
        let a = store.add("a", normal_tensor(&[c1, dims[0], dims[1], dims[2]], &mut rng));
        let b = store.add("b", normal_tensor(&[c2, 2 * dims[0], 2 * dims[1], 2 * dims[2]], &mut rng));
        let bias = store.add("bias", normal_tensor(&[c1 + c2], &mut rng));
        cases.push(LayerCase {
            layer: "upsample2_concat",
            store,
            build: Box::new(move |g, s| {
                let av = g.param(s, a);
                let bv = g.param(s, b);
                let up = g.upsample2(av)?;
                let cat = g.concat_channels(up, bv)?;
                let bi = g.param(s, bias);
                g.add_channel_bias(cat, bi)
            }),
        });
    }

    {
        let (m, k, n) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let mut store = ParamStore::new();
        let a = store.add("a", normal_tensor(&[m, k], &mut rng));
        let b = store.add("b", normal_tensor(&[n, k], &mut rng));
        cases.push(LayerCase {
            layer: "matmul_softmax",
            store,
            build: Box::new(move |g, s| {
                let av = g.param(s, a);
                let bv = g.param(s, b);
                let bt = g.transpose(bv)?;
                let p = g.matmul(av, bt)?;
                let r = g.reshape(p, &[m * n])?;
                let r = g.reshape(r, &[m, n])?;
                g.softmax_rows(r)
            }),
        });
    }

    {
        let shape = [dim(&mut rng), dim(&mut rng)];
        let mut store = ParamStore::new();
        let pred = away_from_zero(&shape, &mut rng);
        // Keep pred − target away from zero as well.
        let offset = away_from_zero(&shape, &mut rng);
        let target: Vec<f64> = pred.data().iter().zip(offset.data()).map(|(p, o)| p - o).collect();
        let target = Tensor::new(shape.to_vec(), target).unwrap();
        let p = store.add("pred", pred);
        cases.push(LayerCase {
            layer: "losses",
            store,
            build: Box::new(move |g, s| {
                let pv = g.param(s, p);
                let t = g.constant(target.clone())?;
                let d = g.sub(pv, t)?;
                let a = g.abs(d)?;
                let mae = g.mean(a)?;
                let sq = g.square(pv)?;
                let mse = g.mean(sq)?;
                let r = g.relu(pv)?;
                let rs = g.sum(r)?;
                let l = g.add(mae, mse)?;
                let l = g.add(l, rs)?;
                g.scale(l, 0.5)
            }),
        });
    }

    {
        let cin = rng.random_range(1..=2);
        let hidden = 2 * rng.random_range(1..=2);
        let dims = [4, dim(&mut rng), dim(&mut rng)];
        let mut store = ParamStore::new();
        let x = store.add("x", normal_tensor(&[cin, dims[0], dims[1], dims[2]], &mut rng));
        let c1 = Conv3d::new(&mut store, "l1", cin, hidden, 3, 1, &mut rng);
        let gn = GroupNorm::new(&mut store, "l1.norm", hidden, 2);
        let c2 = Conv3d::new(&mut store, "l2", hidden, hidden, 3, 2, &mut rng);
        let c3 = Conv3d::new(&mut store, "l3", hidden, 2, 1, 1, &mut rng);
        cases.push(LayerCase {
            layer: "three_layer_net",
            store,
            build: Box::new(move |g, s| {
                let xv = g.param(s, x);
                let h = c1.forward(g, s, xv)?;
                let h = gn.forward(g, s, h)?;
                let h = g.silu(h)?;
                let h = c2.forward(g, s, h)?;
                let h = g.silu(h)?;
                let h = c3.forward(g, s, h)?;
                g.softplus(h)
            }),
        });
    }

    cases
}

/// Direct O(positions × keys) evaluation of multi-head cross-attention,
/// the loop-level oracle for `AttentionWeights::forward`. `x` is
/// [C, ...spatial] and `ctx` is [M, Dc].
pub fn naive_attention(store: &ParamStore, attn: &AttentionWeights, x: &Tensor, ctx: &Tensor) -> Vec<f64> {
    let c = x.shape()[0];
    let s = x.numel() / c;
    let m = ctx.shape()[0];
    let dc = ctx.shape()[1];
    let d = attn.head_dim;
    let mut out = vec![0.0; c * s];
    for h in 0..attn.heads {
        let wq = store.value(attn.query[h]).data();
        let wk = store.value(attn.key[h]).data();
        let wv = store.value(attn.value[h]).data();
        let wo = store.value(attn.output[h]).data();
        let proj = |row: &dyn Fn(usize) -> f64, w: &[f64], fan_in: usize, j: usize| {
            (0..fan_in).map(|i| row(i) * w[i * d + j]).sum::<f64>()
        };
        let keys: Vec<Vec<f64>> = (0..m)
            .map(|t| (0..d).map(|j| proj(&|i| ctx.data()[t * dc + i], wk, dc, j)).collect())
            .collect();
        let vals: Vec<Vec<f64>> = (0..m)
            .map(|t| (0..d).map(|j| proj(&|i| ctx.data()[t * dc + i], wv, dc, j)).collect())
            .collect();
        for p in 0..s {
            let q: Vec<f64> = (0..d).map(|j| proj(&|i| x.data()[i * s + p], wq, c, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut o = vec![0.0; d];
            for (t, et) in e.iter().enumerate() {
                for j in 0..d {
                    o[j] += et / z * vals[t][j];
                }
            }
            for ch in 0..c {
                out[ch * s + p] += (0..d).map(|j| o[j] * wo[j * c + ch]).sum::<f64>();
            }
        }
    }
    out
}
