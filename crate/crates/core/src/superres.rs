//! Residual super-resolution head for decoded RISH stacks.
//!
//! The input is first upsampled trilinearly to the target grid, then
//! refined by head conv, residual blocks and a zero-initialized tail conv
//! whose output is added back onto the upsampled input. A final ReLU keeps
//! the result non-negative without disturbing the identity at init.

use std::path::Path;

use tensornet::{AdamW, Conv3d, Graph, Metadata, ParamStore, Tensor, Var};

use crate::error::{arg, Error, Result};
use crate::nn::{
    fmt_list, load_store, meta_get, meta_parse, parse_list, save_store, shuffled, tensor_to_volume,
    volume_to_tensor,
};
use crate::volume::{derive_seed, resample4_trilinear, seeded_rng};

#[derive(Clone, Debug, PartialEq)]
pub struct SrConfig {
    pub channels: usize,
    pub width: usize,
    pub blocks: usize,
    /// Target spacing ratio; output dims are round(input dims × scale).
    pub scale: f64,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            width: 32,
            blocks: 4,
            scale: 1.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SrModel {
    pub config: SrConfig,
    pub store: ParamStore,
    head: Conv3d,
    body: Vec<(Conv3d, Conv3d)>,
    tail: Conv3d,
}

/// round(n × scale) per axis.
pub fn output_dims(dims: [usize; 3], scale: f64) -> [usize; 3] {
    dims.map(|n| (n as f64 * scale).round() as usize)
}

/// Trilinear resampling of a [C, D, H, W] tensor to spatial dims (x, y, z).
pub fn upsample_tensor(x: &Tensor, dims: [usize; 3]) -> Result<Tensor> {
    let v = tensor_to_volume(x, [1.0; 3])?;
    Ok(volume_to_tensor(&resample4_trilinear(&v, dims)?))
}

impl SrModel {
    pub fn new(config: SrConfig, seed: u64) -> Result<Self> {
        if !(config.scale >= 1.0) {
            return arg(format!("super-resolution scale must be ≥ 1, got {}", config.scale));
        }
        if config.channels == 0 || config.width == 0 {
            return arg("channel counts must be positive");
        }
        let mut rng = seeded_rng(derive_seed(seed, "sr-init", 0));
        let mut s = ParamStore::new();
        let (c, w) = (config.channels, config.width);
        let head = Conv3d::new(&mut s, "head", c, w, 3, 1, &mut rng);
        let body = (0..config.blocks)
            .map(|i| {
                (
                    Conv3d::new(&mut s, &format!("body.{i}.a"), w, w, 3, 1, &mut rng),
                    Conv3d::new(&mut s, &format!("body.{i}.b"), w, w, 3, 1, &mut rng),
                )
            })
            .collect();
        let tail = Conv3d::new_zeroed(&mut s, "tail", w, c, 3);
        Ok(Self {
            config,
            store: s,
            head,
            body,
            tail,
        })
    }

    pub fn output_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        output_dims(dims, self.config.scale)
    }

    /// Refinement of an already upsampled input.
    fn refine_graph(&self, g: &mut Graph, up: Var) -> Result<Var> {
        let s = &self.store;
        let mut h = self.head.forward(g, s, up)?;
        for (a, b) in &self.body {
            let r = a.forward(g, s, h)?;
            let r = g.silu(r)?;
            let r = b.forward(g, s, r)?;
            h = g.add(h, r)?;
        }
        let d = self.tail.forward(g, s, h)?;
        let y = g.add(up, d)?;
        Ok(g.relu(y)?)
    }

    /// Super-resolve a [C, D, H, W] stack.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[0] != self.config.channels {
            return arg(format!("expected [{}, D, H, W], got {s:?}", self.config.channels));
        }
        let dims = self.output_dims([s[3], s[2], s[1]]);
        let up = upsample_tensor(x, dims)?;
        let mut g = Graph::new();
        let uv = g.constant(up)?;
        let y = self.refine_graph(&mut g, uv)?;
        Ok(g.value(y).clone())
    }

    pub fn metadata(&self) -> Metadata {
        let c = &self.config;
        let mut m = Metadata::new();
        m.insert("kind".into(), "superres".into());
        m.insert("channels".into(), c.channels.to_string());
        m.insert("width".into(), c.width.to_string());
        m.insert("blocks".into(), c.blocks.to_string());
        m.insert("scale".into(), fmt_list(&[c.scale]));
        m
    }

    pub fn from_parts(store: &ParamStore, meta: &Metadata) -> Result<Self> {
        if meta_get(meta, "kind")? != "superres" {
            return Err(Error::Format {
                offset: 0,
                msg: "checkpoint does not hold a super-resolution model".into(),
            });
        }
        let config = SrConfig {
            channels: meta_parse(meta, "channels")?,
            width: meta_parse(meta, "width")?,
            blocks: meta_parse(meta, "blocks")?,
            scale: parse_list(meta, "scale")?[0],
        };
        let mut m = Self::new(config, 0)?;
        m.store.load_from(store, true)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path, extra: &Metadata, with_optimizer: bool) -> Result<()> {
        let mut meta = self.metadata();
        meta.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        save_store(path, &self.store, &meta, with_optimizer)
    }

    pub fn load(path: &Path) -> Result<(Self, Metadata)> {
        let (store, meta, _) = load_store(path)?;
        Ok((Self::from_parts(&store, &meta)?, meta))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SrTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 2,
            lr: 5e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SrTrainReport {
    /// (epoch, step, mse)
    pub steps: Vec<(usize, usize, f64)>,
    pub initial_mse: f64,
    pub final_mse: f64,
}

impl SrTrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,mse\n");
        for (e, st, l) in &self.steps {
            s.push_str(&format!("{e},{st},{l:e}\n"));
        }
        s
    }
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64
}

/// Mean squared error of the model over (low, high) pairs.
pub fn mean_mse(model: &SrModel, pairs: &[(Tensor, Tensor)]) -> Result<f64> {
    let mut acc = 0.0;
    for (lo, hi) in pairs {
        let y = model.forward(lo)?;
        if y.shape() != hi.shape() {
            return arg(format!("prediction {:?} does not match target {:?}", y.shape(), hi.shape()));
        }
        acc += mse(&y, hi);
    }
    Ok(acc / pairs.len().max(1) as f64)
}

/// MSE training on (low-res, high-res) pairs for epochs
/// `start_epoch..epochs` (at most `stop_after` of them).
pub fn train_sr(
    model: &mut SrModel,
    pairs: &[(Tensor, Tensor)],
    cfg: &SrTrainConfig,
    start_epoch: usize,
    stop_after: Option<usize>,
) -> Result<SrTrainReport> {
    if pairs.is_empty() {
        return arg("super-resolution training needs a non-empty dataset");
    }
    if cfg.batch_size == 0 {
        return arg("batch size must be positive");
    }
    let mut ups = Vec::with_capacity(pairs.len());
    for (lo, hi) in pairs {
        let s = lo.shape();
        let dims = model.output_dims([s[3], s[2], s[1]]);
        let up = upsample_tensor(lo, dims)?;
        if up.shape() != hi.shape() {
            return arg(format!("upsampled input {:?} does not match target {:?}", up.shape(), hi.shape()));
        }
        ups.push(up);
    }
    let mut report = SrTrainReport {
        initial_mse: mean_mse(model, pairs)?,
        ..SrTrainReport::default()
    };
    let end = stop_after.map_or(cfg.epochs, |s| (start_epoch + s).min(cfg.epochs));
    let opt = AdamW::with_lr(cfg.lr);
    for epoch in start_epoch..end {
        let mut rng = seeded_rng(derive_seed(cfg.seed, "sr-epoch", epoch as u64));
        let order = shuffled(pairs.len(), &mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let mut total: Option<Var> = None;
            for &i in chunk {
                let uv = g.constant(ups[i].clone())?;
                let y = model.refine_graph(&mut g, uv)?;
                let t = g.constant(pairs[i].1.clone())?;
                let d = g.sub(y, t)?;
                let sq = g.square(d)?;
                let l = g.mean(sq)?;
                total = Some(match total {
                    Some(a) => g.add(a, l)?,
                    None => l,
                });
            }
            let loss = g.scale(total.expect("non-empty chunk"), 1.0 / chunk.len() as f64)?;
            let value = g.value(loss).item();
            let grads = g.backward(loss)?;
            opt.step(&mut model.store, &grads);
            if !model.store.all_finite() {
                return Err(Error::Numerical("super-resolution parameters became non-finite".into()));
            }
            report.steps.push((epoch, step, value));
        }
    }
    report.final_mse = mean_mse(model, pairs)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use tensornet::layers::tensor_from_fn;

    fn small(scale: f64) -> SrConfig {
        SrConfig {
            channels: 3,
            width: 4,
            blocks: 1,
            scale,
        }
    }

    fn input(seed: u64, n: usize) -> Tensor {
        let mut rng = seeded_rng(seed);
        tensor_from_fn(&[3, n, n, n], |_| rng.random_range(0.0..2.0))
    }

    #[test]
    fn untrained_model_is_trilinear_upsampling() {
        let m = SrModel::new(small(1.25), 1).unwrap();
        let x = input(1, 4);
        let y = m.forward(&x).unwrap();
        assert_eq!(y, upsample_tensor(&x, [5, 5, 5]).unwrap());
        let one = SrModel::new(small(1.0), 1).unwrap();
        assert_eq!(one.forward(&x).unwrap(), x);
    }

    #[test]
    fn shape_contract_and_errors() {
        assert_eq!(output_dims([80, 80, 80], 96.0 / 80.0), [96, 96, 96]);
        assert_eq!(output_dims([16, 16, 16], 1.25 / 1.05), [19, 19, 19]);
        assert_eq!(output_dims([16, 16, 16], 1.2), [19, 19, 19]);
        assert!(SrModel::new(small(0.5), 1).is_err());
        let m = SrModel::new(small(1.2), 1).unwrap();
        assert!(train_sr(&mut SrModel::new(small(1.2), 1).unwrap(), &[], &SrTrainConfig::default(), 0, None).is_err());
        assert!(m.forward(&Tensor::zeros(&[2, 4, 4, 4])).is_err());
    }

    #[test]
    fn training_lowers_mse_deterministically() {
        let pairs: Vec<(Tensor, Tensor)> = (0..3)
            .map(|i| {
                let lo = input(10 + i, 4);
                let hi = upsample_tensor(&lo, [5, 5, 5]).unwrap();
                let hi = Tensor::new(hi.shape().to_vec(), hi.data().iter().map(|v| v * 1.3).collect()).unwrap();
                (lo, hi)
            })
            .collect();
        let cfg = SrTrainConfig {
            epochs: 15,
            batch_size: 2,
            lr: 1e-2,
            seed: 2,
        };
        let mut a = SrModel::new(small(1.25), 3).unwrap();
        let ra = train_sr(&mut a, &pairs, &cfg, 0, None).unwrap();
        assert!(ra.final_mse < ra.initial_mse);
        let mut b = SrModel::new(small(1.25), 3).unwrap();
        train_sr(&mut b, &pairs, &cfg, 0, None).unwrap();
        for ((_, x), (_, y)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(x.value, y.value);
        }
        assert!(a.forward(&pairs[0].0).unwrap().data().iter().all(|v| *v >= 0.0));
    }
}
