//! Vector-quantized autoencoder over stacked per-order RISH volumes.
//!
//! The three RISH orders enter as channels of one network. Each domain has
//! its own model; the target model is usually a fine-tuned copy of the
//! source model. Inputs are normalized per order by the 95th percentile of
//! positive training values, and that scale is stored with the model.
//!
//! Latent grids are plain tensors shaped [D, nz/f, ny/f, nx/f].

use std::path::Path;

use rand::Rng as _;
use tensornet::{AdamW, Conv3d, Graph, GroupNorm, Metadata, ParamId, ParamStore, Tensor, Var};

use crate::error::{arg, Error, Result};
use crate::nn::{
    fmt_list, load_store, meta_get, meta_parse, parse_list, positive_percentile, save_store,
    shuffled, tensor_to_volume, volume_to_tensor,
};
use crate::volume::{derive_seed, seeded_rng, Volume4};

/// Latent features shaped [D, d, h, w].
pub type LatentGrid = Tensor;

pub const COMMITMENT_WEIGHT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => arg(format!("unknown domain tag `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqVaeConfig {
    pub in_channels: usize,
    /// Width of the first level; each downsampling level doubles it.
    pub base_channels: usize,
    /// Number of stride-2 stages, so the downsampling factor is 2^levels.
    pub levels: usize,
    pub embedding_dim: usize,
    pub num_embeddings: usize,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 16,
            levels: 1,
            embedding_dim: 32,
            num_embeddings: 256,
        }
    }
}

impl VqVaeConfig {
    pub fn factor(&self) -> usize {
        1 << self.levels
    }

    fn validate(&self) -> Result<()> {
        if self.num_embeddings < 2 {
            return arg("codebook needs at least 2 entries");
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.embedding_dim == 0 {
            return arg("channel counts must be positive");
        }
        Ok(())
    }
}

fn groups_for(c: usize) -> usize {
    (1..=8.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

/// x + conv(silu(gn(conv(silu(gn(x)))))).
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    n1: GroupNorm,
    c1: Conv3d,
    n2: GroupNorm,
    c2: Conv3d,
}

impl ResBlock {
    pub(crate) fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            n1: GroupNorm::new(store, &format!("{name}.n1"), c, groups_for(c)),
            c1: Conv3d::new(store, &format!("{name}.c1"), c, c, 3, 1, rng),
            n2: GroupNorm::new(store, &format!("{name}.n2"), c, groups_for(c)),
            c2: Conv3d::new(store, &format!("{name}.c2"), c, c, 3, 1, rng),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.n1.forward(g, s, x)?;
        let h = g.silu(h)?;
        let h = self.c1.forward(g, s, h)?;
        let h = self.n2.forward(g, s, h)?;
        let h = g.silu(h)?;
        let h = self.c2.forward(g, s, h)?;
        Ok(g.add(x, h)?)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv3d,
    blocks: Vec<(ResBlock, Conv3d)>,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv3d,
}

#[derive(Clone, Debug)]
struct Decoder {
    conv_in: Conv3d,
    mid: ResBlock,
    blocks: Vec<(Conv3d, ResBlock)>,
    norm_out: GroupNorm,
    conv_out: Conv3d,
}

/// Output of [`quantize`].
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub zq: LatentGrid,
    pub indices: Vec<usize>,
    /// mean((sg(z) − e)²)
    pub codebook_loss: f64,
    /// mean((z − sg(e))²)
    pub commitment_loss: f64,
}

/// Nearest codebook row (squared Euclidean distance) for every latent
/// vector of `z`, ties going to the lowest index.
pub fn quantize(codebook: &Tensor, z: &LatentGrid) -> Result<Quantized> {
    let cs = codebook.shape();
    let zs = z.shape();
    if cs.len() != 2 || zs.is_empty() || zs[0] != cs[1] {
        return arg(format!("codebook {cs:?} does not match latent {zs:?}"));
    }
    let (k, d) = (cs[0], cs[1]);
    let n = z.numel() / d;
    let zd = z.data();
    let cb = codebook.data();
    let mut indices = Vec::with_capacity(n);
    let mut out = vec![0.0; z.numel()];
    let mut sq = 0.0;
    for v in 0..n {
        let mut best = (f64::INFINITY, 0);
        for j in 0..k {
            let row = &cb[j * d..(j + 1) * d];
            let mut dist = 0.0;
            for (c, e) in row.iter().enumerate() {
                let diff = zd[c * n + v] - e;
                dist += diff * diff;
            }
            if dist < best.0 {
                best = (dist, j);
            }
        }
        let j = best.1;
        indices.push(j);
        for c in 0..d {
            out[c * n + v] = cb[j * d + c];
            let diff = zd[c * n + v] - cb[j * d + c];
            sq += diff * diff;
        }
    }
    let loss = sq / z.numel() as f64;
    Ok(Quantized {
        zq: Tensor::new(zs.to_vec(), out)?,
        indices,
        codebook_loss: loss,
        commitment_loss: loss,
    })
}

/// Training-graph quantization with a straight-through estimator.
/// Returns (zq, codebook loss, commitment loss).
pub(crate) fn quantize_graph(g: &mut Graph, codebook: Var, z: Var) -> Result<(Var, Var, Var, Vec<usize>)> {
    let zshape = g.shape(z).to_vec();
    let d = zshape[0];
    let n: usize = zshape[1..].iter().product();
    let q = quantize(g.value(codebook), g.value(z))?;
    let flat = g.reshape(z, &[d, n])?;
    let rows = g.transpose(flat)?;
    let e = g.gather_rows(codebook, &q.indices)?;
    let rows_sg = g.detach(rows);
    let diff = g.sub(rows_sg, e)?;
    let sq = g.square(diff)?;
    let cb_loss = g.mean(sq)?;
    let e_sg = g.detach(e);
    let diff = g.sub(rows, e_sg)?;
    let sq = g.square(diff)?;
    let commit = g.mean(sq)?;
    let delta = g.sub(e, rows)?;
    let delta = g.detach(delta);
    let st = g.add(rows, delta)?;
    let cols = g.transpose(st)?;
    let zq = g.reshape(cols, &zshape)?;
    Ok((zq, cb_loss, commit, q.indices))
}

#[derive(Clone, Debug)]
pub struct VqVae {
    pub config: VqVaeConfig,
    pub domain: Domain,
    pub store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    codebook: ParamId,
    /// Per-channel divisor applied before encoding.
    pub scales: Vec<f64>,
    /// Whether the codebook has been seeded from encoder outputs.
    pub codebook_ready: bool,
}

impl VqVae {
    pub fn new(config: VqVaeConfig, domain: Domain, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(derive_seed(seed, "vqvae-init", 0));
        let mut s = ParamStore::new();
        let width = |i: usize| config.base_channels << i;
        let l = config.levels;
        let enc = Encoder {
            conv_in: Conv3d::new(&mut s, "enc.in", config.in_channels, width(0), 3, 1, &mut rng),
            blocks: (0..l)
                .map(|i| {
                    (
                        ResBlock::new(&mut s, &format!("enc.{i}.res"), width(i), &mut rng),
                        Conv3d::new(&mut s, &format!("enc.{i}.down"), width(i), width(i + 1), 3, 2, &mut rng),
                    )
                })
                .collect(),
            mid: ResBlock::new(&mut s, "enc.mid", width(l), &mut rng),
            norm_out: GroupNorm::new(&mut s, "enc.norm", width(l), groups_for(width(l))),
            conv_out: Conv3d::new(&mut s, "enc.out", width(l), config.embedding_dim, 1, 1, &mut rng),
        };
        let dec = Decoder {
            conv_in: Conv3d::new(&mut s, "dec.in", config.embedding_dim, width(l), 3, 1, &mut rng),
            mid: ResBlock::new(&mut s, "dec.mid", width(l), &mut rng),
            blocks: (0..l)
                .rev()
                .map(|i| {
                    (
                        Conv3d::new(&mut s, &format!("dec.{i}.up"), width(i + 1), width(i), 3, 1, &mut rng),
                        ResBlock::new(&mut s, &format!("dec.{i}.res"), width(i), &mut rng),
                    )
                })
                .collect(),
            norm_out: GroupNorm::new(&mut s, "dec.norm", width(0), groups_for(width(0))),
            conv_out: Conv3d::new(&mut s, "dec.out", width(0), config.in_channels, 3, 1, &mut rng),
        };
        let codebook = s.add_normal(
            "codebook",
            &[config.num_embeddings, config.embedding_dim],
            1.0,
            &mut rng,
        );
        Ok(Self {
            scales: vec![1.0; config.in_channels],
            config,
            domain,
            store: s,
            encoder: enc,
            decoder: dec,
            codebook,
            codebook_ready: false,
        })
    }

    pub fn factor(&self) -> usize {
        self.config.factor()
    }

    pub fn codebook(&self) -> &Tensor {
        self.store.value(self.codebook)
    }

    pub fn codebook_mut(&mut self) -> &mut Tensor {
        self.store.value_mut(self.codebook)
    }

    /// Set per-channel scales to the 95th percentile of positive values
    /// pooled over `data`.
    pub fn fit_normalization(&mut self, data: &[Volume4]) -> Result<()> {
        if data.is_empty() {
            return arg("normalization needs at least one volume");
        }
        let c = self.config.in_channels;
        let mut scales = Vec::with_capacity(c);
        for q in 0..c {
            let vals = data.iter().flat_map(|v| (0..v.num_voxels()).map(move |i| v.get(i, q)));
            scales.push(positive_percentile(vals, 95.0));
        }
        self.scales = scales;
        Ok(())
    }

    pub fn normalize(&self, rish: &Volume4) -> Result<Tensor> {
        if rish.dims()[3] != self.config.in_channels {
            return arg(format!(
                "expected {} channels, got {}",
                self.config.in_channels,
                rish.dims()[3]
            ));
        }
        let mut t = volume_to_tensor(rish);
        let per = t.numel() / self.config.in_channels;
        for (ch, row) in t.data_mut().chunks_mut(per).enumerate() {
            let s = self.scales[ch];
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(t)
    }

    pub fn denormalize(&self, t: &Tensor, voxel_size: [f64; 3]) -> Result<Volume4> {
        let mut t = t.clone();
        let per = t.numel() / self.config.in_channels;
        for (ch, row) in t.data_mut().chunks_mut(per).enumerate() {
            let s = self.scales[ch];
            row.iter_mut().for_each(|v| *v *= s);
        }
        tensor_to_volume(&t, voxel_size)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = self.factor();
        if shape.len() != 4 || shape[0] != self.config.in_channels {
            return arg(format!(
                "encoder expects [{}, D, H, W], got {shape:?}",
                self.config.in_channels
            ));
        }
        if shape[1..].iter().any(|&n| n == 0 || n % f != 0) {
            return arg(format!(
                "spatial dims {:?} are not divisible by {f}; pad the volume to a multiple of {f}",
                &shape[1..]
            ));
        }
        Ok(())
    }

    pub(crate) fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let s = &self.store;
        let e = &self.encoder;
        let mut h = e.conv_in.forward(g, s, x)?;
        for (res, down) in &e.blocks {
            h = res.forward(g, s, h)?;
            h = down.forward(g, s, h)?;
        }
        h = e.mid.forward(g, s, h)?;
        h = e.norm_out.forward(g, s, h)?;
        h = g.silu(h)?;
        Ok(e.conv_out.forward(g, s, h)?)
    }

    pub(crate) fn decode_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let zs = g.shape(z);
        if zs.len() != 4 || zs[0] != self.config.embedding_dim {
            return arg(format!(
                "decoder expects [{}, d, h, w], got {zs:?}",
                self.config.embedding_dim
            ));
        }
        let s = &self.store;
        let d = &self.decoder;
        let mut h = d.conv_in.forward(g, s, z)?;
        h = d.mid.forward(g, s, h)?;
        for (up, res) in &d.blocks {
            h = g.upsample2(h)?;
            h = up.forward(g, s, h)?;
            h = res.forward(g, s, h)?;
        }
        h = d.norm_out.forward(g, s, h)?;
        h = g.silu(h)?;
        h = d.conv_out.forward(g, s, h)?;
        Ok(g.softplus(h)?)
    }

    /// Continuous latent of a normalized input [C, D, H, W].
    pub fn encode(&self, x: &Tensor) -> Result<LatentGrid> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let z = self.encode_graph(&mut g, xv)?;
        Ok(g.value(z).clone())
    }

    pub fn quantize(&self, z: &LatentGrid) -> Result<Quantized> {
        quantize(self.codebook(), z)
    }

    /// Normalized output of a (quantized) latent.
    pub fn decode(&self, zq: &LatentGrid) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(zq.clone())?;
        let y = self.decode_graph(&mut g, zv)?;
        Ok(g.value(y).clone())
    }

    /// decode(quantize(encode(x))) on normalized tensors.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encode(x)?;
        self.decode(&self.quantize(&z)?.zq)
    }

    /// Round trip in physical RISH units.
    pub fn reconstruct_volume(&self, rish: &Volume4) -> Result<Volume4> {
        let y = self.reconstruct(&self.normalize(rish)?)?;
        self.denormalize(&y, rish.voxel_size())
    }

    /// Seed every codebook row with an encoder output vector drawn (without
    /// replacement where possible) from the normalized training inputs.
    pub fn init_codebook(&mut self, inputs: &[Tensor], rng: &mut crate::volume::Rng) -> Result<()> {
        let pool = self.latent_pool(inputs)?;
        let d = self.config.embedding_dim;
        let n = pool.len() / d;
        let order = shuffled(n, rng);
        let k = self.config.num_embeddings;
        let cb = self.codebook_mut().data_mut();
        for j in 0..k {
            let v = order[j % n];
            cb[j * d..(j + 1) * d].copy_from_slice(&pool[v * d..(v + 1) * d]);
        }
        self.codebook_ready = true;
        Ok(())
    }

    /// Encoder outputs of all inputs as rows of length D.
    fn latent_pool(&self, inputs: &[Tensor]) -> Result<Vec<f64>> {
        let d = self.config.embedding_dim;
        let mut pool = Vec::new();
        for x in inputs {
            let z = self.encode(x)?;
            let n = z.numel() / d;
            for v in 0..n {
                pool.extend((0..d).map(|c| z.data()[c * n + v]));
            }
        }
        if pool.is_empty() {
            return arg("no latent vectors to draw from");
        }
        Ok(pool)
    }

    /// Fraction of codebook rows selected at least once over `inputs`.
    pub fn codebook_usage(&self, inputs: &[Tensor]) -> Result<f64> {
        let mut used = vec![false; self.config.num_embeddings];
        for x in inputs {
            for i in self.quantize(&self.encode(x)?)?.indices {
                used[i] = true;
            }
        }
        Ok(used.iter().filter(|u| **u).count() as f64 / used.len() as f64)
    }

    /// Mean absolute reconstruction error over normalized inputs.
    pub fn mean_mae(&self, inputs: &[Tensor]) -> Result<f64> {
        if inputs.is_empty() {
            return arg("empty dataset");
        }
        let mut acc = 0.0;
        for x in inputs {
            let y = self.reconstruct(x)?;
            let s: f64 = y.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum();
            acc += s / x.numel() as f64;
        }
        Ok(acc / inputs.len() as f64)
    }

    pub fn metadata(&self) -> Metadata {
        let c = &self.config;
        let mut m = Metadata::new();
        m.insert("kind".into(), "vqvae".into());
        m.insert("domain".into(), self.domain.tag().into());
        m.insert("in_channels".into(), c.in_channels.to_string());
        m.insert("base_channels".into(), c.base_channels.to_string());
        m.insert("levels".into(), c.levels.to_string());
        m.insert("embedding_dim".into(), c.embedding_dim.to_string());
        m.insert("num_embeddings".into(), c.num_embeddings.to_string());
        m.insert("scales".into(), fmt_list(&self.scales));
        m.insert("codebook_ready".into(), self.codebook_ready.to_string());
        m
    }

    /// Rebuild from stored parameters and metadata.
    pub fn from_parts(store: &ParamStore, meta: &Metadata) -> Result<Self> {
        if meta_get(meta, "kind")? != "vqvae" {
            return Err(Error::Format {
                offset: 0,
                msg: "checkpoint does not hold a VQ-VAE".into(),
            });
        }
        let config = VqVaeConfig {
            in_channels: meta_parse(meta, "in_channels")?,
            base_channels: meta_parse(meta, "base_channels")?,
            levels: meta_parse(meta, "levels")?,
            embedding_dim: meta_parse(meta, "embedding_dim")?,
            num_embeddings: meta_parse(meta, "num_embeddings")?,
        };
        let mut m = Self::new(config, Domain::from_tag(meta_get(meta, "domain")?)?, 0)?;
        m.store.load_from(store, true)?;
        m.scales = parse_list(meta, "scales")?;
        m.codebook_ready = meta_parse(meta, "codebook_ready")?;
        if m.scales.len() != m.config.in_channels {
            return Err(Error::Format {
                offset: 0,
                msg: "scale count does not match channel count".into(),
            });
        }
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
pub struct VqTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub commitment_weight: f64,
    pub seed: u64,
    /// Reseed codes unused during an epoch from that epoch's encoder outputs.
    pub restart_dead_codes: bool,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 2,
            lr: 1e-3,
            commitment_weight: COMMITMENT_WEIGHT,
            seed: 0,
            restart_dead_codes: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqStepLoss {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub mae: f64,
    pub codebook: f64,
    pub commitment: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VqTrainReport {
    pub steps: Vec<VqStepLoss>,
    pub initial_mae: f64,
    pub final_mae: f64,
    pub codes_used: f64,
}

impl VqTrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,total,mae,codebook,commitment\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e}\n",
                r.epoch, r.step, r.total, r.mae, r.codebook, r.commitment
            ));
        }
        s
    }
}

fn optimizer(lr: f64) -> AdamW {
    AdamW {
        lr,
        weight_decay: 0.0,
        ..AdamW::default()
    }
}

/// One optimizer step on a batch of normalized inputs.
fn train_batch(
    model: &mut VqVae,
    batch: &[&Tensor],
    cfg: &VqTrainConfig,
    used: &mut [bool],
    last_latents: &mut Vec<f64>,
) -> Result<(f64, f64, f64, f64)> {
    let mut g = Graph::new();
    let cb = g.param(&model.store, model.codebook);
    let mut terms = Vec::new();
    let (mut mae_s, mut cb_s, mut cm_s) = (0.0, 0.0, 0.0);
    last_latents.clear();
    let d = model.config.embedding_dim;
    for x in batch {
        let xv = g.constant((*x).clone())?;
        let z = model.encode_graph(&mut g, xv)?;
        let zt = g.value(z);
        let n = zt.numel() / d;
        for v in 0..n {
            last_latents.extend((0..d).map(|c| zt.data()[c * n + v]));
        }
        let (zq, cb_loss, commit, idx) = quantize_graph(&mut g, cb, z)?;
        idx.iter().for_each(|&i| used[i] = true);
        let y = model.decode_graph(&mut g, zq)?;
        let diff = g.sub(y, xv)?;
        let ad = g.abs(diff)?;
        let mae = g.mean(ad)?;
        mae_s += g.value(mae).item();
        cb_s += g.value(cb_loss).item();
        cm_s += g.value(commit).item();
        let wc = g.scale(commit, cfg.commitment_weight)?;
        let t = g.add(mae, cb_loss)?;
        terms.push(g.add(t, wc)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let loss = g.scale(total, 1.0 / batch.len() as f64)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    optimizer(cfg.lr).step(&mut model.store, &grads);
    if !model.store.all_finite() {
        return Err(Error::Numerical("VQ-VAE parameters became non-finite".into()));
    }
    let b = batch.len() as f64;
    Ok((value, mae_s / b, cb_s / b, cm_s / b))
}

/// Train on normalized inputs for epochs `start_epoch..cfg.epochs` (or up to
/// `stop_after` epochs when given). Each epoch draws its own RNG from the
/// seed, so stopping and resuming at an epoch boundary reproduces an
/// uninterrupted run exactly as long as optimizer state is kept.
pub fn train_vqvae(
    model: &mut VqVae,
    inputs: &[Tensor],
    cfg: &VqTrainConfig,
    start_epoch: usize,
    stop_after: Option<usize>,
) -> Result<VqTrainReport> {
    if inputs.is_empty() {
        return arg("VQ-VAE training needs a non-empty dataset");
    }
    if cfg.batch_size == 0 {
        return arg("batch size must be positive");
    }
    if !model.codebook_ready {
        let mut rng = seeded_rng(derive_seed(cfg.seed, "vqvae-codebook", 0));
        model.init_codebook(inputs, &mut rng)?;
    }
    let mut report = VqTrainReport {
        initial_mae: model.mean_mae(inputs)?,
        ..VqTrainReport::default()
    };
    let end = stop_after.map_or(cfg.epochs, |s| (start_epoch + s).min(cfg.epochs));
    let d = model.config.embedding_dim;
    let mut latents = Vec::new();
    for epoch in start_epoch..end {
        let mut rng = seeded_rng(derive_seed(cfg.seed, "vqvae-epoch", epoch as u64));
        let order = shuffled(inputs.len(), &mut rng);
        let mut used = vec![false; model.config.num_embeddings];
        let mut epoch_pool = Vec::new();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &inputs[i]).collect();
            let (total, mae, cbl, cml) = train_batch(model, &batch, cfg, &mut used, &mut latents)?;
            epoch_pool.extend_from_slice(&latents);
            report.steps.push(VqStepLoss {
                epoch,
                step,
                total,
                mae,
                codebook: cbl,
                commitment: cml,
            });
        }
        if cfg.restart_dead_codes && epoch + 1 < cfg.epochs {
            let n = epoch_pool.len() / d;
            let cb = model.codebook_mut().data_mut();
            for (j, _) in used.iter().enumerate().filter(|(_, u)| !**u) {
                let v = rng.random_range(0..n);
                cb[j * d..(j + 1) * d].copy_from_slice(&epoch_pool[v * d..(v + 1) * d]);
            }
        }
    }
    report.final_mae = model.mean_mae(inputs)?;
    report.codes_used = model.codebook_usage(inputs)?;
    Ok(report)
}

/// Fine-tune a copy of `pretrained` on target-domain RISH volumes. Weights
/// and codebook start from the pretrained model, normalization is refitted
/// on the target data and optimizer state starts fresh.
pub fn finetune(
    pretrained: &VqVae,
    target: &[Volume4],
    cfg: &VqTrainConfig,
) -> Result<(VqVae, VqTrainReport)> {
    if target.is_empty() {
        return arg("fine-tuning needs a non-empty target dataset");
    }
    let mut model = pretrained.clone();
    model.domain = Domain::Target;
    model.store.reset_optimizer();
    model.fit_normalization(target)?;
    let inputs = target.iter().map(|v| model.normalize(v)).collect::<Result<Vec<_>>>()?;
    let report = train_vqvae(&mut model, &inputs, cfg, 0, None)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tensornet::layers::tensor_from_fn;

    fn small() -> VqVaeConfig {
        VqVaeConfig {
            in_channels: 3,
            base_channels: 8,
            levels: 1,
            embedding_dim: 4,
            num_embeddings: 16,
        }
    }

    fn input(seed: u64, n: usize) -> Tensor {
        let mut rng = seeded_rng(seed);
        tensor_from_fn(&[3, n, n, n], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn shape_contract() {
        let cfg = VqVaeConfig {
            levels: 2,
            ..small()
        };
        let m = VqVae::new(cfg, Domain::Source, 1).unwrap();
        let z = m.encode(&input(0, 8)).unwrap();
        assert_eq!(z.shape(), &[4, 2, 2, 2]);
        let y = m.decode(&m.quantize(&z).unwrap().zq).unwrap();
        assert_eq!(y.shape(), &[3, 8, 8, 8]);
        assert!(y.data().iter().all(|v| *v >= 0.0));
        let err = m.encode(&input(0, 6)).unwrap_err().to_string();
        assert!(err.contains("pad"), "{err}");
    }

    #[test]
    fn encoding_is_deterministic() {
        let m = VqVae::new(small(), Domain::Source, 2).unwrap();
        let x = input(3, 4);
        assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
        let other = VqVae::new(small(), Domain::Source, 2).unwrap();
        assert_eq!(m.encode(&x).unwrap(), other.encode(&x).unwrap());
    }

    #[test]
    fn exact_row_and_tie_break() {
        let mut rng = seeded_rng(4);
        let cb = tensor_from_fn(&[8, 3], |_| rng.random_range(-1.0..1.0));
        let row7: Vec<f64> = cb.data()[21..24].to_vec();
        let z = Tensor::new(vec![3, 1, 1, 1], row7).unwrap();
        let q = quantize(&cb, &z).unwrap();
        assert_eq!(q.indices, vec![7]);
        assert_eq!(q.codebook_loss, 0.0);
        assert_eq!(q.commitment_loss, 0.0);

        let mut tab = vec![5.0; 8 * 2];
        tab[4..6].copy_from_slice(&[1.0, 0.0]);
        tab[10..12].copy_from_slice(&[-1.0, 0.0]);
        let cb = Tensor::new(vec![8, 2], tab).unwrap();
        let z = Tensor::new(vec![2, 1, 1, 1], vec![0.0, 0.0]).unwrap();
        assert_eq!(quantize(&cb, &z).unwrap().indices, vec![2]);
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = seeded_rng(5);
        let cb = tensor_from_fn(&[16, 4], |_| rng.random_range(-1.0..1.0));
        let z = tensor_from_fn(&[4, 3, 3, 3], |_| rng.random_range(-1.5..1.5));
        let q = quantize(&cb, &z).unwrap();
        for v in 0..27 {
            let dist = |j: usize| -> f64 {
                (0..4).map(|c| (z.data()[c * 27 + v] - cb.data()[j * 4 + c]).powi(2)).sum()
            };
            let best = (0..16).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
            assert_eq!(q.indices[v], best);
        }
        let again = quantize(&cb, &q.zq).unwrap();
        assert_eq!(again.zq, q.zq);
        assert_eq!(again.codebook_loss, 0.0);
    }

    #[test]
    fn straight_through_passes_decoder_gradient() {
        let m = VqVae::new(small(), Domain::Source, 6).unwrap();
        let z0 = m.encode(&input(7, 4)).unwrap();
        let target = input(8, 4);
        // Quantized path: gradient of the reconstruction term w.r.t. z.
        let mut g = Graph::new();
        let cb = g.param(&m.store, m.codebook);
        let z = g.input_with_grad(z0.clone()).unwrap();
        let (zq, _, _, _) = quantize_graph(&mut g, cb, z).unwrap();
        let y = m.decode_graph(&mut g, zq).unwrap();
        let t = g.constant(target.clone()).unwrap();
        let d = g.sub(y, t).unwrap();
        let sq = g.square(d).unwrap();
        let loss = g.mean(sq).unwrap();
        g.backward(loss).unwrap();
        let through = g.input_grad(z).unwrap();
        // Identity path evaluated at the quantized point.
        let zq_val = quantize(m.codebook(), &z0).unwrap().zq;
        let mut h = Graph::new();
        let zi = h.input_with_grad(zq_val).unwrap();
        let y = m.decode_graph(&mut h, zi).unwrap();
        let t = h.constant(target).unwrap();
        let d = h.sub(y, t).unwrap();
        let sq = h.square(d).unwrap();
        let loss = h.mean(sq).unwrap();
        h.backward(loss).unwrap();
        let direct = h.input_grad(zi).unwrap();
        for (a, b) in through.data().iter().zip(direct.data()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-6), "{a} vs {b}");
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_error() {
        let data: Vec<Tensor> = (0..4).map(|s| input(10 + s, 4)).collect();
        let cfg = VqTrainConfig {
            epochs: 6,
            batch_size: 2,
            lr: 3e-3,
            seed: 3,
            ..VqTrainConfig::default()
        };
        let mut a = VqVae::new(small(), Domain::Source, 9).unwrap();
        let ra = train_vqvae(&mut a, &data, &cfg, 0, None).unwrap();
        let mut b = VqVae::new(small(), Domain::Source, 9).unwrap();
        let rb = train_vqvae(&mut b, &data, &cfg, 0, None).unwrap();
        assert_eq!(ra.steps.last().unwrap().total.to_bits(), rb.steps.last().unwrap().total.to_bits());
        assert_eq!(ra.steps.len(), 12);
        assert!(ra.final_mae < ra.initial_mae);
        assert!(train_vqvae(&mut b, &[], &cfg, 0, None).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data: Vec<Tensor> = (0..3).map(|s| input(20 + s, 4)).collect();
        let cfg = VqTrainConfig {
            epochs: 4,
            batch_size: 2,
            seed: 1,
            ..VqTrainConfig::default()
        };
        let mut full = VqVae::new(small(), Domain::Source, 1).unwrap();
        train_vqvae(&mut full, &data, &cfg, 0, None).unwrap();
        let mut part = VqVae::new(small(), Domain::Source, 1).unwrap();
        train_vqvae(&mut part, &data, &cfg, 0, Some(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vq.ckpt");
        part.save(&p, &Metadata::new(), true).unwrap();
        let (mut resumed, _) = VqVae::load(&p).unwrap();
        train_vqvae(&mut resumed, &data, &cfg, 2, None).unwrap();
        for ((_, x), (_, y)) in full.store.iter().zip(resumed.store.iter()) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn zero_epoch_finetune_keeps_weights() {
        let src = VqVae::new(small(), Domain::Source, 2).unwrap();
        let vol = Volume4::new([4, 4, 4, 3], [1.0; 3], input(1, 4).into_data()).unwrap();
        let cfg = VqTrainConfig {
            epochs: 0,
            ..VqTrainConfig::default()
        };
        let mut ready = src.clone();
        ready.codebook_ready = true;
        let (tuned, _) = finetune(&ready, &[vol], &cfg).unwrap();
        assert_eq!(tuned.domain, Domain::Target);
        for ((_, x), (_, y)) in ready.store.iter().zip(tuned.store.iter()) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn normalization_round_trip() {
        let mut m = VqVae::new(small(), Domain::Source, 0).unwrap();
        let vol = Volume4::new([4, 4, 4, 3], [2.0; 3], input(3, 4).into_data().iter().map(|v| v * 7.0).collect()).unwrap();
        m.fit_normalization(std::slice::from_ref(&vol)).unwrap();
        assert!(m.scales.iter().all(|s| *s > 5.0 && *s <= 7.0));
        let back = m.denormalize(&m.normalize(&vol).unwrap(), [2.0; 3]).unwrap();
        for (a, b) in back.data().iter().zip(vol.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
