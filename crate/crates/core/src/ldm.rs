//! Latent diffusion: linear noise schedule, ε-prediction U-Net conditioned
//! on a class label through cross-attention, training with label dropout,
//! deterministic DDIM encoding and guided DDIM sampling.
//!
//! Latent channels are split into three contiguous groups, one per RISH
//! order, and each group can be translated with its own guidance scale and
//! encoding depth.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use tensornet::{
    AdamW, AttentionWeights, Conv3d, Embedding, Graph, GroupNorm, Linear, Metadata, ParamStore,
    Tensor, Var,
};

use crate::error::{arg, Error, Result};
use crate::nn::{load_store, meta_get, meta_parse, parse_list, fmt_list, save_store, shuffled};
use crate::volume::{derive_seed, seeded_rng, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear β from `beta_start` at t = 1 to `beta_end` at t = T.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return arg("schedule needs at least one step");
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return arg(format!("need 0 < β_start ≤ β_end < 1, got {beta_start}, {beta_end}"));
    }
    let mut betas = vec![0.0];
    let mut alphas = vec![1.0];
    let mut alpha_bars = vec![1.0];
    for t in 1..=t_max {
        let b = if t_max == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (t - 1) as f64 / (t_max - 1) as f64
        };
        betas.push(b);
        alphas.push(1.0 - b);
        alpha_bars.push(alpha_bars[t - 1] * (1.0 - b));
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    /// β_t for 1 ≤ t ≤ T (β_0 = 0).
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// ᾱ_t with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return arg(format!("timestep {t} exceeds T = {}", self.steps()));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return arg(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn zip2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Ok(Tensor::new(a.shape().to_vec(), data)?)
}

/// x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
pub fn q_sample(x0: &Tensor, t: usize, noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    zip2(x0, noise, |x, e| a * x + b * e)
}

pub fn standard_normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassLabel {
    Source,
    Target,
    Unconditional,
}

impl ClassLabel {
    /// Row of the class-embedding table.
    pub fn row(self) -> usize {
        match self {
            ClassLabel::Source => 0,
            ClassLabel::Target => 1,
            ClassLabel::Unconditional => 2,
        }
    }
}

/// Anything that predicts ε from (x_t, t, c).
pub trait EpsilonModel {
    fn epsilon(&self, x: &Tensor, t: usize, label: ClassLabel) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    /// Zero-based levels that carry cross-attention.
    pub attention_levels: Vec<usize>,
    pub heads: usize,
    pub context_tokens: usize,
    pub context_dim: usize,
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 32,
            channels: vec![32, 64, 128, 128],
            blocks_per_level: 2,
            attention_levels: vec![2, 3],
            heads: 4,
            context_tokens: 4,
            context_dim: 64,
            time_dim: 128,
        }
    }
}

fn groups_for(c: usize) -> usize {
    (1..=8.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
struct TimeResBlock {
    n1: GroupNorm,
    c1: Conv3d,
    temb: Linear,
    n2: GroupNorm,
    c2: Conv3d,
    skip: Option<Conv3d>,
}

impl TimeResBlock {
    fn new(s: &mut ParamStore, name: &str, cin: usize, cout: usize, tdim: usize, rng: &mut Rng) -> Self {
        Self {
            n1: GroupNorm::new(s, &format!("{name}.n1"), cin, groups_for(cin)),
            c1: Conv3d::new(s, &format!("{name}.c1"), cin, cout, 3, 1, rng),
            temb: Linear::new(s, &format!("{name}.t"), tdim, cout, rng),
            n2: GroupNorm::new(s, &format!("{name}.n2"), cout, groups_for(cout)),
            c2: Conv3d::new(s, &format!("{name}.c2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv3d::new(s, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, temb: Var) -> Result<Var> {
        let h = self.n1.forward(g, s, x)?;
        let h = g.silu(h)?;
        let h = self.c1.forward(g, s, h)?;
        let t = self.temb.forward(g, s, temb)?;
        let cout = g.shape(t)[1];
        let t = g.reshape(t, &[cout])?;
        let h = g.add_channel_bias(h, t)?;
        let h = self.n2.forward(g, s, h)?;
        let h = g.silu(h)?;
        let h = self.c2.forward(g, s, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(g, s, x)?,
            None => x,
        };
        Ok(g.add(skip, h)?)
    }
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm: GroupNorm,
    attn: AttentionWeights,
}

impl AttnBlock {
    fn new(s: &mut ParamStore, name: &str, c: usize, cfg: &UNetConfig, rng: &mut Rng) -> Self {
        Self {
            norm: GroupNorm::new(s, &format!("{name}.n"), c, groups_for(c)),
            attn: AttentionWeights::new(s, &format!("{name}.a"), c, cfg.context_dim, cfg.heads, c / cfg.heads, rng),
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, ctx: Var) -> Result<Var> {
        let h = self.norm.forward(g, s, x)?;
        let h = self.attn.forward(g, s, h, ctx)?;
        Ok(g.add(x, h)?)
    }
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<(TimeResBlock, Option<AttnBlock>)>,
    down: Option<Conv3d>,
}

#[derive(Clone, Debug)]
struct UpLevel {
    blocks: Vec<(TimeResBlock, Option<AttnBlock>)>,
    /// Upsample then convolve to the next (shallower) level's width.
    up: Option<Conv3d>,
}

/// ε-prediction U-Net with class cross-attention.
#[derive(Clone, Debug)]
pub struct DenoiserNet {
    pub config: UNetConfig,
    pub store: ParamStore,
    /// Multiplier taking raw latents to unit standard deviation.
    pub latent_scale: f64,
    class_emb: Embedding,
    t1: Linear,
    t2: Linear,
    conv_in: Conv3d,
    down: Vec<Level>,
    mid: (TimeResBlock, AttnBlock, TimeResBlock),
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv3d,
}

/// Sinusoidal features of a timestep.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

impl DenoiserNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.channels.is_empty() || config.heads == 0 || config.time_dim < 2 {
            return arg("U-Net needs at least one level, one head and a time dimension ≥ 2");
        }
        if let Some(c) = config
            .attention_levels
            .iter()
            .map(|&l| config.channels.get(l).copied().unwrap_or(0))
            .find(|&c| c == 0 || c % config.heads != 0)
        {
            return arg(format!("attention width {c} not divisible by {} heads", config.heads));
        }
        let mut rng = seeded_rng(derive_seed(seed, "unet-init", 0));
        let r = &mut rng;
        let mut s = ParamStore::new();
        let td = config.time_dim;
        let ch = &config.channels;
        let nl = ch.len();
        let class_emb = Embedding::new(&mut s, "class", 3, config.context_tokens * config.context_dim, r);
        let t1 = Linear::new(&mut s, "time.1", td / 8 * 2, td, r);
        let t2 = Linear::new(&mut s, "time.2", td, td, r);
        let conv_in = Conv3d::new(&mut s, "in", config.latent_channels, ch[0], 3, 1, r);
        let attn_at = |l: usize| config.attention_levels.contains(&l);
        let mut down = Vec::new();
        let mut cur = ch[0];
        for l in 0..nl {
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_level {
                let name = format!("down.{l}.{b}");
                let rb = TimeResBlock::new(&mut s, &name, cur, ch[l], td, r);
                cur = ch[l];
                let at = attn_at(l).then(|| AttnBlock::new(&mut s, &format!("{name}.attn"), cur, &config, r));
                blocks.push((rb, at));
            }
            let dn = (l + 1 < nl).then(|| Conv3d::new(&mut s, &format!("down.{l}.ds"), cur, cur, 3, 2, r));
            down.push(Level { blocks, down: dn });
        }
        let mid = (
            TimeResBlock::new(&mut s, "mid.1", cur, cur, td, r),
            AttnBlock::new(&mut s, "mid.attn", cur, &config, r),
            TimeResBlock::new(&mut s, "mid.2", cur, cur, td, r),
        );
        let mut up = Vec::new();
        for l in (0..nl).rev() {
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_level {
                let name = format!("up.{l}.{b}");
                let cin = if b == 0 { cur + ch[l] } else { ch[l] };
                let rb = TimeResBlock::new(&mut s, &name, cin, ch[l], td, r);
                cur = ch[l];
                let at = attn_at(l).then(|| AttnBlock::new(&mut s, &format!("{name}.attn"), cur, &config, r));
                blocks.push((rb, at));
            }
            let upc = (l > 0).then(|| Conv3d::new(&mut s, &format!("up.{l}.us"), cur, ch[l - 1], 3, 1, r));
            if l > 0 {
                cur = ch[l - 1];
            }
            up.push(UpLevel { blocks, up: upc });
        }
        let norm_out = GroupNorm::new(&mut s, "out.norm", cur, groups_for(cur));
        let conv_out = Conv3d::new_zeroed(&mut s, "out.conv", cur, config.latent_channels, 3);
        Ok(Self {
            config,
            store: s,
            latent_scale: 1.0,
            class_emb,
            t1,
            t2,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
        })
    }

    /// Minimum spatial size divisor for inputs.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.config.channels.len() - 1)
    }

    /// Records ε_θ(x, t, c) onto `g`. Also returns the class-embedding
    /// lookup node so callers can inspect which row was used.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, t: usize, label: ClassLabel) -> Result<(Var, Var)> {
        let xs = g.shape(x).to_vec();
        let div = self.spatial_divisor();
        if xs.len() != 4 || xs[0] != self.config.latent_channels || xs[1..].iter().any(|&n| n == 0 || n % div != 0) {
            return arg(format!(
                "U-Net expects [{}, d, h, w] with spatial dims divisible by {div}, got {xs:?}",
                self.config.latent_channels
            ));
        }
        let s = &self.store;
        let lookup = self.class_emb.forward(g, s, &[label.row()])?;
        let ctx = g.reshape(lookup, &[self.config.context_tokens, self.config.context_dim])?;
        let feats = timestep_features(t, self.config.time_dim / 8 * 2);
        let n = feats.len();
        let tv = g.constant(Tensor::new(vec![1, n], feats)?)?;
        let temb = self.t1.forward(g, s, tv)?;
        let temb = g.silu(temb)?;
        let temb = self.t2.forward(g, s, temb)?;
        let temb = g.silu(temb)?;

        let mut h = self.conv_in.forward(g, s, x)?;
        let mut skips = Vec::new();
        for level in &self.down {
            for (rb, at) in &level.blocks {
                h = rb.forward(g, s, h, temb)?;
                if let Some(a) = at {
                    h = a.forward(g, s, h, ctx)?;
                }
            }
            skips.push(h);
            if let Some(d) = &level.down {
                h = d.forward(g, s, h)?;
            }
        }
        h = self.mid.0.forward(g, s, h, temb)?;
        h = self.mid.1.forward(g, s, h, ctx)?;
        h = self.mid.2.forward(g, s, h, temb)?;
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = g.concat_channels(h, skip)?;
            for (rb, at) in &level.blocks {
                h = rb.forward(g, s, h, temb)?;
                if let Some(a) = at {
                    h = a.forward(g, s, h, ctx)?;
                }
            }
            if let Some(u) = &level.up {
                h = g.upsample2(h)?;
                h = u.forward(g, s, h)?;
            }
        }
        h = self.norm_out.forward(g, s, h)?;
        h = g.silu(h)?;
        Ok((self.conv_out.forward(g, s, h)?, lookup))
    }

    pub fn metadata(&self) -> Metadata {
        let c = &self.config;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut m = Metadata::new();
        m.insert("kind".into(), "unet".into());
        m.insert("latent_channels".into(), c.latent_channels.to_string());
        m.insert("channels".into(), list(&c.channels));
        m.insert("blocks_per_level".into(), c.blocks_per_level.to_string());
        m.insert("attention_levels".into(), list(&c.attention_levels));
        m.insert("heads".into(), c.heads.to_string());
        m.insert("context_tokens".into(), c.context_tokens.to_string());
        m.insert("context_dim".into(), c.context_dim.to_string());
        m.insert("time_dim".into(), c.time_dim.to_string());
        m.insert("latent_scale".into(), fmt_list(&[self.latent_scale]));
        m
    }

    pub fn from_parts(store: &ParamStore, meta: &Metadata) -> Result<Self> {
        if meta_get(meta, "kind")? != "unet" {
            return Err(Error::Format {
                offset: 0,
                msg: "checkpoint does not hold a U-Net".into(),
            });
        }
        let usizes = |key: &str| -> Result<Vec<usize>> {
            let s = meta_get(meta, key)?;
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|x| {
                    x.parse().map_err(|_| Error::Format {
                        offset: 0,
                        msg: format!("checkpoint metadata `{key}` is malformed"),
                    })
                })
                .collect()
        };
        let config = UNetConfig {
            latent_channels: meta_parse(meta, "latent_channels")?,
            channels: usizes("channels")?,
            blocks_per_level: meta_parse(meta, "blocks_per_level")?,
            attention_levels: usizes("attention_levels")?,
            heads: meta_parse(meta, "heads")?,
            context_tokens: meta_parse(meta, "context_tokens")?,
            context_dim: meta_parse(meta, "context_dim")?,
            time_dim: meta_parse(meta, "time_dim")?,
        };
        let mut net = Self::new(config, 0)?;
        net.store.load_from(store, true)?;
        net.latent_scale = parse_list(meta, "latent_scale")?[0];
        Ok(net)
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

impl EpsilonModel for DenoiserNet {
    fn epsilon(&self, x: &Tensor, t: usize, label: ClassLabel) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let (eps, _) = self.forward_graph(&mut g, xv, t, label)?;
        Ok(g.value(eps).clone())
    }
}

/// (1+ω)·cond − ω·uncond, elementwise.
pub fn combine_guidance(cond: &Tensor, uncond: &Tensor, omega: f64) -> Result<Tensor> {
    zip2(cond, uncond, |a, b| (1.0 + omega) * a - omega * b)
}

/// Guided prediction ε̄. At ω = 0 the unconditional pass is skipped and the
/// conditional prediction is returned unchanged.
pub fn guided_epsilon(
    net: &impl EpsilonModel,
    x: &Tensor,
    t: usize,
    label: ClassLabel,
    omega: f64,
) -> Result<Tensor> {
    if omega < 0.0 {
        return arg(format!("guidance scale must be ≥ 0, got {omega}"));
    }
    let cond = net.epsilon(x, t, label)?;
    if omega == 0.0 {
        return Ok(cond);
    }
    let uncond = net.epsilon(x, t, ClassLabel::Unconditional)?;
    combine_guidance(&cond, &uncond, omega)
}

fn check_stride(t: usize, stride: usize) -> Result<()> {
    if stride == 0 || t % stride != 0 {
        return arg(format!("DDIM stride {stride} must divide the step range {t}"));
    }
    Ok(())
}

/// Deterministic DDIM inversion from x_0 to x_{t_enc}.
pub fn ddim_encode(
    net: &impl EpsilonModel,
    x0: &Tensor,
    t_enc: usize,
    label: ClassLabel,
    stride: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_t(t_enc)?;
    if t_enc == 0 {
        return Ok(x0.clone());
    }
    check_stride(t_enc, stride)?;
    let mut x = x0.clone();
    let mut t = 0;
    while t < t_enc {
        let next = t + stride;
        let (a, an) = (schedule.alpha_bar(t), schedule.alpha_bar(next));
        let eps = net.epsilon(&x, t, label)?;
        let cx = (1.0 / a).sqrt() - (1.0 / an).sqrt();
        let ce = (1.0 / an - 1.0).sqrt() - (1.0 / a - 1.0).sqrt();
        let san = an.sqrt();
        x = zip2(&x, &eps, |xv, ev| xv + san * (cx * xv + ce * ev))?;
        t = next;
    }
    Ok(x)
}

/// One row of the sampling log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleLogRow {
    pub group: usize,
    pub t: usize,
    pub mean_abs_eps: f64,
}

pub fn sample_log_csv(rows: &[SampleLogRow]) -> String {
    let mut s = String::from("group,t,mean_abs_eps\n");
    for r in rows {
        s.push_str(&format!("{},{},{:e}\n", r.group, r.t, r.mean_abs_eps));
    }
    s
}

/// Guided deterministic DDIM from x_{t_start} down to x_0.
pub fn ddim_sample(
    net: &impl EpsilonModel,
    xt: &Tensor,
    t_start: usize,
    label: ClassLabel,
    omega: f64,
    stride: usize,
    schedule: &NoiseSchedule,
    log: &mut Vec<SampleLogRow>,
    group: usize,
) -> Result<Tensor> {
    schedule.check_t(t_start)?;
    if t_start == 0 {
        return Ok(xt.clone());
    }
    check_stride(t_start, stride)?;
    let mut x = xt.clone();
    let mut t = t_start;
    while t > 0 {
        let prev = t - stride;
        let eps = guided_epsilon(net, &x, t, label, omega)?;
        let mean_abs = eps.data().iter().map(|v| v.abs()).sum::<f64>() / eps.numel() as f64;
        log.push(SampleLogRow {
            group,
            t,
            mean_abs_eps: mean_abs,
        });
        let (a, ap) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
        let (sa, s1a) = (a.sqrt(), (1.0 - a).sqrt());
        let (sap, s1ap) = (ap.sqrt(), (1.0 - ap).sqrt());
        x = zip2(&x, &eps, |xv, ev| {
            let x0 = (xv - s1a * ev) / sa;
            sap * x0 + s1ap * ev
        })?;
        t = prev;
    }
    Ok(x)
}

/// Per-group translation controls.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub omega: [f64; 3],
    pub t_enc: [usize; 3],
    pub stride: usize,
    /// Encode under the unconditional label instead of the source label.
    pub encode_unconditional: bool,
}

impl SamplerConfig {
    pub fn for_steps(t_max: usize) -> Self {
        let frac = |f: f64| ((f * t_max as f64 / 20.0).round() as usize) * 20;
        Self {
            omega: [1.0, 2.0, 3.0],
            t_enc: [frac(0.3), frac(0.5), frac(0.6)].map(|t| t.min(t_max)),
            stride: 20,
            encode_unconditional: false,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.omega.iter().any(|w| !(*w >= 0.0)) {
            return arg("guidance scales must be ≥ 0");
        }
        for &t in &self.t_enc {
            schedule.check_t(t)?;
            if t > 0 {
                check_stride(t, self.stride)?;
            }
        }
        Ok(())
    }
}

/// Group (0, 1, 2) of each latent channel: channel c belongs to ⌊3c/D⌋.
pub fn channel_groups(channels: usize) -> Vec<usize> {
    (0..channels).map(|c| 3 * c / channels).collect()
}

/// Encode under the source label and sample toward the target label, once
/// per channel group, keeping each run's channels of that group. Input and
/// output are raw latents; scaling by `latent_scale` happens inside.
pub fn translate(
    net: &DenoiserNet,
    z: &Tensor,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    log: &mut Vec<SampleLogRow>,
) -> Result<Tensor> {
    translate_with(net, net.latent_scale, z, cfg, schedule, log)
}

pub fn translate_with(
    net: &impl EpsilonModel,
    latent_scale: f64,
    z: &Tensor,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    log: &mut Vec<SampleLogRow>,
) -> Result<Tensor> {
    cfg.validate(schedule)?;
    let c = z.shape()[0];
    let per = z.numel() / c;
    let groups = channel_groups(c);
    let x0 = Tensor::new(z.shape().to_vec(), z.data().iter().map(|v| v * latent_scale).collect())?;
    let enc_label = if cfg.encode_unconditional {
        ClassLabel::Unconditional
    } else {
        ClassLabel::Source
    };
    let mut out = z.data().to_vec();
    for k in 0..3 {
        if cfg.t_enc[k] == 0 || !groups.contains(&k) {
            continue;
        }
        let xt = ddim_encode(net, &x0, cfg.t_enc[k], enc_label, cfg.stride, schedule)?;
        let y = ddim_sample(net, &xt, cfg.t_enc[k], ClassLabel::Target, cfg.omega[k], cfg.stride, schedule, log, k)?;
        for ch in (0..c).filter(|&ch| groups[ch] == k) {
            for i in ch * per..(ch + 1) * per {
                out[i] = y.data()[i] / latent_scale;
            }
        }
    }
    Ok(Tensor::new(z.shape().to_vec(), out)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub drop_prob: f64,
    pub seed: u64,
}

impl Default for LdmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            lr: 1e-3,
            drop_prob: 0.1,
            seed: 0,
        }
    }
}

/// Label bookkeeping across training steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LabelCounter {
    pub seen: usize,
    pub dropped: usize,
}

/// Draw t, ε and the (possibly dropped) label for one sample.
pub fn draw_training_sample(
    label: ClassLabel,
    shape: &[usize],
    schedule: &NoiseSchedule,
    drop_prob: f64,
    rng: &mut Rng,
    counter: &mut LabelCounter,
) -> (usize, Tensor, ClassLabel) {
    let t = rng.random_range(1..=schedule.steps());
    let eps = standard_normal(shape, rng);
    let drop = rng.random::<f64>() < drop_prob;
    counter.seen += 1;
    let used = if drop {
        counter.dropped += 1;
        ClassLabel::Unconditional
    } else {
        label
    };
    (t, eps, used)
}

/// One optimizer step on a batch of (x0, label) pairs; returns the mean
/// ε-prediction MSE.
pub fn train_step(
    net: &mut DenoiserNet,
    batch: &[(&Tensor, ClassLabel)],
    schedule: &NoiseSchedule,
    drop_prob: f64,
    lr: f64,
    rng: &mut Rng,
    counter: &mut LabelCounter,
) -> Result<f64> {
    if batch.is_empty() {
        return arg("empty batch");
    }
    if !(0.0..1.0).contains(&drop_prob) {
        return arg(format!("drop probability must lie in [0, 1), got {drop_prob}"));
    }
    let mut g = Graph::new();
    let mut total: Option<Var> = None;
    for (x0, label) in batch {
        if *label == ClassLabel::Unconditional {
            return arg("training labels must be source or target");
        }
        let (t, eps, used) = draw_training_sample(*label, x0.shape(), schedule, drop_prob, rng, counter);
        let xt = q_sample(x0, t, &eps, schedule)?;
        let xv = g.constant(xt)?;
        let (pred, _) = net.forward_graph(&mut g, xv, t, used)?;
        let ev = g.constant(eps)?;
        let d = g.sub(pred, ev)?;
        let sq = g.square(d)?;
        let l = g.mean(sq)?;
        total = Some(match total {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    AdamW::with_lr(lr).step(&mut net.store, &grads);
    if !net.store.all_finite() {
        return Err(Error::Numerical("U-Net parameters became non-finite".into()));
    }
    Ok(value)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LdmTrainReport {
    /// (epoch, step, loss)
    pub steps: Vec<(usize, usize, f64)>,
    pub counter: LabelCounter,
}

impl LdmTrainReport {
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self.steps.iter().filter(|s| s.0 == epoch).map(|s| s.2).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,loss\n");
        for (e, st, l) in &self.steps {
            s.push_str(&format!("{e},{st},{l:e}\n"));
        }
        s
    }
}

/// Set `latent_scale` to the reciprocal standard deviation of all latent
/// values.
pub fn fit_latent_scale(net: &mut DenoiserNet, latents: &[Tensor]) -> Result<()> {
    let vals: Vec<f64> = latents.iter().flat_map(|t| t.data().iter().copied()).collect();
    if vals.is_empty() {
        return arg("no latents to fit a scale on");
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    if !(var > 0.0) {
        return Err(Error::Numerical("latents have zero variance".into()));
    }
    net.latent_scale = 1.0 / var.sqrt();
    Ok(())
}

/// Train on raw latents with class labels for epochs `start_epoch..epochs`
/// (at most `stop_after` of them). Per-epoch RNG streams make resuming at an
/// epoch boundary exact.
pub fn train_ldm(
    net: &mut DenoiserNet,
    data: &[(Tensor, ClassLabel)],
    schedule: &NoiseSchedule,
    cfg: &LdmTrainConfig,
    start_epoch: usize,
    stop_after: Option<usize>,
) -> Result<LdmTrainReport> {
    if data.is_empty() {
        return arg("diffusion training needs a non-empty dataset");
    }
    if cfg.batch_size == 0 {
        return arg("batch size must be positive");
    }
    let scaled: Vec<(Tensor, ClassLabel)> = data
        .iter()
        .map(|(t, c)| {
            let d = t.data().iter().map(|v| v * net.latent_scale).collect();
            Ok((Tensor::new(t.shape().to_vec(), d)?, *c))
        })
        .collect::<Result<_>>()?;
    let mut report = LdmTrainReport::default();
    let end = stop_after.map_or(cfg.epochs, |s| (start_epoch + s).min(cfg.epochs));
    for epoch in start_epoch..end {
        let mut rng = seeded_rng(derive_seed(cfg.seed, "ldm-epoch", epoch as u64));
        let order = shuffled(scaled.len(), &mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&Tensor, ClassLabel)> = chunk.iter().map(|&i| (&scaled[i].0, scaled[i].1)).collect();
            let loss = train_step(net, &batch, schedule, cfg.drop_prob, cfg.lr, &mut rng, &mut report.counter)?;
            report.steps.push((epoch, step, loss));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tensornet::layers::tensor_from_fn;

    struct Zero;
    impl EpsilonModel for Zero {
        fn epsilon(&self, x: &Tensor, _: usize, _: ClassLabel) -> Result<Tensor> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    fn tiny() -> UNetConfig {
        UNetConfig {
            latent_channels: 4,
            channels: vec![8, 8, 16],
            blocks_per_level: 1,
            attention_levels: vec![1, 2],
            heads: 2,
            context_tokens: 2,
            context_dim: 8,
            time_dim: 16,
        }
    }

    fn latent(seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        standard_normal(&[4, 4, 4, 4], &mut rng)
    }

    #[test]
    fn schedule_tables() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let ab: f64 = (1..=1000).map(|t| 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0)).product();
        assert!((s.alpha_bar(1000) - ab).abs() < 1e-15);
        assert!((s.alpha_bar(1000) - 4.0e-5).abs() < 0.2 * 4.0e-5);
        assert!((1..=1000).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        assert_eq!(s.alpha_bar(0), 1.0);
        let one = make_schedule(1, 0.3, 0.3).unwrap();
        assert_eq!(one.alpha_bar(1), 1.0 - 0.3);
        assert!(make_schedule(10, 0.2, 0.1).is_err());
    }

    #[test]
    fn q_sample_edges() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x = latent(1);
        let e = latent(2);
        assert_eq!(q_sample(&x, 0, &e, &s).unwrap(), x);
        let z = q_sample(&x, 40, &Tensor::zeros(x.shape()), &s).unwrap();
        let k = s.alpha_bar(40).sqrt();
        assert!(z.data().iter().zip(x.data()).all(|(a, b)| *a == k * b));
    }

    #[test]
    fn unconditional_uses_null_row() {
        let net = DenoiserNet::new(tiny(), 1).unwrap();
        for (label, row) in [(ClassLabel::Source, 0), (ClassLabel::Target, 1), (ClassLabel::Unconditional, 2)] {
            let mut g = Graph::new();
            let x = g.constant(latent(3)).unwrap();
            let (eps, lookup) = net.forward_graph(&mut g, x, 10, label).unwrap();
            assert_eq!(g.gathered_indices(lookup), Some(&[row][..]));
            assert_eq!(g.shape(eps), &[4, 4, 4, 4]);
        }
    }

    #[test]
    fn zero_dropout_never_drops() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = seeded_rng(1);
        let mut c = LabelCounter::default();
        for _ in 0..1000 {
            draw_training_sample(ClassLabel::Target, &[1], &s, 0.0, &mut rng, &mut c);
        }
        assert_eq!(c.dropped, 0);
        assert_eq!(c.seen, 1000);
    }

    #[test]
    fn zero_net_encode_and_sample_rescale() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x = latent(4);
        let e = ddim_encode(&Zero, &x, 200, ClassLabel::Source, 20, &s).unwrap();
        let k = s.alpha_bar(200).sqrt();
        for (a, b) in e.data().iter().zip(x.data()) {
            assert!((a - k * b).abs() < 1e-12);
        }
        let back = ddim_sample(&Zero, &e, 200, ClassLabel::Target, 2.0, 20, &s, &mut Vec::new(), 0).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(ddim_encode(&Zero, &x, 30, ClassLabel::Source, 20, &s).is_err());
    }

    #[test]
    fn omega_zero_is_conditional() {
        let net = DenoiserNet::new(tiny(), 2).unwrap();
        let x = latent(5);
        let cond = net.epsilon(&x, 7, ClassLabel::Target).unwrap();
        assert_eq!(guided_epsilon(&net, &x, 7, ClassLabel::Target, 0.0).unwrap(), cond);
        let a = tensor_from_fn(&[5], |i| i as f64 * 0.3 - 1.0);
        let b = tensor_from_fn(&[5], |i| (i as f64).sin());
        let c = combine_guidance(&a, &b, 2.0).unwrap();
        for i in 0..5 {
            assert!((c.data()[i] - (3.0 * a.data()[i] - 2.0 * b.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn translate_keeps_untouched_groups() {
        let net = DenoiserNet::new(tiny(), 3).unwrap();
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let z = latent(6);
        let none = SamplerConfig {
            omega: [1.0; 3],
            t_enc: [0; 3],
            stride: 10,
            encode_unconditional: false,
        };
        assert_eq!(translate(&net, &z, &none, &s, &mut Vec::new()).unwrap(), z);
        let one = SamplerConfig {
            t_enc: [0, 20, 0],
            ..none
        };
        let mut log = Vec::new();
        let out = translate(&net, &z, &one, &s, &mut log).unwrap();
        assert_eq!(log.len(), 2);
        assert!(log.iter().all(|r| r.group == 1));
        let groups = channel_groups(4);
        let per = z.numel() / 4;
        for ch in 0..4 {
            let same = out.data()[ch * per..(ch + 1) * per] == z.data()[ch * per..(ch + 1) * per];
            assert_eq!(same, groups[ch] != 1, "channel {ch}");
        }
        assert_eq!(out, translate(&net, &z, &one, &s, &mut Vec::new()).unwrap());
    }

    #[test]
    fn channel_group_sizes() {
        let g = channel_groups(32);
        let count = |k| g.iter().filter(|&&x| x == k).count();
        assert_eq!((count(0), count(1), count(2)), (11, 11, 10));
    }

    #[test]
    fn training_reduces_loss_and_resumes_exactly() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let data: Vec<(Tensor, ClassLabel)> = (0..4)
            .map(|i| {
                let c = if i % 2 == 0 { ClassLabel::Source } else { ClassLabel::Target };
                (tensor_from_fn(&[4, 4, 4, 4], |j| ((j + i) as f64 * 0.37).sin()), c)
            })
            .collect();
        let cfg = LdmTrainConfig {
            epochs: 4,
            batch_size: 2,
            lr: 2e-3,
            drop_prob: 0.1,
            seed: 5,
        };
        let mut full = DenoiserNet::new(tiny(), 4).unwrap();
        let r = train_ldm(&mut full, &data, &s, &cfg, 0, None).unwrap();
        assert_eq!(r.steps.len(), 8);
        assert_eq!(r.counter.seen, 16);
        let mut part = DenoiserNet::new(tiny(), 4).unwrap();
        train_ldm(&mut part, &data, &s, &cfg, 0, Some(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("unet.ckpt");
        part.save(&p, &Metadata::new(), true).unwrap();
        let (mut resumed, _) = DenoiserNet::load(&p).unwrap();
        let tail = train_ldm(&mut resumed, &data, &s, &cfg, 3, None).unwrap();
        assert_eq!(tail.steps.last().unwrap().2.to_bits(), r.steps.last().unwrap().2.to_bits());
        for ((_, a), (_, b)) in full.store.iter().zip(resumed.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }
}
