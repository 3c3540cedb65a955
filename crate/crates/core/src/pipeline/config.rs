//! Flat `key = value` configuration with documented defaults.
//!
//! Lines starting with `#` are comments. Unknown keys are rejected. Every
//! stage fingerprints only the keys it depends on, so changing sampler
//! settings never invalidates autoencoder checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::ldm::{SamplerConfig, UNetConfig};
use crate::phantom::{DomainConfig, PhantomConfig};
use crate::superres::SrConfig;
use crate::vqvae::VqVaeConfig;

/// (key, default, description)
const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "7", "base seed for every stage"),
    ("data.subjects", "36", "number of phantom subjects"),
    ("data.paired", "8", "training subjects whose 7T data may be used"),
    ("data.test_fraction", "0.1", "fraction of subjects held out for testing"),
    ("phantom.source_dims", "16", "3T grid size per axis"),
    ("phantom.target_dims", "19", "7T grid size per axis"),
    ("phantom.source_voxel", "1.25", "3T voxel size, mm"),
    ("phantom.target_voxel", "1.05", "7T voxel size, mm"),
    ("phantom.source_snr", "20", "3T signal-to-noise ratio"),
    ("phantom.target_snr", "50", "7T signal-to-noise ratio"),
    ("phantom.source_directions", "60", "3T gradient directions"),
    ("phantom.target_directions", "64", "7T gradient directions"),
    ("phantom.baselines", "4", "b=0 volumes per domain"),
    ("phantom.bval", "1000", "b-value, s/mm²"),
    ("phantom.s0", "1000", "baseline signal inside the mask"),
    ("phantom.mask_radius", "8.5", "mean brain-mask radius, mm"),
    ("phantom.contrast_gains", "1.1,1.25,1.4", "7T/3T coefficient gain for orders 0, 2, 4"),
    ("phantom.contrast_amplitude", "0.2", "amplitude of the spatial contrast field"),
    ("phantom.contrast_seed", "7", "seed of the scanner contrast field"),
    ("sh.order", "4", "maximum SH order (orders 0, 2, 4)"),
    ("sh.lambda", "0.006", "Laplace-Beltrami regularization"),
    ("sh.tau", "1e-8", "scale-map denominator floor"),
    ("vq.base_channels", "16", "VQ-VAE width at full resolution"),
    ("vq.levels", "1", "VQ-VAE downsampling stages (factor 2^levels)"),
    ("vq.embedding_dim", "32", "codebook vector length"),
    ("vq.num_embeddings", "256", "codebook size"),
    ("vq.epochs", "60", "3T VQ-VAE epochs"),
    ("vq.batch", "1", "VQ-VAE batch size"),
    ("vq.lr", "2e-3", "3T VQ-VAE learning rate"),
    ("finetune.epochs", "30", "7T fine-tuning epochs"),
    ("finetune.lr", "3e-4", "7T fine-tuning learning rate"),
    ("scratch.epochs", "60", "7T from-scratch epochs (ablation)"),
    ("scratch.lr", "2e-3", "7T from-scratch learning rate (ablation)"),
    ("ldm.steps", "1000", "diffusion steps T"),
    ("ldm.beta_start", "1e-4", "β_1"),
    ("ldm.beta_end", "0.02", "β_T"),
    ("ldm.channels", "32,64,128,128", "U-Net widths per level"),
    ("ldm.blocks", "2", "residual blocks per level"),
    ("ldm.attention_levels", "2,3", "zero-based U-Net levels with cross-attention"),
    ("ldm.heads", "4", "attention heads"),
    ("ldm.context_tokens", "4", "class-embedding tokens"),
    ("ldm.context_dim", "64", "class-embedding token width"),
    ("ldm.time_dim", "128", "timestep embedding width"),
    ("ldm.epochs", "100", "diffusion training epochs"),
    ("ldm.batch", "4", "diffusion batch size"),
    ("ldm.lr", "1e-3", "diffusion learning rate"),
    ("ldm.drop_prob", "0.1", "label dropout probability"),
    ("sampler.omega", "1,2,3", "guidance scale per order group"),
    ("sampler.t_enc", "300,500,600", "encoding depth per order group"),
    ("sampler.stride", "20", "DDIM stride"),
    ("sampler.encode_unconditional", "false", "encode with the null label instead of 3T"),
    ("sr.width", "32", "super-resolution feature width"),
    ("sr.blocks", "4", "super-resolution residual blocks"),
    ("sr.epochs", "20", "super-resolution epochs"),
    ("sr.batch", "2", "super-resolution batch size"),
    ("sr.lr", "5e-4", "super-resolution learning rate"),
];

/// Pipeline stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Phantom,
    FitRish,
    Vqvae3t,
    Vqvae7tFinetune,
    Vqvae7tScratch,
    Ldm,
    Sr,
    Infer,
}

impl Stage {
    pub const TRAINABLE: [Stage; 5] = [
        Stage::Vqvae3t,
        Stage::Vqvae7tFinetune,
        Stage::Vqvae7tScratch,
        Stage::Ldm,
        Stage::Sr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::FitRish => "fit-rish",
            Stage::Vqvae3t => "vqvae3t",
            Stage::Vqvae7tFinetune => "vqvae7t-finetune",
            Stage::Vqvae7tScratch => "vqvae7t-scratch",
            Stage::Ldm => "ldm",
            Stage::Sr => "sr",
            Stage::Infer => "infer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::TRAINABLE
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown training stage `{s}`")))
    }

    /// Key prefixes whose values this stage's outputs depend on.
    fn sections(self) -> &'static [&'static str] {
        match self {
            Stage::Phantom => &["seed", "data.", "phantom."],
            Stage::FitRish => &["seed", "data.", "phantom.", "sh."],
            Stage::Vqvae3t => &["seed", "data.", "phantom.", "sh.", "vq."],
            Stage::Vqvae7tFinetune => &["seed", "data.", "phantom.", "sh.", "vq.", "finetune."],
            Stage::Vqvae7tScratch => &["seed", "data.", "phantom.", "sh.", "vq.", "scratch."],
            Stage::Ldm => &["seed", "data.", "phantom.", "sh.", "vq.", "finetune.", "ldm."],
            Stage::Sr => &["seed", "data.", "phantom.", "sh.", "vq.", "finetune.", "sr."],
            Stage::Infer => {
                &["seed", "data.", "phantom.", "sh.", "vq.", "finetune.", "ldm.", "sampler.", "sr."]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    values: BTreeMap<String, String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return cfg_err(format!("line {}: expected `key = value`", i + 1));
            };
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => cfg_err(format!("unknown key `{key}`")),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[key]
    }

    /// Resolved configuration with every key and its description.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _, doc) in KEYS {
            s.push_str(&format!("# {doc}\n{k} = {}\n", self.values[*k]));
        }
        s
    }

    /// SHA-256 over the keys `stage` depends on.
    pub fn fingerprint(&self, stage: Stage) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if stage.sections().iter().any(|p| k == p || (p.ends_with('.') && k.starts_with(p))) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .or_else(|_| cfg_err(format!("`{key}` = `{}` is not a valid number", self.get(key))))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .or_else(|_| cfg_err(format!("`{key}` has an invalid entry `{s}`")))
            })
            .collect()
    }

    fn triple<T: std::str::FromStr + Copy>(&self, key: &str) -> Result<[T; 3]> {
        let v: Vec<T> = self.list(key)?;
        v.try_into().or_else(|_| cfg_err(format!("`{key}` needs exactly three entries")))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => cfg_err(format!("`{key}` must be true or false, got `{other}`")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects()? == 0 {
            return cfg_err("data.subjects must be positive");
        }
        let (test, paired) = (self.test_count()?, self.paired()?);
        if test == 0 || test + paired > self.subjects()? {
            return cfg_err("split needs at least one test subject and enough subjects for the paired set");
        }
        if self.sh_order()? != 4 {
            return cfg_err("sh.order is fixed at 4 (orders 0, 2, 4)");
        }
        self.phantom()?.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.vqvae()?;
        self.unet()?;
        self.sampler()?;
        self.flag("sampler.encode_unconditional")?;
        for k in ["vq.lr", "finetune.lr", "scratch.lr", "ldm.lr", "sr.lr", "sh.tau", "ldm.drop_prob"] {
            let v: f64 = self.num(k)?;
            if !v.is_finite() || v < 0.0 {
                return cfg_err(format!("`{k}` must be a non-negative number"));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.num("seed")
    }

    pub fn subjects(&self) -> Result<usize> {
        self.num("data.subjects")
    }

    pub fn paired(&self) -> Result<usize> {
        self.num("data.paired")
    }

    pub fn test_count(&self) -> Result<usize> {
        let f: f64 = self.num("data.test_fraction")?;
        if !(0.0..1.0).contains(&f) {
            return cfg_err("data.test_fraction must lie in [0, 1)");
        }
        Ok(((self.subjects()? as f64) * f).round().max(1.0) as usize)
    }

    pub fn sh_order(&self) -> Result<usize> {
        self.num("sh.order")
    }

    pub fn sh_lambda(&self) -> Result<f64> {
        self.num("sh.lambda")
    }

    pub fn tau(&self) -> Result<f64> {
        self.num("sh.tau")
    }

    pub fn phantom(&self) -> Result<PhantomConfig> {
        let domain = |p: &str| -> Result<DomainConfig> {
            let n: usize = self.num(&format!("phantom.{p}_dims"))?;
            Ok(DomainConfig {
                dims: [n; 3],
                voxel_size: self.num(&format!("phantom.{p}_voxel"))?,
                snr: self.num(&format!("phantom.{p}_snr"))?,
                directions: self.num(&format!("phantom.{p}_directions"))?,
                baselines: self.num("phantom.baselines")?,
                bval: self.num("phantom.bval")?,
            })
        };
        Ok(PhantomConfig {
            source: domain("source")?,
            target: domain("target")?,
            s0: self.num("phantom.s0")?,
            mask_radius: self.num("phantom.mask_radius")?,
            contrast_gains: self.triple("phantom.contrast_gains")?,
            contrast_amplitude: self.num("phantom.contrast_amplitude")?,
            contrast_seed: self.num("phantom.contrast_seed")?,
        })
    }

    pub fn vqvae(&self) -> Result<VqVaeConfig> {
        Ok(VqVaeConfig {
            in_channels: 3,
            base_channels: self.num("vq.base_channels")?,
            levels: self.num("vq.levels")?,
            embedding_dim: self.num("vq.embedding_dim")?,
            num_embeddings: self.num("vq.num_embeddings")?,
        })
    }

    pub fn unet(&self) -> Result<UNetConfig> {
        Ok(UNetConfig {
            latent_channels: self.num("vq.embedding_dim")?,
            channels: self.list("ldm.channels")?,
            blocks_per_level: self.num("ldm.blocks")?,
            attention_levels: self.list("ldm.attention_levels")?,
            heads: self.num("ldm.heads")?,
            context_tokens: self.num("ldm.context_tokens")?,
            context_dim: self.num("ldm.context_dim")?,
            time_dim: self.num("ldm.time_dim")?,
        })
    }

    pub fn schedule_params(&self) -> Result<(usize, f64, f64)> {
        Ok((self.num("ldm.steps")?, self.num("ldm.beta_start")?, self.num("ldm.beta_end")?))
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            omega: self.triple("sampler.omega")?,
            t_enc: self.triple("sampler.t_enc")?,
            stride: self.num("sampler.stride")?,
            encode_unconditional: self.flag("sampler.encode_unconditional")?,
        })
    }

    pub fn sr(&self) -> Result<SrConfig> {
        let p = self.phantom()?;
        Ok(SrConfig {
            channels: 3,
            width: self.num("sr.width")?,
            blocks: self.num("sr.blocks")?,
            scale: p.source.voxel_size / p.target.voxel_size,
        })
    }

    /// (epochs, batch, lr) for a training stage.
    pub fn schedule_for(&self, stage: Stage) -> Result<(usize, usize, f64)> {
        let (e, b, l) = match stage {
            Stage::Vqvae3t => ("vq.epochs", "vq.batch", "vq.lr"),
            Stage::Vqvae7tFinetune => ("finetune.epochs", "vq.batch", "finetune.lr"),
            Stage::Vqvae7tScratch => ("scratch.epochs", "vq.batch", "scratch.lr"),
            Stage::Ldm => ("ldm.epochs", "ldm.batch", "ldm.lr"),
            Stage::Sr => ("sr.epochs", "sr.batch", "sr.lr"),
            other => return cfg_err(format!("stage `{}` has no training schedule", other.name())),
        };
        Ok((self.num(e)?, self.num(b)?, self.num(l)?))
    }

    pub fn drop_prob(&self) -> Result<f64> {
        self.num("ldm.drop_prob")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(PipelineConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.test_count().unwrap(), 4);
        assert_eq!(c.sampler().unwrap().t_enc, [300, 500, 600]);
    }

    #[test]
    fn unknown_and_malformed_keys_are_config_errors() {
        assert!(matches!(PipelineConfig::parse("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::parse("vq.lr = fast"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::parse("sh.order = 6"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::parse("just text"), Err(Error::Config(_))));
    }

    #[test]
    fn fingerprints_follow_stage_dependencies() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.set("sampler.omega", "0,0,0").unwrap();
        assert_eq!(a.fingerprint(Stage::Vqvae3t), b.fingerprint(Stage::Vqvae3t));
        assert_eq!(a.fingerprint(Stage::Ldm), b.fingerprint(Stage::Ldm));
        assert_eq!(a.fingerprint(Stage::Sr), b.fingerprint(Stage::Sr));
        assert_ne!(a.fingerprint(Stage::Infer), b.fingerprint(Stage::Infer));
        b.set("seed", "8").unwrap();
        assert_ne!(a.fingerprint(Stage::Phantom), b.fingerprint(Stage::Phantom));
    }
}
