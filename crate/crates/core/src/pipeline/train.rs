//! Training stages with fingerprinted, resumable checkpoints.

use std::path::{Path, PathBuf};

use tensornet::Metadata;

use super::config::{PipelineConfig, Stage};
use super::data::{load_rish, read_manifest, subjects_with, Role, Side};
use crate::error::{Error, IoContext, Result};
use crate::ldm::{fit_latent_scale, make_schedule, train_ldm, ClassLabel, DenoiserNet, LdmTrainConfig};
use crate::nn::{meta_get, meta_parse};
use crate::superres::{train_sr, SrModel, SrTrainConfig};
use crate::volume::{derive_seed, resample4_trilinear, Volume4};
use crate::vqvae::{train_vqvae, Domain, LatentGrid, VqTrainConfig, VqTrainReport, VqVae};
use tensornet::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn checkpoint_path(out: &Path, stage: Stage) -> PathBuf {
    checkpoint_dir(out).join(format!("{}.ckpt", stage.name()))
}

pub fn loss_path(out: &Path, stage: Stage) -> PathBuf {
    checkpoint_dir(out).join(format!("{}_loss.csv", stage.name()))
}

/// Progress recorded in a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Progress {
    pub stage: String,
    pub fingerprint: String,
    pub seed: u64,
    pub epoch: usize,
    pub total_epochs: usize,
}

impl Progress {
    fn to_meta(&self) -> Metadata {
        let mut m = Metadata::new();
        m.insert("stage".into(), self.stage.clone());
        m.insert("fingerprint".into(), self.fingerprint.clone());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("epoch".into(), self.epoch.to_string());
        m.insert("total_epochs".into(), self.total_epochs.to_string());
        m.insert("format_version".into(), CHECKPOINT_VERSION.to_string());
        m
    }

    fn from_meta(m: &Metadata) -> Result<Self> {
        let version: u32 = meta_parse(m, "format_version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 0,
                msg: format!("checkpoint format version {version}, expected {CHECKPOINT_VERSION}"),
            });
        }
        Ok(Self {
            stage: meta_get(m, "stage")?.to_string(),
            fingerprint: meta_get(m, "fingerprint")?.to_string(),
            seed: meta_parse(m, "seed")?,
            epoch: meta_parse(m, "epoch")?,
            total_epochs: meta_parse(m, "total_epochs")?,
        })
    }

    pub fn complete(&self) -> bool {
        self.epoch >= self.total_epochs
    }
}

/// Result of one `train` invocation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainOutcome {
    pub stage: Stage,
    pub start_epoch: usize,
    pub epoch: usize,
    pub total_epochs: usize,
}

fn read_progress(path: &Path) -> Result<Progress> {
    let (_, meta, _) = crate::nn::load_store(path)?;
    Progress::from_meta(&meta)
}

/// Checkpoint of an upstream stage, which must be complete and built from
/// the current configuration.
pub fn require(out: &Path, cfg: &PipelineConfig, needed: Stage, by: Stage) -> Result<PathBuf> {
    let path = checkpoint_path(out, needed);
    let dep = |what: String| Error::Dependency {
        stage: by.name().into(),
        what,
    };
    if !path.exists() {
        return Err(dep(format!("checkpoint of stage `{}` not found at {}", needed.name(), path.display())));
    }
    let p = read_progress(&path)?;
    if p.fingerprint != cfg.fingerprint(needed) {
        return Err(dep(format!(
            "checkpoint of stage `{}` was built from a different configuration; retrain it",
            needed.name()
        )));
    }
    if !p.complete() {
        return Err(dep(format!(
            "stage `{}` is incomplete ({}/{} epochs)",
            needed.name(),
            p.epoch,
            p.total_epochs
        )));
    }
    Ok(path)
}

/// Stages that must be complete before `stage` can train.
pub fn upstream(stage: Stage) -> &'static [Stage] {
    match stage {
        Stage::Vqvae7tFinetune => &[Stage::Vqvae3t],
        Stage::Ldm => &[Stage::Vqvae3t, Stage::Vqvae7tFinetune],
        Stage::Sr => &[Stage::Vqvae7tFinetune],
        Stage::Infer => &[Stage::Vqvae3t, Stage::Vqvae7tFinetune, Stage::Ldm, Stage::Sr],
        _ => &[],
    }
}

fn seed_for(cfg: &PipelineConfig, tag: &str) -> Result<u64> {
    Ok(derive_seed(cfg.seed()?, tag, 0))
}

/// 7T RISH resampled onto the 3T working grid.
pub fn working_grid(rish7: &Volume4, cfg: &PipelineConfig) -> Result<Volume4> {
    let p = cfg.phantom()?;
    let v = resample4_trilinear(rish7, p.source.dims)?;
    Volume4::new(v.dims(), [p.source.voxel_size; 3], v.into_data())
}

fn source_rish(out: &Path, subjects: &[String]) -> Result<Vec<Volume4>> {
    subjects.iter().map(|s| load_rish(out, s, Side::Source)).collect()
}

fn target_rish_working(out: &Path, cfg: &PipelineConfig, subjects: &[String]) -> Result<Vec<Volume4>> {
    subjects
        .iter()
        .map(|s| working_grid(&load_rish(out, s, Side::Target)?, cfg))
        .collect()
}

/// Rewrite the loss CSV keeping rows of epochs before `start`, then append.
fn write_losses(path: &Path, start: usize, new_csv: &str) -> Result<()> {
    let mut lines: Vec<String> = Vec::new();
    let mut header = new_csv.lines().next().unwrap_or("").to_string();
    if start > 0 {
        if let Ok(old) = std::fs::read_to_string(path) {
            let mut it = old.lines();
            if let Some(h) = it.next() {
                header = h.to_string();
            }
            for l in it {
                let epoch: Option<usize> = l.split(',').next().and_then(|e| e.parse().ok());
                if epoch.is_some_and(|e| e < start) {
                    lines.push(l.to_string());
                }
            }
        }
    }
    lines.extend(new_csv.lines().skip(1).map(str::to_string));
    let mut s = header + "\n";
    for l in lines {
        s.push_str(&l);
        s.push('\n');
    }
    std::fs::write(path, s).at(path)
}

/// Resume state of a stage: the loaded checkpoint when one exists.
fn resume_point(out: &Path, cfg: &PipelineConfig, stage: Stage) -> Result<Option<Progress>> {
    let path = checkpoint_path(out, stage);
    if !path.exists() {
        return Ok(None);
    }
    let p = read_progress(&path)?;
    if p.stage != stage.name() {
        return Err(Error::Config(format!(
            "{} holds stage `{}`, expected `{}`",
            path.display(),
            p.stage,
            stage.name()
        )));
    }
    if p.fingerprint != cfg.fingerprint(stage) {
        return Err(Error::Config(format!(
            "checkpoint {} was written with a different configuration; delete it to retrain",
            path.display()
        )));
    }
    Ok(Some(p))
}

fn progress(cfg: &PipelineConfig, stage: Stage, epoch: usize, total: usize) -> Result<Progress> {
    Ok(Progress {
        stage: stage.name().into(),
        fingerprint: cfg.fingerprint(stage),
        seed: cfg.seed()?,
        epoch,
        total_epochs: total,
    })
}

fn end_epoch(start: usize, total: usize, stop_after: Option<usize>) -> usize {
    stop_after.map_or(total, |s| (start + s).min(total))
}

/// Quantized latents of normalized inputs.
pub fn quantized_latents(model: &VqVae, inputs: &[Tensor]) -> Result<Vec<LatentGrid>> {
    inputs
        .iter()
        .map(|x| Ok(model.quantize(&model.encode(x)?)?.zq))
        .collect()
}

/// Train `stage` (or resume it) for at most `stop_after` epochs.
pub fn cmd_train(out: &Path, cfg: &PipelineConfig, stage: Stage, stop_after: Option<usize>) -> Result<TrainOutcome> {
    for &dep in upstream(stage) {
        require(out, cfg, dep, stage)?;
    }
    let rows = read_manifest(out)?;
    let paired = subjects_with(&rows, Role::Paired);
    let (total, batch, lr) = cfg.schedule_for(stage)?;
    let resume = resume_point(out, cfg, stage)?;
    let start = resume.as_ref().map_or(0, |p| p.epoch.min(total));
    let end = end_epoch(start, total, stop_after);
    let outcome = TrainOutcome {
        stage,
        start_epoch: start,
        epoch: end,
        total_epochs: total,
    };
    if resume.is_some() && start >= end {
        return Ok(outcome);
    }
    let clock = std::time::Instant::now();
    let ckpt = checkpoint_path(out, stage);
    let mut meta = progress(cfg, stage, end, total)?.to_meta();
    let vq_cfg = |tag: &str| -> Result<VqTrainConfig> {
        Ok(VqTrainConfig {
            epochs: total,
            batch_size: batch,
            lr,
            seed: seed_for(cfg, tag)?,
            ..VqTrainConfig::default()
        })
    };
    let csv = match stage {
        Stage::Vqvae3t => {
            let data = source_rish(out, &subjects_with(&rows, Role::SourceOnly))?;
            let (mut model, old) = match resume {
                Some(_) => VqVae::load(&ckpt)?,
                None => {
                    let mut m = VqVae::new(cfg.vqvae()?, Domain::Source, seed_for(cfg, "vqvae3t-init")?)?;
                    m.fit_normalization(&data)?;
                    (m, Metadata::new())
                }
            };
            let inputs = data.iter().map(|v| model.normalize(v)).collect::<Result<Vec<_>>>()?;
            let report = train_vqvae(&mut model, &inputs, &vq_cfg("vqvae3t")?, start, Some(end - start))?;
            record_mae(&mut meta, &old, &report);
            model.save(&ckpt, &meta, true)?;
            report.to_csv()
        }
        Stage::Vqvae7tFinetune | Stage::Vqvae7tScratch => {
            let data = target_rish_working(out, cfg, &paired)?;
            let (mut model, old) = match (resume, stage) {
                (Some(_), _) => VqVae::load(&ckpt)?,
                (None, Stage::Vqvae7tFinetune) => {
                    let (mut m, _) = VqVae::load(&checkpoint_path(out, Stage::Vqvae3t))?;
                    m.domain = Domain::Target;
                    m.store.reset_optimizer();
                    m.fit_normalization(&data)?;
                    (m, Metadata::new())
                }
                (None, _) => {
                    let mut m = VqVae::new(cfg.vqvae()?, Domain::Target, seed_for(cfg, "vqvae7t-init")?)?;
                    m.fit_normalization(&data)?;
                    (m, Metadata::new())
                }
            };
            let inputs = data.iter().map(|v| model.normalize(v)).collect::<Result<Vec<_>>>()?;
            // Both 7T arms share one shuffle stream so the ablation differs
            // only in initialization and learning rate.
            let report = train_vqvae(&mut model, &inputs, &vq_cfg("vqvae7t")?, start, Some(end - start))?;
            record_mae(&mut meta, &old, &report);
            model.save(&ckpt, &meta, true)?;
            report.to_csv()
        }
        Stage::Ldm => {
            let (vq3, _) = VqVae::load(&checkpoint_path(out, Stage::Vqvae3t))?;
            let (vq7, _) = VqVae::load(&checkpoint_path(out, Stage::Vqvae7tFinetune))?;
            let src = source_rish(out, &paired)?;
            let tgt = target_rish_working(out, cfg, &paired)?;
            let src_in = src.iter().map(|v| vq3.normalize(v)).collect::<Result<Vec<_>>>()?;
            let tgt_in = tgt.iter().map(|v| vq7.normalize(v)).collect::<Result<Vec<_>>>()?;
            let z3 = quantized_latents(&vq3, &src_in)?;
            let z7 = quantized_latents(&vq7, &tgt_in)?;
            let mut net = match resume {
                Some(_) => DenoiserNet::load(&ckpt)?.0,
                None => {
                    let mut n = DenoiserNet::new(cfg.unet()?, seed_for(cfg, "ldm-init")?)?;
                    let all: Vec<Tensor> = z3.iter().chain(&z7).cloned().collect();
                    fit_latent_scale(&mut n, &all)?;
                    n
                }
            };
            let data: Vec<(Tensor, ClassLabel)> = z3
                .into_iter()
                .map(|z| (z, ClassLabel::Source))
                .chain(z7.into_iter().map(|z| (z, ClassLabel::Target)))
                .collect();
            let (steps, b0, b1) = cfg.schedule_params()?;
            let schedule = make_schedule(steps, b0, b1)?;
            let tcfg = LdmTrainConfig {
                epochs: total,
                batch_size: batch,
                lr,
                drop_prob: cfg.drop_prob()?,
                seed: seed_for(cfg, "ldm")?,
            };
            let report = train_ldm(&mut net, &data, &schedule, &tcfg, start, Some(end - start))?;
            net.save(&ckpt, &meta, true)?;
            report.to_csv()
        }
        Stage::Sr => {
            let (vq7, _) = VqVae::load(&checkpoint_path(out, Stage::Vqvae7tFinetune))?;
            let pairs = sr_pairs(out, cfg, &vq7, &paired)?;
            let mut model = match resume {
                Some(_) => SrModel::load(&ckpt)?.0,
                None => SrModel::new(cfg.sr()?, seed_for(cfg, "sr-init")?)?,
            };
            let tcfg = SrTrainConfig {
                epochs: total,
                batch_size: batch,
                lr,
                seed: seed_for(cfg, "sr")?,
            };
            let report = train_sr(&mut model, &pairs, &tcfg, start, Some(end - start))?;
            model.save(&ckpt, &meta, true)?;
            report.to_csv()
        }
        other => return Err(Error::Config(format!("stage `{}` is not trainable", other.name()))),
    };
    write_losses(&loss_path(out, stage), start, &csv)?;
    log_runtime(out, stage.name(), clock.elapsed().as_secs_f64())?;
    Ok(outcome)
}

/// Keep the MAE before any training across resumes and store the latest.
fn record_mae(meta: &mut Metadata, old: &Metadata, report: &VqTrainReport) {
    let initial = old.get("initial_mae").cloned().unwrap_or_else(|| report.initial_mae.to_string());
    meta.insert("initial_mae".into(), initial);
    meta.insert("final_mae".into(), report.final_mae.to_string());
    meta.insert("codes_used".into(), report.codes_used.to_string());
}

pub fn runtime_path(out: &Path) -> PathBuf {
    out.join("runtime.log")
}

/// Append wall-clock seconds spent in a step. Kept out of the CSVs so that
/// reruns stay byte-identical.
pub fn log_runtime(out: &Path, step: &str, seconds: f64) -> Result<()> {
    use std::io::Write;
    let p = runtime_path(out);
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&p).at(&p)?;
    writeln!(f, "{step},{seconds:.3}").at(&p)
}

/// Total logged seconds per step.
pub fn read_runtime(out: &Path) -> Result<Vec<(String, f64)>> {
    let p = runtime_path(out);
    let text = std::fs::read_to_string(&p).at(&p)?;
    let mut acc: Vec<(String, f64)> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (step, secs) = line
            .split_once(',')
            .ok_or_else(|| Error::Argument(format!("bad runtime line `{line}`")))?;
        let secs: f64 = secs
            .trim()
            .parse()
            .map_err(|_| Error::Argument(format!("bad runtime line `{line}`")))?;
        match acc.iter_mut().find(|(s, _)| s == step) {
            Some(e) => e.1 += secs,
            None => acc.push((step.to_string(), secs)),
        }
    }
    Ok(acc)
}

/// (7T autoencoder output on the working grid, normalized 7T RISH on the
/// native grid) per subject, both in 7T-normalized units.
pub fn sr_pairs(out: &Path, cfg: &PipelineConfig, vq7: &VqVae, subjects: &[String]) -> Result<Vec<(Tensor, Tensor)>> {
    let target_dims = cfg.phantom()?.target.dims;
    let sr_cfg = cfg.sr()?;
    let mut pairs = Vec::with_capacity(subjects.len());
    for s in subjects {
        let native = load_rish(out, s, Side::Target)?;
        let low = vq7.reconstruct(&vq7.normalize(&working_grid(&native, cfg)?)?)?;
        let dims = crate::superres::output_dims(crate::nn::spatial_dims(&low), sr_cfg.scale);
        if dims != target_dims {
            return Err(Error::Config(format!(
                "stage `sr`: upsampling {:?} by {:.4} gives {:?}, not the target grid {:?}",
                crate::nn::spatial_dims(&low),
                sr_cfg.scale,
                dims,
                target_dims
            )));
        }
        pairs.push((low, vq7.normalize(&native)?));
    }
    Ok(pairs)
}

/// Whether `stage` has a complete checkpoint for this configuration.
pub fn is_complete(out: &Path, cfg: &PipelineConfig, stage: Stage) -> bool {
    let path = checkpoint_path(out, stage);
    path.exists()
        && read_progress(&path).is_ok_and(|p| p.complete() && p.fingerprint == cfg.fingerprint(stage))
}
