//! Two-arm comparisons on the held-out subjects.
//!
//! `finetune`: 7T autoencoder reconstruction of the working-grid 7T RISH,
//! trained from scratch vs fine-tuned from the 3T model.
//! `superres`: the full inference path with B-spline upsampling vs the SR
//! head, sharing one translation per subject.

use std::path::{Path, PathBuf};

use super::config::{PipelineConfig, Stage};
use super::data::{load_subject, manifest_hash, masked_features, read_manifest, subjects_with, Role};
use super::infer::{
    apply_predicted_rish, load_models, score_dwi, translate_rish, upsample_input, upsample_rish, TargetGrid,
    Upsampler, ORDER_NAMES,
};
use super::train::{checkpoint_path, cmd_train, is_complete, working_grid};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{mean_std, nmse, ssim, MetricReport};
use crate::phantom::{brain_mask, Dwi};
use crate::vqvae::VqVae;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Finetune,
    Superres,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Axis::Finetune),
            "superres" => Ok(Axis::Superres),
            _ => Err(Error::Config(format!("unknown ablation axis `{s}` (finetune or superres)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Finetune => "finetune",
            Axis::Superres => "superres",
        }
    }

    /// The two arms, baseline first.
    pub fn arms(self) -> [&'static str; 2] {
        match self {
            Axis::Finetune => ["scratch-7t-vqvae", "finetuned-7t-vqvae"],
            Axis::Superres => [Upsampler::Bspline.tag(), Upsampler::Sr.tag()],
        }
    }
}

/// Per-subject metrics of both arms.
#[derive(Clone, Debug)]
pub struct Ablation {
    pub axis: Axis,
    pub data_sha256: String,
    pub arms: [MetricReport; 2],
}

/// Mean over orders of per-order RISH NMSE, per subject.
fn add_rish_mean(r: &mut MetricReport) {
    for s in r.subjects() {
        let v: Vec<f64> = ORDER_NAMES.iter().filter_map(|o| r.value(&s, o, "NMSE")).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        r.push(&s, "RISH", "NMSE", mean);
    }
}

impl Ablation {
    /// Mean over subjects of `quantity`/`metric` for arm `i`.
    pub fn mean(&self, arm: usize, quantity: &str, metric: &str) -> f64 {
        mean_std(&self.arms[arm].values(quantity, metric)).0
    }

    /// Two-row comparison: one row per arm, one column pair per quantity.
    pub fn to_csv(&self) -> String {
        let mut quantities: Vec<String> = Vec::new();
        for r in &self.arms[0].rows {
            if !quantities.contains(&r.quantity) {
                quantities.push(r.quantity.clone());
            }
        }
        let mut s = String::from("arm,data_sha256,subjects");
        for q in &quantities {
            for m in ["NMSE", "SSIM"] {
                if !self.arms[0].values(q, m).is_empty() {
                    s.push_str(&format!(",{q}_{m}_mean,{q}_{m}_std"));
                }
            }
        }
        s.push('\n');
        for (name, r) in self.axis.arms().iter().zip(&self.arms) {
            s.push_str(&format!("{name},{},{}", self.data_sha256, r.subjects().len()));
            for q in &quantities {
                for m in ["NMSE", "SSIM"] {
                    let v = r.values(q, m);
                    if !self.arms[0].values(q, m).is_empty() {
                        let (mean, std) = mean_std(&v);
                        s.push_str(&format!(",{mean:e},{std:e}"));
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn subjects_csv(&self) -> String {
        let mut s = String::from("arm,subject,quantity,metric,value\n");
        for (name, r) in self.axis.arms().iter().zip(&self.arms) {
            for row in &r.rows {
                s.push_str(&format!("{name},{},{},{},{:e}\n", row.subject, row.quantity, row.metric, row.value));
            }
        }
        s
    }
}

pub fn ablate_path(out: &Path, axis: Axis) -> PathBuf {
    out.join("ablate").join(format!("{}.csv", axis.name()))
}

fn ensure_trained(out: &Path, cfg: &PipelineConfig, stages: &[Stage]) -> Result<()> {
    for &s in stages {
        if !is_complete(out, cfg, s) {
            cmd_train(out, cfg, s, None)?;
        }
    }
    Ok(())
}

fn vq_scores(model: &VqVae, rish: &crate::volume::Volume4, mask: &[bool], subject: &str, r: &mut MetricReport) -> Result<()> {
    let rec = model.reconstruct_volume(rish)?;
    for (i, name) in ORDER_NAMES.iter().enumerate() {
        let (p, t) = (rec.volume(i), rish.volume(i));
        r.push(subject, name, "NMSE", nmse(&p, &t, mask)?);
        r.push(subject, name, "SSIM", ssim(&p, &t, mask)?);
    }
    Ok(())
}

/// Run both arms of `axis` on the test subjects, training missing arms.
pub fn cmd_ablate(out: &Path, cfg: &PipelineConfig, axis: Axis) -> Result<Ablation> {
    let rows = read_manifest(out)?;
    let test = subjects_with(&rows, Role::Test);
    let mut arms = [MetricReport::default(), MetricReport::default()];
    match axis {
        Axis::Finetune => {
            ensure_trained(out, cfg, &[Stage::Vqvae3t, Stage::Vqvae7tScratch, Stage::Vqvae7tFinetune])?;
            let models = [
                VqVae::load(&checkpoint_path(out, Stage::Vqvae7tScratch))?.0,
                VqVae::load(&checkpoint_path(out, Stage::Vqvae7tFinetune))?.0,
            ];
            for s in &test {
                let (src, tgt) = load_subject(out, s)?;
                let (_, rish7) = masked_features(&tgt, cfg)?;
                let work = working_grid(rish7.volume(), cfg)?;
                let mask = brain_mask(&src);
                for (m, r) in models.iter().zip(arms.iter_mut()) {
                    vq_scores(m, &work, &mask, s, r)?;
                }
            }
        }
        Axis::Superres => {
            ensure_trained(out, cfg, &[Stage::Vqvae3t, Stage::Vqvae7tFinetune, Stage::Ldm, Stage::Sr])?;
            super::data::check_basis(out, cfg)?;
            let models = load_models(out, cfg)?;
            let grid = TargetGrid::from_config(cfg)?;
            for s in &test {
                let (src, truth) = load_subject(out, s)?;
                let (_, rish3, input) = upsample_input(&src, cfg, &grid)?;
                let tr = translate_rish(&models, rish3.volume())?;
                for (how, r) in [Upsampler::Bspline, Upsampler::Sr].into_iter().zip(arms.iter_mut()) {
                    let pred = upsample_rish(&models, &tr.decoded, how, &grid)?;
                    let (dwi, _) = apply_predicted_rish(&input, &pred, cfg.tau()?, &grid.gtab)?;
                    let dwi = Dwi {
                        data: dwi,
                        gtab: grid.gtab.clone(),
                    };
                    score_dwi(r, s, &dwi, &truth, cfg)?;
                }
            }
        }
    }
    arms.iter_mut().for_each(add_rish_mean);
    let ab = Ablation {
        axis,
        data_sha256: manifest_hash(out)?,
        arms,
    };
    let path = ablate_path(out, axis);
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).at(d)?;
    }
    std::fs::write(&path, ab.to_csv()).at(&path)?;
    let sp = path.with_file_name(format!("{}_subjects.csv", axis.name()));
    std::fs::write(&sp, ab.subjects_csv()).at(&sp)?;
    Ok(ab)
}
