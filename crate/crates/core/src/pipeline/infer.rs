//! End-to-end inference and evaluation against the held-out 7T data.

use std::path::{Path, PathBuf};

use tensornet::Tensor;

use super::config::{PipelineConfig, Stage};
use super::data::{
    check_basis, data_dir, load_subject, masked_features, read_manifest, subjects_with, Role,
};
use super::train::{checkpoint_path, require, upstream};
use crate::error::{arg, Error, IoContext, Result};
use crate::ldm::{make_schedule, sample_log_csv, translate, DenoiserNet, NoiseSchedule, SampleLogRow, SamplerConfig};
use crate::metrics::{difference_map, fa_map, nmse, ssim, MetricReport};
use crate::nn::{tensor_to_volume, volume_to_tensor};
use crate::phantom::{brain_mask, Dwi};
use crate::sh::{
    apply_scale_map, compute_rish, compute_scale_map, reconstruct_signal, RishFeatures, ShCoefficients,
};
use crate::superres::SrModel;
use crate::volume::{
    load_volume4, resample4_trilinear, resample_trilinear, save_volume, upsample4_bspline, GradientTable,
    Semantics, Volume3, Volume4,
};
use crate::vqvae::VqVae;

/// Everything inference needs, loaded from complete checkpoints.
pub struct Models {
    pub vq3: VqVae,
    pub vq7: VqVae,
    pub ldm: DenoiserNet,
    pub sr: SrModel,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
}

pub fn load_models(out: &Path, cfg: &PipelineConfig) -> Result<Models> {
    for &dep in upstream(Stage::Infer) {
        require(out, cfg, dep, Stage::Infer)?;
    }
    let (steps, b0, b1) = cfg.schedule_params()?;
    let schedule = make_schedule(steps, b0, b1)?;
    let sampler = cfg.sampler()?;
    sampler.validate(&schedule).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Models {
        vq3: VqVae::load(&checkpoint_path(out, Stage::Vqvae3t))?.0,
        vq7: VqVae::load(&checkpoint_path(out, Stage::Vqvae7tFinetune))?.0,
        ldm: DenoiserNet::load(&checkpoint_path(out, Stage::Ldm))?.0,
        sr: SrModel::load(&checkpoint_path(out, Stage::Sr))?.0,
        schedule,
        sampler,
    })
}

/// How decoded working-grid RISH reaches the target grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsampler {
    Bspline,
    Sr,
}

impl Upsampler {
    pub fn tag(self) -> &'static str {
        match self {
            Upsampler::Bspline => "bspline-upsample",
            Upsampler::Sr => "sr-module",
        }
    }
}

/// Target grid and gradient scheme.
#[derive(Clone, Debug)]
pub struct TargetGrid {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub gtab: GradientTable,
}

impl TargetGrid {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let t = cfg.phantom()?.target;
        Ok(Self {
            dims: t.dims,
            voxel_size: [t.voxel_size; 3],
            gtab: t.gtab()?,
        })
    }
}

fn on_grid(v: Volume4, voxel_size: [f64; 3]) -> Result<Volume4> {
    Volume4::new(v.dims(), voxel_size, v.into_data())
}

/// Intermediate products of one translation.
pub struct Translation {
    pub latent_3t: Tensor,
    pub latent_7t: Tensor,
    /// 7T-normalized RISH on the working grid.
    pub decoded: Tensor,
    pub log: Vec<SampleLogRow>,
}

/// 3T RISH → 3T encoder/codebook → guided translation → 7T codebook/decoder.
pub fn translate_rish(m: &Models, rish3: &Volume4) -> Result<Translation> {
    let x = m.vq3.normalize(rish3)?;
    let z3 = m.vq3.quantize(&m.vq3.encode(&x)?)?.zq;
    let mut log = Vec::new();
    let z = translate(&m.ldm, &z3, &m.sampler, &m.schedule, &mut log)?;
    let z7 = m.vq7.quantize(&z)?.zq;
    let decoded = m.vq7.decode(&z7)?;
    Ok(Translation {
        latent_3t: z3,
        latent_7t: z7,
        decoded,
        log,
    })
}

/// Upsample decoded RISH to the target grid and undo the 7T normalization.
/// Negative values (B-spline overshoot) are clamped to zero.
pub fn upsample_rish(m: &Models, decoded: &Tensor, how: Upsampler, grid: &TargetGrid) -> Result<Volume4> {
    let up = match how {
        Upsampler::Sr => {
            let y = m.sr.forward(decoded)?;
            if crate::nn::spatial_dims(&y) != grid.dims {
                return Err(Error::Config(format!(
                    "stage `sr` produces {:?}, target grid is {:?}",
                    crate::nn::spatial_dims(&y),
                    grid.dims
                )));
            }
            y
        }
        Upsampler::Bspline => {
            let v = tensor_to_volume(decoded, [1.0; 3])?;
            volume_to_tensor(&upsample4_bspline(&v, grid.dims)?)
        }
    };
    let v = m.vq7.denormalize(&up, grid.voxel_size)?;
    let data = v.data().iter().map(|x| x.max(0.0)).collect();
    Volume4::new(v.dims(), grid.voxel_size, data)
}

/// Mean baseline of a DWI series.
pub fn s0_map(dwi: &Dwi) -> Result<Volume3> {
    let base = dwi.gtab.baseline_indices();
    if base.is_empty() {
        return arg("the input DWI has no b=0 volumes");
    }
    let n = dwi.data.num_voxels();
    let d = (0..n)
        .map(|v| base.iter().map(|&q| dwi.data.get(v, q)).sum::<f64>() / base.len() as f64)
        .collect();
    Volume3::new(dwi.data.spatial_dims(), dwi.data.voxel_size(), d)
}

/// Input-side quantities on the target grid.
pub struct Upsampled {
    pub coeffs: ShCoefficients,
    pub rish: RishFeatures,
    pub s0: Volume3,
}

pub fn upsample_input(src: &Dwi, cfg: &PipelineConfig, grid: &TargetGrid) -> Result<(ShCoefficients, RishFeatures, Upsampled)> {
    let (coeffs, rish) = masked_features(src, cfg)?;
    let up = on_grid(resample4_trilinear(coeffs.volume(), grid.dims)?, grid.voxel_size)?;
    let up = ShCoefficients::new(coeffs.max_order(), up)?;
    let up_rish = compute_rish(&up)?;
    let s0 = resample_trilinear(&s0_map(src)?, grid.dims)?;
    let s0 = Volume3::new(grid.dims, grid.voxel_size, s0.into_data())?;
    Ok((
        coeffs,
        rish,
        Upsampled {
            coeffs: up,
            rish: up_rish,
            s0,
        },
    ))
}

/// Reconstruct on `gtab` and restore the baseline signal.
pub fn synthesize(coeffs: &ShCoefficients, gtab: &GradientTable, s0: &Volume3) -> Result<Volume4> {
    let sig = reconstruct_signal(coeffs, gtab)?;
    let n = sig.num_voxels();
    let data = sig
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x * s0.data()[i % n])
        .collect();
    Volume4::new(sig.dims(), sig.voxel_size(), data)
}

/// Predicted RISH → scale map against the input → scaled coefficients →
/// target DWI. The scale map is applied exactly once.
pub fn apply_predicted_rish(
    input: &Upsampled,
    pred_rish: &Volume4,
    tau: f64,
    gtab: &GradientTable,
) -> Result<(Volume4, crate::sh::ScaleMap)> {
    let target = RishFeatures::new(input.rish.max_order(), pred_rish.clone())?;
    let lambda = compute_scale_map(&target, &input.rish, tau)?;
    let scaled = apply_scale_map(&input.coeffs, &lambda)?;
    Ok((synthesize(&scaled, gtab, &input.s0)?, lambda))
}

pub struct Prediction {
    pub dwi: Volume4,
    pub baseline: Volume4,
    pub pred_rish: Volume4,
    pub baseline_rish: Volume4,
    pub log: Vec<SampleLogRow>,
    /// (file stem, volume, semantics)
    pub intermediates: Vec<(String, Volume4, Semantics)>,
}

pub fn predict(m: &Models, cfg: &PipelineConfig, src: &Dwi, how: Upsampler) -> Result<Prediction> {
    let grid = TargetGrid::from_config(cfg)?;
    let (coeffs, rish, input) = upsample_input(src, cfg, &grid)?;
    let tr = translate_rish(m, rish.volume())?;
    let pred_rish = upsample_rish(m, &tr.decoded, how, &grid)?;
    let (dwi, lambda) = apply_predicted_rish(&input, &pred_rish, cfg.tau()?, &grid.gtab)?;
    let baseline = synthesize(&input.coeffs, &grid.gtab, &input.s0)?;
    let l = coeffs.max_order() as u32;
    let latent = |t: &Tensor| tensor_to_volume(t, [1.0; 3]);
    let intermediates = vec![
        ("source_sh".into(), coeffs.volume().clone(), coeffs.semantics()),
        ("source_rish".into(), rish.volume().clone(), rish.semantics()),
        ("latent_3t".into(), latent(&tr.latent_3t)?, Semantics::Generic),
        ("latent_7t".into(), latent(&tr.latent_7t)?, Semantics::Generic),
        ("decoded_rish_normalized".into(), latent(&tr.decoded)?, Semantics::Generic),
        ("upsampled_sh".into(), input.coeffs.volume().clone(), Semantics::ShCoefficients(l)),
        ("scale_map".into(), lambda.volume().clone(), lambda.semantics()),
    ];
    Ok(Prediction {
        dwi,
        baseline,
        pred_rish,
        baseline_rish: input.rish.volume().clone(),
        log: tr.log,
        intermediates,
    })
}

pub fn infer_dir(out: &Path, subject: &str) -> PathBuf {
    out.join("infer").join(subject)
}

pub fn pred_path(out: &Path, subject: &str) -> PathBuf {
    infer_dir(out, subject).join("pred_7t_dwi.rgv")
}

pub fn baseline_path(out: &Path, subject: &str) -> PathBuf {
    infer_dir(out, subject).join("baseline_7t_dwi.rgv")
}

/// Predict 7T data for `subjects` (default: the test set).
pub fn cmd_infer(
    out: &Path,
    cfg: &PipelineConfig,
    subjects: Option<&[String]>,
    save_intermediates: bool,
) -> Result<Vec<String>> {
    check_basis(out, cfg)?;
    let models = load_models(out, cfg)?;
    let subjects = match subjects {
        Some(s) => s.to_vec(),
        None => subjects_with(&read_manifest(out)?, Role::Test),
    };
    let grid = TargetGrid::from_config(cfg)?;
    for s in &subjects {
        let (src, _) = load_subject(out, s)?;
        let p = predict(&models, cfg, &src, Upsampler::Sr)?;
        let dir = infer_dir(out, s);
        std::fs::create_dir_all(&dir).at(&dir)?;
        let l = cfg.sh_order()? as u32;
        save_volume(pred_path(out, s), &p.dwi, Semantics::Dwi)?;
        save_volume(baseline_path(out, s), &p.baseline, Semantics::Dwi)?;
        save_volume(dir.join("pred_rish.rgv"), &p.pred_rish, Semantics::Rish(l))?;
        save_volume(dir.join("baseline_rish.rgv"), &p.baseline_rish, Semantics::Rish(l))?;
        let gpath = dir.join("pred_7t_dwi.json");
        std::fs::write(&gpath, serde_json::to_string_pretty(&grid.gtab)? + "\n").at(&gpath)?;
        let lpath = dir.join("sampling_log.csv");
        std::fs::write(&lpath, sample_log_csv(&p.log)).at(&lpath)?;
        if save_intermediates {
            for (name, v, sem) in &p.intermediates {
                save_volume(dir.join(format!("{name}.rgv")), v, *sem)?;
            }
        }
    }
    Ok(subjects)
}

pub const ORDER_NAMES: [&str; 3] = ["L0", "L2", "L4"];

/// NMSE and SSIM of per-order RISH and FA of `pred` against `truth`.
pub fn score_dwi(
    report: &mut MetricReport,
    subject: &str,
    pred: &Dwi,
    truth: &Dwi,
    cfg: &PipelineConfig,
) -> Result<()> {
    let mask = brain_mask(truth);
    let (_, tr) = masked_features(truth, cfg)?;
    let pc = crate::sh::fit_sh_masked(&pred.data, &pred.gtab, cfg.sh_order()?, cfg.sh_lambda()?, Some(&mask))?;
    let pr = compute_rish(&pc)?;
    for (i, name) in ORDER_NAMES.iter().enumerate() {
        let (p, t) = (pr.volume().volume(i), tr.volume().volume(i));
        report.push(subject, name, "NMSE", nmse(&p, &t, &mask)?);
        report.push(subject, name, "SSIM", ssim(&p, &t, &mask)?);
    }
    let (pf, tf) = (fa_map(&pred.data, &pred.gtab)?, fa_map(&truth.data, &truth.gtab)?);
    report.push(subject, "FA", "NMSE", nmse(&pf, &tf, &mask)?);
    report.push(subject, "FA", "SSIM", ssim(&pf, &tf, &mask)?);
    Ok(())
}

pub fn eval_dir(out: &Path) -> PathBuf {
    out.join("eval")
}

/// Reports for the predicted and the upsampled-input DWI.
pub struct Evaluation {
    pub predicted: MetricReport,
    pub input: MetricReport,
}

/// Score every subject that has a prediction under `out/infer`.
pub fn cmd_evaluate(out: &Path, cfg: &PipelineConfig) -> Result<Evaluation> {
    let grid = TargetGrid::from_config(cfg)?;
    let mut subjects: Vec<String> = match std::fs::read_dir(out.join("infer")) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("pred_7t_dwi.rgv").exists())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect(),
        Err(_) => Vec::new(),
    };
    subjects.sort();
    if subjects.is_empty() {
        return arg(format!("no predictions under {}; run `infer` first", out.join("infer").display()));
    }
    let dir = eval_dir(out);
    std::fs::create_dir_all(&dir).at(&dir)?;
    let mut ev = Evaluation {
        predicted: MetricReport::default(),
        input: MetricReport::default(),
    };
    for s in &subjects {
        if !crate::phantom::SubjectFiles::new(&data_dir(out), s).sidecar.exists() {
            return Err(Error::Dependency {
                stage: "evaluate".into(),
                what: format!("no ground truth for subject {s}"),
            });
        }
        let (_, truth) = load_subject(out, s)?;
        let load = |p: PathBuf| -> Result<Dwi> {
            Ok(Dwi {
                data: load_volume4(&p)?.0,
                gtab: grid.gtab.clone(),
            })
        };
        let pred = load(pred_path(out, s))?;
        let base = load(baseline_path(out, s))?;
        score_dwi(&mut ev.predicted, s, &pred, &truth, cfg)?;
        score_dwi(&mut ev.input, s, &base, &truth, cfg)?;
        let tf = fa_map(&truth.data, &truth.gtab)?;
        save_volume(
            dir.join(format!("{s}_fa_diff_predicted.rgv")),
            &difference_map(&fa_map(&pred.data, &pred.gtab)?, &tf)?,
            Semantics::Generic,
        )?;
        save_volume(
            dir.join(format!("{s}_fa_diff_input.rgv")),
            &difference_map(&fa_map(&base.data, &base.gtab)?, &tf)?,
            Semantics::Generic,
        )?;
    }
    let write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, text).at(&p)
    };
    write("predicted.csv", ev.predicted.to_csv())?;
    write("input.csv", ev.input.to_csv())?;
    write(
        "summary.txt",
        ev.input.summary("input (3T upsampled)") + "\n" + &ev.predicted.summary("predicted 7T"),
    )?;
    Ok(ev)
}
