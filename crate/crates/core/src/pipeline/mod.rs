//! Orchestration of the full workflow on a phantom dataset.
//!
//! Everything lives under one output directory:
//!
//! ```text
//! out/config.txt                resolved configuration
//! out/data/                     phantom pairs and manifest.csv
//! out/rish/                     SH coefficients and RISH per subject and domain
//! out/checkpoints/              {stage}.ckpt and {stage}_loss.csv
//! out/infer/{subject}/          predicted and baseline 7T DWI, sampling log
//! out/eval/                     metric CSVs, summary, FA difference maps
//! out/ablate/                   {axis}.csv comparisons
//! out/runtime.log               wall-clock seconds per executed step
//! ```

pub mod ablate;
pub mod config;
pub mod data;
pub mod infer;
pub mod train;

use std::path::Path;

pub use ablate::{cmd_ablate, Ablation, Axis};
pub use config::{PipelineConfig, Stage};
pub use data::{cmd_fit_rish, cmd_phantom, manifest_hash, Role};
pub use infer::{cmd_evaluate, cmd_infer, Evaluation};
pub use train::{cmd_train, log_runtime, read_runtime, TrainOutcome};

use crate::error::{IoContext, Result};

/// Write the resolved configuration next to the outputs.
pub fn write_config(out: &Path, cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(out).at(out)?;
    let p = out.join("config.txt");
    std::fs::write(&p, cfg.to_text()).at(&p)
}

fn stamp_path(out: &Path, step: &str) -> std::path::PathBuf {
    out.join("stamps").join(step)
}

fn stamped(out: &Path, step: &str, fingerprint: &str) -> bool {
    std::fs::read_to_string(stamp_path(out, step)).is_ok_and(|s| s.trim() == fingerprint)
}

fn stamp(out: &Path, step: &str, fingerprint: &str) -> Result<()> {
    let p = stamp_path(out, step);
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d).at(d)?;
    }
    std::fs::write(&p, format!("{fingerprint}\n")).at(&p)
}

fn timed<T>(out: &Path, step: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = std::time::Instant::now();
    let v = f()?;
    log_runtime(out, step, t.elapsed().as_secs_f64())?;
    Ok(v)
}

/// Outputs of a full run.
pub struct RunSummary {
    pub evaluation: Evaluation,
    pub finetune: Ablation,
    pub superres: Ablation,
}

/// Every stage in order. Steps whose outputs already match the
/// configuration are skipped, so an interrupted run picks up where it
/// stopped.
pub fn run_all(out: &Path, cfg: &PipelineConfig) -> Result<RunSummary> {
    write_config(out, cfg)?;
    let fp = |s: Stage| cfg.fingerprint(s);
    let clock = std::time::Instant::now();
    let done = |what: &str| eprintln!("[{:>8.1}s] {what}", clock.elapsed().as_secs_f64());
    if !stamped(out, "phantom", &fp(Stage::Phantom)) {
        timed(out, "phantom", || cmd_phantom(out, cfg))?;
        stamp(out, "phantom", &fp(Stage::Phantom))?;
    }
    done("phantom");
    if !stamped(out, "fit-rish", &fp(Stage::FitRish)) {
        timed(out, "fit-rish", || cmd_fit_rish(out, cfg))?;
        stamp(out, "fit-rish", &fp(Stage::FitRish))?;
    }
    done("fit-rish");
    for s in Stage::TRAINABLE {
        cmd_train(out, cfg, s, None)?;
        done(s.name());
    }
    if !stamped(out, "infer", &fp(Stage::Infer)) {
        timed(out, "infer", || cmd_infer(out, cfg, None, false))?;
        stamp(out, "infer", &fp(Stage::Infer))?;
    }
    done("infer");
    let evaluation = timed(out, "evaluate", || cmd_evaluate(out, cfg))?;
    done("evaluate");
    let finetune = timed(out, "ablate-finetune", || cmd_ablate(out, cfg, Axis::Finetune))?;
    done("ablate finetune");
    let superres = timed(out, "ablate-superres", || cmd_ablate(out, cfg, Axis::Superres))?;
    done("ablate superres");
    Ok(RunSummary {
        evaluation,
        finetune,
        superres,
    })
}
