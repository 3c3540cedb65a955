use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dmrigen::pipeline::{self, Axis, PipelineConfig, Stage};
use dmrigen::{Error, Result};

#[derive(Parser)]
#[command(name = "dmrigen", version, about = "3T to 7T diffusion MRI generation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired phantom dataset and its manifest.
    Phantom(Common),
    /// Fit SH coefficients and RISH features for every subject and domain.
    FitRish(Common),
    /// Train (or resume) one stage.
    Train {
        #[command(flatten)]
        common: Common,
        /// vqvae3t, vqvae7t-finetune, vqvae7t-scratch, ldm or sr.
        #[arg(long)]
        stage: String,
        /// Stop after this many epochs; a later call resumes.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Predict 7T DWI for the test subjects (or the given ones).
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subject: Vec<String>,
        /// Also write latents, scale maps and other intermediates.
        #[arg(long)]
        save_intermediates: bool,
    },
    /// Score predictions against the 7T ground truth.
    Evaluate(Common),
    /// Compare the two arms of an ablation.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// finetune or superres.
        #[arg(long)]
        axis: String,
    },
    /// Every stage in order, skipping finished ones.
    Run(Common),
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => other,
        })?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.set("seed", &s.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn setup(c: &Common) -> Result<(PipelineConfig, &Path)> {
    let cfg = load_config(c)?;
    pipeline::write_config(&c.out, &cfg)?;
    Ok((cfg, &c.out))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(c) => {
            let (cfg, out) = setup(&c)?;
            let rows = pipeline::cmd_phantom(out, &cfg)?;
            println!("wrote {} subjects to {}", rows.len(), out.join("data").display());
        }
        Command::FitRish(c) => {
            let (cfg, out) = setup(&c)?;
            let n = pipeline::cmd_fit_rish(out, &cfg)?;
            println!("wrote {n} files to {}", out.join("rish").display());
        }
        Command::Train {
            common,
            stage,
            stop_after,
        } => {
            let stage = Stage::parse(&stage)?;
            let (cfg, out) = setup(&common)?;
            let o = pipeline::cmd_train(out, &cfg, stage, stop_after)?;
            println!(
                "{}: epochs {}..{} of {}",
                stage.name(),
                o.start_epoch,
                o.epoch,
                o.total_epochs
            );
        }
        Command::Infer {
            common,
            subject,
            save_intermediates,
        } => {
            let (cfg, out) = setup(&common)?;
            let subjects = (!subject.is_empty()).then_some(subject.as_slice());
            let done = pipeline::cmd_infer(out, &cfg, subjects, save_intermediates)?;
            println!("predicted {} subjects", done.len());
        }
        Command::Evaluate(c) => {
            let (cfg, out) = setup(&c)?;
            let ev = pipeline::cmd_evaluate(out, &cfg)?;
            print!("{}\n{}", ev.input.summary("input (3T upsampled)"), ev.predicted.summary("predicted 7T"));
        }
        Command::Ablate { common, axis } => {
            let axis = Axis::parse(&axis)?;
            let (cfg, out) = setup(&common)?;
            let ab = pipeline::cmd_ablate(out, &cfg, axis)?;
            print!("{}", ab.to_csv());
        }
        Command::Run(c) => {
            let (cfg, out) = setup(&c)?;
            let r = pipeline::run_all(out, &cfg)?;
            print!(
                "{}\n{}",
                r.evaluation.input.summary("input (3T upsampled)"),
                r.evaluation.predicted.summary("predicted 7T")
            );
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Dependency { .. } => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
