//! Phantom dataset, subject split, manifest and RISH extraction.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::PipelineConfig;
use crate::error::{arg, Error, IoContext, Result};
use crate::phantom::{brain_mask, generate_pair, load_pair, save_pair, Dwi, SubjectFiles};
use crate::sh::{compute_rish, fit_sh_masked, sh_row, ShCoefficients, RishFeatures};
use crate::volume::{derive_seed, load_volume4, save_volume, seeded_rng, Volume4};

/// How a subject is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Only the 3T side is ever read.
    SourceOnly,
    /// Both sides are available for training.
    Paired,
    Test,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::SourceOnly => "source-only",
            Role::Paired => "paired",
            Role::Test => "test",
        }
    }

    fn from_tag(s: &str) -> Result<Self> {
        match s {
            "source-only" => Ok(Role::SourceOnly),
            "paired" => Ok(Role::Paired),
            "test" => Ok(Role::Test),
            _ => Err(Error::Format {
                offset: 0,
                msg: format!("unknown subject role `{s}`"),
            }),
        }
    }
}

pub fn subject_name(i: usize) -> String {
    format!("sub-{i:03}")
}

/// Seed-derived shuffle; the first `test` subjects are held out, the next
/// `paired` keep their 7T side, the rest are 3T-only.
pub fn split(cfg: &PipelineConfig) -> Result<Vec<Role>> {
    let n = cfg.subjects()?;
    let (test, paired) = (cfg.test_count()?, cfg.paired()?);
    let mut rng = seeded_rng(derive_seed(cfg.seed()?, "split", 0));
    let order = crate::nn::shuffled(n, &mut rng);
    let mut roles = vec![Role::SourceOnly; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < test {
            roles[i] = Role::Test;
        } else if rank < test + paired {
            roles[i] = Role::Paired;
        }
    }
    Ok(roles)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub subject: String,
    pub role: Role,
    pub seed: u64,
    pub source_sha256: String,
    pub target_sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).at(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

pub fn rish_dir(out: &Path) -> PathBuf {
    out.join("rish")
}

pub fn manifest_path(out: &Path) -> PathBuf {
    data_dir(out).join("manifest.csv")
}

fn manifest_csv(rows: &[ManifestRow]) -> String {
    let mut s = String::from("subject,role,seed,source_sha256,target_sha256\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.subject,
            r.role.tag(),
            r.seed,
            r.source_sha256,
            r.target_sha256
        ));
    }
    s
}

/// Generate every subject and write the manifest.
pub fn cmd_phantom(out: &Path, cfg: &PipelineConfig) -> Result<Vec<ManifestRow>> {
    if cfg.subjects()? == 0 {
        return arg("the dataset needs at least one subject");
    }
    let dir = data_dir(out);
    std::fs::create_dir_all(&dir).at(&dir)?;
    let pcfg = cfg.phantom()?;
    let roles = split(cfg)?;
    let mut rows = Vec::with_capacity(roles.len());
    for (i, role) in roles.into_iter().enumerate() {
        let subject = subject_name(i);
        let seed = derive_seed(cfg.seed()?, "phantom", i as u64);
        let pair = generate_pair(&pcfg, seed)?;
        let files = save_pair(&dir, &subject, &pcfg, &pair)?;
        rows.push(ManifestRow {
            subject,
            role,
            seed,
            source_sha256: sha256_file(&files.source)?,
            target_sha256: sha256_file(&files.target)?,
        });
    }
    let path = manifest_path(out);
    std::fs::write(&path, manifest_csv(&rows)).at(&path)?;
    Ok(rows)
}

pub fn read_manifest(out: &Path) -> Result<Vec<ManifestRow>> {
    let path = manifest_path(out);
    let text = std::fs::read_to_string(&path).map_err(|_| Error::Dependency {
        stage: "phantom".into(),
        what: format!("{} not found; run `phantom` first", path.display()),
    })?;
    let bad = |msg: String| Error::Format { offset: 0, msg };
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("manifest row `{l}` has {} fields", f.len())));
            }
            Ok(ManifestRow {
                subject: f[0].to_string(),
                role: Role::from_tag(f[1])?,
                seed: f[2].parse().map_err(|_| bad(format!("bad seed in `{l}`")))?,
                source_sha256: f[3].to_string(),
                target_sha256: f[4].to_string(),
            })
        })
        .collect()
}

/// SHA-256 of the manifest file; equal hashes mean identical phantom data.
pub fn manifest_hash(out: &Path) -> Result<String> {
    sha256_file(&manifest_path(out))
}

pub fn subjects_with(rows: &[ManifestRow], role: Role) -> Vec<String> {
    rows.iter().filter(|r| r.role == role).map(|r| r.subject.clone()).collect()
}

/// Source and target DWI of a subject.
pub fn load_subject(out: &Path, subject: &str) -> Result<(Dwi, Dwi)> {
    let dir = data_dir(out);
    if !SubjectFiles::new(&dir, subject).sidecar.exists() {
        return Err(Error::Dependency {
            stage: "phantom".into(),
            what: format!("subject {subject} not found in {}", dir.display()),
        });
    }
    let (_, s, t) = load_pair(&dir, subject)?;
    Ok((s, t))
}

/// Domain tag used in file names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl Side {
    pub fn tag(self) -> &'static str {
        match self {
            Side::Source => "3t",
            Side::Target => "7t",
        }
    }
}

pub fn rish_paths(out: &Path, subject: &str, side: Side) -> (PathBuf, PathBuf) {
    let d = rish_dir(out);
    (
        d.join(format!("{subject}_{}_sh.rgv", side.tag())),
        d.join(format!("{subject}_{}_rish.rgv", side.tag())),
    )
}

/// SH fit inside the brain mask, then RISH.
pub fn masked_features(dwi: &Dwi, cfg: &PipelineConfig) -> Result<(ShCoefficients, RishFeatures)> {
    let mask = brain_mask(dwi);
    let coeffs = fit_sh_masked(&dwi.data, &dwi.gtab, cfg.sh_order()?, cfg.sh_lambda()?, Some(&mask))?;
    let rish = compute_rish(&coeffs)?;
    Ok((coeffs, rish))
}

/// Fingerprint of the SH basis convention: the basis evaluated on fixed
/// directions. Fitting and reconstruction must agree on it.
pub fn basis_fingerprint(max_order: usize) -> String {
    let dirs = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.48, 0.6, 0.64]];
    let mut h = Sha256::new();
    for d in dirs {
        for v in sh_row(d, max_order) {
            h.update(format!("{v:e};").as_bytes());
        }
    }
    hex(&h.finalize())[..16].to_string()
}

pub fn basis_path(out: &Path) -> PathBuf {
    rish_dir(out).join("basis.txt")
}

/// SH coefficients and RISH of both domains for every subject.
pub fn cmd_fit_rish(out: &Path, cfg: &PipelineConfig) -> Result<usize> {
    let rows = read_manifest(out)?;
    let dir = rish_dir(out);
    std::fs::create_dir_all(&dir).at(&dir)?;
    let mut written = 0;
    for r in &rows {
        let (src, tgt) = load_subject(out, &r.subject)?;
        for (side, dwi) in [(Side::Source, &src), (Side::Target, &tgt)] {
            let (coeffs, rish) = masked_features(dwi, cfg)?;
            let (sh_path, rish_path) = rish_paths(out, &r.subject, side);
            save_volume(&sh_path, coeffs.volume(), coeffs.semantics())?;
            save_volume(&rish_path, rish.volume(), rish.semantics())?;
            written += 2;
        }
    }
    let path = basis_path(out);
    std::fs::write(&path, basis_fingerprint(cfg.sh_order()?) + "\n").at(&path)?;
    Ok(written)
}

/// Check that stored coefficients were fitted with this build's basis.
pub fn check_basis(out: &Path, cfg: &PipelineConfig) -> Result<()> {
    let path = basis_path(out);
    let stored = std::fs::read_to_string(&path).map_err(|_| Error::Dependency {
        stage: "fit-rish".into(),
        what: format!("{} not found; run `fit-rish` first", path.display()),
    })?;
    let now = basis_fingerprint(cfg.sh_order()?);
    if stored.trim() != now {
        return Err(Error::Config(format!(
            "SH basis fingerprint {} differs from the one used for fitting ({})",
            now,
            stored.trim()
        )));
    }
    Ok(())
}

pub fn load_rish(out: &Path, subject: &str, side: Side) -> Result<Volume4> {
    let (_, path) = rish_paths(out, subject, side);
    if !path.exists() {
        return Err(Error::Dependency {
            stage: "fit-rish".into(),
            what: format!("{} not found; run `fit-rish` first", path.display()),
        });
    }
    Ok(load_volume4(&path)?.0)
}
