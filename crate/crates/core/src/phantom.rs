//! Paired synthetic diffusion phantoms.
//!
//! Each subject is a spherical "brain" holding two curved fiber bundles that
//! cross at 60° near the centre, isotropic tissue, and a small free-water
//! ventricle. The continuous field is sampled on a coarse source grid
//! (3T-like, low SNR) and a finer target grid (7T-like, high SNR). The target
//! additionally receives a smooth per-order RISH contrast shared by every
//! subject of the same scanner, which gives a learnable source→target mapping.
//!
//! Coordinates are in mm with the origin at the grid centre; voxel `i` of an
//! axis with `n` voxels of size `s` sits at `((i + ½) − n/2)·s`.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg, IoContext, Result};
use crate::sh::{num_coeffs, order_range, orders, sh_row, ShBasisMatrix, ShFitter};
use crate::volume::{
    derive_seed, fibonacci_hemisphere, load_volume4, save_volume, seeded_rng, GradientTable, Rng,
    Semantics, Volume3, Volume4,
};

/// Axial and radial diffusivities of a fiber compartment, mm²/s.
pub const FIBER_EIGENVALUES: [f64; 3] = [1.7e-3, 0.3e-3, 0.3e-3];
pub const TISSUE_DIFFUSIVITY: f64 = 0.8e-3;
pub const FREE_WATER_DIFFUSIVITY: f64 = 3.0e-3;
const MAX_FIBER_FRACTION: f64 = 0.8;
const CONTRAST_ORDER: usize = 4;
const CONTRAST_WAVES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub dims: [usize; 3],
    /// Isotropic voxel size, mm.
    pub voxel_size: f64,
    /// Signal-to-noise ratio S0/σ; `f64::INFINITY` disables noise.
    pub snr: f64,
    pub directions: usize,
    pub baselines: usize,
    pub bval: f64,
}

impl DomainConfig {
    pub fn gtab(&self) -> Result<GradientTable> {
        GradientTable::single_shell(self.bval, self.baselines, &fibonacci_hemisphere(self.directions))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub source: DomainConfig,
    pub target: DomainConfig,
    pub s0: f64,
    /// Mean mask radius, mm.
    pub mask_radius: f64,
    /// Target/source gain per RISH order 0, 2, 4 (applied to coefficients).
    pub contrast_gains: [f64; 3],
    /// Relative amplitude of the smooth spatial contrast field.
    pub contrast_amplitude: f64,
    /// Seed of the scanner-level contrast field, shared by all subjects.
    pub contrast_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            source: DomainConfig {
                dims: [16; 3],
                voxel_size: 1.25,
                snr: 20.0,
                directions: 60,
                baselines: 4,
                bval: 1000.0,
            },
            target: DomainConfig {
                dims: [19; 3],
                voxel_size: 1.05,
                snr: 50.0,
                directions: 64,
                baselines: 4,
                bval: 1000.0,
            },
            s0: 1000.0,
            mask_radius: 8.5,
            contrast_gains: [1.1, 1.25, 1.4],
            contrast_amplitude: 0.2,
            contrast_seed: 7,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, d) in [("source", &self.source), ("target", &self.target)] {
            if !(d.snr > 0.0) {
                return arg(format!("{name} SNR must be > 0, got {}", d.snr));
            }
            if !(d.voxel_size > 0.0) || d.dims.contains(&0) {
                return arg(format!("{name} grid must be nonempty with positive voxel size"));
            }
            if d.directions < num_coeffs(CONTRAST_ORDER) {
                return arg(format!("{name} scheme needs at least {} directions", num_coeffs(CONTRAST_ORDER)));
            }
            d.gtab()?;
        }
        if self.target.voxel_size > self.source.voxel_size {
            return arg("target grid must be finer than or equal to the source grid");
        }
        if !(self.s0 > 0.0 && self.mask_radius > 0.0) {
            return arg("s0 and mask radius must be positive");
        }
        Ok(())
    }
}

/// One diffusion compartment: volume fraction and diffusion tensor (mm²/s).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Compartment {
    pub fraction: f64,
    pub tensor: Matrix3<f64>,
}

/// Tissue model of one voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelModel {
    pub s0: f64,
    pub compartments: Vec<Compartment>,
}

pub fn stick_tensor(dir: Vector3<f64>, eig: [f64; 3]) -> Matrix3<f64> {
    let t = dir.normalize();
    Matrix3::identity() * eig[1] + t * t.transpose() * (eig[0] - eig[1])
}

pub fn isotropic_tensor(d: f64) -> Matrix3<f64> {
    Matrix3::identity() * d
}

/// Fractional anisotropy of a symmetric tensor.
pub fn tensor_fa(d: &Matrix3<f64>) -> f64 {
    let ev = SymmetricEigen::new(*d).eigenvalues;
    fa_from_eigenvalues([ev[0], ev[1], ev[2]])
}

pub fn fa_from_eigenvalues(ev: [f64; 3]) -> f64 {
    let mean = (ev[0] + ev[1] + ev[2]) / 3.0;
    let num: f64 = ev.iter().map(|e| (e - mean).powi(2)).sum();
    let den: f64 = ev.iter().map(|e| e * e).sum();
    if den <= 0.0 {
        return 0.0;
    }
    (1.5 * num / den).sqrt().clamp(0.0, 1.0)
}

fn check_voxel(k: usize, vm: &VoxelModel) -> Result<()> {
    if !(vm.s0 >= 0.0 && vm.s0.is_finite()) {
        return arg(format!("voxel {k}: S0 must be finite and ≥ 0"));
    }
    let total: f64 = vm.compartments.iter().map(|c| c.fraction).sum();
    if vm.compartments.iter().any(|c| c.fraction < 0.0) || (total - 1.0).abs() > 1e-9 {
        return arg(format!("voxel {k}: fractions must be ≥ 0 and sum to 1 (sum {total})"));
    }
    for c in &vm.compartments {
        if (c.tensor - c.tensor.transpose()).abs().max() > 1e-15 || c.tensor.cholesky().is_none() {
            return arg(format!("voxel {k}: tensor must be symmetric positive definite"));
        }
    }
    Ok(())
}

/// Multi-compartment signal S(g) = S0·Σ f_k·exp(−b·gᵀD_k g).
pub fn simulate_signal(
    dims: [usize; 3],
    voxel_size: [f64; 3],
    voxels: &[VoxelModel],
    gtab: &GradientTable,
) -> Result<Volume4> {
    let n: usize = dims.iter().product();
    if voxels.len() != n {
        return arg(format!("{dims:?} needs {n} voxel models, got {}", voxels.len()));
    }
    for (k, vm) in voxels.iter().enumerate() {
        check_voxel(k, vm)?;
    }
    let mut out = vec![0.0; n * gtab.len()];
    for (q, (&b, d)) in gtab.bvals().iter().zip(gtab.dirs()).enumerate() {
        let g = Vector3::new(d[0], d[1], d[2]);
        for (v, vm) in voxels.iter().enumerate() {
            out[q * n + v] = vm.s0
                * vm.compartments
                    .iter()
                    .map(|c| c.fraction * (-b * (g.transpose() * c.tensor * g)[0]).exp())
                    .sum::<f64>();
        }
    }
    Volume4::new([dims[0], dims[1], dims[2], gtab.len()], voxel_size, out)
}

/// Rician magnitude noise: √((s + n₁)² + n₂²) with n_i ~ N(0, σ²), σ = s0/snr.
pub fn add_rician_noise(dwi: &Volume4, snr: f64, s0: f64, rng: &mut Rng) -> Result<Volume4> {
    if !(snr > 0.0) {
        return arg(format!("SNR must be > 0, got {snr}"));
    }
    let sigma = s0 / snr;
    if sigma == 0.0 {
        return Ok(dwi.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| crate::Error::Argument(e.to_string()))?;
    let out = dwi
        .data()
        .iter()
        .map(|&s| {
            let n1 = normal.sample(rng);
            let n2 = normal.sample(rng);
            ((s + n1).powi(2) + n2 * n2).sqrt()
        })
        .collect();
    Volume4::new(dwi.dims(), dwi.voxel_size(), out)
}

/// A circular-arc fiber bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub center: [f64; 3],
    /// Unit normal of the arc's plane.
    pub normal: [f64; 3],
    pub radius: f64,
    pub tube_radius: f64,
}

impl Bundle {
    /// Bundle weight in [0, 1] and the local fiber direction at `p`.
    fn at(&self, p: Vector3<f64>) -> (f64, Vector3<f64>) {
        let c = Vector3::from(self.center);
        let n = Vector3::from(self.normal);
        let q = p - c;
        let in_plane = q - n * q.dot(&n);
        let norm = in_plane.norm();
        if norm < 1e-12 {
            return (0.0, Vector3::x());
        }
        let radial = in_plane / norm;
        let nearest = c + radial * self.radius;
        let d = (p - nearest).norm();
        if d >= self.tube_radius {
            return (0.0, Vector3::x());
        }
        let w = (std::f64::consts::FRAC_PI_2 * d / self.tube_radius).cos().powi(2);
        (w, n.cross(&radial))
    }
}

/// The continuous tissue field of one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub mask_center: [f64; 3],
    pub mask_radii: [f64; 3],
    pub bundles: Vec<Bundle>,
    pub ventricle_center: [f64; 3],
    pub ventricle_radius: f64,
}

fn rotate_about_z(v: Vector3<f64>, a: f64) -> Vector3<f64> {
    Vector3::new(a.cos() * v.x - a.sin() * v.y, a.sin() * v.x + a.cos() * v.y, v.z)
}

impl Geometry {
    pub fn random(mask_radius: f64, rng: &mut Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let mask_center = [u(-0.5, 0.5), u(-0.5, 0.5), u(-0.5, 0.5)];
        let mask_radii = [0, 1, 2].map(|_| mask_radius * u(0.9, 1.05));
        let crossing = Vector3::new(u(-1.0, 1.0), u(-1.0, 1.0), u(-0.5, 0.5));
        let heading = u(0.0, std::f64::consts::PI);
        let mut bundles = Vec::new();
        for k in 0..2 {
            let a = heading + k as f64 * std::f64::consts::FRAC_PI_3;
            let tangent = Vector3::new(a.cos(), a.sin(), 0.0);
            let side = rotate_about_z(Vector3::new(0.0, 1.0, 0.0), a);
            let tilt = u(-0.6, 0.6);
            let bend = (side * tilt.cos() + Vector3::z() * tilt.sin()) * if k == 0 { 1.0 } else { -1.0 };
            let radius = u(12.0, 22.0);
            let normal = tangent.cross(&bend).normalize();
            let center = crossing + bend * radius;
            bundles.push(Bundle {
                center: center.into(),
                normal: normal.into(),
                radius,
                tube_radius: u(2.8, 3.8),
            });
        }
        let ventricle_center = [u(-5.0, -3.0), u(2.0, 4.0), u(-1.0, 1.0)];
        Self {
            mask_center,
            mask_radii,
            bundles,
            ventricle_center,
            ventricle_radius: u(1.5, 2.5),
        }
    }

    pub fn in_mask(&self, p: Vector3<f64>) -> bool {
        (0..3)
            .map(|i| ((p[i] - self.mask_center[i]) / self.mask_radii[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Tissue model at a physical point.
    pub fn voxel_model(&self, p: Vector3<f64>, s0: f64) -> VoxelModel {
        let mut compartments = Vec::new();
        let mut fibers = Vec::new();
        for b in &self.bundles {
            let (w, dir) = b.at(p);
            if w > 0.0 {
                fibers.push((0.6 * w, dir));
            }
        }
        let total: f64 = fibers.iter().map(|f| f.0).sum();
        let shrink = if total > MAX_FIBER_FRACTION { MAX_FIBER_FRACTION / total } else { 1.0 };
        let mut used = 0.0;
        for (f, dir) in fibers {
            let f = f * shrink;
            used += f;
            compartments.push(Compartment {
                fraction: f,
                tensor: stick_tensor(dir, FIBER_EIGENVALUES),
            });
        }
        let dv = (p - Vector3::from(self.ventricle_center)).norm();
        if dv < self.ventricle_radius {
            let w = (std::f64::consts::FRAC_PI_2 * dv / self.ventricle_radius).cos().powi(2);
            let f = w * (1.0 - used);
            used += f;
            compartments.push(Compartment {
                fraction: f,
                tensor: isotropic_tensor(FREE_WATER_DIFFUSIVITY),
            });
        }
        compartments.push(Compartment {
            fraction: 1.0 - used,
            tensor: isotropic_tensor(TISSUE_DIFFUSIVITY),
        });
        VoxelModel {
            s0: if self.in_mask(p) { s0 } else { 0.0 },
            compartments,
        }
    }

    /// Voxel models for every voxel centre of a grid.
    pub fn sample(&self, dims: [usize; 3], voxel_size: f64, s0: f64) -> Vec<VoxelModel> {
        let mut out = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    out.push(self.voxel_model(voxel_center([x, y, z], dims, voxel_size), s0));
                }
            }
        }
        out
    }
}

pub fn voxel_center(idx: [usize; 3], dims: [usize; 3], voxel_size: f64) -> Vector3<f64> {
    Vector3::from([0, 1, 2].map(|i| ((idx[i] as f64 + 0.5) - dims[i] as f64 / 2.0) * voxel_size))
}

/// Smooth multiplicative field per RISH order: `1 + a·F_i(p)`, |F_i| ≤ 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastField {
    gains: [f64; 3],
    amplitude: f64,
    /// Per order: (wave vector, phase) pairs.
    waves: Vec<Vec<([f64; 3], f64)>>,
}

impl ContrastField {
    pub fn new(gains: [f64; 3], amplitude: f64, seed: u64, extent: f64) -> Self {
        let mut rng = seeded_rng(derive_seed(seed, "contrast", 0));
        let waves = (0..3)
            .map(|_| {
                (0..CONTRAST_WAVES)
                    .map(|_| {
                        let dir = Vector3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        )
                        .normalize();
                        let k = rng.random_range(0.5..1.5) * std::f64::consts::TAU / extent;
                        ((dir * k).into(), rng.random_range(0.0..std::f64::consts::TAU))
                    })
                    .collect()
            })
            .collect();
        Self { gains, amplitude, waves }
    }

    /// Coefficient multiplier for order index `oi` at `p`.
    pub fn factor(&self, oi: usize, p: Vector3<f64>) -> f64 {
        let f: f64 = self.waves[oi]
            .iter()
            .map(|(k, phase)| (Vector3::from(*k).dot(&p) + phase).cos())
            .sum::<f64>()
            / CONTRAST_WAVES as f64;
        self.gains[oi] * (1.0 + self.amplitude * f)
    }
}

/// Rescale per-order SH energy of a noiseless DWI while keeping the part of
/// the signal outside the order-4 span untouched.
fn apply_contrast(
    dwi: &Volume4,
    gtab: &GradientTable,
    field: &ContrastField,
    voxel_size: f64,
) -> Result<Volume4> {
    let weighted = gtab.weighted_indices();
    let fitter = ShFitter::new(ShBasisMatrix::from_dirs(&gtab.weighted_dirs(), CONTRAST_ORDER)?, 0.0)?;
    let rows: Vec<Vec<f64>> = weighted.iter().map(|&k| sh_row(gtab.dirs()[k], CONTRAST_ORDER)).collect();
    let base = gtab.baseline_indices();
    let dims = dwi.spatial_dims();
    let n = dwi.num_voxels();
    let mut out = dwi.data().to_vec();
    let mut s = vec![0.0; weighted.len()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let v = x + dims[0] * (y + dims[1] * z);
                let s0 = base.iter().map(|&q| dwi.get(v, q)).sum::<f64>() / base.len().max(1) as f64;
                if s0 <= 0.0 {
                    continue;
                }
                for (dst, &q) in s.iter_mut().zip(&weighted) {
                    *dst = dwi.get(v, q) / s0;
                }
                let c = fitter.fit_voxel(&s);
                let p = voxel_center([x, y, z], dims, voxel_size);
                let mut scaled = c.clone();
                for (oi, l) in orders(CONTRAST_ORDER).into_iter().enumerate() {
                    let f = field.factor(oi, p);
                    for i in order_range(l) {
                        scaled[i] *= f;
                    }
                }
                for ((row, &q), &sv) in rows.iter().zip(&weighted).zip(&s) {
                    let fit: f64 = row.iter().zip(&c).map(|(a, b)| a * b).sum();
                    let new: f64 = row.iter().zip(&scaled).map(|(a, b)| a * b).sum();
                    out[q * n + v] = s0 * (new + sv - fit).max(0.0);
                }
            }
        }
    }
    Volume4::new(dwi.dims(), dwi.voxel_size(), out)
}

/// DWI series plus its gradient table.
#[derive(Clone, Debug, PartialEq)]
pub struct Dwi {
    pub data: Volume4,
    pub gtab: GradientTable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    pub seed: u64,
    pub source: Dwi,
    pub target: Dwi,
    /// The shared continuous field both grids were sampled from.
    pub geometry: Geometry,
}

impl PhantomPair {
    /// Exact voxel models on the source or target grid.
    pub fn voxel_models(&self, config: &PhantomConfig, target: bool) -> Vec<VoxelModel> {
        let d = if target { &config.target } else { &config.source };
        self.geometry.sample(d.dims, d.voxel_size, config.s0)
    }
}

fn simulate_domain(
    geometry: &Geometry,
    config: &PhantomConfig,
    d: &DomainConfig,
    contrast: Option<&ContrastField>,
    noise_seed: u64,
) -> Result<Dwi> {
    let gtab = d.gtab()?;
    let voxels = geometry.sample(d.dims, d.voxel_size, config.s0);
    let mut data = simulate_signal(d.dims, [d.voxel_size; 3], &voxels, &gtab)?;
    if let Some(field) = contrast {
        data = apply_contrast(&data, &gtab, field, d.voxel_size)?;
    }
    let data = add_rician_noise(&data, d.snr, config.s0, &mut seeded_rng(noise_seed))?;
    Ok(Dwi { data, gtab })
}

/// Generate one subject on both grids. Deterministic in (config, seed).
pub fn generate_pair(config: &PhantomConfig, seed: u64) -> Result<PhantomPair> {
    config.validate()?;
    let geometry = Geometry::random(config.mask_radius, &mut seeded_rng(derive_seed(seed, "geometry", 0)));
    let extent = config.source.dims.iter().copied().max().unwrap_or(1) as f64 * config.source.voxel_size;
    let field = ContrastField::new(config.contrast_gains, config.contrast_amplitude, config.contrast_seed, extent);
    let source = simulate_domain(&geometry, config, &config.source, None, derive_seed(seed, "noise-source", 0))?;
    let target = simulate_domain(&geometry, config, &config.target, Some(&field), derive_seed(seed, "noise-target", 0))?;
    Ok(PhantomPair {
        seed,
        source,
        target,
        geometry,
    })
}

/// Contents of a subject's JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub schema: u32,
    pub subject: String,
    pub seed: u64,
    pub s0: f64,
    pub source: SidecarDomain,
    pub target: SidecarDomain,
    pub geometry: Geometry,
    pub contrast_gains: [f64; 3],
    pub contrast_amplitude: f64,
    pub contrast_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarDomain {
    pub file: String,
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub snr: f64,
    pub gtab: GradientTable,
}

pub const SIDECAR_SCHEMA: u32 = 1;

/// File paths written for one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectFiles {
    pub source: PathBuf,
    pub target: PathBuf,
    pub sidecar: PathBuf,
}

impl SubjectFiles {
    pub fn new(dir: &Path, subject: &str) -> Self {
        Self {
            source: dir.join(format!("{subject}_3t_dwi.rgv")),
            target: dir.join(format!("{subject}_7t_dwi.rgv")),
            sidecar: dir.join(format!("{subject}.json")),
        }
    }
}

fn snr_json(snr: f64) -> f64 {
    // JSON has no infinity; 0 marks a noiseless domain.
    if snr.is_finite() { snr } else { 0.0 }
}

pub fn save_pair(dir: &Path, subject: &str, config: &PhantomConfig, pair: &PhantomPair) -> Result<SubjectFiles> {
    let files = SubjectFiles::new(dir, subject);
    save_volume(&files.source, &pair.source.data, Semantics::Dwi)?;
    save_volume(&files.target, &pair.target.data, Semantics::Dwi)?;
    let domain = |d: &DomainConfig, dwi: &Dwi, path: &Path| SidecarDomain {
        file: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        dims: d.dims,
        voxel_size: d.voxel_size,
        snr: snr_json(d.snr),
        gtab: dwi.gtab.clone(),
    };
    let sidecar = Sidecar {
        schema: SIDECAR_SCHEMA,
        subject: subject.to_string(),
        seed: pair.seed,
        s0: config.s0,
        source: domain(&config.source, &pair.source, &files.source),
        target: domain(&config.target, &pair.target, &files.target),
        geometry: pair.geometry.clone(),
        contrast_gains: config.contrast_gains,
        contrast_amplitude: config.contrast_amplitude,
        contrast_seed: config.contrast_seed,
    };
    let text = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&files.sidecar, text + "\n").at(&files.sidecar)?;
    Ok(files)
}

/// Read a subject back: (sidecar, source DWI, target DWI).
pub fn load_pair(dir: &Path, subject: &str) -> Result<(Sidecar, Dwi, Dwi)> {
    let files = SubjectFiles::new(dir, subject);
    let text = std::fs::read_to_string(&files.sidecar).at(&files.sidecar)?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let source = Dwi {
        data: load_volume4(&files.source)?.0,
        gtab: sidecar.source.gtab.clone(),
    };
    let target = Dwi {
        data: load_volume4(&files.target)?.0,
        gtab: sidecar.target.gtab.clone(),
    };
    Ok((sidecar, source, target))
}

/// Evaluation mask: mean baseline above 10% of its maximum.
pub fn brain_mask(dwi: &Dwi) -> Vec<bool> {
    let base = dwi.gtab.baseline_indices();
    let n = dwi.data.num_voxels();
    let s0: Vec<f64> = (0..n)
        .map(|v| base.iter().map(|&q| dwi.data.get(v, q)).sum::<f64>() / base.len().max(1) as f64)
        .collect();
    let max = s0.iter().cloned().fold(0.0, f64::max);
    s0.iter().map(|&s| s > 0.1 * max).collect()
}

/// Mask as a 0/1 volume on the DWI grid.
pub fn mask_volume(dwi: &Dwi) -> Result<Volume3> {
    let mask = brain_mask(dwi);
    Volume3::new(
        dwi.data.spatial_dims(),
        dwi.data.voxel_size(),
        mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_voxel(c: Vec<Compartment>) -> Vec<VoxelModel> {
        vec![VoxelModel {
            s0: 1000.0,
            compartments: c,
        }]
    }

    #[test]
    fn isotropic_closed_form_and_baselines() {
        let g = GradientTable::single_shell(1000.0, 2, &fibonacci_hemisphere(30)).unwrap();
        let d = 0.9e-3;
        let s = simulate_signal(
            [1, 1, 1],
            [1.0; 3],
            &one_voxel(vec![Compartment {
                fraction: 1.0,
                tensor: isotropic_tensor(d),
            }]),
            &g,
        )
        .unwrap();
        for k in 0..g.len() {
            let expected = if g.is_baseline(k) { 1000.0 } else { 1000.0 * (-1000.0 * d).exp() };
            assert!((s.get(0, k) - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_models_are_rejected() {
        let g = GradientTable::single_shell(1000.0, 1, &fibonacci_hemisphere(6)).unwrap();
        let bad_sum = one_voxel(vec![Compartment {
            fraction: 0.7,
            tensor: isotropic_tensor(1e-3),
        }]);
        assert!(simulate_signal([1, 1, 1], [1.0; 3], &bad_sum, &g).is_err());
        let not_pd = one_voxel(vec![Compartment {
            fraction: 1.0,
            tensor: isotropic_tensor(-1e-3),
        }]);
        assert!(simulate_signal([1, 1, 1], [1.0; 3], &not_pd, &g).is_err());
    }

    #[test]
    fn fa_closed_form() {
        let fa = fa_from_eigenvalues(FIBER_EIGENVALUES);
        // √(3/2)·‖λ − mean‖/‖λ‖ evaluated by hand for (1.7, 0.3, 0.3).
        let m = 2.3 / 3.0;
        let num = (1.7f64 - m).powi(2) + 2.0 * (0.3f64 - m).powi(2);
        let den = 1.7f64.powi(2) + 2.0 * 0.09;
        assert!((fa - (1.5 * num / den).sqrt()).abs() < 1e-12);
        assert!((fa - 0.799022).abs() < 1e-6);
        assert_eq!(fa_from_eigenvalues([1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn rician_noise_is_identity_without_noise_and_nonnegative() {
        let v = Volume4::new([2, 1, 1, 2], [1.0; 3], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mut rng = seeded_rng(0);
        assert_eq!(add_rician_noise(&v, f64::INFINITY, 1000.0, &mut rng).unwrap(), v);
        let noisy = add_rician_noise(&v, 5.0, 1000.0, &mut rng).unwrap();
        assert!(noisy.data().iter().all(|&x| x >= 0.0));
        assert!(add_rician_noise(&v, 0.0, 1000.0, &mut rng).is_err());
    }

    #[test]
    fn fractions_sum_to_one_everywhere() {
        let g = Geometry::random(8.5, &mut seeded_rng(3));
        for vm in g.sample([12, 12, 12], 1.6, 1000.0) {
            let total: f64 = vm.compartments.iter().map(|c| c.fraction).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(vm.compartments.iter().all(|c| c.fraction >= 0.0));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = PhantomConfig::default();
        assert!(c.validate().is_ok());
        c.target.voxel_size = 2.0;
        assert!(c.validate().is_err());
        let mut c = PhantomConfig::default();
        c.source.snr = -1.0;
        assert!(c.validate().is_err());
    }
}
