//! Even-order real spherical harmonics, regularized fitting and RISH features.
//!
//! Basis convention (real, symmetric, no Condon–Shortley phase): for order `l`
//! and degree `m`,
//!
//! ```text
//! Y_lm = √2·N_l|m|·P_l^|m|(cos θ)·cos(|m|φ)   m < 0
//!        N_l0·P_l(cos θ)                       m = 0
//!        √2·N_lm·P_l^m(cos θ)·sin(mφ)          m > 0
//! N_lm = √((2l+1)/(4π) · (l−m)!/(l+m)!)
//! ```
//!
//! Coefficients are stored order-major with degree ascending:
//! (0,0), (2,−2)…(2,2), (4,−4)…(4,4), so `R(L) = (L+1)(L+2)/2`.

use nalgebra::{DMatrix, DVector};

use crate::error::{arg, Error, Result};
use crate::volume::{GradientTable, Semantics, Volume3, Volume4};

/// Default Laplace–Beltrami regularization weight.
pub const DEFAULT_LAMBDA_LB: f64 = 0.006;
/// Default τ in the scale-map denominator.
pub const DEFAULT_TAU: f64 = 1e-8;
/// Voxels whose mean baseline is at or below this are left out of the fit.
pub const BASELINE_FLOOR: f64 = 1e-6;

pub fn num_coeffs(max_order: usize) -> usize {
    (max_order + 1) * (max_order + 2) / 2
}

/// Even orders 0, 2, …, `max_order`.
pub fn orders(max_order: usize) -> Vec<usize> {
    (0..=max_order).step_by(2).collect()
}

/// Index range of order `l` inside a coefficient vector.
pub fn order_range(l: usize) -> std::ops::Range<usize> {
    let start = if l == 0 { 0 } else { num_coeffs(l - 2) };
    start..start + 2 * l + 1
}

fn check_order(max_order: usize) -> Result<()> {
    if max_order % 2 != 0 {
        return arg(format!("SH order must be even, got {max_order}"));
    }
    Ok(())
}

/// Associated Legendre functions P_l^m(x) for 0 ≤ m ≤ l ≤ lmax, without the
/// Condon–Shortley phase. Indexed `[l][m]`.
fn legendre_table(lmax: usize, x: f64) -> Vec<Vec<f64>> {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut p = vec![vec![0.0; lmax + 1]; lmax + 1];
    let mut pmm = 1.0;
    for m in 0..=lmax {
        if m > 0 {
            pmm *= (2 * m - 1) as f64 * s;
        }
        p[m][m] = pmm;
        if m < lmax {
            p[m + 1][m] = x * (2 * m + 1) as f64 * pmm;
        }
        for l in m + 2..=lmax {
            p[l][m] = ((2 * l - 1) as f64 * x * p[l - 1][m] - (l + m - 1) as f64 * p[l - 2][m])
                / (l - m) as f64;
        }
    }
    p
}

fn norm_factor(l: usize, m: usize) -> f64 {
    // (l−m)!/(l+m)! as a product to avoid overflow.
    let ratio: f64 = ((l - m + 1)..=(l + m)).map(|k| 1.0 / k as f64).product();
    ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * ratio).sqrt()
}

/// All basis values at one unit direction, in storage order.
pub fn sh_row(dir: [f64; 3], max_order: usize) -> Vec<f64> {
    let z = dir[2].clamp(-1.0, 1.0);
    let phi = dir[1].atan2(dir[0]);
    let p = legendre_table(max_order, z);
    let mut row = Vec::with_capacity(num_coeffs(max_order));
    for l in orders(max_order) {
        for m in -(l as i64)..=(l as i64) {
            let am = m.unsigned_abs() as usize;
            let base = norm_factor(l, am) * p[l][am];
            row.push(match m {
                m if m < 0 => std::f64::consts::SQRT_2 * base * (am as f64 * phi).cos(),
                0 => base,
                _ => std::f64::consts::SQRT_2 * base * (am as f64 * phi).sin(),
            });
        }
    }
    row
}

/// SH basis evaluated at a list of directions.
#[derive(Clone, Debug, PartialEq)]
pub struct ShBasisMatrix {
    max_order: usize,
    matrix: DMatrix<f64>,
}

impl ShBasisMatrix {
    pub fn from_dirs(dirs: &[[f64; 3]], max_order: usize) -> Result<Self> {
        check_order(max_order)?;
        let cols = num_coeffs(max_order);
        let mut matrix = DMatrix::zeros(dirs.len(), cols);
        for (k, d) in dirs.iter().enumerate() {
            for (c, v) in sh_row(*d, max_order).into_iter().enumerate() {
                matrix[(k, c)] = v;
            }
        }
        Ok(Self { max_order, matrix })
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.matrix[(row, col)]
    }
}

/// Basis at the diffusion-weighted directions of `gtab`.
pub fn sh_basis(gtab: &GradientTable, max_order: usize) -> Result<ShBasisMatrix> {
    let dirs = gtab.weighted_dirs();
    if dirs.is_empty() {
        return arg("gradient table has no diffusion-weighted directions");
    }
    ShBasisMatrix::from_dirs(&dirs, max_order)
}

/// Regularized least-squares projector `(BᵀB + λΛ)⁻¹Bᵀ` for a fixed scheme.
#[derive(Clone, Debug)]
pub struct ShFitter {
    basis: ShBasisMatrix,
    projector: DMatrix<f64>,
}

impl ShFitter {
    pub fn new(basis: ShBasisMatrix, lambda_lb: f64) -> Result<Self> {
        if !(lambda_lb >= 0.0 && lambda_lb.is_finite()) {
            return arg(format!("lambda_lb must be finite and ≥ 0, got {lambda_lb}"));
        }
        let (n, r) = (basis.rows(), basis.cols());
        if n < r {
            return arg(format!(
                "{n} directions cannot determine {r} coefficients of order {}",
                basis.max_order
            ));
        }
        let b = basis.matrix();
        let mut normal = b.transpose() * b;
        for l in orders(basis.max_order) {
            let pen = lambda_lb * (l * l * (l + 1) * (l + 1)) as f64;
            for c in order_range(l) {
                normal[(c, c)] += pen;
            }
        }
        let chol = normal.cholesky().ok_or_else(|| {
            Error::Numerical("SH normal matrix is singular for this scheme (shared by every voxel)".into())
        })?;
        let projector = chol.solve(&b.transpose());
        Ok(Self { basis, projector })
    }

    pub fn basis(&self) -> &ShBasisMatrix {
        &self.basis
    }

    /// Coefficients of one voxel from its diffusion-weighted samples.
    pub fn fit_voxel(&self, s: &[f64]) -> Vec<f64> {
        (&self.projector * DVector::from_column_slice(s)).iter().copied().collect()
    }
}

/// Per-voxel SH coefficients; q axis = coefficient index.
#[derive(Clone, Debug, PartialEq)]
pub struct ShCoefficients {
    max_order: usize,
    data: Volume4,
}

impl ShCoefficients {
    pub fn new(max_order: usize, data: Volume4) -> Result<Self> {
        check_order(max_order)?;
        if data.nq() != num_coeffs(max_order) {
            return arg(format!(
                "order {max_order} needs {} coefficients, volume has {}",
                num_coeffs(max_order),
                data.nq()
            ));
        }
        Ok(Self { max_order, data })
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn volume(&self) -> &Volume4 {
        &self.data
    }

    pub fn into_volume(self) -> Volume4 {
        self.data
    }

    pub fn semantics(&self) -> Semantics {
        Semantics::ShCoefficients(self.max_order as u32)
    }

    pub fn voxel(&self, v: usize) -> Vec<f64> {
        self.data.series(v)
    }

    /// Keep only order `l`, zeroing every other order.
    pub fn only_order(&self, l: usize) -> Result<Self> {
        let keep = order_range(l);
        let n = self.data.num_voxels();
        let mut d = self.data.data().to_vec();
        for c in 0..self.data.nq() {
            if !keep.contains(&c) {
                d[c * n..(c + 1) * n].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Self::new(self.max_order, Volume4::new(self.data.dims(), self.data.voxel_size(), d)?)
    }
}

/// Fit SH coefficients to a DWI series. Diffusion-weighted samples are divided
/// by the voxel's mean baseline; voxels with mean baseline ≤ `BASELINE_FLOOR`
/// get zero coefficients. A table without baselines is fitted unnormalized.
pub fn fit_sh(dwi: &Volume4, gtab: &GradientTable, max_order: usize, lambda_lb: f64) -> Result<ShCoefficients> {
    fit_sh_masked(dwi, gtab, max_order, lambda_lb, None)
}

/// As `fit_sh`, additionally zeroing voxels where `mask` is false.
pub fn fit_sh_masked(
    dwi: &Volume4,
    gtab: &GradientTable,
    max_order: usize,
    lambda_lb: f64,
    mask: Option<&[bool]>,
) -> Result<ShCoefficients> {
    check_order(max_order)?;
    if dwi.nq() != gtab.len() {
        return arg(format!("DWI has {} volumes, gradient table {}", dwi.nq(), gtab.len()));
    }
    let nvox = dwi.num_voxels();
    if let Some(m) = mask {
        if m.len() != nvox {
            return arg(format!("mask has {} voxels, DWI {nvox}", m.len()));
        }
    }
    let fitter = ShFitter::new(sh_basis(gtab, max_order)?, lambda_lb)?;
    let base = gtab.baseline_indices();
    let weighted = gtab.weighted_indices();
    let r = num_coeffs(max_order);
    let mut out = vec![0.0; nvox * r];
    let mut s = vec![0.0; weighted.len()];
    for v in 0..nvox {
        if mask.is_some_and(|m| !m[v]) {
            continue;
        }
        let norm = if base.is_empty() {
            1.0
        } else {
            base.iter().map(|&q| dwi.get(v, q)).sum::<f64>() / base.len() as f64
        };
        if norm <= BASELINE_FLOOR {
            continue;
        }
        for (dst, &q) in s.iter_mut().zip(&weighted) {
            *dst = dwi.get(v, q) / norm;
        }
        for (c, val) in fitter.fit_voxel(&s).into_iter().enumerate() {
            out[c * nvox + v] = val;
        }
    }
    let [nx, ny, nz] = dwi.spatial_dims();
    ShCoefficients::new(max_order, Volume4::new([nx, ny, nz, r], dwi.voxel_size(), out)?)
}

/// Evaluate the SH expansion on `gtab`. Diffusion-weighted entries get `B·C`;
/// baseline entries get the normalized baseline, 1, in voxels holding any
/// nonzero coefficient and 0 elsewhere.
pub fn reconstruct_signal(coeffs: &ShCoefficients, gtab: &GradientTable) -> Result<Volume4> {
    let data = &coeffs.data;
    let nvox = data.num_voxels();
    let r = data.nq();
    let rows: Vec<Option<Vec<f64>>> = (0..gtab.len())
        .map(|k| (!gtab.is_baseline(k)).then(|| sh_row(gtab.dirs()[k], coeffs.max_order)))
        .collect();
    let mut out = vec![0.0; nvox * gtab.len()];
    let mut c = vec![0.0; r];
    for v in 0..nvox {
        for (i, ci) in c.iter_mut().enumerate() {
            *ci = data.get(v, i);
        }
        let present = c.iter().any(|&x| x != 0.0);
        for (k, row) in rows.iter().enumerate() {
            out[k * nvox + v] = match row {
                Some(row) => row.iter().zip(&c).map(|(a, b)| a * b).sum(),
                None if present => 1.0,
                None => 0.0,
            };
        }
    }
    let [nx, ny, nz] = data.spatial_dims();
    Volume4::new([nx, ny, nz, gtab.len()], data.voxel_size(), out)
}

/// Per-order energy maps ‖C_i‖²; q axis indexes orders 0, 2, …, L.
#[derive(Clone, Debug, PartialEq)]
pub struct RishFeatures {
    max_order: usize,
    data: Volume4,
}

impl RishFeatures {
    pub fn new(max_order: usize, data: Volume4) -> Result<Self> {
        check_order(max_order)?;
        if data.nq() != orders(max_order).len() {
            return arg(format!("order {max_order} RISH needs {} maps, got {}", orders(max_order).len(), data.nq()));
        }
        if data.data().iter().any(|&x| x < 0.0) {
            return arg("RISH features must be non-negative");
        }
        Ok(Self { max_order, data })
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn volume(&self) -> &Volume4 {
        &self.data
    }

    pub fn into_volume(self) -> Volume4 {
        self.data
    }

    /// Map for order `l`.
    pub fn order(&self, l: usize) -> Volume3 {
        self.data.volume(l / 2)
    }

    pub fn semantics(&self) -> Semantics {
        Semantics::Rish(self.max_order as u32)
    }
}

pub fn compute_rish(coeffs: &ShCoefficients) -> Result<RishFeatures> {
    let data = &coeffs.data;
    let n = data.num_voxels();
    let mut out = Vec::with_capacity(n * orders(coeffs.max_order).len());
    for l in orders(coeffs.max_order) {
        let range = order_range(l);
        out.extend((0..n).map(|v| range.clone().map(|c| data.get(v, c).powi(2)).sum::<f64>()));
    }
    let [nx, ny, nz] = data.spatial_dims();
    RishFeatures::new(
        coeffs.max_order,
        Volume4::new([nx, ny, nz, orders(coeffs.max_order).len()], data.voxel_size(), out)?,
    )
}

/// Per-order multiplicative factors λ_i = √(target/(source + τ)).
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleMap {
    max_order: usize,
    tau: f64,
    data: Volume4,
}

impl ScaleMap {
    pub fn new(max_order: usize, tau: f64, data: Volume4) -> Result<Self> {
        check_order(max_order)?;
        if !(tau > 0.0) {
            return arg(format!("tau must be > 0, got {tau}"));
        }
        if data.nq() != orders(max_order).len() {
            return arg("scale map needs one channel per order");
        }
        if data.data().iter().any(|&x| x < 0.0) {
            return arg("scale factors must be non-negative");
        }
        Ok(Self { max_order, tau, data })
    }

    /// λ ≡ `value` for every order on the given grid.
    pub fn uniform(max_order: usize, dims: [usize; 3], voxel_size: [f64; 3], value: f64) -> Result<Self> {
        let nq = orders(max_order).len();
        let n = dims.iter().product::<usize>() * nq;
        Self::new(
            max_order,
            DEFAULT_TAU,
            Volume4::new([dims[0], dims[1], dims[2], nq], voxel_size, vec![value; n])?,
        )
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn volume(&self) -> &Volume4 {
        &self.data
    }

    pub fn order(&self, l: usize) -> Volume3 {
        self.data.volume(l / 2)
    }

    pub fn semantics(&self) -> Semantics {
        Semantics::ScaleMap(self.max_order as u32)
    }
}

pub fn compute_scale_map(target: &RishFeatures, source: &RishFeatures, tau: f64) -> Result<ScaleMap> {
    if target.data.dims() != source.data.dims() || target.max_order != source.max_order {
        return arg(format!(
            "RISH grids differ: target {:?} (L={}) vs source {:?} (L={})",
            target.data.dims(),
            target.max_order,
            source.data.dims(),
            source.max_order
        ));
    }
    if !(tau > 0.0) {
        return arg(format!("tau must be > 0, got {tau}"));
    }
    let out = target
        .data
        .data()
        .iter()
        .zip(source.data.data())
        .map(|(&t, &s)| (t / (s + tau)).sqrt())
        .collect();
    ScaleMap::new(
        target.max_order,
        tau,
        Volume4::new(target.data.dims(), target.data.voxel_size(), out)?,
    )
}

/// Multiply every order-i coefficient by λ_i.
pub fn apply_scale_map(coeffs: &ShCoefficients, scale: &ScaleMap) -> Result<ShCoefficients> {
    if coeffs.data.spatial_dims() != scale.data.spatial_dims() || coeffs.max_order != scale.max_order {
        return arg(format!(
            "scale map {:?} (L={}) does not match coefficients {:?} (L={})",
            scale.data.spatial_dims(),
            scale.max_order,
            coeffs.data.spatial_dims(),
            coeffs.max_order
        ));
    }
    let n = coeffs.data.num_voxels();
    let mut d = coeffs.data.data().to_vec();
    for (oi, l) in orders(coeffs.max_order).into_iter().enumerate() {
        for c in order_range(l) {
            for v in 0..n {
                d[c * n + v] *= scale.data.get(v, oi);
            }
        }
    }
    ShCoefficients::new(
        coeffs.max_order,
        Volume4::new(coeffs.data.dims(), coeffs.data.voxel_size(), d)?,
    )
}
