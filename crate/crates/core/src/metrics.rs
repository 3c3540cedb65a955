//! Volume similarity metrics and tensor-derived FA.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};

use crate::error::{arg, Error, Result};
use crate::phantom::fa_from_eigenvalues;
use crate::volume::{GradientTable, Volume3, Volume4};

fn check_pair(pred: &Volume3, truth: &Volume3, mask: &[bool]) -> Result<()> {
    if pred.dims() != truth.dims() {
        return arg(format!("grids differ: {:?} vs {:?}", pred.dims(), truth.dims()));
    }
    if mask.len() != truth.len() {
        return arg(format!("mask has {} voxels, volume {}", mask.len(), truth.len()));
    }
    if !mask.iter().any(|&m| m) {
        return arg("mask is empty");
    }
    Ok(())
}

/// Σ(pred − truth)² / Σ truth² over the mask.
pub fn nmse(pred: &Volume3, truth: &Volume3, mask: &[bool]) -> Result<f64> {
    check_pair(pred, truth, mask)?;
    let (mut num, mut den) = (0.0, 0.0);
    for ((&p, &t), &m) in pred.data().iter().zip(truth.data()).zip(mask) {
        if m {
            num += (p - t) * (p - t);
            den += t * t;
        }
    }
    if den <= 0.0 {
        return arg("truth is zero inside the mask");
    }
    Ok(num / den)
}

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_RADIUS: usize = 3;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Gaussian-weighted local mean with the truncated window renormalized at the
/// borders. Separable, so the 3D weights are a product of 1D ones.
fn local_mean(data: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = ((idx / strides[axis]) % dims[axis]) as isize;
            let (mut acc, mut wsum) = (0.0, 0.0);
            for k in -r..=r {
                let j = pos + k;
                if j < 0 || j >= n {
                    continue;
                }
                let w = kernel[(k + r) as usize];
                let src = (idx as isize + k * strides[axis] as isize) as usize;
                acc += w * cur[src];
                wsum += w;
            }
            *out = acc / wsum;
        }
        cur = next;
    }
    cur
}

/// Voxel-wise SSIM map with dynamic range taken from `range`.
pub fn ssim_map(pred: &Volume3, truth: &Volume3, range: f64) -> Result<Volume3> {
    if pred.dims() != truth.dims() {
        return arg(format!("grids differ: {:?} vs {:?}", pred.dims(), truth.dims()));
    }
    let dims = truth.dims();
    let (x, y) = (pred.data(), truth.data());
    let mul = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = local_mean(x, dims);
    let my = local_mean(y, dims);
    let mxx = local_mean(&mul(x, x), dims);
    let myy = local_mean(&mul(y, y), dims);
    let mxy = local_mean(&mul(x, y), dims);
    let l = range.max(1e-12);
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let out = (0..x.len())
        .map(|i| {
            let vx = mxx[i] - mx[i] * mx[i];
            let vy = myy[i] - my[i] * my[i];
            let cxy = mxy[i] - mx[i] * my[i];
            ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2))
        })
        .collect();
    Volume3::new(dims, truth.voxel_size(), out)
}

/// Mean SSIM over the mask; Gaussian window σ = 1.5 on 7³ voxels, dynamic
/// range = truth max − min inside the mask.
pub fn ssim(pred: &Volume3, truth: &Volume3, mask: &[bool]) -> Result<f64> {
    check_pair(pred, truth, mask)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&t, &m) in truth.data().iter().zip(mask) {
        if m {
            lo = lo.min(t);
            hi = hi.max(t);
        }
    }
    let map = ssim_map(pred, truth, hi - lo)?;
    let (mut acc, mut n) = (0.0, 0usize);
    for (&s, &m) in map.data().iter().zip(mask) {
        if m {
            acc += s;
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

/// Signals are clamped here before the logarithm.
pub const FA_SIGNAL_FLOOR: f64 = 1e-9;

/// Log-linear least-squares single-tensor fit per voxel; returns FA in [0, 1].
pub fn fa_map(dwi: &Volume4, gtab: &GradientTable) -> Result<Volume3> {
    if dwi.nq() != gtab.len() {
        return arg(format!("DWI has {} volumes, gradient table {}", dwi.nq(), gtab.len()));
    }
    if gtab.weighted_indices().len() < 6 {
        return arg("tensor fit needs at least 6 diffusion-weighted directions");
    }
    let n = gtab.len();
    // Unknowns: ln S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz.
    let mut design = DMatrix::zeros(n, 7);
    for (k, (&b, g)) in gtab.bvals().iter().zip(gtab.dirs()).enumerate() {
        let row = [
            1.0,
            -b * g[0] * g[0],
            -b * g[1] * g[1],
            -b * g[2] * g[2],
            -2.0 * b * g[0] * g[1],
            -2.0 * b * g[0] * g[2],
            -2.0 * b * g[1] * g[2],
        ];
        for (c, v) in row.into_iter().enumerate() {
            design[(k, c)] = v;
        }
    }
    let normal = design.transpose() * &design;
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Numerical("tensor design matrix is rank deficient".into()))?;
    let projector = chol.solve(&design.transpose());
    let nvox = dwi.num_voxels();
    let mut out = Vec::with_capacity(nvox);
    let mut y = DVector::zeros(n);
    for v in 0..nvox {
        for q in 0..n {
            y[q] = dwi.get(v, q).max(FA_SIGNAL_FLOOR).ln();
        }
        let p = &projector * &y;
        let d = Matrix3::new(p[1], p[4], p[5], p[4], p[2], p[6], p[5], p[6], p[3]);
        let ev = SymmetricEigen::new(d).eigenvalues;
        let fa = fa_from_eigenvalues([ev[0], ev[1], ev[2]]);
        out.push(if fa.is_finite() { fa } else { 0.0 });
    }
    Volume3::new(dwi.spatial_dims(), dwi.voxel_size(), out)
}

/// Voxel-wise pred − truth.
pub fn difference_map(pred: &Volume3, truth: &Volume3) -> Result<Volume3> {
    if pred.dims() != truth.dims() {
        return arg(format!("grids differ: {:?} vs {:?}", pred.dims(), truth.dims()));
    }
    Volume3::new(
        truth.dims(),
        truth.voxel_size(),
        pred.data().iter().zip(truth.data()).map(|(p, t)| p - t).collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub subject: String,
    /// "L0", "L2", "L4" or "FA".
    pub quantity: String,
    /// "NMSE" or "SSIM".
    pub metric: String,
    pub value: f64,
}

/// Per-subject metric values with mean ± std summaries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricReport {
    pub fn push(&mut self, subject: &str, quantity: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            subject: subject.into(),
            quantity: quantity.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn values(&self, quantity: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.quantity == quantity && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn value(&self, subject: &str, quantity: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.subject == subject && r.quantity == quantity && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = Vec::new();
        for r in &self.rows {
            if !s.contains(&r.subject) {
                s.push(r.subject.clone());
            }
        }
        s
    }

    /// CSV with columns subject, quantity, metric, value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,quantity,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:e}", r.subject, r.quantity, r.metric, r.value);
        }
        out
    }

    /// Text table, one line per quantity, NMSE and SSIM as mean ± std.
    pub fn summary(&self, title: &str) -> String {
        let mut quantities: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !quantities.contains(&r.quantity.as_str()) {
                quantities.push(&r.quantity);
            }
        }
        let mut out = format!("{title}\n{:<8} {:>22} {:>22}\n", "", "NMSE", "SSIM");
        let stats: BTreeMap<_, _> = quantities
            .iter()
            .flat_map(|q| ["NMSE", "SSIM"].map(|m| ((q.to_string(), m), mean_std(&self.values(q, m)))))
            .collect();
        for q in quantities {
            let cell = |m: &'static str| {
                let (mean, std) = stats[&(q.to_string(), m)];
                if mean.is_nan() { "-".to_string() } else { format!("{mean:.4} ± {std:.4}") }
            };
            let _ = writeln!(out, "{q:<8} {:>22} {:>22}", cell("NMSE"), cell("SSIM"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Volume3 {
        Volume3::from_fn(dims, [1.0; 3], f).unwrap()
    }

    #[test]
    fn nmse_closed_forms() {
        let t = vol([4, 4, 4], |x, y, z| 1.0 + (x + 2 * y + 3 * z) as f64);
        let mask = vec![true; 64];
        assert_eq!(nmse(&t, &t, &mask).unwrap(), 0.0);
        let zero = t.map(|_| 0.0).unwrap();
        assert_eq!(nmse(&zero, &t, &mask).unwrap(), 1.0);
        let up = t.map(|v| 1.1 * v).unwrap();
        assert!((nmse(&up, &t, &mask).unwrap() - 0.01).abs() < 1e-12);
        assert!(nmse(&t, &t, &vec![false; 64]).is_err());
    }

    #[test]
    fn ssim_of_identical_volumes_is_one() {
        let t = vol([6, 5, 4], |x, y, z| ((x * 7 + y * 5 + z * 3) % 11) as f64);
        let mask = vec![true; t.len()];
        assert!((ssim(&t, &t, &mask).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn local_mean_of_constant_is_constant() {
        let m = local_mean(&vec![3.0; 60], [5, 4, 3]);
        assert!(m.iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn report_csv_and_summary() {
        let mut r = MetricReport::default();
        r.push("s1", "FA", "NMSE", 0.1);
        r.push("s2", "FA", "NMSE", 0.3);
        assert!(r.to_csv().starts_with("subject,quantity,metric,value\ns1,FA,NMSE,"));
        let (m, s) = mean_std(&r.values("FA", "NMSE"));
        assert!((m - 0.2).abs() < 1e-12);
        assert!((s - 0.1414213562373095).abs() < 1e-12);
        assert!(r.summary("t").contains("0.2000 ± 0.1414"));
        assert_eq!(r.subjects(), vec!["s1", "s2"]);
    }
}
