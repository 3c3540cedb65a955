use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

/// b-values below this are treated as baselines.
const BASELINE_B: f64 = 1e-6;

/// Diffusion sampling scheme. Every direction is a unit vector, including
/// those of baseline (b = 0) entries, whose direction is ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable", into = "RawTable")]
pub struct GradientTable {
    bvals: Vec<f64>,
    dirs: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct RawTable {
    bvals: Vec<f64>,
    dirs: Vec<[f64; 3]>,
}

impl TryFrom<RawTable> for GradientTable {
    type Error = crate::error::Error;

    fn try_from(r: RawTable) -> Result<Self> {
        GradientTable::new(r.bvals, r.dirs)
    }
}

impl From<GradientTable> for RawTable {
    fn from(g: GradientTable) -> Self {
        RawTable {
            bvals: g.bvals,
            dirs: g.dirs,
        }
    }
}

impl GradientTable {
    pub fn new(bvals: Vec<f64>, dirs: Vec<[f64; 3]>) -> Result<Self> {
        if bvals.len() != dirs.len() {
            return arg(format!("{} b-values but {} directions", bvals.len(), dirs.len()));
        }
        if bvals.is_empty() {
            return arg("gradient table is empty");
        }
        for (k, (&b, d)) in bvals.iter().zip(&dirs).enumerate() {
            if !(b >= 0.0 && b.is_finite()) {
                return arg(format!("entry {k}: b-value {b} must be finite and ≥ 0"));
            }
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if !((norm - 1.0).abs() <= 1e-6) {
                return arg(format!("entry {k}: direction {d:?} has norm {norm}"));
            }
        }
        Ok(Self { bvals, dirs })
    }

    /// `baselines` b = 0 entries followed by `dirs` at one b-value.
    pub fn single_shell(b: f64, baselines: usize, dirs: &[[f64; 3]]) -> Result<Self> {
        let mut bvals = vec![0.0; baselines];
        let mut all = vec![[0.0, 0.0, 1.0]; baselines];
        bvals.extend(std::iter::repeat_n(b, dirs.len()));
        all.extend_from_slice(dirs);
        Self::new(bvals, all)
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn dirs(&self) -> &[[f64; 3]] {
        &self.dirs
    }

    pub fn is_baseline(&self, k: usize) -> bool {
        self.bvals[k] < BASELINE_B
    }

    pub fn baseline_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.is_baseline(k)).collect()
    }

    pub fn weighted_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| !self.is_baseline(k)).collect()
    }

    /// Directions of the diffusion-weighted entries.
    pub fn weighted_dirs(&self) -> Vec<[f64; 3]> {
        self.weighted_indices().into_iter().map(|k| self.dirs[k]).collect()
    }

    /// The same table with every direction multiplied by a rotation matrix
    /// (row-major).
    pub fn rotated(&self, r: &[[f64; 3]; 3]) -> Result<Self> {
        let dirs = self
            .dirs
            .iter()
            .map(|d| [0, 1, 2].map(|i| r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2]))
            .collect();
        Self::new(self.bvals.clone(), dirs)
    }
}

/// `n` near-uniform unit vectors on the upper hemisphere (z ≥ 0) from a
/// Fibonacci lattice. Even SH are antipodally symmetric, so a hemisphere
/// covers the sphere.
pub fn fibonacci_hemisphere(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - (k as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * k as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}
