//! Volumetric data types shared by every stage.
//!
//! Layout is row-major with x fastest: voxel (x, y, z) of a [`Volume3`] lives at
//! `x + nx·(y + ny·z)`. A [`Volume4`] stacks `nq` such grids with q slowest.

mod gtab;
mod io;
mod resample;
mod rng;

pub use gtab::{fibonacci_hemisphere, GradientTable};
pub use io::{
    decode_volume, encode_volume, load_volume, load_volume3, load_volume4, save_volume, Dtype,
    Semantics, VolumeFile, VolumeRef, HEADER_LEN, MAGIC, VERSION,
};
pub use resample::{
    resample4_trilinear, resample_trilinear, upsample4_bspline, upsample_bspline,
};
pub use rng::{derive_seed, seeded_rng, Rng};

use crate::error::{arg, Result};

fn check_geometry(dims: &[usize], voxel_size: [f64; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return arg(format!("dimensions must be positive, got {dims:?}"));
    }
    if voxel_size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return arg(format!("voxel sizes must be positive, got {voxel_size:?}"));
    }
    Ok(())
}

fn check_finite(data: &[f64]) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return arg(format!("non-finite value at element {i}"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume3 {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    data: Vec<f64>,
}

impl Volume3 {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], data: Vec<f64>) -> Result<Self> {
        check_geometry(&dims, voxel_size)?;
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return arg(format!("{dims:?} needs {n} values, got {}", data.len()));
        }
        check_finite(&data)?;
        Ok(Self {
            dims,
            voxel_size,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], voxel_size: [f64; 3], value: f64) -> Result<Self> {
        Self::new(dims, voxel_size, vec![value; dims.iter().product()])
    }

    /// Build from a function of the voxel index.
    pub fn from_fn(
        dims: [usize; 3],
        voxel_size: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, voxel_size, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    /// Physical extent n·s per axis, in mm.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.dims[i] as f64 * self.voxel_size[i])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.dims, self.voxel_size, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn same_grid(&self, other: &Volume3) -> bool {
        self.dims == other.dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume4 {
    dims: [usize; 4],
    voxel_size: [f64; 3],
    data: Vec<f64>,
}

impl Volume4 {
    pub fn new(dims: [usize; 4], voxel_size: [f64; 3], data: Vec<f64>) -> Result<Self> {
        check_geometry(&dims, voxel_size)?;
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return arg(format!("{dims:?} needs {n} values, got {}", data.len()));
        }
        check_finite(&data)?;
        Ok(Self {
            dims,
            voxel_size,
            data,
        })
    }

    pub fn zeros(dims: [usize; 4], voxel_size: [f64; 3]) -> Result<Self> {
        Self::new(dims, voxel_size, vec![0.0; dims.iter().product()])
    }

    /// Stack equally sized 3D volumes along q.
    pub fn stack(vols: &[Volume3]) -> Result<Self> {
        let Some(first) = vols.first() else {
            return arg("cannot stack zero volumes");
        };
        if let Some(v) = vols.iter().find(|v| v.dims != first.dims) {
            return arg(format!("stack dims differ: {:?} vs {:?}", first.dims, v.dims));
        }
        let mut data = Vec::with_capacity(first.len() * vols.len());
        for v in vols {
            data.extend_from_slice(&v.data);
        }
        let [nx, ny, nz] = first.dims;
        Self::new([nx, ny, nz, vols.len()], first.voxel_size, data)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn nq(&self) -> usize {
        self.dims[3]
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, voxel: usize, q: usize) -> f64 {
        self.data[q * self.num_voxels() + voxel]
    }

    /// The q-th 3D volume.
    pub fn volume(&self, q: usize) -> Volume3 {
        let n = self.num_voxels();
        Volume3 {
            dims: self.spatial_dims(),
            voxel_size: self.voxel_size,
            data: self.data[q * n..(q + 1) * n].to_vec(),
        }
    }

    pub fn volumes(&self) -> Vec<Volume3> {
        (0..self.nq()).map(|q| self.volume(q)).collect()
    }

    /// Values across q at one voxel.
    pub fn series(&self, voxel: usize) -> Vec<f64> {
        let n = self.num_voxels();
        (0..self.nq()).map(|q| self.data[q * n + voxel]).collect()
    }

    /// Select a subset of q entries, in the given order.
    pub fn select(&self, qs: &[usize]) -> Result<Self> {
        let vols: Vec<Volume3> = qs.iter().map(|&q| self.volume(q)).collect();
        Self::stack(&vols)
    }
}
