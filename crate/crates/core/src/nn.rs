//! Glue between volumes and network tensors, plus helpers shared by the
//! three networks.
//!
//! A [`Volume4`] with dims (nx, ny, nz, nq) maps to a tensor of shape
//! [nq, nz, ny, nx] without reordering data: both are x fastest, q slowest.

use std::io::Cursor;
use std::path::Path;

use tensornet::{read_checkpoint, write_checkpoint, Metadata, ParamStore, Tensor};

use crate::error::{arg, Error, IoContext, Result};
use crate::volume::Volume4;

pub fn volume_to_tensor(v: &Volume4) -> Tensor {
    let [nx, ny, nz, nq] = v.dims();
    Tensor::new(vec![nq, nz, ny, nx], v.data().to_vec()).expect("volume dims match data")
}

pub fn tensor_to_volume(t: &Tensor, voxel_size: [f64; 3]) -> Result<Volume4> {
    let s = t.shape();
    if s.len() != 4 {
        return arg(format!("expected a [C, D, H, W] tensor, got {s:?}"));
    }
    Volume4::new([s[3], s[2], s[1], s[0]], voxel_size, t.data().to_vec())
}

/// Spatial dims (nx, ny, nz) of a [C, D, H, W] tensor.
pub fn spatial_dims(t: &Tensor) -> [usize; 3] {
    let s = t.shape();
    [s[3], s[2], s[1]]
}

/// Parameters plus string metadata, in the tensornet checkpoint format.
pub fn save_store(path: &Path, store: &ParamStore, meta: &Metadata, with_optimizer: bool) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, store, meta, with_optimizer)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    std::fs::write(path, buf).at(path)
}

pub fn load_store(path: &Path) -> Result<(ParamStore, Metadata, bool)> {
    let bytes = std::fs::read(path).at(path)?;
    Ok(read_checkpoint(&mut Cursor::new(bytes))?)
}

pub(crate) fn meta_get<'a>(meta: &'a Metadata, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("checkpoint metadata lacks `{key}`"),
        })
}

pub(crate) fn meta_parse<T: std::str::FromStr>(meta: &Metadata, key: &str) -> Result<T> {
    let s = meta_get(meta, key)?;
    s.parse().map_err(|_| Error::Format {
        offset: 0,
        msg: format!("checkpoint metadata `{key}` = `{s}` is malformed"),
    })
}

pub(crate) fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_list(meta: &Metadata, key: &str) -> Result<Vec<f64>> {
    meta_get(meta, key)?
        .split(',')
        .map(|s| {
            s.parse().map_err(|_| Error::Format {
                offset: 0,
                msg: format!("checkpoint metadata `{key}` has malformed entry `{s}`"),
            })
        })
        .collect()
}

/// Fisher–Yates permutation of 0..n.
pub(crate) fn shuffled(n: usize, rng: &mut crate::volume::Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// `q`-th percentile (0–100) by nearest rank of the positive entries, or 1
/// when there are none.
pub fn positive_percentile(values: impl Iterator<Item = f64>, q: f64) -> f64 {
    let mut v: Vec<f64> = values.filter(|x| *x > 0.0).collect();
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}
