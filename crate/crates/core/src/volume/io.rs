//! The `.rgv` volume format.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "RGVL"
//!      4     4  version (u32) = 1
//!      8     4  rank (u32): 3 or 4
//!     12    16  nx, ny, nz, nq (u32 each; nq = 1 for rank 3)
//!     28    24  voxel size sx, sy, sz in mm (f64 each)
//!     52     4  dtype (u32): 1 = f32, 2 = f64
//!     56     4  channel semantics code (u32), see `Semantics`
//!     60     4  semantics parameter (u32), e.g. the SH order
//!     64     8  element count (u64)
//!     72     …  payload, x fastest, q slowest
//! ```
//!
//! Every field is little-endian. Volumes are written as f64 by default so a
//! save/load round trip is bit-exact; f32 is available for compact exports.

use std::fs;
use std::path::Path;

use super::{Volume3, Volume4};
use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 4] = b"RGVL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 72;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u32 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// What the q axis of a stored volume means.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Semantics {
    Generic,
    /// Diffusion-weighted images; q indexes the gradient table.
    Dwi,
    /// SH coefficients up to this even order, order-major, degree ascending.
    ShCoefficients(u32),
    /// RISH energies for orders 0, 2, …, up to this order.
    Rish(u32),
    /// Per-order scale factors for orders 0, 2, …, up to this order.
    ScaleMap(u32),
}

impl Semantics {
    fn encode(self) -> (u32, u32) {
        match self {
            Semantics::Generic => (0, 0),
            Semantics::Dwi => (1, 0),
            Semantics::ShCoefficients(l) => (2, l),
            Semantics::Rish(l) => (3, l),
            Semantics::ScaleMap(l) => (4, l),
        }
    }

    fn decode(code: u32, param: u32) -> Option<Self> {
        Some(match code {
            0 => Semantics::Generic,
            1 => Semantics::Dwi,
            2 => Semantics::ShCoefficients(param),
            3 => Semantics::Rish(param),
            4 => Semantics::ScaleMap(param),
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum VolumeRef<'a> {
    V3(&'a Volume3),
    V4(&'a Volume4),
}

impl<'a> From<&'a Volume3> for VolumeRef<'a> {
    fn from(v: &'a Volume3) -> Self {
        VolumeRef::V3(v)
    }
}

impl<'a> From<&'a Volume4> for VolumeRef<'a> {
    fn from(v: &'a Volume4) -> Self {
        VolumeRef::V4(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeFile {
    V3(Volume3, Semantics),
    V4(Volume4, Semantics),
}

impl VolumeFile {
    pub fn semantics(&self) -> Semantics {
        match self {
            VolumeFile::V3(_, s) | VolumeFile::V4(_, s) => *s,
        }
    }
}

pub fn encode_volume<'a>(v: impl Into<VolumeRef<'a>>, semantics: Semantics, dtype: Dtype) -> Vec<u8> {
    let (rank, dims, vs, data) = match v.into() {
        VolumeRef::V3(v) => {
            let [x, y, z] = v.dims();
            (3u32, [x, y, z, 1], v.voxel_size(), v.data())
        }
        VolumeRef::V4(v) => (4u32, v.dims(), v.voxel_size(), v.data()),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&rank.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in vs {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&dtype.code().to_le_bytes());
    let (code, param) = semantics.encode();
    out.extend_from_slice(&code.to_le_bytes());
    out.extend_from_slice(&param.to_le_bytes());
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    match dtype {
        Dtype::F64 => data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Dtype::F32 => data
            .iter()
            .for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes())),
    }
    out
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn u32_at(buf: &[u8], at: usize) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| fmt_err(buf.len(), "truncated header"))
}

fn f64_at(buf: &[u8], at: usize) -> Result<f64> {
    buf.get(at..at + 8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| fmt_err(buf.len(), "truncated header"))
}

pub fn decode_volume(buf: &[u8]) -> Result<VolumeFile> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(fmt_err(0, "bad magic (expected RGVL)"));
    }
    let version = u32_at(buf, 4)?;
    if version != VERSION {
        return Err(fmt_err(4, format!("unsupported version {version}")));
    }
    let rank = u32_at(buf, 8)?;
    if rank != 3 && rank != 4 {
        return Err(fmt_err(8, format!("rank must be 3 or 4, got {rank}")));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32_at(buf, 12 + 4 * i)? as usize;
        if *d == 0 {
            return Err(fmt_err(12 + 4 * i, "zero dimension"));
        }
    }
    if rank == 3 && dims[3] != 1 {
        return Err(fmt_err(24, "rank-3 volume with nq != 1"));
    }
    let mut vs = [0.0; 3];
    for (i, s) in vs.iter_mut().enumerate() {
        *s = f64_at(buf, 28 + 8 * i)?;
        if !(*s > 0.0 && s.is_finite()) {
            return Err(fmt_err(28 + 8 * i, format!("invalid voxel size {s}")));
        }
    }
    let dtype = match u32_at(buf, 52)? {
        1 => Dtype::F32,
        2 => Dtype::F64,
        other => return Err(fmt_err(52, format!("unknown dtype {other}"))),
    };
    let code = u32_at(buf, 56)?;
    let param = u32_at(buf, 60)?;
    let semantics = Semantics::decode(code, param)
        .ok_or_else(|| fmt_err(56, format!("unknown channel semantics {code}")))?;
    let count = buf
        .get(64..72)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| fmt_err(buf.len(), "truncated header"))? as usize;
    let expected: usize = dims.iter().product();
    if count != expected {
        return Err(fmt_err(64, format!("element count {count} != {expected} from dims")));
    }
    let payload = &buf[HEADER_LEN..];
    let need = count * dtype.width();
    if payload.len() < need {
        return Err(fmt_err(
            buf.len(),
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(fmt_err(HEADER_LEN + need, "trailing bytes after payload"));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(fmt_err(HEADER_LEN + i * dtype.width(), "non-finite value"));
    }
    Ok(if rank == 3 {
        VolumeFile::V3(Volume3::new([dims[0], dims[1], dims[2]], vs, data)?, semantics)
    } else {
        VolumeFile::V4(Volume4::new(dims, vs, data)?, semantics)
    })
}

pub fn save_volume<'a>(path: impl AsRef<Path>, v: impl Into<VolumeRef<'a>>, semantics: Semantics) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).at(dir)?;
        }
    }
    fs::write(path, encode_volume(v, semantics, Dtype::F64)).at(path)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<VolumeFile> {
    let path = path.as_ref();
    let buf = fs::read(path).at(path)?;
    decode_volume(&buf)
}

pub fn load_volume3(path: impl AsRef<Path>) -> Result<(Volume3, Semantics)> {
    match load_volume(path.as_ref())? {
        VolumeFile::V3(v, s) => Ok((v, s)),
        VolumeFile::V4(v, _) => Err(Error::Argument(format!(
            "{}: expected a 3D volume, found 4D {:?}",
            path.as_ref().display(),
            v.dims()
        ))),
    }
}

pub fn load_volume4(path: impl AsRef<Path>) -> Result<(Volume4, Semantics)> {
    match load_volume(path.as_ref())? {
        VolumeFile::V4(v, s) => Ok((v, s)),
        VolumeFile::V3(v, _) => Err(Error::Argument(format!(
            "{}: expected a 4D volume, found 3D {:?}",
            path.as_ref().display(),
            v.dims()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_round_trip_bytes() {
        let v = Volume3::filled([4, 4, 4], [1.0, 1.0, 1.0], 0.0).unwrap();
        let bytes = encode_volume(&v, Semantics::Generic, Dtype::F64);
        let back = decode_volume(&bytes).unwrap();
        let VolumeFile::V3(w, _) = &back else { panic!() };
        assert_eq!(encode_volume(w, Semantics::Generic, Dtype::F64), bytes);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let v = Volume3::filled([2, 2, 2], [1.0; 3], 1.0).unwrap();
        let mut bytes = encode_volume(&v, Semantics::Generic, Dtype::F64);
        bytes[1] = b'X';
        assert!(matches!(decode_volume(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let v = Volume3::filled([2, 2, 2], [1.0; 3], 1.0).unwrap();
        let bytes = encode_volume(&v, Semantics::Generic, Dtype::F64);
        let cut = &bytes[..bytes.len() - 5];
        match decode_volume(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, cut.len()),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_volume(&bytes[..10]), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_version_reports_offset_4() {
        let v = Volume3::filled([1, 1, 1], [1.0; 3], 1.0).unwrap();
        let mut bytes = encode_volume(&v, Semantics::Generic, Dtype::F64);
        bytes[4] = 9;
        assert!(matches!(decode_volume(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn volume4_dims_and_semantics_survive() {
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.5).collect();
        let v = Volume4::new([2, 2, 2, 3], [1.25, 1.25, 1.5], data).unwrap();
        let bytes = encode_volume(&v, Semantics::ShCoefficients(4), Dtype::F64);
        match decode_volume(&bytes).unwrap() {
            VolumeFile::V4(w, s) => {
                assert_eq!(w.dims(), [2, 2, 2, 3]);
                assert_eq!(s, Semantics::ShCoefficients(4));
                assert_eq!(w, v);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn f32_export_is_lossy_but_readable() {
        let v = Volume3::new([1, 1, 2], [1.0; 3], vec![0.1, 2.0]).unwrap();
        let bytes = encode_volume(&v, Semantics::Generic, Dtype::F32);
        assert_eq!(bytes.len(), HEADER_LEN + 8);
        let VolumeFile::V3(w, _) = decode_volume(&bytes).unwrap() else { panic!() };
        assert_eq!(w.data()[1], 2.0);
        assert!((w.data()[0] - 0.1).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            nx in 1usize..5, ny in 1usize..5, nz in 1usize..4, nq in 1usize..4,
            vals in proptest::collection::vec(-1e12f64..1e12, 64 * 4),
            s in 0.1f64..3.0,
        ) {
            let n = nx * ny * nz * nq;
            let v = Volume4::new([nx, ny, nz, nq], [s, s * 1.5, s * 0.5], vals[..n].to_vec()).unwrap();
            let bytes = encode_volume(&v, Semantics::Dwi, Dtype::F64);
            let VolumeFile::V4(w, sem) = decode_volume(&bytes).unwrap() else { panic!() };
            prop_assert_eq!(sem, Semantics::Dwi);
            let a: Vec<u64> = v.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = w.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(w.voxel_size(), v.voxel_size());
        }
    }
}
