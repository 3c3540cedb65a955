//! Versioned little-endian checkpoint format.
//!
//! ```text
//! magic      4 bytes  "TNCK"
//! version    u32      1
//! flags      u32      bit 0: optimizer state present
//! n_meta     u32
//!   key      u32 length + UTF-8 bytes
//!   value    u32 length + UTF-8 bytes
//! n_params   u32
//!   name     u32 length + UTF-8 bytes
//!   ndim     u32
//!   dims     u64 × ndim
//!   values   f64 × numel
//!   [step u64, m f64 × numel, v f64 × numel]   when flag bit 0 is set
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::params::{restore_parameter, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"TNCK";
pub const VERSION: u32 = 1;

pub type Metadata = BTreeMap<String, String>;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn put_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_checkpoint(
    w: &mut impl Write,
    store: &ParamStore,
    meta: &Metadata,
    with_optimizer: bool,
) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, u32::from(with_optimizer))?;
    put_u32(w, meta.len() as u32)?;
    for (k, v) in meta {
        put_str(w, k)?;
        put_str(w, v)?;
    }
    put_u32(w, store.len() as u32)?;
    for (_, p) in store.iter() {
        put_str(w, &p.name)?;
        put_u32(w, p.value.shape().len() as u32)?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        put_f64s(w, p.value.data())?;
        if with_optimizer {
            w.write_all(&p.step().to_le_bytes())?;
            let (m, v) = p.moments();
            put_f64s(w, m)?;
            put_f64s(w, v)?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> TensorError {
        TensorError::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err(format!("truncated: need {n} bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| TensorError::Format {
            offset: at as u64,
            msg: "invalid UTF-8".into(),
        })
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Returns the stored parameters (with optimizer state if present) and metadata.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(ParamStore, Metadata, bool)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(TensorError::Format {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(TensorError::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let with_optimizer = c.u32()? & 1 == 1;
    let n_meta = c.u32()?;
    let mut meta = Metadata::new();
    for _ in 0..n_meta {
        let k = c.string()?;
        let v = c.string()?;
        meta.insert(k, v);
    }
    let n_params = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..n_params {
        let name = c.string()?;
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let at = c.pos;
        let values = c.f64s(n)?;
        let value = Tensor::new(shape, values).map_err(|e| TensorError::Format {
            offset: at as u64,
            msg: e.to_string(),
        })?;
        let state = if with_optimizer {
            let step = c.u64()?;
            let m = c.f64s(n)?;
            let v = c.f64s(n)?;
            Some((step, m, v))
        } else {
            None
        };
        if store.find(&name).is_some() {
            return Err(c.err(format!("duplicate parameter {name}")));
        }
        store.push_raw(restore_parameter(name, value, state));
    }
    if c.pos != buf.len() {
        return Err(c.err("trailing bytes"));
    }
    Ok((store, meta, with_optimizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::optim::AdamW;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap());
        s.add("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        s
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let mut store = sample_store();
        let mut g = Graph::new();
        let a = g.param(&store, store.find("a").unwrap());
        let sq = g.square(a).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        AdamW::default().step(&mut store, &grads);

        let mut meta = Metadata::new();
        meta.insert("stage".into(), "test".into());
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &store, &meta, true).unwrap();
        let (loaded, meta2, with_opt) = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert!(with_opt);
        assert_eq!(meta, meta2);
        for ((_, p), (_, q)) in store.iter().zip(loaded.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
            assert_eq!(p.step(), q.step());
            assert_eq!(p.moments(), q.moments());
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample_store(), &Metadata::new(), false).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(&mut bad.as_slice()),
            Err(TensorError::Format { offset: 0, .. })
        ));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            read_checkpoint(&mut &cut[..]),
            Err(TensorError::Format { .. })
        ));
    }
}
