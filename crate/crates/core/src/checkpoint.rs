//! Binary parameter checkpoints.
//!
//! Layout (all little-endian): magic `SSGPCKPT`, `u32` version, `u32`
//! parameter count, then per parameter a `u16` name length, the UTF-8 name,
//! `u8` rank, `u32` per dimension, and raw `f32` value, Adam first moment and
//! Adam second moment arrays followed by the `u64` step count.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::{ParamStore, Parameter};

pub const MAGIC: &[u8; 8] = b"SSGPCKPT";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("parameter name too long: {}", p.name)))?;
        let rank = u8::try_from(p.shape.len())
            .map_err(|_| Error::Config(format!("rank too large for {}", p.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in &p.shape {
            let d = u32::try_from(d).map_err(|_| Error::Config(format!("dim too large in {}", p.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for arr in [&p.value, &p.adam_m, &p.adam_v] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&p.step_count.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::parse(
                self.pos,
                format!(
                    "truncated {what}: expected {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::parse(0, "bad magic, expected SSGPCKPT"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(8, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::parse(name_at, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let value = r.f32s(n, "values")?;
        let adam_m = r.f32s(n, "adam first moment")?;
        let adam_v = r.f32s(n, "adam second moment")?;
        let step_count = r.u64("step count")?;
        let mut p = Parameter::from_values(name, shape, value)?;
        p.adam_m = adam_m;
        p.adam_v = adam_v;
        p.step_count = step_count;
        store.push(p);
    }
    if r.pos != buf.len() {
        return Err(Error::parse(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(store)
}

pub fn save(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let bytes = encode(store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Copy values (and optionally optimizer state) from `src` into `dst`,
/// matching by name. Every parameter of `dst` must be present with the same
/// shape.
pub fn restore_into(dst: &mut ParamStore<f32>, src: &ParamStore<f32>, with_optimizer: bool) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} parameters, model has {}",
            src.len(),
            dst.len()
        )));
    }
    for p in dst.iter_mut() {
        let id = src
            .find(&p.name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{}`", p.name)))?;
        let s = src.get(id);
        if s.shape != p.shape {
            return Err(Error::Config(format!(
                "parameter `{}` has shape {:?} in checkpoint, {:?} in model",
                p.name, s.shape, p.shape
            )));
        }
        p.value.copy_from_slice(&s.value);
        if with_optimizer {
            p.adam_m.copy_from_slice(&s.adam_m);
            p.adam_v.copy_from_slice(&s.adam_v);
            p.step_count = s.step_count;
        } else {
            p.adam_m.iter_mut().for_each(|v| *v = 0.0);
            p.adam_v.iter_mut().for_each(|v| *v = 0.0);
            p.step_count = 0;
        }
    }
    Ok(())
}
