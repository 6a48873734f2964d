//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//! `b"SPKM"`, version, config length, config JSON, tensor count, then per
//! tensor: name length, name bytes (UTF-8), rank, dims, and the entries as
//! little-endian `f32`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

use super::config::Mamba2Config;
use super::params::ModelParams;

pub const MAGIC: &[u8; 4] = b"SPKM";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes<T: Scalar>(model: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    let cfg = serde_json::to_vec(&model.cfg)?;
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(&cfg);
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    model.visit(&mut |name, t| tensors.push((name.to_string(), t.cast())));
    put_u32(&mut out, tensors.len())?;
    for (name, t) in &tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn from_bytes<T: Scalar>(buf: &[u8]) -> Result<ModelParams<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let cfg: Mamba2Config = serde_json::from_slice(r.take(n)?)?;
    cfg.validate()?;
    let count = r.u32()?;
    let mut tensors: HashMap<String, Tensor<f32>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    let mut model = ModelParams::<T>::init(&cfg, 0)?;
    let mut missing = None;
    model.visit_mut(&mut |name, t| match tensors.remove(name) {
        Some(src) if src.shape() == t.shape() => *t = src.cast(),
        Some(_) => missing = Some(format!("{name} has the wrong shape")),
        None => missing = Some(format!("{name} missing")),
    });
    if let Some(m) = missing {
        return Err(Error::Format(m));
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    model.validate()?;
    Ok(model)
}

pub fn save<T: Scalar>(model: &ModelParams<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neurons::NeuronConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = Mamba2Config::toy().spiking(NeuronConfig::tilif(4).unwrap());
        let m = ModelParams::<f32>::init(&cfg, 11).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let back: ModelParams<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let m = ModelParams::<f32>::init(&Mamba2Config::toy(), 1).unwrap();
        let bytes = to_bytes(&m).unwrap();
        assert!(matches!(from_bytes::<f32>(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f32>(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes::<f32>(&long).is_err());
    }
}
