//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `magic[8] | version u32 | config_len u64 | config JSON | trained u8 |
//! count u64 | count x (name_len u32 | name | rank u32 | dims u64.. | values f64..)`.
//! Values are widened to f64, so single-precision parameters round-trip
//! exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::network::TltModel;
use super::ops;
use crate::error::{Result, TltError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TLTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &TltModel, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(config.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.push(u8::from(model.is_trained()));
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, var) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let dims = var.dims();
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in ops::to_f64_vec(var.as_tensor())? {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = path.as_ref();
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| TltError::Format("checkpoint truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| TltError::Format("length overflows usize".into()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TltModel> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { buf: &bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(TltError::Format("not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TltError::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = c.len()?;
    let config: ModelConfig = serde_json::from_slice(c.take(n)?)?;
    let trained = c.take(1)?[0] != 0;
    let mut model = TltModel::new(config)?;
    let count = c.len()?;
    if count != model.params().len() {
        return Err(TltError::Format(format!(
            "checkpoint holds {count} arrays, configuration defines {}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| TltError::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let var = model
            .params()
            .get(&name)
            .ok_or_else(|| TltError::Format(format!("unknown parameter {name}")))?;
        if var.dims() != dims.as_slice() {
            return Err(TltError::Format(format!("parameter {name} has shape {dims:?}, expected {:?}", var.dims())));
        }
        let elems: usize = dims.iter().product();
        let raw = c.take(elems * 8)?;
        let values: Vec<f64> =
            raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        model.params().set_values(&name, &values)?;
    }
    if c.pos != bytes.len() {
        return Err(TltError::Format("trailing bytes after checkpoint".into()));
    }
    model.set_trained(trained);
    Ok(model)
}
