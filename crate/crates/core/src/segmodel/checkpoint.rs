//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//! magic `"SRCD"` | version u32 | variant u8 | depth u32 | base_channels u32
//! | tensor count u32 | per tensor: name length u32, UTF-8 name, rank u32,
//! dims u32 each, then raw f32 little-endian values. Round-trips bit-exactly.

use super::{conv_plan, ModelParamsOf, ModelSpec, NamedTensor, Variant};
use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SRCD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialize to the checkpoint byte format.
pub fn checkpoint_bytes(params: &ModelParamsOf<f32>) -> Vec<u8> {
    let spec = params.spec();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(match spec.variant {
        Variant::A => 0,
        Variant::B => 1,
    });
    out.extend_from_slice(&(spec.depth as u32).to_le_bytes());
    out.extend_from_slice(&(spec.base_channels as u32).to_le_bytes());
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for t in params.tensors() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parse checkpoint bytes, validating shapes against the embedded spec.
pub fn parse_checkpoint(buf: &[u8], path: &Path) -> Result<ModelParamsOf<f32>> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic: not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let variant = match r.u8()? {
        0 => Variant::A,
        1 => Variant::B,
        v => return Err(Error::format(path, format!("unknown variant tag {v}"))),
    };
    let depth = r.u32()? as usize;
    let base_channels = r.u32()? as usize;
    let spec = ModelSpec {
        variant,
        depth,
        base_channels,
    };
    spec.validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let n_tensors = r.u32()? as usize;

    let plan = conv_plan(&spec);
    if n_tensors != plan.len() * 2 {
        return Err(Error::format(
            path,
            format!("expected {} tensors, found {n_tensors}", plan.len() * 2),
        ));
    }
    let mut tensors = Vec::with_capacity(n_tensors);
    for def in &plan {
        for (suffix, shape) in [
            (
                "weight",
                vec![def.c_out, def.c_in, def.ksize, def.ksize],
            ),
            ("bias", vec![def.c_out]),
        ] {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(path, "tensor name not UTF-8"))?
                .to_string();
            let expected_name = format!("{}.{suffix}", def.name);
            if name != expected_name {
                return Err(Error::format(
                    path,
                    format!("tensor name {name}, expected {expected_name}"),
                ));
            }
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            if dims != shape {
                return Err(Error::format(
                    path,
                    format!("tensor {name} has shape {dims:?}, expected {shape:?}"),
                ));
            }
            let count: usize = dims.iter().product();
            let raw = r.take(count * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(path, format!("tensor {name} has non-finite values")));
            }
            tensors.push(NamedTensor {
                name,
                shape: dims,
                data,
            });
        }
    }
    if r.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after tensors"));
    }
    Ok(ModelParamsOf::from_parts(spec, tensors))
}

pub fn save_checkpoint(params: &ModelParamsOf<f32>, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(params);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParamsOf<f32>> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&buf, path)
}
