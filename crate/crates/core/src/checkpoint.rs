//! Portable model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     b"UMEMCKPT"
//! version   u32
//! step      u64
//! config    u32 length + UTF-8 TOML
//! shuffles  u32 count, then per memory layer: u64 seed, u32 length, length x u32
//! tensors   u32 count, then per tensor: u16 name length + UTF-8 name,
//!           u8 rank, rank x u32 dims, numel x f32
//! trailer   SHA-256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{LmConfig, Model};
use crate::tensor::Tensor;
use crate::virtual_memory::ShuffleMap;

pub const MAGIC: &[u8; 8] = b"UMEMCKPT";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model, step: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(step as u64).to_le_bytes());
    let text = model.cfg.to_toml()?;
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.memories.len() as u32).to_le_bytes());
    for mem in &model.memories {
        let perm = mem.layer.shuffle.permutation();
        out.extend_from_slice(&mem.layer.shuffle.seed.to_le_bytes());
        out.extend_from_slice(&(perm.len() as u32).to_le_bytes());
        for p in perm {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    let tensors = model.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Decodes a container, verifying the hash, and rebuilds the model. Returns
/// the model and the step it was saved at.
pub fn decode(bytes: &[u8]) -> Result<(Model, usize)> {
    if bytes.len() < MAGIC.len() + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("integrity hash mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let step = r.u64()? as usize;
    let len = r.u32()? as usize;
    let cfg = LmConfig::from_toml(&r.string(len)?)?;
    let mut model = Model::build(&cfg)?;
    let count = r.u32()? as usize;
    if count != model.memories.len() {
        return Err(Error::Checkpoint(format!(
            "{count} shuffle maps for {} memory layers",
            model.memories.len()
        )));
    }
    for mem in &mut model.memories {
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let perm = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        mem.layer.shuffle = ShuffleMap::from_permutation(seed, mem.layer.cfg.slots(), perm)?;
    }
    let names: Vec<(String, Vec<usize>)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32()? as usize;
    if count != names.len() {
        return Err(Error::Checkpoint(format!("{count} tensors, model has {}", names.len())));
    }
    for ((want, shape), slot) in names.iter().zip(model.tensors_mut()) {
        let n = r.u16()? as usize;
        let name = r.string(n)?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &name != want || &dims != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` {dims:?} where `{want}` {shape:?} was expected"
            )));
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(4 * numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        *slot = Tensor::new(&dims, data)?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((model, step))
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::arg(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(path: &Path, model: &Model, step: usize) -> Result<()> {
    write_atomic(path, &encode(model, step)?)
}

pub fn load(path: &Path) -> Result<(Model, usize)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::preset;

    fn small() -> Model {
        let mut cfg = preset("ultramem-tiny").unwrap();
        cfg.model.layers = 3;
        cfg.model.d_model = 32;
        cfg.model.mlp_dim = 64;
        cfg.model.spans = vec![(1, 2)];
        let mem = cfg.memory.as_mut().unwrap();
        mem.d_key = 16;
        mem.d_value = 16;
        mem.side = 8;
        mem.topm = 4;
        Model::build(&cfg).unwrap()
    }

    #[test]
    fn round_trip_preserves_f32_values_and_shuffle() {
        let model = small();
        let bytes = encode(&model, 17).unwrap();
        let (back, step) = decode(&bytes).unwrap();
        assert_eq!(step, 17);
        assert_eq!(back.memories[0].layer.shuffle, model.memories[0].layer.shuffle);
        for ((n, a), (_, b)) in model.named_tensors().iter().zip(back.named_tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32 as f64, *y, "{n}");
            }
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&small(), 0).unwrap();
        let k = bytes.len() / 2;
        bytes[k] ^= 1;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
        assert!(decode(&bytes[..10]).is_err());
    }
}
