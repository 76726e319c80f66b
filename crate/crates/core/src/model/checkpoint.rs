//! Binary checkpoint format (all integers little-endian `u64`):
//!
//! ```text
//! "MPRCNN1" | sha256(config json) [32] | config json length | config json
//! | block count | blocks...
//! block: name length | name | rank | extents... | values (f64 LE)...
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FusionConfig, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MPRCNN1";

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    fusion: FusionConfig,
}

/// SHA-256 of the canonical JSON of both configs.
pub fn config_digest(model: &ModelConfig, fusion: &FusionConfig) -> [u8; 32] {
    let json = serde_json::to_vec(&Header {
        model: model.clone(),
        fusion: *fusion,
    })
    .expect("configs serialize");
    Sha256::digest(&json).into()
}

fn put(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a model into checkpoint bytes.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        fusion: model.fusion,
    })
    .expect("configs serialize");
    let mut out = Vec::with_capacity(64 + header.len() + 8 * model.params.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&Sha256::digest(&header));
    put(&mut out, header.len() as u64);
    out.extend_from_slice(&header);
    put(&mut out, model.params.len() as u64);
    for (name, t) in model.params.iter() {
        put(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.shape().len() as u64);
        for &e in t.shape() {
            put(&mut out, e as u64);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {v}")))
    }
}

/// Parses checkpoint bytes back into a model.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let digest = c.take(32)?;
    let n = c.len()?;
    let header_bytes = c.take(n)?;
    if Sha256::digest(header_bytes).as_slice() != digest {
        return Err(Error::Checkpoint("config digest mismatch".into()));
    }
    let header: Header = serde_json::from_slice(header_bytes)?;
    let mut model = Model::new(&header.model, &header.fusion, 0)?;
    let blocks = c.len()?;
    if blocks != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{blocks} parameter blocks, model expects {}",
            model.params.len()
        )));
    }
    for _ in 0..blocks {
        let n = c.len()?;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        let rank = c.len()?;
        let shape = (0..rank).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = c.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
        if model.params.get(id).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {shape:?}, expected {:?}",
                model.params.get(id).shape()
            )));
        }
        *model.params.get_mut(id) = Tensor::new(shape, data)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
