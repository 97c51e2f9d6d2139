//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "RCRNCKPT"
//! version  u32
//! meta     u32 length + UTF-8 TOML (network config, optional palette)
//! count    u32
//! count x  name (u32 length + UTF-8), dtype u8 (1 = f32, 2 = f64),
//!          rank u8, dims u64 x rank, row-major payload
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{NetworkConfig, ParamStore, ResCrNet};
use crate::palette::ClassPalette;
use crate::tensor::{Scalar, Tensor, MAX_RANK};

const MAGIC: &[u8; 8] = b"RCRNCKPT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Serialize, Deserialize)]
struct Meta {
    network: NetworkConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    palette: Option<ClassPalette>,
}

/// A restored model with the palette it was trained on, if recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ResCrNet,
    pub palette: Option<ClassPalette>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode(model: &ResCrNet, palette: Option<&ClassPalette>) -> Result<Vec<u8>> {
    let meta = Meta {
        network: model.config().clone(),
        palette: palette.cloned(),
    };
    let meta = toml::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_str(&mut buf, &meta);
    put_u32(&mut buf, model.params().len() as u32);
    let dtype = if std::mem::size_of::<Scalar>() == 4 { DTYPE_F32 } else { DTYPE_F64 };
    for (name, t) in model.params().iter() {
        put_str(&mut buf, name);
        buf.push(dtype);
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta: Meta = toml::from_str(&r.string()?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("`{name}`: bad rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape overflow")))?;
        let data: Vec<Scalar> = match dtype {
            DTYPE_F32 => r
                .take(n.checked_mul(4).unwrap_or(usize::MAX))?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Scalar)
                .collect(),
            DTYPE_F64 => r
                .take(n.checked_mul(8).unwrap_or(usize::MAX))?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Scalar)
                .collect(),
            other => return Err(Error::Checkpoint(format!("`{name}`: unknown dtype {other}"))),
        };
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        params.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        model: ResCrNet::from_parts(meta.network, params)?,
        palette: meta.palette,
    })
}

pub fn save_checkpoint(path: &Path, model: &ResCrNet, palette: Option<&ClassPalette>) -> Result<()> {
    std::fs::write(path, encode(model, palette)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
