//! Binary server checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 16 | magic `PRISM-CKPT\0\0\0\0\0\0` |
//! | 4 | format version (`u32`, currently 1) |
//! | 8 | seed (`u64`) |
//! | 8 | completed rounds (`u64`) |
//! | 1 | classifier factorized (`u8`, 0 or 1) |
//! | 8 + n | architecture as length-prefixed JSON |
//! | 4 | node count (`u32`) |
//!
//! then per node a `u32` tensor count and per tensor `u32` rows, `u32`
//! cols and `rows·cols` `f64` values in row-major order. Momentum is not
//! stored. Decompositions are recomputed on load.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::ServerModel;
use crate::nn::Architecture;

pub const MAGIC: &[u8; 16] = b"PRISM-CKPT\0\0\0\0\0\0";
pub const VERSION: u32 = 1;

pub fn encode(server: &ServerModel, seed: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&server.round.to_le_bytes());
    out.push(server.factorize_head as u8);
    let arch = serde_json::to_vec(&server.arch).expect("architecture serializes");
    out.extend_from_slice(&(arch.len() as u64).to_le_bytes());
    out.extend_from_slice(&arch);
    out.extend_from_slice(&(server.params.len() as u32).to_le_bytes());
    for node in &server.params {
        out.extend_from_slice(&(node.len() as u32).to_le_bytes());
        for m in node {
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("checkpoint ends inside the {what}"),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint, returning the server and its seed.
pub fn decode(bytes: &[u8]) -> Result<(ServerModel, u64)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(16, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 16,
            message: format!("checkpoint format version {version}, this build reads {VERSION}"),
        });
    }
    let seed = r.u64("seed")?;
    let round = r.u64("round")?;
    let factorize_head = r.take(1, "head flag")?[0] != 0;
    let at = r.pos;
    let len = r.u64("architecture length")? as usize;
    let arch: Architecture = serde_json::from_slice(r.take(len, "architecture")?).map_err(|e| Error::Format {
        offset: at as u64,
        message: format!("bad architecture record: {e}"),
    })?;
    let nodes = r.u32("node count")? as usize;
    if nodes != arch.nodes.len() {
        return Err(Error::Format {
            offset: r.pos as u64 - 4,
            message: format!("{nodes} parameter groups for {} nodes", arch.nodes.len()),
        });
    }
    let mut server = ServerModel::init(arch, 0, factorize_head)?;
    for node in 0..nodes {
        let at = r.pos;
        let count = r.u32("tensor count")? as usize;
        if count != server.params[node].len() {
            return Err(Error::Format {
                offset: at as u64,
                message: format!("node {node}: {count} tensors, expected {}", server.params[node].len()),
            });
        }
        for k in 0..count {
            let at = r.pos;
            let rows = r.u32("tensor shape")? as usize;
            let cols = r.u32("tensor shape")? as usize;
            if (rows, cols) != server.params[node][k].shape() {
                return Err(Error::Format {
                    offset: at as u64,
                    message: format!("node {node} tensor {k}: shape {rows}x{cols} does not match the architecture"),
                });
            }
            let raw = r.take(rows * cols * 8, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            server.params[node][k] = Matrix::from_vec(rows, cols, data)?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: "trailing bytes after the last tensor".into(),
        });
    }
    server.round = round;
    server.refresh()?;
    Ok((server, seed))
}

pub fn save(path: impl AsRef<Path>, server: &ServerModel, seed: u64) -> Result<()> {
    let p = path.as_ref();
    fs::write(p, encode(server, seed)).map_err(|e| Error::io(p, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ServerModel, u64)> {
    let p = path.as_ref();
    decode(&fs::read(p).map_err(|e| Error::io(p, e))?)
}
