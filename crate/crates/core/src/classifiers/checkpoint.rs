//! Probe checkpoints: little-endian binary tensors plus a JSON header
//! sidecar (`.json`, same stem) carrying the config and training trace.
//!
//! ```text
//! "PRBC" | u32 version=1 | u32 dtype (1 = f64 LE) | u32 tensor count
//! per tensor: u32 name length | name (UTF-8) | u32 rows | u32 cols | rows*cols f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierError, ModelParams, ProbeConfig, ProbeFamily, Result, Tensor, TrainTrace};

const MAGIC: &[u8; 4] = b"PRBC";
const VERSION: u32 = 1;
const DTYPE_F64: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub family: ProbeFamily,
    pub input_dim: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub classes: usize,
    pub config: ProbeConfig,
    pub trace: Option<TrainTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    config: &ProbeConfig,
    trace: Option<&TrainTrace>,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&DTYPE_F64.to_le_bytes());
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for t in &params.tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    let header = CheckpointHeader {
        version: VERSION,
        family: params.family,
        input_dim: params.input_dim,
        hidden: params.hidden,
        num_layers: params.num_layers,
        classes: params.classes,
        config: config.clone(),
        trace: trace.cloned(),
    };
    std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&header)? + "\n")?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ClassifierError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let header: CheckpointHeader = serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(ClassifierError::Checkpoint("bad magic".into()));
    }
    let (version, dtype) = (c.u32()?, c.u32()?);
    if version != VERSION || dtype != DTYPE_F64 {
        return Err(ClassifierError::Checkpoint(format!("unsupported version {version} / dtype {dtype}")));
    }
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|e| ClassifierError::Checkpoint(format!("tensor name: {e}")))?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let data = c
            .take(rows * cols * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(Tensor { name, rows, cols, data });
    }
    if c.pos != bytes.len() {
        return Err(ClassifierError::Checkpoint(format!("trailing bytes at {}", c.pos)));
    }
    let params = ModelParams {
        family: header.family,
        input_dim: header.input_dim,
        hidden: header.hidden,
        num_layers: header.num_layers,
        classes: header.classes,
        tensors,
    };
    Ok(Checkpoint { header, params })
}
