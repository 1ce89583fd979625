//! `PTGRID` v1 grid files: one JSON header line followed by raw `f32le` data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::ComplexGrid;
use crate::tensor::Tensor;

const MAGIC: &str = "PTGRID";
const VERSION: u32 = 1;
const DTYPE: &str = "f32le";
const ORDER: &str = "row-major";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    version: u32,
    shape: Vec<usize>,
    dtype: String,
    order: String,
}

pub fn encode_grid(grid: &Tensor) -> Result<Vec<u8>> {
    if !grid.is_finite() {
        return Err(Error::NonFinite("write_grid".into()));
    }
    let header = Header {
        magic: MAGIC.into(),
        version: VERSION,
        shape: grid.shape().to_vec(),
        dtype: DTYPE.into(),
        order: ORDER.into(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serialises");
    out.push(b'\n');
    out.reserve(grid.len() * 4);
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_grid(bytes: &[u8], source: &str) -> Result<Tensor> {
    let bad = |detail: String| Error::GridFormat { path: source.into(), detail };
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("malformed header: {e}")))?;
    if header.magic != MAGIC || header.version != VERSION {
        return Err(bad(format!("unsupported magic/version {}/{}", header.magic, header.version)));
    }
    if header.dtype != DTYPE || header.order != ORDER {
        return Err(bad(format!("unsupported dtype/order {}/{}", header.dtype, header.order)));
    }
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("shape overflows".into()))?;
    let payload = &bytes[nl + 1..];
    if payload.len() != count * 4 {
        return Err(bad(format!("payload is {} bytes, shape {:?} needs {}", payload.len(), header.shape, count * 4)));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(&header.shape, data)
}

pub fn write_grid(path: &Path, grid: &Tensor) -> Result<()> {
    let bytes = encode_grid(grid)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes, &path.display().to_string())
}

pub fn write_complex(path: &Path, grid: &ComplexGrid) -> Result<()> {
    write_grid(path, &grid.to_tensor())
}

pub fn read_complex(path: &Path) -> Result<ComplexGrid> {
    ComplexGrid::from_tensor(&read_grid(path)?)
}
