//! Binary checkpoint: magic, little-endian u64 header length, JSON header
//! (config plus tensor table), then raw little-endian f32 data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mat, Model, ModelConfig, Parameters};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SOCSCKPT";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = model
        .params
        .names
        .iter()
        .zip(&model.params.tensors)
        .map(|(name, t)| {
            let e = TensorEntry { name: name.clone(), rows: t.nrows(), cols: t.ncols(), offset };
            offset += t.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header { config: model.config.clone(), tensors })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in &model.params.tensors {
        // row-major so the data reads naturally outside nalgebra
        for r in 0..t.nrows() {
            for c in 0..t.ncols() {
                out.extend_from_slice(&(t[(r, c)] as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
    let data = &bytes[data_start..];
    let mut names = Vec::with_capacity(header.tensors.len());
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let range = e
            .rows
            .checked_mul(e.cols)
            .and_then(|n| n.checked_add(e.offset))
            .and_then(|end| end.checked_mul(4))
            .filter(|&end| end <= data.len())
            .map(|end| e.offset * 4..end)
            .ok_or_else(|| bad(&format!("tensor {} out of range", e.name)))?;
        let vals: Vec<f64> = data[range]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        names.push(e.name.clone());
        tensors.push(Mat::from_row_slice(e.rows, e.cols, &vals));
    }
    Model::with_parameters(header.config, Parameters { names, tensors })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
