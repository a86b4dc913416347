use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelParams;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    sizes: Vec<usize>,
    num_params: usize,
}

/// Layout: `u32` LE header length, JSON header, then every parameter as an
/// LE `f64` in flat order.
pub fn save_model(path: &Path, params: &ModelParams) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn encode(params: &ModelParams) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        sizes: params.sizes(),
        num_params: params.num_params(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(4 + header.len() + 8 * params.num_params());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let len_bytes: [u8; 4] = bytes
        .get(..4)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Format {
            offset: 0,
            msg: "model file shorter than its length prefix".into(),
        })?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes.get(4..4 + len).ok_or_else(|| Error::Format {
        offset: 4,
        msg: format!("header of {len} bytes is truncated"),
    })?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::Format {
        offset: 4,
        msg: format!("bad header: {e}"),
    })?;
    let body = &bytes[4 + len..];
    if body.len() != 8 * header.num_params {
        return Err(Error::Format {
            offset: 4 + len,
            msg: format!("expected {} parameters, found {} bytes", header.num_params, body.len()),
        });
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    ModelParams::from_flat(&header.sizes, &flat)
}
