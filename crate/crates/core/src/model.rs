//! Versioned JSON model file. Weights travel as base64 blobs of little-endian
//! `f64`, row-major, so a write/read cycle is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nnet::{Dims, NetworkParams};

pub const MODEL_VERSION: u32 = 1;

/// A trained network together with everything needed to run it on a crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: NetworkParams,
    pub norm_stats: NormStats,
    pub crop_w: usize,
    pub crop_h: usize,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    version: u32,
    dims: Dims,
    crop: [usize; 2],
    drop_prob: f64,
    norm_stats: NormStats,
    seed: u64,
    w_hidden: String,
    w_out: String,
}

fn encode(m: &Matrix) -> String {
    let bytes: Vec<u8> = m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(field: &'static str, text: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = STANDARD.decode(text).map_err(|e| Error::Format {
        field,
        detail: e.to_string(),
    })?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Format {
            field,
            detail: format!("expected {} bytes for {rows}x{cols}, got {}", rows * cols * 8, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

impl Model {
    pub fn new(params: NetworkParams, norm_stats: NormStats, crop_w: usize, crop_h: usize) -> Result<Self> {
        params.check()?;
        if crop_w * crop_h != params.dims.n_in {
            return Err(Error::Shape(format!(
                "{crop_w}x{crop_h} crop does not match {} network inputs",
                params.dims.n_in
            )));
        }
        Ok(Self {
            params,
            norm_stats,
            crop_w,
            crop_h,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let env = Envelope {
            version: MODEL_VERSION,
            dims: self.params.dims,
            crop: [self.crop_w, self.crop_h],
            drop_prob: self.params.drop_prob,
            norm_stats: self.norm_stats,
            seed: self.params.init_seed,
            w_hidden: encode(&self.params.w_hidden),
            w_out: encode(&self.params.w_out),
        };
        Ok(serde_json::to_string_pretty(&env)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text)?;
        if env.version != MODEL_VERSION {
            return Err(Error::Format {
                field: "version",
                detail: format!("unsupported model version {}", env.version),
            });
        }
        let d = env.dims;
        let params = NetworkParams {
            dims: Dims::new(d.n_in, d.n_hidden, d.n_out)?,
            w_hidden: decode("w_hidden", &env.w_hidden, d.n_in + 1, d.n_hidden)?,
            w_out: decode("w_out", &env.w_out, d.n_hidden + 1, d.n_out)?,
            drop_prob: env.drop_prob,
            init_seed: env.seed,
        };
        Self::new(params, env.norm_stats, env.crop[0], env.crop[1])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
