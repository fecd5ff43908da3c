//! Ensemble persistence: a JSON header plus a little-endian f64 blob holding
//! every parameter in layer order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::field::{ArchSpec, NeuralField};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct NetHeader {
    arch: ArchSpec,
    input_dim: usize,
    seed: u64,
    mlp_dims: Vec<Vec<usize>>,
    n_params: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    nets: Vec<NetHeader>,
}

const FORMAT: &str = "conserva-ensemble";

pub fn encode(nets: &[NeuralField]) -> Result<(String, Vec<u8>)> {
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        nets: nets
            .iter()
            .map(|n| NetHeader {
                arch: n.arch.clone(),
                input_dim: n.input_dim,
                seed: n.seed,
                mlp_dims: n.mlps.iter().map(|m| m.dims.clone()).collect(),
                n_params: n.n_params(),
            })
            .collect(),
    };
    let mut blob = Vec::with_capacity(8 * nets.iter().map(|n| n.n_params()).sum::<usize>());
    for n in nets {
        for m in &n.mlps {
            for s in m.param_slices() {
                for v in s {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok((serde_json::to_string_pretty(&header)?, blob))
}

pub fn decode(header: &str, blob: &[u8]) -> Result<Vec<NeuralField>> {
    let h: Header = serde_json::from_str(header)?;
    if h.format != FORMAT {
        return Err(Error::Config(format!("not an ensemble header: format '{}'", h.format)));
    }
    let total: usize = h.nets.iter().map(|n| n.n_params).sum();
    if blob.len() != 8 * total {
        return Err(Error::Numerical(format!("parameter blob has {} bytes, expected {}", blob.len(), 8 * total)));
    }
    let mut vals = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut out = Vec::new();
    for nh in h.nets {
        let mut net = NeuralField::init(&nh.arch, nh.input_dim, nh.seed)?;
        let dims: Vec<Vec<usize>> = net.mlps.iter().map(|m| m.dims.clone()).collect();
        if dims != nh.mlp_dims || net.n_params() != nh.n_params {
            return Err(Error::Numerical("ensemble header inconsistent with architecture".into()));
        }
        for m in &mut net.mlps {
            for s in m.param_slices_mut() {
                for v in s.iter_mut() {
                    *v = vals.next().expect("length checked");
                }
            }
        }
        out.push(net);
    }
    Ok(out)
}

pub fn save(nets: &[NeuralField], header_path: &Path, blob_path: &Path) -> Result<()> {
    let (h, b) = encode(nets)?;
    std::fs::write(header_path, h + "\n")?;
    std::fs::write(blob_path, b)?;
    Ok(())
}

pub fn load(header_path: &Path, blob_path: &Path) -> Result<Vec<NeuralField>> {
    let h = std::fs::read_to_string(header_path)
        .map_err(|_| Error::MissingArtifact(header_path.display().to_string()))?;
    let b = std::fs::read(blob_path).map_err(|_| Error::MissingArtifact(blob_path.display().to_string()))?;
    decode(&h, &b)
}
