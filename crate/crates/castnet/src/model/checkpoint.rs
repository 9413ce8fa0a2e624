//! Self-describing text checkpoints: config echo, normalizer, dimensions,
//! and base64-encoded little-endian f64 parameter blobs. Loading rebuilds
//! the parameter structure and restores every value bit-exactly.

use super::{Forecaster, ModelConfig, ModelError, Result};
use crate::dataio::Normalizer;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use std::collections::HashMap;
use std::path::Path;

const MAGIC: &str = "castnet-checkpoint v1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub forecaster: Forecaster,
    pub normalizer: Normalizer,
}

pub fn save_checkpoint(
    forecaster: &Forecaster,
    normalizer: &Normalizer,
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("seed {}\n", forecaster.config.seed));
    let config_json = serde_json::to_string(&forecaster.config)
        .map_err(|e| ModelError::Checkpoint(format!("config encode: {e}")))?;
    out.push_str(&format!("config {config_json}\n"));
    let norm_json = serde_json::to_string(normalizer)
        .map_err(|e| ModelError::Checkpoint(format!("normalizer encode: {e}")))?;
    out.push_str(&format!("normalizer {norm_json}\n"));
    out.push_str(&format!("dims {} {}\n", forecaster.n_nodes, forecaster.m_in));
    for (name, tensor) in forecaster.params.flat() {
        let mut bytes = Vec::with_capacity(tensor.numel() * 8);
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("param {name} {} {}\n", dims.join(","), B64.encode(&bytes)));
    }
    out.push_str("end\n");
    std::fs::write(path, out).map_err(|e| ModelError::Io { path: path.display().to_string(), source: e })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ModelError::Io { path: path.display().to_string(), source: e })?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(ModelError::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let mut config: Option<ModelConfig> = None;
    let mut normalizer: Option<Normalizer> = None;
    let mut dims: Option<(usize, usize)> = None;
    let mut blobs: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    let mut ended = false;
    for line in lines {
        let Some((key, rest)) = line.split_once(' ').or(Some((line, ""))) else {
            continue;
        };
        match key {
            "seed" => {} // echoed inside the config as well
            "config" => {
                config = Some(
                    serde_json::from_str(rest)
                        .map_err(|e| ModelError::Checkpoint(format!("config decode: {e}")))?,
                );
            }
            "normalizer" => {
                normalizer = Some(
                    serde_json::from_str(rest)
                        .map_err(|e| ModelError::Checkpoint(format!("normalizer decode: {e}")))?,
                );
            }
            "dims" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(ModelError::Checkpoint("dims line wants `N M`".into()));
                }
                dims = Some((
                    parts[0].parse().map_err(|e| ModelError::Checkpoint(format!("dims: {e}")))?,
                    parts[1].parse().map_err(|e| ModelError::Checkpoint(format!("dims: {e}")))?,
                ));
            }
            "param" => {
                let mut it = rest.splitn(3, ' ');
                let (name, shape_s, blob) = (it.next(), it.next(), it.next());
                let (Some(name), Some(shape_s), Some(blob)) = (name, shape_s, blob) else {
                    return Err(ModelError::Checkpoint(format!("malformed param line: {line}")));
                };
                let shape: Vec<usize> = shape_s
                    .split(',')
                    .map(|p| p.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| ModelError::Checkpoint(format!("param {name} shape: {e}")))?;
                let bytes = B64
                    .decode(blob)
                    .map_err(|e| ModelError::Checkpoint(format!("param {name} blob: {e}")))?;
                if bytes.len() % 8 != 0 {
                    return Err(ModelError::Checkpoint(format!("param {name}: ragged blob")));
                }
                let data: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect();
                blobs.insert(name.to_string(), (shape, data));
            }
            "end" => {
                ended = true;
                break;
            }
            _ => return Err(ModelError::Checkpoint(format!("unknown line kind `{key}`"))),
        }
    }
    if !ended {
        return Err(ModelError::Checkpoint("truncated checkpoint (no end marker)".into()));
    }
    let config = config.ok_or_else(|| ModelError::Checkpoint("missing config".into()))?;
    let normalizer = normalizer.ok_or_else(|| ModelError::Checkpoint("missing normalizer".into()))?;
    let (n_nodes, m_in) = dims.ok_or_else(|| ModelError::Checkpoint("missing dims".into()))?;

    let mut forecaster = Forecaster::init(config, n_nodes, m_in)?;
    let mut missing = Vec::new();
    forecaster.params.visit_mut(&mut |name, tensor| match blobs.remove(&name) {
        Some((shape, data)) if shape == tensor.shape() && data.len() == tensor.numel() => {
            tensor.data_mut().copy_from_slice(&data);
        }
        Some((shape, _)) => missing.push(format!("{name}: shape {shape:?} != {:?}", tensor.shape())),
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() {
        return Err(ModelError::Checkpoint(format!("parameter mismatch: {}", missing.join("; "))));
    }
    if !blobs.is_empty() {
        let extra: Vec<String> = blobs.keys().cloned().collect();
        return Err(ModelError::Checkpoint(format!("unknown parameters in file: {}", extra.join(", "))));
    }
    Ok(Checkpoint { forecaster, normalizer })
}
