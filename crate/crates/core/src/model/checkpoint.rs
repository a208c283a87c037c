//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic `GDTCKPT1`, a little-endian `u64` header length,
//! a JSON header (model config, normalizer, parameter names/shapes/decay
//! flags, momentum-encoder presence), then every tensor's row-major `f64`
//! little-endian data in header order, momentum tensors last.

use super::encoder::ENCODER_PARAMS;
use super::{GdtModel, ModelConfig, Normalizer, ParamSet};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"GDTCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt header: {0}")]
    Header(String),
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    rows: usize,
    cols: usize,
    decay: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    normalizer: Normalizer,
    params: Vec<ParamMeta>,
    momentum_encoder: bool,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(path: &Path, model: &GdtModel) -> Result<(), CheckpointError> {
    let header = Header {
        config: model.config.clone(),
        normalizer: model.normalizer.clone(),
        params: model
            .params
            .entries()
            .iter()
            .map(|e| ParamMeta {
                name: e.name.clone(),
                rows: e.value.nrows(),
                cols: e.value.ncols(),
                decay: e.decay,
            })
            .collect(),
        momentum_encoder: model.momentum_encoder.is_some(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err(path))?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(io_err(path))?;
    w.write_all(&header_json).map_err(io_err(path))?;
    let mut write_tensor = |t: &Array2<f64>| -> Result<(), CheckpointError> {
        for &v in t.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
        }
        Ok(())
    };
    for e in model.params.entries() {
        write_tensor(&e.value)?;
    }
    if let Some(momentum) = &model.momentum_encoder {
        for t in momentum {
            write_tensor(t)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<GdtModel, CheckpointError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(io_err(path))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(io_err(path))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;

    let mut read_tensor = |rows: usize, cols: usize| -> Result<Array2<f64>, CheckpointError> {
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf).map_err(io_err(path))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| CheckpointError::Header(e.to_string()))
    };

    let mut params = ParamSet::new();
    for meta in &header.params {
        let tensor = read_tensor(meta.rows, meta.cols)?;
        params.insert(&meta.name, tensor, meta.decay);
    }
    let momentum_encoder = if header.momentum_encoder {
        let mut tensors = Vec::new();
        for name in ENCODER_PARAMS {
            let shape = params.value(name).dim();
            tensors.push(Arc::new(read_tensor(shape.0, shape.1)?));
        }
        Some(tensors)
    } else {
        None
    };

    let reference = GdtModel::new(header.config.clone(), 0)
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    for e in reference.params.entries() {
        if !params.contains(&e.name) {
            return Err(CheckpointError::Mismatch(format!("missing tensor {}", e.name)));
        }
        if params.value(&e.name).dim() != e.value.dim() {
            return Err(CheckpointError::Mismatch(format!(
                "tensor {} has shape {:?}, config wants {:?}",
                e.name,
                params.value(&e.name).dim(),
                e.value.dim()
            )));
        }
    }

    Ok(GdtModel {
        config: header.config,
        params,
        normalizer: header.normalizer,
        momentum_encoder,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{Aggregator, EncoderConfig, EncoderKind, ModelConfig};
    use super::*;

    fn model(kind: Option<EncoderKind>) -> GdtModel {
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            embed_dim: 8,
            context_len: 4,
            dropout: 0.1,
            max_horizon: 12,
            state_dim: 3,
            action_dim: 2,
            stat_dim: 5,
            stat_kind: crate::stats::StatKind::Histogram,
            aggregator: Aggregator::Binning,
            encoder: kind.map(|k| EncoderConfig::new(k, 4)),
            return_scale: 12.0,
        };
        let mut m = GdtModel::new(
            if kind.is_some() {
                ModelConfig {
                    aggregator: Aggregator::Summation,
                    stat_kind: crate::stats::StatKind::StateSequence,
                    ..config
                }
            } else {
                config
            },
            3,
        )
        .unwrap();
        m.set_normalizer(Normalizer {
            mean: vec![0.1, -0.2, 0.3],
            std: vec![1.0, 2.0, 0.5],
        });
        m
    }

    #[test]
    fn round_trip_plain() {
        let m = model(None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gdt");
        save_checkpoint(&path, &m).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.normalizer, m.normalizer);
        for (a, b) in m.params.entries().iter().zip(back.params.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.decay, b.decay);
            assert_eq!(a.value, b.value);
        }
        assert!(back.momentum_encoder.is_none());
    }

    #[test]
    fn round_trip_momentum() {
        let m = model(Some(EncoderKind::Cpc));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gdt");
        save_checkpoint(&path, &m).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let orig = m.momentum_encoder.unwrap();
        let loaded = back.momentum_encoder.unwrap();
        for (a, b) in orig.iter().zip(&loaded) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.gdt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));
    }
}
