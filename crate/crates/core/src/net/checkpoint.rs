//! Parameter checkpoints: a JSON manifest (`<stem>.json`) and a raw
//! little-endian f32 blob (`<stem>.bin`) holding every tensor in manifest
//! order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::wnet::{BlockParams, WNetConfig, WNetParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub config: WNetConfig,
    pub layers: Vec<LayerEntry>,
}

fn entries(p: &WNetParams<f32>) -> Vec<(LayerEntry, &[f32])> {
    let mut out = Vec::new();
    for (prefix, block) in [("block1", &p.block1), ("block2", &p.block2)] {
        for t in block.tensors() {
            out.push((
                LayerEntry {
                    name: format!("{prefix}.{}", t.name),
                    shape: t.shape,
                },
                t.values,
            ));
        }
    }
    out
}

pub fn manifest(p: &WNetParams<f32>) -> Manifest {
    Manifest {
        version: CHECKPOINT_VERSION,
        dtype: "f32".into(),
        config: p.config,
        layers: entries(p).into_iter().map(|(e, _)| e).collect(),
    }
}

pub fn encode_checkpoint(p: &WNetParams<f32>) -> (String, Vec<u8>) {
    let mut blob = Vec::new();
    for (_, values) in entries(p) {
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_string_pretty(&manifest(p)).expect("manifest serializes");
    (json, blob)
}

pub fn decode_checkpoint(manifest_json: &str, blob: &[u8]) -> Result<WNetParams<f32>> {
    let m: Manifest = serde_json::from_str(manifest_json).map_err(|e| Error::Header(e.to_string()))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!("checkpoint version {}", m.version)));
    }
    if m.dtype != "f32" {
        return Err(Error::Header(format!("dtype {}", m.dtype)));
    }
    m.config.validate().map_err(|e| Error::Header(e.to_string()))?;
    let mut params = WNetParams::<f32>::zeros(m.config)?;
    let expected = self::manifest(&params);
    if expected.layers != m.layers {
        return Err(Error::Header("layer list does not match the config".into()));
    }
    let total: usize = m.layers.iter().map(|l| l.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 4 {
        return Err(Error::PayloadLength {
            expected: total * 4,
            found: blob.len(),
        });
    }
    let mut floats = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let fill = |b: &mut BlockParams<f32>, it: &mut dyn Iterator<Item = f32>| {
        for t in b.tensors_mut() {
            t.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
        }
    };
    fill(&mut params.block1, &mut floats);
    fill(&mut params.block2, &mut floats);
    if !params.all_finite() {
        return Err(Error::Payload("non-finite parameter".into()));
    }
    Ok(params)
}

/// `<stem>.json` and `<stem>.bin`; a trailing `.json`/`.bin` is ignored.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json" | "bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".json"), with(".bin"))
}

pub fn save_checkpoint(path: &Path, p: &WNetParams<f32>) -> Result<()> {
    let (jp, bp) = checkpoint_paths(path);
    let (json, blob) = encode_checkpoint(p);
    std::fs::write(jp, json)?;
    std::fs::write(bp, blob)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<WNetParams<f32>> {
    let (jp, bp) = checkpoint_paths(path);
    decode_checkpoint(&std::fs::read_to_string(jp)?, &std::fs::read(bp)?)
}
