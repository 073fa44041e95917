//! Binary checkpoint: one line of JSON manifest, then every parameter block
//! as raw little-endian f64 values in manifest order.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::{Architecture, ConvFilterBank, DenseHead, ModelParameters, NetError};
use crate::embeddings::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Manifest fields besides the block list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub seed: u64,
    pub window: usize,
    pub filters: usize,
    pub max_len: usize,
    pub lowercase: bool,
    pub threshold: f64,
    /// Vocabulary tokens in index order.
    pub vocabulary: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    meta: CheckpointMeta,
    blocks: Vec<BlockInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParameters,
}

pub fn write_checkpoint<W: Write>(mut w: W, meta: &CheckpointMeta, params: &ModelParameters) -> Result<(), NetError> {
    if meta.architecture != params.architecture {
        return Err(NetError::Checkpoint("manifest and parameter architectures differ".into()));
    }
    let blocks = params.blocks();
    let manifest = Manifest {
        meta: meta.clone(),
        blocks: blocks
            .iter()
            .map(|(name, shape, _)| BlockInfo {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    serde_json::to_writer(&mut w, &manifest).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    w.write_all(b"\n")?;
    for (_, _, values) in blocks {
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_block<R: Read>(r: &mut R, info: &BlockInfo) -> Result<Vec<f64>, NetError> {
    let n: usize = info.shape.iter().product();
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)
        .map_err(|e| NetError::Checkpoint(format!("block {}: {e}", info.name)))?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Checkpoint, NetError> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let manifest: Manifest =
        serde_json::from_slice(&line).map_err(|e| NetError::Checkpoint(format!("manifest: {e}")))?;
    let arch = manifest.meta.architecture;
    let mut blocks = manifest.blocks.iter();
    let mut next = |expect: &str| -> Result<&BlockInfo, NetError> {
        let b = blocks
            .next()
            .ok_or_else(|| NetError::Checkpoint(format!("missing block {expect}")))?;
        if b.name != expect {
            return Err(NetError::Checkpoint(format!(
                "expected block {expect} for {} architecture, found {}",
                arch.as_str(),
                b.name
            )));
        }
        Ok(b)
    };

    let info = next("embedding")?;
    let [rows, dim] = info.shape[..] else {
        return Err(NetError::Checkpoint("embedding block must be 2-dimensional".into()));
    };
    let embedding = EmbeddingMatrix {
        rows,
        dim,
        values: read_block(&mut r, info)?,
    };
    let mut banks = Vec::new();
    for i in 0..arch.bank_count() {
        let info = next(&format!("conv{i}.weights"))?;
        let [window, in_channels, out_channels] = info.shape[..] else {
            return Err(NetError::Checkpoint(format!("conv{i}.weights must be 3-dimensional")));
        };
        let weights = read_block(&mut r, info)?;
        let bias = read_block(&mut r, next(&format!("conv{i}.bias"))?)?;
        banks.push(ConvFilterBank {
            window,
            in_channels,
            out_channels,
            weights,
            bias,
        });
    }
    let w = read_block(&mut r, next("head.w")?)?;
    let b = read_block(&mut r, next("head.b")?)?;
    if blocks.next().is_some() {
        return Err(NetError::Checkpoint(format!(
            "extra blocks for {} architecture",
            arch.as_str()
        )));
    }
    let params = ModelParameters {
        architecture: arch,
        embedding,
        conv_banks: banks,
        head: DenseHead { w, b: b[0] },
    };
    params
        .validate()
        .map_err(|e| NetError::Checkpoint(format!("architecture mismatch: {e}")))?;
    Ok(Checkpoint {
        meta: manifest.meta,
        params,
    })
}
