//! Trained weights in the `BMOE` container: the JSON header carries the
//! layout, expert partition, model and preprocessing configuration and a
//! parameter table;
//! the payload holds every parameter as row-major `f64` LE.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FoldSpec;
use crate::dataio::{frame, unframe, DataError};
use crate::diff::{ParamStore, Tensor};
use crate::moe::{BiMoe, ModelConfig, ModelError};
use crate::pipeline::PreprocessConfig;
use crate::topology::{ChannelLayout, Region, RegionPartition, TopologyError};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

const KIND: &str = "checkpoint";
const DTYPE: &str = "f64";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    #[serde(skip)]
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub layout: ChannelLayout,
    pub regions: Vec<(Region, Vec<usize>)>,
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub time: usize,
    pub dimension: String,
    pub fold: Option<FoldSpec>,
    pub params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    dtype: String,
    layout: ChannelLayout,
    regions: Vec<(Region, Vec<usize>)>,
    model: ModelConfig,
    preprocess: PreprocessConfig,
    time: usize,
    dimension: String,
    fold: Option<FoldSpec>,
    params: Vec<ParamIndex>,
}

#[derive(Serialize, Deserialize)]
struct ParamIndex {
    #[serde(flatten)]
    entry: ParamEntry,
    offset: u64,
}

impl Checkpoint {
    pub fn capture(
        model: &BiMoe,
        store: &ParamStore,
        partition: &RegionPartition,
        layout: &ChannelLayout,
        preprocess: &PreprocessConfig,
        dimension: &str,
        fold: Option<FoldSpec>,
    ) -> Self {
        Self {
            layout: layout.clone(),
            regions: partition.regions().map(|(r, idx)| (r, idx.to_vec())).collect(),
            model: model.config.clone(),
            preprocess: preprocess.clone(),
            time: model.time,
            dimension: dimension.to_string(),
            fold,
            params: store
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the partition, architecture and parameter store. Every
    /// parameter the architecture declares must be present with its shape.
    pub fn restore(&self) -> Result<(RegionPartition, BiMoe, ParamStore), CheckpointError> {
        let partition = RegionPartition::from_regions(self.regions.clone(), &self.layout)?;
        let mut store = ParamStore::new();
        let model = BiMoe::new(&partition, self.time, &self.model, &mut store, 0)?;
        if store.len() != self.params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "architecture has {} parameters, checkpoint {}",
                store.len(),
                self.params.len()
            )));
        }
        for (p, e) in store.iter_mut().zip(&self.params) {
            if p.name != e.name || p.value.shape() != e.shape.as_slice() || p.trainable != e.trainable {
                return Err(CheckpointError::Mismatch(format!(
                    "expected parameter `{}` {:?}, found `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    e.name,
                    e.shape
                )));
            }
            p.value = Tensor::new(e.shape.clone(), e.values.clone()).map_err(ModelError::from)?;
        }
        Ok((partition, model, store))
    }

    /// Fails unless `layout` lists the same channels, in the same order and
    /// at the same rate, as the layout the model was trained on.
    pub fn check_layout(&self, layout: &ChannelLayout) -> Result<(), CheckpointError> {
        if layout != &self.layout {
            return Err(CheckpointError::Mismatch(format!(
                "model trained on channels [{}], data has [{}]",
                self.layout.names().join(","),
                layout.names().join(",")
            )));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let mut offset = 0u64;
    let mut index = Vec::with_capacity(ckpt.params.len());
    for p in &ckpt.params {
        if p.values.len() != p.shape.iter().product::<usize>() {
            return Err(CheckpointError::Mismatch(format!(
                "parameter `{}` has the wrong length",
                p.name
            )));
        }
        index.push(ParamIndex {
            entry: p.clone(),
            offset,
        });
        offset += 8 * p.values.len() as u64;
    }
    let header = Header {
        kind: KIND.into(),
        dtype: DTYPE.into(),
        layout: ckpt.layout.clone(),
        regions: ckpt.regions.clone(),
        model: ckpt.model.clone(),
        preprocess: ckpt.preprocess.clone(),
        time: ckpt.time,
        dimension: ckpt.dimension.clone(),
        fold: ckpt.fold.clone(),
        params: index,
    };
    let mut out = frame(&header, offset as usize)?;
    for p in &ckpt.params {
        for v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let (header, payload, _): (Header, _, _) = unframe(bytes)?;
    if header.kind != KIND || header.dtype != DTYPE {
        return Err(DataError::Header(format!(
            "expected a {DTYPE} {KIND}, found a {} {}",
            header.dtype, header.kind
        ))
        .into());
    }
    let mut expected = 0u64;
    let mut params = Vec::with_capacity(header.params.len());
    for ParamIndex { mut entry, offset } in header.params {
        if offset != expected {
            return Err(DataError::IndexMismatch(format!(
                "parameter `{}` starts at byte {offset}, expected {expected}",
                entry.name
            ))
            .into());
        }
        let end = expected + 8 * entry.shape.iter().product::<usize>() as u64;
        let raw = payload
            .get(expected as usize..end as usize)
            .ok_or(DataError::Truncated {
                expected: end,
                actual: payload.len() as u64,
            })?;
        entry.values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(entry);
        expected = end;
    }
    if expected != payload.len() as u64 {
        return Err(DataError::IndexMismatch(format!(
            "index describes {expected} payload bytes but {} are present",
            payload.len()
        ))
        .into());
    }
    Ok(Checkpoint {
        layout: header.layout,
        regions: header.regions,
        model: header.model,
        preprocess: header.preprocess,
        time: header.time,
        dimension: header.dimension,
        fold: header.fold,
        params,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(ckpt)?).map_err(DataError::from)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(DataError::from)?;
    decode_checkpoint(&bytes)
}
