//! `PSTX` checkpoints: magic, `u32` version, length-prefixed JSON header
//! (`{config, meta}`), `u32` tensor count, then per tensor a
//! length-prefixed UTF-8 name, `u32` rank, `u32` dims and `f32` values.
//! All integers and floats little-endian.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PSTX";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub regimen: String,
    pub fold: Option<u32>,
    /// Zero-based epoch the weights were taken after.
    pub epoch: Option<usize>,
    pub seed: u64,
    pub val_accuracy: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
}

pub fn save_checkpoint(params: &ModelParams<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        config: params.config.clone(),
        meta: meta.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 4 * params.store.num_elements());
    out.extend_from_slice(MAGIC);
    let w = &mut out;
    w.write_u32::<LE>(CHECKPOINT_VERSION).unwrap();
    w.write_u32::<LE>(header.len() as u32).unwrap();
    w.extend_from_slice(&header);
    w.write_u32::<LE>(params.store.len() as u32).unwrap();
    for p in params.store.iter() {
        w.write_u32::<LE>(p.name.len() as u32).unwrap();
        w.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        w.write_u32::<LE>(shape.len() as u32).unwrap();
        for &s in shape {
            w.write_u32::<LE>(s as u32).unwrap();
        }
        for &v in p.value.data() {
            w.write_f32::<LE>(v).unwrap();
        }
    }
    out
}

fn corrupt(what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("malformed checkpoint: {what}"))
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(ModelParams<f32>, CheckpointMeta)> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(corrupt)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a PSTX checkpoint".into()));
    }
    let version = r.read_u32::<LE>().map_err(corrupt)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let len = r.read_u32::<LE>().map_err(corrupt)? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(corrupt)?;
    let header: Header = serde_json::from_slice(&header).map_err(corrupt)?;
    let mut params = ModelParams::<f32>::zeroed(&header.config)
        .map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;
    let n = r.read_u32::<LE>().map_err(corrupt)? as usize;
    if n != params.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {n} tensors, its config implies {}",
            params.store.len()
        )));
    }
    for _ in 0..n {
        let nl = r.read_u32::<LE>().map_err(corrupt)? as usize;
        let mut name = vec![0u8; nl];
        r.read_exact(&mut name).map_err(corrupt)?;
        let name = String::from_utf8(name).map_err(corrupt)?;
        let rank = r.read_u32::<LE>().map_err(corrupt)? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u32::<LE>().map(|s| s as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(corrupt)?;
        let id = params
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if params.store.value(id).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {shape:?}, config implies {:?}",
                params.store.value(id).shape()
            )));
        }
        let count: usize = shape.iter().product();
        let mut data = vec![0f32; count];
        r.read_f32_into::<LE>(&mut data).map_err(corrupt)?;
        params.store.get_mut(id).reset(Tensor::new(shape, data)?);
    }
    if (r.position() as usize) != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((params, header.meta))
}

impl ModelParams<f32> {
    /// Load a checkpoint whose tensor shapes match `expected`. Dropout and
    /// epsilon come from `expected`.
    pub fn load_matching(bytes: &[u8], expected: &ModelConfig) -> Result<(Self, CheckpointMeta)> {
        let (mut p, meta) = load_checkpoint(bytes)?;
        if !p.config.same_shapes(expected) {
            return Err(Error::Checkpoint(format!(
                "checkpoint config {:?} does not match requested {:?}",
                p.config, expected
            )));
        }
        p.config = expected.clone();
        Ok((p, meta))
    }

    /// Pretrained weights with a freshly drawn same-genre block.
    pub fn for_finetune(bytes: &[u8], expected: &ModelConfig, seed: u64) -> Result<Self> {
        let (mut p, _) = Self::load_matching(bytes, expected)?;
        p.reinit_sg_head(seed);
        Ok(p)
    }

    pub fn save_file(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        std::fs::write(path, save_checkpoint(self, meta)).map_err(|e| Error::io(path, e))
    }

    pub fn load_file(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        load_checkpoint(&bytes)
    }
}
