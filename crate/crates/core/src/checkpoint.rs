//! `FQCK` checkpoints.
//!
//! ```text
//! FQCK | u32 version=1 | u32 meta_len | meta_len bytes JSON (CheckpointMeta)
//!      | u32 count | count x (u32 name_len | name | u32 rank | rank x u32 dim | f32 data)
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::format::{format_err, push_f32s, read_bytes, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, QualityModel};
use crate::numeric::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub fold: usize,
    /// 1-based epoch the weights come from.
    pub epoch: usize,
    /// Validation scores of these weights; `None` outside training.
    pub val_loss: Option<f64>,
    pub val_mae: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &QualityModel<f32>, meta: CheckpointMeta) -> Self {
        let tensors = model
            .params()
            .into_iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                tensor: p.value.clone(),
            })
            .collect();
        Self { meta, tensors }
    }

    pub fn to_model(&self) -> Result<QualityModel<f32>> {
        let named: HashMap<String, Tensor<f32>> = self
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.tensor.clone()))
            .collect();
        if named.len() != self.tensors.len() {
            return Err(Error::Data("checkpoint has duplicate tensor names".into()));
        }
        QualityModel::from_named(self.meta.model.clone(), &named)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.extend_from_slice(&(t.tensor.rank() as u32).to_le_bytes());
            for &d in t.tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            push_f32s(&mut buf, t.tensor.data());
        }
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        Self::decode(path, &bytes)
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        let meta = read_meta(&mut r)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let at = r.pos();
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| format_err(path, at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f32s(shape.iter().product())?;
            tensors.push(NamedTensor {
                name,
                tensor: Tensor::from_vec(&shape, data)?,
            });
        }
        r.finish()?;
        Ok(Self { meta, tensors })
    }
}

fn read_meta(r: &mut Reader<'_>) -> Result<CheckpointMeta> {
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let len = r.u32()? as usize;
    Ok(serde_json::from_slice(r.take(len)?)?)
}

/// Header and tensor table without materializing weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSummary {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Vec<usize>)>,
}

pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointSummary> {
    let ck = Checkpoint::load(path)?;
    Ok(CheckpointSummary {
        meta: ck.meta,
        tensors: ck
            .tensors
            .into_iter()
            .map(|t| (t.name, t.tensor.shape().to_vec()))
            .collect(),
    })
}
