//! Versioned binary container for model weights.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header
//! describing every tensor, then the tensors as little-endian `f64` in
//! header order. Optimizer momentum follows the weights.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hrrn::{Hrrn, HrrnConfig};
use crate::lrscn::{Lrscn, LrscnConfig};
use crate::nn::optim::Sgd;
use crate::nn::{ParamGroup, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"DSODCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lrscn,
    Hrrn,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Lrscn => "lrscn",
            ModelKind::Hrrn => "hrrn",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub metrics: BTreeMap<String, f64>,
    pub train_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: [usize; 4],
    group: ParamGroup,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: serde_json::Value,
    meta: CheckpointMeta,
    tensors: Vec<TensorHeader>,
    momentum: Vec<(String, usize)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, ParamGroup, Tensor)>,
    /// Momentum buffers keyed by parameter name.
    pub momentum: Vec<(String, Vec<f64>)>,
}

/// A network that can be stored in a [`Checkpoint`].
pub trait Model: Sized {
    const KIND: ModelKind;
    type Config: Serialize + DeserializeOwned;

    fn config(&self) -> &Self::Config;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn build(config: Self::Config) -> Result<Self>;
}

impl Model for Lrscn {
    const KIND: ModelKind = ModelKind::Lrscn;
    type Config = LrscnConfig;

    fn config(&self) -> &LrscnConfig {
        &self.config
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn build(config: LrscnConfig) -> Result<Self> {
        Lrscn::new(config, 0)
    }
}

impl Model for Hrrn {
    const KIND: ModelKind = ModelKind::Hrrn;
    type Config = HrrnConfig;

    fn config(&self) -> &HrrnConfig {
        &self.config
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn build(config: HrrnConfig) -> Result<Self> {
        Hrrn::new(config, 0)
    }
}

impl Checkpoint {
    pub fn from_model<M: Model>(model: &M, optimizer: Option<&Sgd>, meta: CheckpointMeta) -> Result<Self> {
        let store = model.store();
        let config = serde_json::to_value(model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let momentum = optimizer
            .map(|opt| {
                opt.buffers()
                    .filter(|(i, _)| *i < store.len())
                    .map(|(i, b)| (store.entries()[i].name.clone(), b.to_vec()))
                    .collect()
            })
            .unwrap_or_default();
        Ok(Self {
            kind: M::KIND,
            config,
            meta,
            tensors: store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.group, e.tensor.clone()))
                .collect(),
            momentum,
        })
    }

    /// Rebuilds the model; fails when the checkpoint holds another kind.
    pub fn to_model<M: Model>(&self) -> Result<M> {
        if self.kind != M::KIND {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {} model, expected {}",
                self.kind,
                M::KIND
            )));
        }
        let config: M::Config =
            serde_json::from_value(self.config.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = M::build(config)?;
        let named: Vec<(String, Tensor)> = self.tensors.iter().map(|(n, _, t)| (n.clone(), t.clone())).collect();
        model.store_mut().load_named(&named)?;
        Ok(model)
    }

    /// Optimizer with the stored momentum, matched to `store` by name.
    pub fn optimizer(&self, store: &ParamStore, momentum: f64, weight_decay: f64) -> Sgd {
        let mut opt = Sgd::new(momentum, weight_decay);
        for (name, buf) in &self.momentum {
            if let Some(id) = store.id_of(name) {
                if store.get(id).numel() == buf.len() {
                    opt.set_buffer(id.index(), buf.clone());
                }
            }
        }
        opt
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            kind: self.kind,
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, group, t)| TensorHeader {
                    name: name.clone(),
                    shape: t.shape,
                    group: *group,
                })
                .collect(),
            momentum: self.momentum.iter().map(|(n, b)| (n.clone(), b.len())).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        let values = self
            .tensors
            .iter()
            .flat_map(|(_, _, t)| t.data.iter())
            .chain(self.momentum.iter().flat_map(|(_, b)| b.iter()));
        for &v in values {
            w.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut read_vec = |n: usize| -> Result<Vec<f64>> {
            let mut v = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            Ok(v)
        };
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let data = read_vec(th.shape.iter().product())?;
            tensors.push((th.name, th.group, Tensor::from_vec(th.shape, data)));
        }
        let mut momentum = Vec::with_capacity(header.momentum.len());
        for (name, n) in header.momentum {
            momentum.push((name, read_vec(n)?));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            tensors,
            momentum,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Loads a model of the expected kind straight from a file.
pub fn load_model<M: Model>(path: impl AsRef<Path>) -> Result<M> {
    Checkpoint::load(path)?.to_model()
}
