//! Binary checkpoint: `"SICL"`, version (u32 LE), header length (u64 LE),
//! JSON header, then the raw little-endian tensor payload in table order.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DType, Scalar, Tensor};
use crate::encoders::{FreezeMask, ModelBundle, ModelConfig};
use crate::error::{Error, Result};

use super::config::TrainConfig;
use super::optim::{AdamW, AdamWHyper};

pub const MAGIC: &[u8; 4] = b"SICL";
pub const VERSION: u32 = 1;
const MAX_HEADER: u64 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

/// Randomness position: every stream in a run derives from the seed and the
/// step, so these two numbers are the whole generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub hyper: AdamWHyper,
    pub step: u64,
    pub decay: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: DType,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub rng: RngState,
    pub freeze: Vec<bool>,
    pub optimizer: Option<OptimizerHeader>,
    pub tensors: Vec<TensorEntry>,
}

/// A model with its training position and, optionally, optimizer moments.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub bundle: ModelBundle<T>,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub rng: RngState,
    pub optimizer: Option<AdamW<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_bundle(bundle: ModelBundle<T>) -> Self {
        Checkpoint {
            bundle,
            train: None,
            step: 0,
            rng: RngState { seed: 0, step: 0 },
            optimizer: None,
        }
    }

    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let store = &self.bundle.store;
        let mut out: Vec<(String, &Tensor<T>)> = store.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optimizer {
            for (id, name, _) in store.iter() {
                if let Some((m, v)) = &opt.moments[id.index()] {
                    out.push((format!("opt.m.{name}"), m));
                    out.push((format!("opt.v.{name}"), v));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let size = T::DTYPE.size_of() as u64;
        let mut table = Vec::with_capacity(tensors.len());
        let mut offset = 0u64;
        for (name, t) in &tensors {
            let nbytes = t.numel() as u64 * size;
            table.push(TensorEntry {
                name: name.clone(),
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = CheckpointHeader {
            dtype: T::DTYPE,
            model: self.bundle.config.clone(),
            train: self.train.clone(),
            step: self.step,
            rng: self.rng,
            freeze: self.bundle.freeze.0.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                hyper: o.hyper,
                step: o.step,
                decay: o.decay.clone(),
            }),
            tensors: table,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; nothing is returned unless every tensor was read
    /// and validated.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = parse_header(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, expected {}",
                header.dtype.name(),
                T::DTYPE.name()
            )));
        }
        let size = T::DTYPE.size_of() as u64;
        let mut expect = 0u64;
        let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.dtype != header.dtype || e.offset != expect || e.nbytes != numel as u64 * size {
                return Err(Error::Format(format!("inconsistent tensor table entry {:?}", e.name)));
            }
            expect += e.nbytes;
            if by_name.insert(e.name.as_str(), e).is_some() {
                return Err(Error::Format(format!("duplicate tensor {:?}", e.name)));
            }
        }
        if payload.len() as u64 != expect {
            return Err(Error::Format(format!(
                "payload is {} bytes, tensor table describes {expect}",
                payload.len()
            )));
        }
        let read = |e: &TensorEntry| -> Result<Tensor<T>> {
            let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
            let data = raw.chunks_exact(size as usize).map(T::read_le).collect();
            Tensor::new(&e.shape, data)
        };

        let mut bundle = ModelBundle::<T>::new(header.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let n = bundle.store.len();
        if header.freeze.len() != n {
            return Err(Error::Format(format!("freeze mask has {} entries for {n} tensors", header.freeze.len())));
        }
        let mut used = 0;
        let ids: Vec<_> = bundle.store.ids().collect();
        for &id in &ids {
            let name = bundle.store.name(id).to_string();
            let e = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))?;
            if e.shape != bundle.store.get(id).shape() {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    lhs: bundle.store.get(id).shape().to_vec(),
                    rhs: e.shape.clone(),
                });
            }
            *bundle.store.get_mut(id) = read(e)?;
            used += 1;
        }
        bundle.freeze = FreezeMask(header.freeze.clone());

        let optimizer = match &header.optimizer {
            None => None,
            Some(oh) => {
                if oh.decay.len() != n {
                    return Err(Error::Format("optimizer decay mask length mismatch".into()));
                }
                let mut moments = Vec::with_capacity(n);
                for &id in &ids {
                    let name = bundle.store.name(id);
                    let m = by_name.get(format!("opt.m.{name}").as_str()).copied();
                    let v = by_name.get(format!("opt.v.{name}").as_str()).copied();
                    moments.push(match (m, v) {
                        (Some(m), Some(v)) => {
                            let shape = bundle.store.get(id).shape();
                            if m.shape != shape || v.shape != shape {
                                return Err(Error::Format(format!("moment shape mismatch for {name:?}")));
                            }
                            used += 2;
                            Some((read(m)?, read(v)?))
                        }
                        (None, None) => None,
                        _ => return Err(Error::Format(format!("incomplete moments for {name:?}"))),
                    });
                }
                Some(AdamW {
                    hyper: oh.hyper,
                    step: oh.step,
                    moments,
                    decay: oh.decay.clone(),
                })
            }
        };
        if used != header.tensors.len() {
            return Err(Error::Format(format!(
                "{} unrecognised tensors in checkpoint",
                header.tensors.len() - used
            )));
        }
        Ok(Checkpoint {
            bundle,
            train: header.train,
            step: header.step,
            rng: header.rng,
            optimizer,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Validates magic, version and header framing.
pub fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 {
        return Err(Error::Format("file too short for a checkpoint".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if len > MAX_HEADER || 16 + len > bytes.len() as u64 {
        return Err(Error::Format(format!("truncated header ({len} bytes declared)")));
    }
    let end = 16 + len as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::Format(format!("header: {e}")))?;
    Ok((header, &bytes[end..]))
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::load(path)
}
