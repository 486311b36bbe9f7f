//! Versioned binary checkpoint container.
//!
//! Layout: `TAPASRCK`, `u32` format version, `u64` header length, a JSON
//! header, then every parameter as little-endian scalars in manifest order,
//! then (optionally) the Adam first and second moments in the same order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ConformerConfig;
use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Mat, Scalar};
use crate::transfer::TransferConfig;

pub const MAGIC: &[u8; 8] = b"TAPASRCK";
pub const FORMAT_VERSION: u32 = 1;

/// Enough to rebuild the parameter layout before loading values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Conformer { config: ConformerConfig },
    Tapped { source: ConformerConfig, transfer: TransferConfig },
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Mat<T>>,
    pub v: Vec<Mat<T>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: ModelSpec,
    pub tokenizer: Tokenizer,
    pub step: u64,
    pub params: ParamStore<T>,
    pub optimizer: Option<OptimizerState<T>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    step: u64,
    model: ModelSpec,
    tokenizer: Tokenizer,
    params: Vec<ParamHeader>,
    optimizer_step: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn mat<T: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Mat<T>> {
        let raw = self.take(rows * cols * T::BYTES)?;
        Ok(Mat::from_vec(rows, cols, raw.chunks_exact(T::BYTES).map(T::read_le).collect()))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
                return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
            }
        }
        let header = Header {
            dtype: T::DTYPE.into(),
            step: self.step,
            model: self.model.clone(),
            tokenizer: self.tokenizer.clone(),
            params: self
                .params
                .ids()
                .map(|id| {
                    let v = self.params.value(id);
                    ParamHeader {
                        name: self.params.name(id).into(),
                        rows: v.rows(),
                        cols: v.cols(),
                        trainable: self.params.is_trainable(id),
                    }
                })
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 20 + self.params.num_scalars() * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |m: &Mat<T>| m.data().iter().for_each(|&x| x.write_le(&mut out));
        self.params.ids().for_each(|id| put(self.params.value(id)));
        if let Some(opt) = &self.optimizer {
            opt.m.iter().chain(&opt.v).for_each(put);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} values, requested {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let mut params = ParamStore::new();
        for p in &header.params {
            let id = params.add(p.name.clone(), r.mat(p.rows, p.cols)?);
            params.set_trainable(id, p.trainable);
        }
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let mut moments = || -> Result<Vec<Mat<T>>> {
                    header.params.iter().map(|p| r.mat(p.rows, p.cols)).collect()
                };
                let m = moments()?;
                let v = moments()?;
                Some(OptimizerState { step, m, v })
            }
            None => None,
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            model: header.model,
            tokenizer: header.tokenizer,
            step: header.step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
