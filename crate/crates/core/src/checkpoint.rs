//! Binary checkpoints of named f32 tensors.
//!
//! Layout, all integers little-endian: `"A2ON"`, version `u32`, entry count
//! `u32`, then per entry in name order: name length `u16`, UTF-8 name, rank
//! `u8`, dims `u32 × rank`, values `f32 × len`. Parameters are stored under
//! `param.`, optimizer moments under `optim.m.` and `optim.v.`, and the
//! metadata JSON under `meta.json` with one byte per value.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use a2o_tensor::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::optim::AdamW;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"A2ON";
pub const VERSION: u32 = 1;

const PARAM: &str = "param.";
const MOMENT1: &str = "optim.m.";
const MOMENT2: &str = "optim.v.";
const META: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Training configuration as JSON, kept opaque here.
    pub train: Option<serde_json::Value>,
    /// Epochs completed.
    pub epoch: usize,
    pub optim_step: u64,
    pub adam: Option<[f64; 4]>,
    pub best_val_dsc: Option<f64>,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet<f32>,
    pub optim: Option<AdamW<f32>>,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: ParamSet<f32>) -> Self {
        Self {
            meta: CheckpointMeta {
                model,
                train: None,
                epoch: 0,
                optim_step: 0,
                adam: None,
                best_val_dsc: None,
                val_dsc: None,
            },
            params,
            optim: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        let mut tensors: BTreeMap<String, &Tensor<f32>> = BTreeMap::new();
        for (name, t) in self.params.iter() {
            tensors.insert(format!("{PARAM}{name}"), t);
        }
        if let Some(o) = &self.optim {
            meta.optim_step = o.step;
            meta.adam = Some([o.beta1, o.beta2, o.eps, o.weight_decay]);
            for (name, t) in &o.m {
                tensors.insert(format!("{MOMENT1}{name}"), t);
            }
            for (name, t) in &o.v {
                tensors.insert(format!("{MOMENT2}{name}"), t);
            }
        } else {
            meta.adam = None;
        }
        let json = serde_json::to_vec(&meta)?;
        let meta_tensor = Tensor::new(
            vec![json.len()],
            json.iter().map(|&b| f32::from(b)).collect(),
        )?;
        tensors.insert(META.to_string(), &meta_tensor);
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            let too_big =
                |what: &str| Error::Checkpoint(format!("{name}: {what} does not fit the format"));
            let len = u16::try_from(name.len()).map_err(|_| too_big("name"))?;
            let rank = u8::try_from(t.shape().len()).map_err(|_| too_big("rank"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| too_big("dimension"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = r.u32()?;
        let mut meta = None;
        let mut params = ParamSet::new();
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            )?;
            let data = raw
                .chunks(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data)?;
            if name == META {
                let bytes: Vec<u8> = t.data().iter().map(|&b| b as u8).collect();
                meta = Some(serde_json::from_slice::<CheckpointMeta>(&bytes)?);
            } else if let Some(p) = name.strip_prefix(PARAM) {
                params.insert(p, t)?;
            } else if let Some(p) = name.strip_prefix(MOMENT1) {
                m.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(MOMENT2) {
                v.insert(p.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unknown tensor entry {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(
                "trailing bytes after the last tensor".into(),
            ));
        }
        let meta = meta.ok_or_else(|| Error::Checkpoint(format!("missing {META} entry")))?;
        let optim = meta.adam.map(|[beta1, beta2, eps, weight_decay]| AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: meta.optim_step,
            m,
            v,
        });
        Ok(Self {
            meta,
            params,
            optim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write then rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}
