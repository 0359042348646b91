//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AMCK" | u32 version | u64 epoch | u64 step | u64 seed
//! u32 meta length | meta (TOML: model dims + training config)
//! u32 blob count | per blob: u32 name length | name | corpus-format blob
//! ```
//!
//! Blobs are named `param/<name>`, `adam_m/<name>` and `adam_v/<name>` in
//! parameter order. A tensor of shape `[.., c]` is stored as a
//! `(numel / c) × c` blob and reshaped on load.

use std::path::Path;

use amda_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::{read_blob, write_blob};
use crate::error::{AmdaError, Result};
use crate::model::ModelDims;
use crate::trainer::Trainer;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    dims: ModelDims,
    config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dims: ModelDims,
    pub config: TrainConfig,
    pub epoch: u64,
    /// Optimizer steps taken; keys every dropout and mask draw of the next step.
    pub step: u64,
    pub seed: u64,
    /// `(name, value)` in parameter order.
    pub params: Vec<(String, Tensor)>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

fn flat(t: &Tensor) -> Result<Tensor> {
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    Ok(t.clone().reshape(vec![t.numel() / cols, cols])?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, msg: impl Into<String>) -> AmdaError {
        AmdaError::Format {
            path: self.path.to_path_buf(),
            offset: self.at as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(self.fail(format!("truncated {what}")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, n: usize, what: &str) -> Result<String> {
        let start = self.at;
        let raw = self.take(n, what)?.to_vec();
        String::from_utf8(raw).map_err(|_| AmdaError::Format {
            path: self.path.to_path_buf(),
            offset: start as u64,
            msg: format!("{what} is not UTF-8"),
        })
    }
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        let store = &trainer.model.store;
        Self {
            dims: trainer.model.dims,
            config: trainer.cfg.clone(),
            epoch: trainer.epoch as u64,
            step: trainer.opt.step,
            seed: trainer.cfg.seed,
            params: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            adam_m: trainer.opt.m.clone(),
            adam_v: trainer.opt.v.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = toml::to_string(&Meta {
            dims: self.dims,
            config: self.config.clone(),
        })
        .map_err(|e| AmdaError::Config(format!("checkpoint meta: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());

        let n = self.params.len();
        if self.adam_m.len() != n || self.adam_v.len() != n {
            return Err(AmdaError::Dimension(format!(
                "{n} parameters but {}/{} optimizer moments",
                self.adam_m.len(),
                self.adam_v.len()
            )));
        }
        out.extend_from_slice(&((3 * n) as u32).to_le_bytes());
        let mut id = 0u32;
        for (prefix, tensors) in [
            ("param", self.params.iter().map(|(_, t)| t).collect::<Vec<_>>()),
            ("adam_m", self.adam_m.iter().collect()),
            ("adam_v", self.adam_v.iter().collect()),
        ] {
            for ((name, _), t) in self.params.iter().zip(tensors) {
                let full = format!("{prefix}/{name}");
                out.extend_from_slice(&(full.len() as u32).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                write_blob(&mut out, &flat(t)?, id)?;
                id += 1;
            }
        }
        Ok(out)
    }

    /// Parses a container. Tensors come back in their stored 2-D form;
    /// [`Trainer::from_checkpoint`] restores the parameter shapes.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut c = Cursor { bytes, at: 0, path };
        if c.take(4, "magic")? != CHECKPOINT_MAGIC {
            c.at = 0;
            return Err(c.fail("not a checkpoint (bad magic)"));
        }
        let version = c.u32("version")?;
        if version != CHECKPOINT_VERSION {
            c.at -= 4;
            return Err(c.fail(format!("unsupported checkpoint version {version}")));
        }
        let epoch = c.u64("epoch")?;
        let step = c.u64("step")?;
        let seed = c.u64("seed")?;
        let meta_len = c.u32("meta length")? as usize;
        let meta_at = c.at;
        let meta_text = c.text(meta_len, "meta")?;
        let meta: Meta = toml::from_str(&meta_text).map_err(|e| AmdaError::Format {
            path: path.to_path_buf(),
            offset: meta_at as u64,
            msg: format!("meta: {}", e.message()),
        })?;
        let count = c.u32("blob count")? as usize;
        if !count.is_multiple_of(3) {
            return Err(c.fail(format!("blob count {count} is not a multiple of 3")));
        }
        let n = count / 3;
        let mut params: Vec<(String, Tensor)> = Vec::with_capacity(n);
        let (mut adam_m, mut adam_v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for k in 0..count {
            let name_len = c.u32("blob name length")? as usize;
            let name_at = c.at;
            let full = c.text(name_len, "blob name")?;
            let (prefix, name) = full.split_once('/').unwrap_or(("", &full));
            let expected = ["param", "adam_m", "adam_v"][k / n];
            if prefix != expected || (k >= n && name != params[k % n].0) {
                c.at = name_at;
                return Err(c.fail(format!("unexpected blob {full:?}")));
            }
            let (t, id, end) = read_blob(bytes, c.at as u64, path, None)?;
            if id as usize != k {
                return Err(c.fail(format!("blob {full:?} has record id {id}, expected {k}")));
            }
            c.at = end as usize;
            match k / n {
                0 => params.push((name.to_string(), t)),
                1 => adam_m.push(t),
                _ => adam_v.push(t),
            }
        }
        if c.at != bytes.len() {
            return Err(c.fail(format!("{} trailing bytes", bytes.len() - c.at)));
        }
        Ok(Self {
            dims: meta.dims,
            config: meta.config,
            epoch,
            step,
            seed,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| AmdaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| AmdaError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

impl Trainer {
    /// Rebuilds a trainer whose parameters, moments and counters match `ck`.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ck.config.clone(), ck.dims.visual_dim, ck.dims.text_dim)?;
        if t.model.dims != ck.dims {
            return Err(AmdaError::Dimension(format!(
                "checkpoint dims {:?} disagree with its config {:?}",
                ck.dims, t.model.dims
            )));
        }
        let ids: Vec<_> = t.model.store.ids().collect();
        if ids.len() != ck.params.len() {
            return Err(AmdaError::Dimension(format!(
                "checkpoint holds {} parameters, model has {}",
                ck.params.len(),
                ids.len()
            )));
        }
        for (k, ((name, value), id)) in ck.params.iter().zip(&ids).enumerate() {
            let slot = t.model.store.get(*id);
            if t.model.store.name(*id) != name || slot.numel() != value.numel() {
                return Err(AmdaError::Dimension(format!(
                    "checkpoint parameter {name} ({} values) does not fit {} {:?}",
                    value.numel(),
                    t.model.store.name(*id),
                    slot.shape()
                )));
            }
            let shape = slot.shape().to_vec();
            *t.model.store.get_mut(*id) = value.clone().reshape(shape.clone())?;
            t.opt.m[k] = ck.adam_m[k].clone().reshape(shape.clone())?;
            t.opt.v[k] = ck.adam_v[k].clone().reshape(shape)?;
        }
        t.opt.step = ck.step;
        t.epoch = usize::try_from(ck.epoch).map_err(|_| AmdaError::Config("epoch overflow".into()))?;
        Ok(t)
    }
}
