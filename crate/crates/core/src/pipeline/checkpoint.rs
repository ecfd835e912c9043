//! Single-file checkpoints: `"CMAE"`, a `u32` format version, a manifest of named
//! tensors (name, rank, dims, dtype code), then every payload little-endian in
//! manifest order.

use std::collections::HashMap;
use std::path::Path;

use super::config::TrainConfig;
use super::data::{ChannelStats, Dataset};
use super::optim::{MomentSlot, OptimState};
use super::train::Trainer;
use crate::error::{bail, Result};
use crate::model::CmaeModel;
use crate::tensor::{DType, Element, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"CMAE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::U64(_) => DType::U64,
            Payload::U8(_) => DType::U8,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    fn from_elements<T: Element>(values: &[T]) -> Payload {
        let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.size());
        values.iter().for_each(|v| v.write_le(&mut bytes));
        match T::DTYPE {
            DType::F32 => Payload::F32(bytes.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => Payload::F64(bytes.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        }
    }

    /// Floating payload converted to `T` (exact for same-width and f32 -> f64).
    fn to_elements<T: Element>(&self, name: &str) -> Result<Vec<T>> {
        Ok(match self {
            Payload::F32(v) => v.iter().map(|x| T::lit(*x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|x| T::lit(*x)).collect(),
            _ => bail!(Load, "tensor `{}` is not floating point", name),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Payload,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(Format, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: Payload) {
        self.tensors.push(NamedTensor { name: name.into(), dims: dims.to_vec(), data });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<&NamedTensor> {
        match self.get(name) {
            Some(t) => Ok(t),
            None => bail!(Load, "checkpoint has no tensor `{}`", name),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if t.dims.iter().product::<usize>() != t.data.len() {
                bail!(Dimension, "tensor `{}` dims {:?} hold {} values", t.name, t.dims, t.data.len());
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.push(t.data.dtype() as u8);
        }
        for t in &self.tensors {
            match &t.data {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            bail!(Format, "not a CMAE checkpoint (bad magic)");
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            bail!(Format, "checkpoint format version {} (expected {})", version, FORMAT_VERSION);
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| crate::CmaeError::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let code = r.take(1)?[0];
            let Some(dtype) = DType::from_code(code) else { bail!(Format, "tensor `{}` has unknown dtype code {}", name, code) };
            manifest.push((name, dims, dtype));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, dims, dtype) in manifest {
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| crate::CmaeError::Format("tensor too large".into()))?)?;
            let data = match dtype {
                DType::F32 => Payload::F32(raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::F64 => Payload::F64(raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::U64 => Payload::U64(raw.chunks(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::U8 => Payload::U8(raw.to_vec()),
            };
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            bail!(Format, "{} trailing bytes after checkpoint payloads", bytes.len() - r.pos);
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn config(&self) -> Result<TrainConfig> {
        match &self.require("meta.config")?.data {
            Payload::U8(b) => {
                let text = std::str::from_utf8(b).map_err(|_| crate::CmaeError::Format("config is not UTF-8".into()))?;
                TrainConfig::from_kv_text(text)
            }
            _ => bail!(Format, "meta.config must be bytes"),
        }
    }

    pub fn step(&self) -> Result<u64> {
        match &self.require("meta.step")?.data {
            Payload::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => bail!(Format, "meta.step must be one u64"),
        }
    }

    pub fn stats(&self) -> Result<ChannelStats> {
        let read = |name: &str| -> Result<[f64; 3]> {
            match &self.require(name)?.data {
                Payload::F64(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
                _ => bail!(Format, "{} must be three f64 values", name),
            }
        };
        Ok(ChannelStats { mean: read("meta.norm_mean")?, std: read("meta.norm_std")? })
    }
}

/// Snapshot of a run: config, step, EMA momentum, normalization, parameters and
/// optimizer moments.
pub fn checkpoint_from<T: Element>(trainer: &Trainer<T>) -> Checkpoint {
    let mut ck = Checkpoint::default();
    let cfg = trainer.cfg.to_kv_text().into_bytes();
    ck.push("meta.config", &[cfg.len()], Payload::U8(cfg));
    ck.push("meta.step", &[1], Payload::U64(vec![trainer.step]));
    ck.push("meta.ema_mu", &[1], Payload::F64(vec![trainer.model.ema.mu]));
    ck.push("meta.norm_mean", &[3], Payload::F64(trainer.stats.mean.to_vec()));
    ck.push("meta.norm_std", &[3], Payload::F64(trainer.stats.std.to_vec()));
    for (_, p) in trainer.store.iter() {
        ck.push(format!("param.{}", p.name), p.value.shape(), Payload::from_elements(p.value.data()));
    }
    for (id, slot) in &trainer.optim.slots {
        let p = trainer.store.get(*id);
        ck.push(format!("adam.m.{}", p.name), p.value.shape(), Payload::from_elements(&slot.m));
        ck.push(format!("adam.v.{}", p.name), p.value.shape(), Payload::from_elements(&slot.v));
        ck.push(format!("adam.t.{}", p.name), &[1], Payload::U64(vec![slot.step]));
    }
    ck
}

pub fn save_checkpoint<T: Element>(trainer: &Trainer<T>, path: &Path) -> Result<()> {
    checkpoint_from(trainer).save(path)
}

/// Rebuilds the model described by the checkpoint config and overwrites every
/// parameter with the stored values.
pub fn restore_model<T: Element>(ck: &Checkpoint) -> Result<(TrainConfig, CmaeModel, ParamStore<T>)> {
    let cfg = ck.config()?;
    let mut store = ParamStore::new();
    let mut model = CmaeModel::new(&cfg.model_config(), &mut store, cfg.seed)?;
    let index: HashMap<&str, &NamedTensor> = ck.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let key = format!("param.{name}");
        let Some(t) = index.get(key.as_str()) else { bail!(Load, "checkpoint is missing tensor `{}`", name) };
        if t.dims != store.value(id).shape() {
            bail!(Load, "tensor `{}` has shape {:?} in the checkpoint but {:?} in the model", name, t.dims, store.value(id).shape());
        }
        *store.value_mut(id) = Tensor::new(&t.dims, t.data.to_elements(&name)?)?;
    }
    if let Some(NamedTensor { data: Payload::F64(mu), .. }) = ck.get("meta.ema_mu") {
        model.ema.mu = mu[0];
    }
    Ok((cfg, model, store))
}

/// Resumes training from `ck` on the same training set. Resuming in the precision the
/// checkpoint was written in continues bit-exactly.
pub fn resume_trainer<T: Element>(ck: &Checkpoint, train: &Dataset) -> Result<Trainer<T>> {
    let (cfg, model, store) = restore_model::<T>(ck)?;
    let mut optim = OptimState::new(cfg.adamw());
    for (id, p) in store.iter() {
        let Some(m) = ck.get(&format!("adam.m.{}", p.name)) else { continue };
        let v = ck.require(&format!("adam.v.{}", p.name))?;
        let t = ck.require(&format!("adam.t.{}", p.name))?;
        if m.dims != p.value.shape() || v.dims != p.value.shape() {
            bail!(Load, "optimizer state for `{}` does not match its shape {:?}", p.name, p.value.shape());
        }
        let step = match &t.data {
            Payload::U64(s) if s.len() == 1 => s[0],
            _ => bail!(Load, "adam.t.{} must be one u64", p.name),
        };
        optim.slots.insert(id, MomentSlot { m: m.data.to_elements(&p.name)?, v: v.data.to_elements(&p.name)?, step });
    }
    let step = ck.step()?;
    optim.step = step;
    let data = train.take(cfg.num_images);
    Trainer::assemble(&cfg, data, ck.stats()?, model, store, optim, step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::{synthetic_dataset, Split};

    fn trained() -> (Trainer<f64>, Dataset) {
        let ds = synthetic_dataset(16, 5, Split::Train).unwrap();
        let mut t = Trainer::<f64>::new(&TrainConfig::tiny(), &ds).unwrap();
        t.train_until(2, None).unwrap();
        (t, ds)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (t, ds) = trained();
        let bytes = checkpoint_from(&t).to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let resumed = resume_trainer::<f64>(&back, &ds).unwrap();
        assert_eq!(checkpoint_from(&resumed).to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_magic_and_truncation_rejected() {
        let (t, _) = trained();
        let mut bytes = checkpoint_from(&t).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(crate::CmaeError::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(crate::CmaeError::Format(_))));
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let (t, _) = trained();
        let mut ck = checkpoint_from(&t);
        let entry = ck.tensors.iter_mut().find(|e| e.name == "param.online_encoder.patch_embed.bias").unwrap();
        entry.dims = vec![entry.dims[0] / 2, 2];
        let err = restore_model::<f64>(&ck).unwrap_err();
        assert!(matches!(err, crate::CmaeError::Load(_)));
        assert!(err.to_string().contains("patch_embed.bias"), "{err}");
    }
}
