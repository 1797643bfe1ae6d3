//! Single-file binary checkpoint.
//!
//! Layout (little-endian): magic, version, run-config text, encoder
//! fingerprint, epoch, optimizer step, loss history, then three tensor
//! groups (parameters, first and second Adam moments) and a trailing CRC-32
//! of everything before it.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::{Adam, EpochRecord, TrainState};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gta::NaimaModel;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"NAIMACKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn from_tensor(name: &str, t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F32 => TensorData::F32(flat.to_vec1()?),
            DType::F64 => TensorData::F64(flat.to_vec1()?),
            other => return Err(Error::InvalidInput(format!("cannot store {other:?} tensors"))),
        };
        Ok(Self {
            name: name.to_string(),
            dims: t.dims().to_vec(),
            data,
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let dev = &Device::Cpu;
        Ok(match &self.data {
            TensorData::F32(v) => Tensor::from_slice(v, self.dims.as_slice(), dev)?,
            TensorData::F64(v) => Tensor::from_slice(v, self.dims.as_slice(), dev)?,
        })
    }

    fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub encoder_fingerprint: [u8; 32],
    /// Epochs completed.
    pub epoch: usize,
    pub adam_step: u64,
    pub history: Vec<EpochRecord>,
    pub params: Vec<NamedTensor>,
    pub adam_m: Vec<NamedTensor>,
    pub adam_v: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(model: &NaimaModel, run: &RunConfig, state: &TrainState) -> Result<Self> {
        let mut run = run.clone();
        run.model = model.config().clone();
        let names: Vec<&str> = model.params().iter().map(|(n, _)| n).collect();
        let group = |ts: &[Tensor]| -> Result<Vec<NamedTensor>> {
            names.iter().zip(ts).map(|(n, t)| NamedTensor::from_tensor(n, t)).collect()
        };
        Ok(Self {
            run,
            encoder_fingerprint: model.provider().fingerprint(),
            epoch: state.epoch,
            adam_step: state.adam.step,
            history: state.history.clone(),
            params: model
                .params()
                .iter()
                .map(|(n, v)| NamedTensor::from_tensor(n, v.as_tensor()))
                .collect::<Result<_>>()?,
            adam_m: group(&state.adam.m)?,
            adam_v: group(&state.adam.v)?,
        })
    }

    /// Copies parameters into `model` (and optimizer state into `state`).
    /// Fails without partial writes when names or shapes disagree.
    pub fn load_into(&self, model: &NaimaModel, state: Option<&mut TrainState>) -> Result<()> {
        let mc = model.config();
        let cc = &self.run.model;
        if mc.channels != cc.channels {
            return Err(Error::Incompatible(format!(
                "checkpoint has channel width {}, model has {}",
                cc.channels, mc.channels
            )));
        }
        if model.provider().fingerprint() != self.encoder_fingerprint {
            return Err(Error::Incompatible("semantic encoder weights differ from the checkpoint".into()));
        }
        let store = model.params();
        if store.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for ((name, var), nt) in store.iter().zip(&self.params) {
            if name != nt.name || var.dims() != nt.dims.as_slice() {
                return Err(Error::Incompatible(format!(
                    "parameter `{name}` {:?} does not match `{}` {:?}",
                    var.dims(),
                    nt.name,
                    nt.dims
                )));
            }
        }
        for nt in &self.params {
            store.assign(&nt.name, &nt.to_tensor()?)?;
        }
        if let Some(state) = state {
            let dtype = store.dtype();
            let load = |g: &[NamedTensor]| -> Result<Vec<Tensor>> {
                g.iter().map(|t| Ok(t.to_tensor()?.to_dtype(dtype)?)).collect()
            };
            state.adam = Adam {
                step: self.adam_step,
                m: load(&self.adam_m)?,
                v: load(&self.adam_v)?,
                ..Adam::new(store)?
            };
            state.epoch = self.epoch;
            state.history = self.history.clone();
        }
        Ok(())
    }

    /// Rebuilds the model described by the stored config and loads it.
    pub fn restore(&self) -> Result<(NaimaModel, TrainState)> {
        let model = NaimaModel::from_config(self.run.model.clone())?;
        let mut state = TrainState::new(&model)?;
        self.load_into(&model, Some(&mut state))?;
        Ok((model, state))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(&CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.run.to_text();
        w.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        w.extend_from_slice(cfg.as_bytes());
        w.extend_from_slice(&self.encoder_fingerprint);
        w.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        w.extend_from_slice(&self.adam_step.to_le_bytes());
        w.extend_from_slice(&(self.history.len() as u32).to_le_bytes());
        for r in &self.history {
            w.extend_from_slice(&(r.epoch as u64).to_le_bytes());
            w.extend_from_slice(&r.mean_loss.to_le_bytes());
            w.extend_from_slice(&r.lr.to_le_bytes());
        }
        for group in [&self.params, &self.adam_m, &self.adam_v] {
            w.extend_from_slice(&(group.len() as u32).to_le_bytes());
            for t in group {
                w.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
                w.extend_from_slice(t.name.as_bytes());
                w.push(t.dims.len() as u8);
                for &d in &t.dims {
                    w.extend_from_slice(&(d as u64).to_le_bytes());
                }
                match &t.data {
                    TensorData::F32(v) => {
                        w.push(DTYPE_F32);
                        v.iter().for_each(|x| w.extend_from_slice(&x.to_le_bytes()));
                    }
                    TensorData::F64(v) => {
                        w.push(DTYPE_F64);
                        v.iter().for_each(|x| w.extend_from_slice(&x.to_le_bytes()));
                    }
                }
            }
        }
        let crc = crc32fast::hash(&w);
        w.extend_from_slice(&crc.to_le_bytes());
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.fail_at(0, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail_at(8, &format!("unsupported version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_at = r.pos;
        let cfg = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| r.fail_at(cfg_at, "config is not UTF-8"))?;
        let run = RunConfig::from_text(cfg).map_err(|e| r.fail_at(cfg_at, &e.to_string()))?;
        let encoder_fingerprint = r.take(32)?.try_into().unwrap();
        let epoch = r.u64()? as usize;
        let adam_step = r.u64()?;
        let n = r.u32()? as usize;
        let mut history = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            history.push(EpochRecord {
                epoch: r.u64()? as usize,
                mean_loss: r.f64()?,
                lr: r.f64()?,
            });
        }
        let mut groups = Vec::with_capacity(3);
        for _ in 0..3 {
            let count = r.u32()? as usize;
            let mut g = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                g.push(r.tensor()?);
            }
            groups.push(g);
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(r.fail_at(r.pos, "trailing bytes after checksum"));
        }
        if crc32fast::hash(&bytes[..body_end]) != stored {
            return Err(r.fail_at(body_end, "checksum mismatch"));
        }
        let adam_v = groups.pop().unwrap();
        let adam_m = groups.pop().unwrap();
        let params = groups.pop().unwrap();
        for g in [&adam_m, &adam_v] {
            if g.len() != params.len() || g.iter().zip(&params).any(|(a, b)| a.dims != b.dims) {
                return Err(r.fail_at(body_end, "optimizer state does not match the parameters"));
            }
        }
        Ok(Self {
            run,
            encoder_fingerprint,
            epoch,
            adam_step,
            history,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::path(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::path(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::path(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail_at(&self, offset: usize, reason: &str) -> Error {
        Error::Checkpoint {
            offset: offset as u64,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail_at(self.pos, &format!("truncated: needed {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<NamedTensor> {
        let start = self.pos;
        let len = self.u16()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| self.fail_at(start, "tensor name is not UTF-8"))?;
        let rank = self.u8()? as usize;
        let dims = (0..rank).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| self.fail_at(start, "tensor size overflows"))?;
        let tag_at = self.pos;
        let data = match self.u8()? {
            DTYPE_F32 => TensorData::F32(
                self.take(count.checked_mul(4).ok_or_else(|| self.fail_at(tag_at, "tensor too large"))?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DTYPE_F64 => TensorData::F64(
                self.take(count.checked_mul(8).ok_or_else(|| self.fail_at(tag_at, "tensor too large"))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            other => return Err(self.fail_at(tag_at, &format!("unknown dtype tag {other}"))),
        };
        let t = NamedTensor { name, dims, data };
        debug_assert_eq!(t.len(), count);
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn sample_checkpoint() -> Checkpoint {
        let mut run = RunConfig::default();
        run.model = ModelConfig::tiny();
        let model = NaimaModel::from_config(run.model.clone()).unwrap();
        let mut state = TrainState::new(&model).unwrap();
        state.history.push(EpochRecord {
            epoch: 0,
            mean_loss: 0.25,
            lr: 1e-4,
        });
        state.epoch = 1;
        Checkpoint::capture(&model, &run, &state).unwrap()
    }

    #[test]
    fn byte_round_trip() {
        let c = sample_checkpoint();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn corruption_reports_offset() {
        let bytes = sample_checkpoint().to_bytes();
        let mut flipped = bytes.clone();
        let at = bytes.len() / 2;
        flipped[at] ^= 0x40;
        match Checkpoint::from_bytes(&flipped) {
            Err(Error::Checkpoint { .. }) => {}
            other => panic!("expected checkpoint error, got {other:?}"),
        }
        match Checkpoint::from_bytes(&bytes[..bytes.len() - 10]) {
            Err(Error::Checkpoint { offset, .. }) => assert!(offset > 0),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
        assert!(matches!(
            Checkpoint::from_bytes(b"garbage!garbage!"),
            Err(Error::Checkpoint { offset: 0, .. })
        ));
    }

    #[test]
    fn refuses_mismatched_width() {
        let c = sample_checkpoint();
        let mut cfg = ModelConfig::tiny();
        cfg.channels = 12;
        let other = NaimaModel::from_config(cfg).unwrap();
        assert!(matches!(c.load_into(&other, None), Err(Error::Incompatible(_))));
    }
}
