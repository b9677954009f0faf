//! Binary checkpoints: magic `CLUN`, u32 version, length-prefixed config
//! texts, the step, a name/shape table, raw f32 LE parameter data and the
//! optimizer moments.

use std::collections::HashMap;
use std::path::Path;

use super::{OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::kv::KvMap;
use crate::model::{Model, ModelConfig};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"CLUN";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild a model and resume its training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub step: u64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState<f32>>,
}

impl Checkpoint {
    pub fn capture(model: &Model<f32>, train_config: &TrainConfig, step: u64, optimizer: Option<&OptimizerState<f32>>) -> Self {
        Self {
            model_config: *model.config(),
            train_config: train_config.clone(),
            step,
            params: model.params().iter().map(|p| (p.name().to_string(), p.value().clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Builds a model of the stored configuration and fills every parameter by
    /// name. Unknown, missing or mis-shaped entries are errors.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = Model::<f32>::build(self.model_config, 0)?;
        let index: HashMap<String, usize> = model.param_names().enumerate().map(|(i, n)| (n.to_string(), i)).collect();
        let mut seen = vec![false; index.len()];
        for (name, value) in &self.params {
            let &i = index.get(name).ok_or_else(|| Error::Format(format!("unknown parameter {name:?} in checkpoint")))?;
            let p = &mut model.params_mut()[i];
            if p.value().shape() != value.shape() {
                return Err(Error::Format(format!("parameter {name}: shape {:?}, model expects {:?}", value.shape(), p.value().shape())));
            }
            *p.value_mut() = value.clone();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let name = model.param_names().nth(i).unwrap_or_default().to_string();
            return Err(Error::Format(format!("checkpoint lacks parameter {name}")));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.model_config.to_kv().to_text());
        put_str(&mut out, &self.train_config.to_kv().to_text());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.params {
            put_f32s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for (m, v) in opt.m.iter().zip(&opt.v) {
                    put_f32s(&mut out, m.data());
                    put_f32s(&mut out, v.data());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let model_config = ModelConfig::from_kv(&KvMap::parse(&r.string()?)?)?;
        let train_config = TrainConfig::from_kv(&KvMap::parse(&r.string()?)?)?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            table.push((name, shape));
        }
        let mut params = Vec::with_capacity(table.len());
        for (name, shape) in table {
            let numel = shape.iter().product();
            let data = r.f32s(numel)?;
            params.push((name, Tensor::new(shape, data)?));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let opt_step = r.u64()?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for (_, t) in &params {
                    m.push(Tensor::new(t.shape().to_vec(), r.f32s(t.numel())?)?);
                    v.push(Tensor::new(t.shape().to_vec(), r.f32s(t.numel())?)?);
                }
                Some(OptimizerState { m, v, step: opt_step })
            }
            other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { model_config, train_config, step, params, optimizer })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes();
    atomic_write(path, |w| Ok(std::io::Write::write_all(w, &bytes)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("absurd tensor size".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model<f32> {
        Model::build(ModelConfig::small(2, 4, 4, 1), 5).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let model = tiny();
        let mut opt = OptimizerState::new(model.params());
        opt.step = 9;
        opt.m[0].data_mut()[0] = 0.25;
        let ck = Checkpoint::capture(&model, &TrainConfig::default(), 42, Some(&opt));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.optimizer.as_ref().unwrap(), &opt);
        assert_eq!(back.train_config, TrainConfig::default());
        let x = crate::Tensor::from_fn(vec![1, 37], |i| ((i as f32) * 0.3).sin());
        let a = model.forward(&x).unwrap();
        let b = back.to_model().unwrap().forward(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ck = Checkpoint::capture(&tiny(), &TrainConfig::default(), 0, None);
        let bytes = ck.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("version")));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut renamed = ck.clone();
        renamed.params[0].0 = "enc.9.conv.w".into();
        assert!(matches!(renamed.to_model(), Err(Error::Format(m)) if m.contains("unknown")));
        let mut short = ck.clone();
        short.params.pop();
        assert!(short.to_model().is_err());
    }

    #[test]
    fn save_and_load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.clun");
        let ck = Checkpoint::capture(&tiny(), &TrainConfig::default(), 3, None);
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().to_bytes(), ck.to_bytes());
    }
}
