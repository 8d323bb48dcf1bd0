//! Named parameter tensors with per-tensor freeze flags, and the `model.rckp`
//! checkpoint container.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{Float, Tensor};
use crate::binio::{check_count, LeReader, LeWriter};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    frozen: Vec<bool>,
    lookup: HashMap<String, usize>,
}

impl<T: Float> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            frozen: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        ensure!(!self.lookup.contains_key(name), "parameter {name:?} already exists");
        let id = self.names.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.frozen.push(false);
        self.lookup.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Inserts a tensor of i.i.d. `N(0, std^2)` entries.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        self.insert(name, Tensor::from_vec(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.tensor(self.id(name)?))
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> ParameterStore<U> {
        ParameterStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            frozen: self.frozen.clone(),
            lookup: self.lookup.clone(),
        }
    }
}

const CKPT_MAGIC: &[u8; 4] = b"RCKP";
const CKPT_VERSION: u32 = 1;

/// Writes `model.rckp`: magic, version, config blob (u64 length + bytes),
/// record count, then per record the name, shape, freeze flag and f32 data.
pub fn save_checkpoint(path: &Path, config_blob: &str, store: &ParameterStore<f32>) -> Result<()> {
    let mut w = LeWriter::create(path)?;
    w.bytes(CKPT_MAGIC)?;
    w.u32(CKPT_VERSION)?;
    w.u64(config_blob.len() as u64)?;
    w.bytes(config_blob.as_bytes())?;
    w.u32(store.len() as u32)?;
    for id in store.ids() {
        let name = store.name(id);
        let t = store.tensor(id);
        w.u32(name.len() as u32)?;
        w.bytes(name.as_bytes())?;
        w.u32(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.u64(d as u64)?;
        }
        w.u8(store.is_frozen(id) as u8)?;
        w.f32s(t.data())?;
    }
    w.finish()
}

pub fn load_checkpoint(path: &Path) -> Result<(String, ParameterStore<f32>)> {
    let mut r = LeReader::open(path)?;
    r.header(CKPT_MAGIC, CKPT_VERSION)?;
    let len = r.u64("config length")?;
    let len = check_count(&r, len, 1 << 24, "config byte")?;
    let mut blob = vec![0u8; len];
    r.fill(&mut blob, "config")?;
    let blob = String::from_utf8(blob).map_err(|_| r.format_err("config blob is not UTF-8"))?;
    let count = r.u32("record count")?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        if name_len > 4096 {
            return Err(r.format_err("parameter name too long"));
        }
        let mut name = vec![0u8; name_len];
        r.fill(&mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| r.format_err("parameter name is not UTF-8"))?;
        let rank = r.u32("rank")? as usize;
        if rank > 4 {
            return Err(r.format_err(format!("parameter {name:?} has rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u64("dim").map(|d| d as usize)).collect::<Result<_>>()?;
        let numel = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let numel = check_count(&r, numel.unwrap_or(u64::MAX), 1 << 32, "parameter value")?;
        let frozen = match r.u8("freeze flag")? {
            0 => false,
            1 => true,
            v => return Err(r.format_err(format!("bad freeze flag {v} for {name:?}"))),
        };
        let data = r.f32s(numel, "parameter data")?;
        let id = store
            .insert(&name, Tensor::from_vec(&shape, data)?)
            .map_err(|e| r.format_err(e.to_string()))?;
        store.set_frozen(id, frozen);
    }
    r.expect_eof()?;
    Ok((blob, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip_keeps_freeze_mask() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut s = ParameterStore::<f32>::new();
        let a = s.insert_normal("a.w", &[3, 4], 0.1, &mut rng).unwrap();
        s.insert("b.gain", Tensor::full(&[4], 1.0)).unwrap();
        s.set_frozen(a, true);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.rckp");
        save_checkpoint(&p, "{\"x\":1}", &s).unwrap();
        let (blob, back) = load_checkpoint(&p).unwrap();
        assert_eq!(blob, "{\"x\":1}");
        assert_eq!(back, s);
        assert!(back.is_frozen(a));
        assert!(s.insert("a.w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn truncated_checkpoint_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.rckp");
        std::fs::write(&p, b"RCKP\x01\x00\x00\x00\x05").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));
    }
}
