use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Derives an independent RNG stream for a named purpose from a base seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Host copy of a tensor, used for checkpointing and hashing.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.as_slice(), device)?.to_dtype(dtype)?)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named trainable tensors. Names are dotted paths whose first segment is the
/// owning module (`encoder`, `decoder`, `mpd`, `mrd`).
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.vars
            .iter()
            .filter(move |(name, _)| name.starts_with(prefix))
    }

    pub fn export(&self, prefix: &str) -> Result<BTreeMap<String, TensorData>> {
        self.with_prefix(prefix)
            .map(|(n, v)| Ok((n.clone(), TensorData::from_tensor(v.as_tensor())?)))
            .collect()
    }

    /// Overwrites every parameter under `prefix` from `values`. Names and shapes
    /// must match exactly.
    pub fn load(&self, prefix: &str, values: &BTreeMap<String, TensorData>) -> Result<()> {
        let mut expected = 0;
        for (name, var) in self.with_prefix(prefix) {
            expected += 1;
            let v = values
                .get(name)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks parameter {name}")))?;
            if v.shape != var.dims() {
                return Err(Error::Incompatible(format!(
                    "parameter {name} has shape {:?} in checkpoint, model expects {:?}",
                    v.shape,
                    var.dims()
                )));
            }
            var.set(&v.to_tensor(self.dtype, &self.device)?)?;
        }
        let provided = values.keys().filter(|k| k.starts_with(prefix)).count();
        if provided != expected {
            return Err(Error::Incompatible(format!(
                "checkpoint has {provided} parameters under {prefix:?}, model has {expected}"
            )));
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and f32 values of every parameter under any of `prefixes`.
    pub fn hash(&self, prefixes: &[&str]) -> Result<String> {
        let mut map = BTreeMap::new();
        for p in prefixes {
            map.extend(self.export(p)?);
        }
        Ok(hash_tensors(map.iter()))
    }
}

pub fn hash_tensors<'a>(items: impl Iterator<Item = (&'a String, &'a TensorData)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape.len() as u64).to_le_bytes());
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Creates parameters in a [`ParamStore`] from a seeded stream.
pub struct Initializer<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Initializer<'a> {
    pub fn new(store: &'a mut ParamStore, rng: ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(values, shape, &self.store.device)?;
        self.store.insert(name.to_string(), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = Tensor::full(value, shape, &self.store.device)?;
        self.store.insert(name.to_string(), t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values_and_hash() {
        let build = |seed| {
            let mut store = ParamStore::new(DType::F32, Device::Cpu);
            let mut init = Initializer::new(&mut store, rng_for(seed, "test"));
            init.uniform("encoder.w", &[3, 4], 0.5).unwrap();
            init.constant("decoder.b", &[4], 0.0).unwrap();
            store
        };
        let a = build(1);
        let b = build(1);
        let c = build(2);
        assert_eq!(a.hash(&["encoder."]).unwrap(), b.hash(&["encoder."]).unwrap());
        assert_ne!(a.hash(&["encoder."]).unwrap(), c.hash(&["encoder."]).unwrap());
        assert_eq!(a.hash(&["decoder."]).unwrap(), c.hash(&["decoder."]).unwrap());
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        Initializer::new(&mut store, rng_for(0, "x"))
            .uniform("encoder.w", &[2, 2], 1.0)
            .unwrap();
        let mut values = store.export("encoder.").unwrap();
        values.get_mut("encoder.w").unwrap().data = vec![1.0, 2.0, 3.0, 4.0];
        store.load("encoder.", &values).unwrap();
        assert_eq!(
            store.export("encoder.").unwrap()["encoder.w"].data,
            vec![1.0, 2.0, 3.0, 4.0]
        );
        values.get_mut("encoder.w").unwrap().shape = vec![4];
        assert!(matches!(store.load("encoder.", &values), Err(Error::Incompatible(_))));
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(7, "a"), derive_seed(7, "b"));
        assert_eq!(derive_seed(7, "a"), derive_seed(7, "a"));
    }
}
