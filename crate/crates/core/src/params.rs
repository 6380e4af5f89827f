//! Named trainable parameters and the checkpoint archive.
//!
//! A checkpoint is a safetensors file whose tensors are the parameters under
//! their hierarchical names (`step0.enc.conv0.weight`, ...). The safetensors
//! metadata holds the format version and the [`ModelConfig`] as JSON.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{contract, Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    /// `diag` on the diagonal and `off` elsewhere, for a square `[c, c]` or
    /// `[c, c, 1, 1]` shape.
    Identity {
        diag: f64,
        off: f64,
    },
}

/// Flat registry of every trainable tensor of a model.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Result<Self> {
        crate::ops::float_dtype_ok(dtype)?;
        Ok(ParamStore {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates (or fails on duplicate) a parameter and returns its live tensor.
    pub fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(contract!("duplicate parameter name {name}"));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(bound) => (0..n)
                .map(|_| self.rng.random_range(-bound..=bound))
                .collect(),
            Init::Identity { diag, off } => {
                let c = shape[0];
                if shape.len() < 2 || shape[1] != c || n != c * c {
                    return Err(contract!(
                        "identity init needs a square shape, got {shape:?}"
                    ));
                }
                (0..n)
                    .map(|i| if i / c == i % c { diag } else { off })
                    .collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let live = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(live)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Overwrites a parameter in place; layers holding it see the new value.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| contract!("unknown parameter {name}"))?;
        if var.dims() != value.dims() {
            return Err(contract!(
                "parameter {name}: shape {:?} vs {:?}",
                var.dims(),
                value.dims()
            ));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&self, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for var in self
            .vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
        {
            var.set(&var.zeros_like()?)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn scalar(&self, name: &str, index: usize) -> Result<f64> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| contract!("unknown parameter {name}"))?;
        Ok(var
            .flatten_all()?
            .to_dtype(DType::F64)?
            .get(index)?
            .to_scalar::<f64>()?)
    }

    pub fn set_scalar(&self, name: &str, index: usize, value: f64) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| contract!("unknown parameter {name}"))?;
        let mut flat = var.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        *flat
            .get_mut(index)
            .ok_or_else(|| contract!("index {index} out of range for {name}"))? = value;
        let t = Tensor::from_vec(flat, var.dims(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Content hash over the config and all parameter values.
    pub fn fingerprint(&self, config: &ModelConfig) -> Result<[u8; 8]> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(config).map_err(|e| Error::Checkpoint(e.to_string()))?);
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for v in var.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        Ok(out)
    }

    pub fn save(&self, path: &Path, config: &ModelConfig) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(self.vars.len());
        for (name, var) in &self.vars {
            tensors.push((
                name.clone(),
                var.as_tensor().to_dtype(DType::F32)?.contiguous()?,
            ));
        }
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
            .iter()
            .map(|(n, t)| {
                let v = t.flatten_all()?.to_vec1::<f32>()?;
                Ok((
                    n.clone(),
                    v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                    t.dims().to_vec(),
                ))
            })
            .collect::<Result<_>>()?;
        let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = bytes
            .iter()
            .map(|(n, b, s)| {
                safetensors::tensor::TensorView::new(safetensors::Dtype::F32, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<_>>()?;
        let mut meta = HashMap::new();
        meta.insert(
            "format_version".to_string(),
            CHECKPOINT_FORMAT_VERSION.to_string(),
        );
        meta.insert(
            "model_config".to_string(),
            serde_json::to_string(config).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        safetensors::serialize_to_file(views, Some(meta), path)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Loads values for every parameter of this store from `path`; names and
    /// shapes must match exactly.
    pub fn load_values(&self, path: &Path) -> Result<()> {
        let (tensors, _) = read_checkpoint(path)?;
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?}, model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Reads the tensors and the model config of a checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<(HashMap<String, Tensor>, ModelConfig)> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&data)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = meta.metadata().clone().unwrap_or_default();
    let version: u32 = meta
        .get("format_version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing format_version".into()))?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )));
    }
    let config: ModelConfig = serde_json::from_str(
        meta.get("model_config")
            .ok_or_else(|| Error::Checkpoint("missing model_config".into()))?,
    )
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let st = safetensors::SafeTensors::deserialize(&data)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != safetensors::Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: expected f32 data")));
        }
        let vals: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.insert(name, Tensor::from_vec(vals, view.shape(), &Device::Cpu)?);
    }
    Ok((out, config))
}

/// Scoped view used by layer constructors to build dotted names.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn root(store: &'a mut ParamStore) -> Self {
        Scope {
            store,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(&full, shape, init)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_and_reload_preserves_values_and_config() -> Result<()> {
        let mut store = ParamStore::new(DType::F32, 3)?;
        let mut scope = Scope::root(&mut store);
        let mut a = scope.sub("a");
        a.param("w", &[2, 3], Init::Uniform(1.0))?;
        a.param("b", &[3], Init::Const(0.5))?;
        let cfg = ModelConfig::tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.safetensors");
        store.save(&path, &cfg)?;

        let mut other = ParamStore::new(DType::F32, 99)?;
        let mut scope = Scope::root(&mut other);
        let mut a = scope.sub("a");
        a.param("w", &[2, 3], Init::Zeros)?;
        a.param("b", &[3], Init::Zeros)?;
        other.load_values(&path)?;
        assert_eq!(other.fingerprint(&cfg)?, store.fingerprint(&cfg)?);
        let (_, read_cfg) = read_checkpoint(&path)?;
        assert_eq!(read_cfg, cfg);
        Ok(())
    }

    #[test]
    fn live_tensors_follow_set() -> Result<()> {
        let mut store = ParamStore::new(DType::F64, 0)?;
        let t = store.create("x", &[2], Init::Zeros)?;
        store.set_scalar("x", 1, 4.0)?;
        assert_eq!(t.to_vec1::<f64>()?, vec![0.0, 4.0]);
        assert!(store.create("x", &[1], Init::Zeros).is_err());
        Ok(())
    }

    #[test]
    fn fingerprint_changes_with_values() -> Result<()> {
        let mut store = ParamStore::new(DType::F32, 0)?;
        store.create("x", &[4], Init::Uniform(1.0))?;
        let cfg = ModelConfig::tiny();
        let before = store.fingerprint(&cfg)?;
        store.set_scalar("x", 0, 123.0)?;
        assert_ne!(before, store.fingerprint(&cfg)?);
        Ok(())
    }
}
