//! Named parameter storage with deterministic initialization.
//!
//! Every network in the crate pulls its weights through a [`Scope`]. A store is
//! either trainable (parameters are [`Var`]s tracked by autodiff) or frozen
//! (parameters are plain constant tensors, so no gradient can ever reach them).

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal { std: f64 },
}

#[derive(Clone)]
enum Entry {
    Var(Var),
    Frozen(Tensor),
}

impl Entry {
    fn tensor(&self) -> &Tensor {
        match self {
            Entry::Var(v) => v.as_tensor(),
            Entry::Frozen(t) => t,
        }
    }
}

struct Inner {
    params: BTreeMap<String, Entry>,
    frozen: bool,
}

#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self::with_mode(dtype, false)
    }

    pub fn new_frozen(dtype: DType) -> Self {
        Self::with_mode(dtype, true)
    }

    fn with_mode(dtype: DType, frozen: bool) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                params: BTreeMap::new(),
                frozen,
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_frozen(&self) -> bool {
        self.lock().frozen
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
            seed: 0,
            seed_root: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.lock().params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().params.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.lock().params.get(name).map(|e| e.tensor().clone())
    }

    /// Trainable variables, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.lock()
            .params
            .iter()
            .filter_map(|(k, e)| match e {
                Entry::Var(v) => Some((k.clone(), v.clone())),
                Entry::Frozen(_) => None,
            })
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        match self.lock().params.get(name) {
            Some(Entry::Var(v)) => Some(v.clone()),
            _ => None,
        }
    }

    /// Snapshot of all parameter values (detached), sorted by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.lock()
            .params
            .iter()
            .map(|(k, e)| (k.clone(), e.tensor().detach()))
            .collect()
    }

    /// Snapshot restricted to names under `prefix`, with the prefix stripped.
    pub fn tensors_with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors()
            .into_iter()
            .filter_map(|(k, t)| k.strip_prefix(&p).map(|s| (s.to_string(), t)))
            .collect()
    }

    /// Pre-populate parameters (e.g. from a checkpoint). Existing entries are
    /// overwritten in place so models already holding them observe the change.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        let mut inner = self.lock();
        let frozen = inner.frozen;
        for (name, t) in tensors {
            let full = join(prefix, name);
            // Deep copy: Var updates write into storage in place.
            let t = t.to_dtype(self.dtype)?.to_device(&self.device)?.copy()?.detach();
            match inner.params.get(&full) {
                Some(Entry::Var(v)) => {
                    if v.dims() != t.dims() {
                        return Err(Error::Shape(format!(
                            "parameter {full}: stored {:?} vs loaded {:?}",
                            v.dims(),
                            t.dims()
                        )));
                    }
                    v.set(&t)?;
                }
                _ => {
                    let entry = if frozen {
                        Entry::Frozen(t)
                    } else {
                        Entry::Var(Var::from_tensor(&t)?)
                    };
                    inner.params.insert(full, entry);
                }
            }
        }
        Ok(())
    }

    /// Copy of this store whose parameters are constants.
    pub fn frozen_copy(&self) -> Result<ParamStore> {
        let out = ParamStore::new_frozen(self.dtype);
        out.load(&self.tensors(), "")?;
        Ok(out)
    }

    /// Trainable scalar count (frozen entries are not counted).
    pub fn num_trainable(&self) -> usize {
        self.lock()
            .params
            .values()
            .filter_map(|e| match e {
                Entry::Var(v) => Some(v.elem_count()),
                Entry::Frozen(_) => None,
            })
            .sum()
    }

    /// Scalar count of every entry regardless of trainability.
    pub fn num_elements(&self) -> usize {
        self.lock().params.values().map(|e| e.tensor().elem_count()).sum()
    }

    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        let p = format!("{prefix}.");
        self.lock()
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(&p))
            .map(|(_, e)| e.tensor().elem_count())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian f32 values.
    pub fn digest(&self) -> Result<String> {
        digest_tensors(&self.tensors())
    }

    fn fetch_or_init(&self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<Tensor> {
        let mut inner = self.lock();
        if let Some(e) = inner.params.get(name) {
            let t = e.tensor();
            if t.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {shape:?}, found {:?}",
                    t.dims()
                )));
            }
            return Ok(t.clone());
        }
        let values = init_values(shape.iter().product(), init, seed);
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let entry = if inner.frozen {
            Entry::Frozen(t)
        } else {
            Entry::Var(Var::from_tensor(&t)?)
        };
        let t = entry.tensor().clone();
        inner.params.insert(name.to_string(), entry);
        Ok(t)
    }
}

pub fn digest_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Hierarchical view into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
    seed: u64,
    seed_root: usize,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        Scope {
            store: self.store.clone(),
            prefix: join(&self.prefix, name.as_ref()),
            seed: self.seed,
            seed_root: self.seed_root,
        }
    }

    /// Re-seed initialization below this scope. Parameter seeds are derived
    /// from the name relative to this point, so the same module built under two
    /// different prefixes with the same seed gets identical initial weights.
    pub fn with_seed(&self, seed: u64) -> Scope {
        let root = if self.prefix.is_empty() { 0 } else { self.prefix.len() + 1 };
        Scope {
            store: self.store.clone(),
            prefix: self.prefix.clone(),
            seed,
            seed_root: root,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = join(&self.prefix, name);
        let rel = full.get(self.seed_root..).unwrap_or(&full);
        let seed = self.seed ^ fnv1a(rel.as_bytes());
        self.store.fetch_or_init(&full, shape, init, seed)
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else if name.is_empty() {
        prefix.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn init_values(n: usize, init: Init, seed: u64) -> Vec<f64> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Constant(c) => vec![c; n],
        Init::TruncNormal { std } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            (0..n)
                .map(|_| loop {
                    let z: f64 = normal.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect()
        }
    }
}
