//! Named parameter storage, graph binding and the `CKP1` checkpoint format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};
use trunkshare_tensor::{Graph, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::rng;

const CKP1_MAGIC: &[u8; 4] = b"CKP1";
const CKP1_VERSION: u32 = 1;

/// Shape and initializer of one parameter, as declared by a module.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// He-normal: `N(0, 2 / fan_in)` with `fan_in = shape[1..].product()`.
    HeNormal,
    Normal(f64),
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Initial value; depends only on `(seed, name)`.
    pub fn initialize(&self, seed: u64) -> Tensor {
        let std = match self.init {
            Init::Zeros => return Tensor::zeros(&self.shape),
            Init::HeNormal => (2.0 / self.shape[1..].iter().product::<usize>() as f64).sqrt(),
            Init::Normal(std) => std,
        };
        let mut r = rng::stream(seed, &[rng::hash_str(&self.name)]);
        let dist = Normal::new(0.0, std).expect("finite positive std");
        Tensor::from_fn(&self.shape, |_| dist.sample(&mut r))
    }
}

/// Ordered map from hierarchical names (`trunk.stage1.block0.conv1.weight`) to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            store.insert(spec.name.clone(), spec.initialize(seed))?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: String, value: Tensor) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(CoreError::Contract(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| CoreError::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Scalar count of the entries whose name starts with `namespace.`.
    pub fn namespace_scalar_count(&self, namespace: &str) -> usize {
        self.iter()
            .filter(|(k, _)| in_namespace(k, namespace))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn has_namespace(&self, namespace: &str) -> bool {
        self.names().any(|k| in_namespace(k, namespace))
    }

    /// Copies every entry of `source` under the given namespaces into `self`.
    /// Names and shapes must already exist here. Returns the copied names.
    pub fn load_namespaces(&mut self, source: &ParamStore, namespaces: &[&str]) -> Result<Vec<String>> {
        let mut loaded = Vec::new();
        for (name, value) in source.iter() {
            if !namespaces.iter().any(|ns| in_namespace(name, ns)) {
                continue;
            }
            let dst = self
                .entries
                .get_mut(name)
                .ok_or_else(|| CoreError::Contract(format!("checkpoint entry {name} has no counterpart in the model")))?;
            if dst.shape() != value.shape() {
                return Err(CoreError::Contract(format!(
                    "checkpoint entry {name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    dst.shape()
                )));
            }
            *dst = value.clone();
            loaded.push(name.to_string());
        }
        Ok(loaded)
    }

    /// Verifies that `self` has exactly the names and shapes of `specs`.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        if self.len() != specs.len() {
            return Err(CoreError::Contract(format!(
                "parameter count mismatch: have {}, expected {}",
                self.len(),
                specs.len()
            )));
        }
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(CoreError::Contract(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// `CKP1`: magic, u32 version, u32 count, then per entry u32 name length,
    /// UTF-8 name and a `TSR1` blob. All integers little-endian.
    pub fn write_ckp1<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CKP1_MAGIC)?;
        w.write_all(&CKP1_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, value) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            value.write_tsr1(&mut w)?;
        }
        Ok(())
    }

    pub fn read_ckp1<R: Read>(mut r: R) -> Result<Self> {
        let bad = |reason: String| CoreError::format("checkpoint", reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKP1_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CKP1_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut store = Self::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > 4096 {
                return Err(bad(format!("name length {len} too large")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let value = Tensor::read_tsr1(&mut r).map_err(|e| bad(e.to_string()))?;
            store.insert(name, value)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_ckp1(&mut buf)?;
        // Write-then-rename so a crash never leaves a torn checkpoint behind.
        let tmp = path.with_extension("ckp.tmp");
        fs::write(&tmp, &buf)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_ckp1(bytes.as_slice()).map_err(|e| match e {
            CoreError::Format { reason, .. } => CoreError::format(path.display(), reason),
            other => other,
        })
    }
}

pub fn in_namespace(name: &str, namespace: &str) -> bool {
    name.len() > namespace.len() && name.starts_with(namespace) && name.as_bytes()[namespace.len()] == b'.'
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Lazily materializes parameters as graph leaves, once per name per graph.
#[derive(Debug)]
pub struct Binder<'s> {
    store: &'s ParamStore,
    bound: IndexMap<String, Var>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            bound: IndexMap::new(),
        }
    }

    /// Starts with `vars` already bound, so a model can run on caller-owned leaves
    /// (gradient checks perturb those directly).
    pub fn with_bound(store: &'s ParamStore, vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            store,
            bound: vars.into_iter().collect(),
        }
    }

    pub fn get(&mut self, graph: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = graph.param(self.store.get(name)?.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every bound parameter after `graph.backward`; `None` marks
    /// parameters the loss does not reach.
    pub fn gradients(&self, graph: &Graph) -> Gradients {
        Gradients {
            entries: self.bound.iter().map(|(k, &v)| (k.clone(), graph.grad(v).cloned())).collect(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: IndexMap<String, Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Option<&Tensor>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }
}
