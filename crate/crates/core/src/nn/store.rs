//! Named parameter storage with seeded initialization.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Display;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Trainable parameters plus non-trainable buffers (normalization statistics).
///
/// Every entry is an independent `Var`; two stores never share storage unless a
/// caller clones a `Var` out of one and inserts it into another, which this type
/// does not expose.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Zero-mean normal with standard deviation `sqrt(2 / fan)`.
    KaimingNormal {
        fan: usize,
    },
    Uniform {
        bound: f64,
    },
    Constant(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.buffers.iter()
    }

    pub fn param(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Var> {
        self.buffers.get(name)
    }

    /// Total number of trainable scalars.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// All parameters and buffers keyed by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Host copy of every parameter, for equality checks.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.tensors()
            .into_iter()
            .map(|(k, t)| Ok((k, t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)))
            .collect()
    }

    /// Overwrite every entry from `source` (looked up as `prefix + name`).
    ///
    /// All missing or wrongly shaped entries are collected before failing.
    pub fn load_from(&self, source: &HashMap<String, Tensor>, prefix: &str, origin: &Path) -> Result<()> {
        let mut bad = Vec::new();
        let entries: Vec<(&String, &Var)> = self.params.iter().chain(self.buffers.iter()).collect();
        for (name, var) in &entries {
            let key = format!("{prefix}{name}");
            match source.get(&key) {
                None => bad.push(format!("{key}: missing")),
                Some(t) if t.dims() != var.dims() => {
                    bad.push(format!("{key}: expected {:?}, found {:?}", var.dims(), t.dims()))
                }
                Some(_) => {}
            }
        }
        if !bad.is_empty() {
            return Err(Error::Load {
                path: origin.to_path_buf(),
                entries: bad,
            });
        }
        for (name, var) in entries {
            let t = &source[&format!("{prefix}{name}")];
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// Overwrites only the entries named in `source`, after checking every shape.
    pub fn load_subset(&self, source: &HashMap<String, Tensor>, origin: &Path) -> Result<()> {
        let mut bad = Vec::new();
        for (name, t) in source {
            match self.params.get(name).or_else(|| self.buffers.get(name)) {
                None => bad.push(format!("{name}: unknown entry")),
                Some(v) if v.dims() != t.dims() => {
                    bad.push(format!("{name}: expected {:?}, found {:?}", v.dims(), t.dims()))
                }
                Some(_) => {}
            }
        }
        if !bad.is_empty() {
            bad.sort();
            return Err(Error::Load {
                path: origin.to_path_buf(),
                entries: bad,
            });
        }
        for (name, t) in source {
            let v = self
                .params
                .get(name)
                .or_else(|| self.buffers.get(name))
                .expect("checked");
            v.set(&t.to_dtype(v.dtype())?)?;
        }
        Ok(())
    }

    /// Copies every value of `other` into this store; both must have identical layouts.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        let map: HashMap<String, Tensor> = other.tensors().into_iter().collect();
        self.load_from(&map, "", Path::new("<in-memory>"))
    }
}

/// Registers parameters under a dotted prefix while drawing initial values from a seeded RNG.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    random: bool,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            random: true,
        }
    }

    /// Builder that allocates zero-filled parameters, for layouts about to be overwritten.
    pub fn skeleton(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            random: false,
            ..Self::new(store, rng)
        }
    }

    pub fn sub(&mut self, name: impl Display) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
            random: self.random,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = self.full_name(name);
        if self.store.params.contains_key(&full) {
            return Err(Error::argument(format!("duplicate parameter {full}")));
        }
        let n: usize = shape.iter().product();
        let values = if self.random {
            sample(self.rng, init, n)
        } else {
            match init {
                Init::Constant(c) => vec![c as f32; n],
                _ => vec![0f32; n],
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &Device::Cpu)?)?;
        self.store.params.insert(full, var.clone());
        Ok(var)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let full = self.full_name(name);
        let t = Tensor::full(value as f32, shape, &Device::Cpu)?;
        let var = Var::from_tensor(&t)?;
        self.store.buffers.insert(full, var.clone());
        Ok(var)
    }
}

fn sample(rng: &mut ChaCha8Rng, init: Init, n: usize) -> Vec<f32> {
    match init {
        Init::KaimingNormal { fan } => {
            let std = (2.0 / fan.max(1) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(rng) as f32).collect()
        }
        Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound) as f32).collect(),
        Init::Constant(c) => vec![c as f32; n],
    }
}
