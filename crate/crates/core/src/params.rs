//! Named parameter storage with seed-deterministic initialization.
//!
//! Every module in this crate draws its weights from a [`ParamStore`]. The
//! store owns one [`Var`] per parameter, in creation order, so that the same
//! build sequence under the same seed always yields bitwise-identical values.
//! A frozen store hands out detached tensors: the values are shared with the
//! underlying variables but autodiff never records operations on them.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// Explicit values in row-major order.
    Values(Vec<f64>),
}

impl Init {
    /// PyTorch-style default for a layer with the given fan-in.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

pub struct ParamStore {
    entries: Vec<(String, Var)>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    frozen: bool,
    preload: Option<HashMap<String, Tensor>>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
            frozen: false,
            preload: None,
        }
    }

    /// A store whose values come from `tensors` (e.g. a checkpoint) instead
    /// of the initializer. Every requested name must be present.
    pub fn from_tensors(tensors: HashMap<String, Tensor>, dtype: DType) -> Self {
        let mut store = Self::new(0, dtype);
        store.preload = Some(tensors);
        store
    }

    /// Hand out detached tensors from now on.
    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates (or fetches, if already created) the parameter `name`.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(&i) = self.index.get(name) {
            let var = &self.entries[i].1;
            if var.dims() != shape {
                return Err(Error::Binding(format!(
                    "parameter `{name}` requested with shape {shape:?} but exists as {:?}",
                    var.dims()
                )));
            }
            return Ok(self.hand_out(i));
        }
        let tensor = match self.preload.as_mut() {
            Some(map) => {
                let t = map.remove(name).ok_or_else(|| {
                    Error::Checkpoint(format!("missing parameter `{name}`"))
                })?;
                if t.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(self.dtype)?
            }
            None => {
                let n: usize = shape.iter().product();
                let values = self.sample(&init, n)?;
                Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?
            }
        };
        let var = Var::from_tensor(&tensor)?;
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), var));
        Ok(self.hand_out(self.entries.len() - 1))
    }

    fn hand_out(&self, i: usize) -> Tensor {
        let var = &self.entries[i].1;
        if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        }
    }

    fn sample(&mut self, init: &Init, n: usize) -> Result<Vec<f64>> {
        Ok(match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-*b..=*b)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::Binding(format!(
                        "explicit initializer has {} values, parameter needs {n}",
                        v.len()
                    )));
                }
                v.clone()
            }
        })
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Trainable variables in creation order. Empty for a frozen store.
    pub fn trainable_vars(&self) -> Vec<Var> {
        if self.frozen {
            return Vec::new();
        }
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Parameter count restricted to names starting with `prefix`.
    pub fn num_parameters_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Current values, keyed by name.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// A bit-level copy of every parameter, for exact before/after comparisons.
    pub fn snapshot(&self) -> Result<Vec<(String, Vec<u64>)>> {
        self.entries
            .iter()
            .map(|(n, v)| {
                let bits = v
                    .as_tensor()
                    .flatten_all()?
                    .to_dtype(DType::F64)?
                    .to_vec1::<f64>()?
                    .into_iter()
                    .map(f64::to_bits)
                    .collect();
                Ok((n.clone(), bits))
            })
            .collect()
    }

    /// Overwrites a parameter in place.
    pub fn set(&self, name: &str, values: &Tensor) -> Result<()> {
        let var = self
            .var(name)
            .ok_or_else(|| Error::Usage(format!("no parameter named `{name}`")))?;
        var.set(&values.to_dtype(self.dtype)?.reshape(var.dims())?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let build = |seed| {
            let mut s = ParamStore::new(seed, DType::F32);
            s.get("a", &[3, 4], Init::Normal(1.0)).unwrap();
            s.get("b", &[5], Init::fan_in(4)).unwrap();
            s.snapshot().unwrap()
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }

    #[test]
    fn frozen_store_hands_out_detached_tensors() {
        let mut s = ParamStore::new(0, DType::F32).frozen();
        let t = s.get("w", &[2], Init::Ones).unwrap();
        assert!(!t.is_variable());
        assert!(s.trainable_vars().is_empty());
        assert_eq!(s.num_parameters(), 2);
    }

    #[test]
    fn repeated_get_must_agree_on_shape() {
        let mut s = ParamStore::new(0, DType::F32);
        s.get("w", &[2, 2], Init::Zeros).unwrap();
        assert!(s.get("w", &[2, 2], Init::Zeros).is_ok());
        assert!(matches!(s.get("w", &[4], Init::Zeros), Err(Error::Binding(_))));
    }

    #[test]
    fn preloaded_store_requires_every_name() {
        let t = Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap();
        let mut s = ParamStore::from_tensors(HashMap::from([("w".to_string(), t)]), DType::F32);
        assert!(s.get("w", &[2], Init::Zeros).is_ok());
        assert!(matches!(s.get("v", &[2], Init::Zeros), Err(Error::Checkpoint(_))));
    }
}
