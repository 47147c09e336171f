use indexmap::IndexMap;
use mft_autograd::{Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::MftConfig;
use crate::error::{MftError, Result};
use crate::rng::stream;

const CLS_INIT_STD: f64 = 0.02;

/// Named learnable tensors of one model, in ledger order.
#[derive(Clone, Debug, PartialEq)]
pub struct MftParameters<T: Real> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> MftParameters<T> {
    /// Weights ~ U(±1/√fan_in), cls tokens ~ N(0, 0.02²), biases 0, norm gains 1.
    pub fn init(config: &MftConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[0x1A17]);
        let cls = Normal::new(0.0, CLS_INIT_STD).expect("valid std");
        let mut tensors = IndexMap::new();
        for (name, shape) in config.param_shapes() {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".cls") {
                (0..numel).map(|_| cls.sample(&mut rng)).collect()
            } else if name.ends_with(".gain") {
                vec![1.0; numel]
            } else if name.ends_with(".bias") {
                vec![0.0; numel]
            } else {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
            };
            let data = data.into_iter().map(T::of).collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(MftParameters { tensors })
    }

    pub fn from_tensors(tensors: IndexMap<String, Tensor<T>>) -> Self {
        MftParameters { tensors }
    }

    /// Fails unless names, order and shapes agree with the config's ledger.
    pub fn check_against(&self, config: &MftConfig) -> Result<()> {
        let expected = config.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(MftError::Config(format!(
                "config expects {} tensors, parameters hold {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (have, t)) in expected.iter().zip(&self.tensors) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(MftError::Config(format!(
                    "expected {name} {shape:?}, found {have} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> MftParameters<U> {
        MftParameters {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}
