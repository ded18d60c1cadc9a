use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
}

/// Named trainable parameters, created in a deterministic order from a seeded
/// generator.
pub struct ParamStore {
    dtype: DType,
    rng: ChaCha8Rng,
    vars: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            vars: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn create(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Tensor> {
        let name = name.into();
        if self.vars.iter().any(|(n, _)| *n == name) {
            return Err(Error::invalid("ParamStore::create", format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::invalid("ParamStore::create", e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.push((name, var));
        Ok(handle)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Stores every parameter as `f32` under its name.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().to_dtype(DType::F32)?)))
            .collect::<Result<_>>()?;
        candle_core::safetensors::save(&map, path.as_ref())?;
        Ok(())
    }

    /// Overwrites parameters with the tensors stored under `path`. Every parameter
    /// must be present with a matching shape.
    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        self.load_map(&map).map_err(|e| match e {
            Error::InvalidArgument { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn load_map(&self, map: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = map
                .get(name)
                .ok_or_else(|| Error::invalid("ParamStore::load", format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::shape("ParamStore::load", t.dims(), var.dims()));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Parameter values flattened in creation order, for equality checks.
    pub fn snapshot(&self) -> Result<Vec<Vec<f64>>> {
        self.vars
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let build = |seed| {
            let mut s = ParamStore::new(seed, DType::F32);
            s.create("a", &[3, 4], Init::Normal(1.0)).unwrap();
            s.create("b", &[2], Init::Zeros).unwrap();
            s.snapshot().unwrap()
        };
        assert_eq!(build(5), build(5));
        assert_ne!(build(5), build(6));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        let mut a = ParamStore::new(1, DType::F32);
        a.create("w", &[2, 3], Init::Normal(0.5)).unwrap();
        a.save(&path).unwrap();
        let mut b = ParamStore::new(2, DType::F32);
        let handle = b.create("w", &[2, 3], Init::Zeros).unwrap();
        b.load(&path).unwrap();
        assert_eq!(a.snapshot().unwrap(), b.snapshot().unwrap());
        // layer handles see loaded values
        assert_eq!(
            handle.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            a.vars()[0].flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let mut c = ParamStore::new(2, DType::F32);
        c.create("w", &[3, 3], Init::Zeros).unwrap();
        assert!(c.load(&path).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new(0, DType::F64);
        s.create("x", &[1], Init::Ones).unwrap();
        assert!(s.create("x", &[1], Init::Ones).is_err());
    }
}
