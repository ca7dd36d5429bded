use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Named trainable variables with deterministic, seeded initialization.
///
/// Candle's CPU generator can't be seeded, so every initial value is drawn
/// here and uploaded with `Tensor::from_vec`.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    order: Vec<String>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            order: Vec::new(),
            dtype,
            device,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: Shape) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidInput(format!("parameter `{name}` registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        self.order.push(name.to_string());
        Ok(handle)
    }

    pub fn normal(&mut self, name: &str, shape: impl Into<Shape>, std: f64) -> Result<Tensor> {
        let shape = shape.into();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let values = (0..shape.elem_count()).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn uniform(&mut self, name: &str, shape: impl Into<Shape>, bound: f64) -> Result<Tensor> {
        let shape = shape.into();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let values = (0..shape.elem_count()).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Tensor> {
        let shape = shape.into();
        let values = vec![value; shape.elem_count()];
        self.insert(name, values, shape)
    }

    /// Registers a variable with explicit values (used by hand-built toy networks).
    pub fn explicit(&mut self, name: &str, shape: impl Into<Shape>, values: Vec<f64>) -> Result<Tensor> {
        let shape = shape.into();
        if values.len() != shape.elem_count() {
            return Err(Error::Shape(format!("`{name}`: {} values for shape {shape:?}", values.len())));
        }
        self.insert(name, values, shape)
    }

    /// Variables in registration order.
    pub fn vars(&self) -> Vec<Var> {
        self.order.iter().map(|n| self.vars[n].clone()).collect()
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn to_tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.to_tensors(), path)?;
        Ok(())
    }

    /// Overwrites every registered variable from a safetensors file.
    pub fn load(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        self.load_tensors(&loaded)
    }

    pub fn load_tensors(&self, loaded: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = loaded
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}
