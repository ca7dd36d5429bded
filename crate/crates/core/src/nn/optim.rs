use std::collections::HashMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

/// Adaptive-moment descent (no weight decay).
pub struct Adam {
    vars: Vec<Var>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let first = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let second = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            vars,
            first,
            second,
            step: 0,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..self.vars.len() {
            let var = &self.vars[i];
            let Some(g) = grads.get(var) else { continue };
            // Grads can carry op history; detach so state does not pin old graphs.
            let g = g.detach();
            let m = ((&self.first[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
            let v = ((&self.second[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    pub fn state(&self) -> Result<HashMap<String, Tensor>> {
        let mut map = HashMap::new();
        for (i, (m, v)) in self.first.iter().zip(&self.second).enumerate() {
            map.insert(format!("m.{i}"), m.clone());
            map.insert(format!("v.{i}"), v.clone());
        }
        let device = self.vars.first().map(|v| v.device().clone()).unwrap_or(candle_core::Device::Cpu);
        map.insert("step".into(), Tensor::new(&[self.step as f64], &device)?);
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.state()?, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let device = self.vars.first().map(|v| v.device().clone()).unwrap_or(candle_core::Device::Cpu);
        let map = candle_core::safetensors::load(path, &device)?;
        let fetch = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks `{k}`")))
        };
        for i in 0..self.vars.len() {
            let dtype = self.vars[i].dtype();
            self.first[i] = fetch(&format!("m.{i}"))?.to_dtype(dtype)?;
            self.second[i] = fetch(&format!("v.{i}"))?.to_dtype(dtype)?;
        }
        let step: Vec<f64> = fetch("step")?.to_dtype(DType::F64)?.to_vec1()?;
        self.step = step[0] as u64;
        Ok(())
    }
}

/// Heavy-ball momentum descent: `v ← μv + g`, `θ ← θ − lr·v`.
pub struct SgdMomentum {
    vars: Vec<Var>,
    velocity: Vec<Tensor>,
    pub lr: f64,
    pub momentum: f64,
}

impl SgdMomentum {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64) -> Result<Self> {
        let velocity = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            vars,
            velocity,
            lr,
            momentum,
        })
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var) else { continue };
            let next = ((&*vel * self.momentum)? + g.detach())?.detach();
            var.set(&(var.as_tensor() - (&next * self.lr)?)?)?;
            *vel = next;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let x = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![x.clone()], 0.1, 0.9, 0.999).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v: Vec<f64> = x.as_tensor().to_vec1().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let x = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let mut opt = SgdMomentum::new(vec![x.clone()], 0.1, 0.5).unwrap();
        for _ in 0..2 {
            let loss = x.as_tensor().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        // v1 = 1, v2 = 1.5 -> 1 - 0.1 - 0.15
        let v: Vec<f64> = x.as_tensor().to_vec1().unwrap();
        assert!((v[0] - 0.75).abs() < 1e-12);
    }
}
