use std::collections::HashMap;

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// History of previously generated images fed to the discriminators.
///
/// Until full, every query is stored and returned as is. Afterwards each
/// sample is, with probability ½, swapped for a random stored one (which the
/// new sample replaces).
pub struct HistoryBuffer {
    capacity: usize,
    items: Vec<Tensor>,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `batch` has shape `(B, C, H, W)`; the result has the same shape.
    pub fn query(&mut self, batch: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if self.capacity == 0 {
            return Ok(batch.clone());
        }
        let b = batch.dims4()?.0;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let sample = batch.narrow(0, i, 1)?.detach();
            if self.items.len() < self.capacity {
                self.items.push(sample.clone());
                out.push(sample);
            } else if rng.random_bool(0.5) {
                let j = rng.random_range(0..self.items.len());
                out.push(std::mem::replace(&mut self.items[j], sample));
            } else {
                out.push(sample);
            }
        }
        Ok(Tensor::cat(&out, 0)?)
    }

    pub fn state(&self) -> HashMap<String, Tensor> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("item.{i:05}"), t.clone()))
            .collect()
    }

    pub fn restore(&mut self, mut state: HashMap<String, Tensor>, device: &Device) -> Result<()> {
        let mut keys: Vec<String> = state.keys().cloned().collect();
        keys.sort();
        if keys.len() > self.capacity {
            return Err(Error::Checkpoint("history buffer larger than its capacity".into()));
        }
        self.items = keys
            .iter()
            .map(|k| Ok(state.remove(k).expect("key listed").to_device(device)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }
}
