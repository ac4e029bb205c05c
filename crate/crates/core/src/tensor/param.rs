use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter collection of one model. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            trainable: true,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Xavier-uniform initialized `[rows × cols]` parameter.
    pub fn insert_xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) -> Result<ParamId> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng::uniform(rng, -limit, limit)).collect();
        self.insert(name, Tensor::new(vec![rows, cols], values)?)
    }

    pub fn insert_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: f64) -> Result<ParamId> {
        self.insert(name, Tensor::filled(&[rows, cols], value))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Ids whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).name.starts_with(prefix)).collect()
    }

    pub fn set_trainable(&mut self, ids: &[ParamId], trainable: bool) {
        for &id in ids {
            self.params[id.0].trainable = trainable;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// FNV-1a over names and value bit patterns; used to prove a parameter
    /// group was left untouched.
    pub fn checksum(&self, ids: &[ParamId]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for &id in ids {
            let p = self.get(id);
            p.name.bytes().for_each(&mut eat);
            for v in p.tensor.values() {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

/// Scale gradients of `ids` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = ids
        .iter()
        .filter_map(|&id| store.get(id).tensor.grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for &id in ids {
            if let Some(g) = store.get_mut(id).tensor.grad_mut() {
                g.iter_mut().for_each(|x| *x *= k);
            }
        }
    }
    norm
}

/// Plain gradient descent `p ← p − rate·grad`, then clear the gradients.
pub fn sgd_step(store: &mut ParamStore, ids: &[ParamId], rate: f64) -> Result<()> {
    if !(rate >= 0.0) {
        return Err(Error::contract("learning rate must be non-negative"));
    }
    for &id in ids {
        if store.get(id).trainable && store.get(id).tensor.grad().is_none() {
            return Err(Error::contract(format!("parameter {} has no gradient", store.get(id).name)));
        }
    }
    for &id in ids {
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let g = p.tensor.grad().map(|g| g.to_vec()).unwrap_or_default();
        p.tensor.values_mut().iter_mut().zip(&g).for_each(|(v, gi)| *v -= rate * gi);
        p.tensor.clear_grad();
    }
    Ok(())
}

/// Adam with bias correction; moments are keyed by parameter id.
#[derive(Debug, Clone)]
pub struct Adam {
    pub rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(rate: f64) -> Self {
        Self {
            rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            if store.get(id).trainable && store.get(id).tensor.grad().is_none() {
                return Err(Error::contract(format!("parameter {} has no gradient", store.get(id).name)));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for &id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let g = p.tensor.grad().map(|g| g.to_vec()).unwrap_or_default();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((x, gi), mi), vi) in p.tensor.values_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= self.rate * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
            p.tensor.clear_grad();
        }
        Ok(())
    }
}
