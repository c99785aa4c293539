use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor owned by a model.
///
/// Non-trainable entries (batch-norm running statistics) live in the same
/// store so that checkpoints capture them, but never receive gradients.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Stable 64-bit FNV-1a, used to derive per-parameter seeds from names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer; mixes several words into one seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        z ^= p;
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
    seed: u64,
    precision: Precision,
}

impl ParamStore {
    pub fn new(seed: u64, precision: Precision) -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            seed,
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, fnv1a(name.as_bytes())]))
    }

    pub fn insert(&mut self, name: &str, mut value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.precision.round_slice(value.data_mut());
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Xavier-uniform weight of the given shape.
    pub fn xavier(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = self.rng_for(name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    /// Xavier-uniform `[d_in, d_out]` matrix.
    pub fn weight(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<ParamId> {
        self.xavier(name, &[d_in, d_out], d_in, d_out)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape), true)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, 1.0), true)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let mut rng = self.rng_for(name);
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: Gradients) {
        for (i, g) in grads.per_param.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut self.params[i];
            if !p.trainable {
                continue;
            }
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => p.grad = Some(g),
            }
        }
    }

    /// Applies exponential-average updates to batch-norm running statistics.
    pub fn apply_buffer_updates(&mut self, updates: Vec<BufferUpdate>) {
        for u in updates {
            let precision = self.precision;
            let m = u.momentum;
            let buf = self.params[u.target.0].value.data_mut();
            for (r, b) in buf.iter_mut().zip(&u.batch_value) {
                *r = precision.round((1.0 - m) * *r + m * b);
            }
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) per_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.per_param.get(id.0).and_then(Option::as_ref)
    }
}

/// A pending running-statistic update recorded during a training forward.
#[derive(Clone, Debug)]
pub struct BufferUpdate {
    pub target: ParamId,
    pub batch_value: Vec<f64>,
    pub momentum: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_init() {
        let mut a = ParamStore::new(7, Precision::F64);
        let mut b = ParamStore::new(7, Precision::F64);
        let ia = a.weight("w", 5, 3).unwrap();
        let ib = b.weight("w", 5, 3).unwrap();
        assert_eq!(a.value(ia).data(), b.value(ib).data());
        let mut c = ParamStore::new(8, Precision::F64);
        let ic = c.weight("w", 5, 3).unwrap();
        assert_ne!(a.value(ia).data(), c.value(ic).data());
    }

    #[test]
    fn init_independent_of_insertion_order() {
        let mut a = ParamStore::new(1, Precision::F64);
        a.weight("x", 2, 2).unwrap();
        let ya = a.weight("y", 2, 2).unwrap();
        let mut b = ParamStore::new(1, Precision::F64);
        let yb = b.weight("y", 2, 2).unwrap();
        assert_eq!(a.value(ya).data(), b.value(yb).data());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(0, Precision::F64);
        s.zeros("b", &[3]).unwrap();
        assert!(s.zeros("b", &[3]).is_err());
    }

    #[test]
    fn xavier_bound_respected() {
        let mut s = ParamStore::new(3, Precision::F64);
        let id = s.weight("w", 10, 20).unwrap();
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(s.value(id).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn running_stat_momentum() {
        let mut s = ParamStore::new(0, Precision::F64);
        let id = s.buffer("rm", Tensor::zeros(&[1])).unwrap();
        s.apply_buffer_updates(vec![BufferUpdate {
            target: id,
            batch_value: vec![1.0],
            momentum: 0.1,
        }]);
        assert!((s.value(id).data()[0] - 0.1).abs() < 1e-15);
    }
}
