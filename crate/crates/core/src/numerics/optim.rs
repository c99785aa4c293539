use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    /// Indexed by parameter id; `None` for non-trainable entries.
    pub first_moment: Vec<Option<Tensor>>,
    pub second_moment: Vec<Option<Tensor>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let moments = || {
            params
                .iter()
                .map(|(_, p)| p.trainable.then(|| Tensor::zeros(p.value.shape())))
                .collect::<Vec<_>>()
        };
        OptimizerState {
            config,
            step: 0,
            first_moment: moments(),
            second_moment: moments(),
        }
    }

    /// One update over every trainable parameter. Missing gradients count as
    /// zero, so weight decay still applies.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let precision = params.precision();
        let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            let (Some(m), Some(v)) = (&mut self.first_moment[i], &mut self.second_moment[i]) else {
                continue;
            };
            let p = params.get_mut(id);
            let grad = p.grad.as_ref().map(|g| g.data().to_vec());
            let w = p.value.data_mut();
            for k in 0..w.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[k]);
                let mk = &mut m.data_mut()[k];
                *mk = c.beta1 * *mk + (1.0 - c.beta1) * g;
                let mhat = *mk / bc1;
                let vk = &mut v.data_mut()[k];
                *vk = c.beta2 * *vk + (1.0 - c.beta2) * g * g;
                let vhat = *vk / bc2;
                let decayed = w[k] * (1.0 - c.lr * c.weight_decay);
                w[k] = precision.round(decayed - c.lr * mhat / (vhat.sqrt() + c.eps));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Precision;

    fn store_with(value: Vec<f64>, grad: Option<Vec<f64>>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new(0, Precision::F64);
        let n = value.len();
        let id = s.insert("w", Tensor::new(vec![n], value).unwrap(), true).unwrap();
        s.get_mut(id).grad = grad.map(|g| Tensor::new(vec![n], g).unwrap());
        (s, id)
    }

    #[test]
    fn clip_examples() {
        let (mut s, id) = store_with(vec![0.0, 0.0], Some(vec![6.0, 8.0]));
        assert_eq!(clip_global_norm(&mut s, 5.0), 10.0);
        assert_eq!(s.get(id).grad.as_ref().unwrap().data(), &[3.0, 4.0]);

        let (mut s, id) = store_with(vec![0.0], Some(vec![3.0]));
        assert_eq!(clip_global_norm(&mut s, 5.0), 3.0);
        assert_eq!(s.get(id).grad.as_ref().unwrap().data(), &[3.0]);

        let (mut s, id) = store_with(vec![0.0, 0.0], Some(vec![0.0, 0.0]));
        assert_eq!(clip_global_norm(&mut s, 5.0), 0.0);
        assert_eq!(s.get(id).grad.as_ref().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let (mut s, id) = store_with(vec![1.5, -2.0], Some(vec![0.0, 0.0]));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(cfg, &s);
        opt.step(&mut s);
        assert_eq!(s.value(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn adamw_first_step_magnitude_is_lr() {
        let (mut s, id) = store_with(vec![1.0, 1.0], Some(vec![0.3, -7.0]));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(cfg, &s);
        opt.step(&mut s);
        let w = s.value(id).data();
        let d0 = w[0] - 1.0;
        let d1 = w[1] - 1.0;
        assert!(d0 < 0.0 && d1 > 0.0);
        assert!(d0.abs() <= cfg.lr * (1.0 + 1e-6) && d0.abs() > 0.99 * cfg.lr);
        assert!(d1.abs() <= cfg.lr * (1.0 + 1e-6));
    }

    #[test]
    fn adamw_decoupled_decay() {
        let (mut s, id) = store_with(vec![2.0], Some(vec![0.0]));
        let cfg = AdamWConfig {
            lr: 1e-5,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(cfg, &s);
        opt.step(&mut s);
        assert!((s.value(id).data()[0] - 2.0 * (1.0 - 1e-7)).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }
}
