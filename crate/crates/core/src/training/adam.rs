use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{GradBuffer, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9, clip_norm: 0.0 }
    }
}

/// Adam with bias correction. Frozen parameters are never touched.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m: Vec<Vec<f32>> =
            store.iter().map(|(_, p)| if p.trainable { vec![0.0; p.value.numel()] } else { Vec::new() }).collect();
        let v = m.clone();
        Self { cfg, m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// First and second moments per parameter (empty for frozen ones).
    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    /// Rebuild from saved moments and step count.
    pub fn from_state(cfg: AdamConfig, t: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::IncompatibleCheckpoint("optimizer moments disagree in shape".into()));
        }
        Ok(Self { cfg, m, v, t })
    }

    /// Apply one update; returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) -> Result<f64> {
        if self.m.len() != store.len() {
            return Err(Error::Precondition("optimizer built for a different parameter store".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let norm = libm::sqrt(grads.iter().flat_map(|(_, g)| g.iter()).map(|&x| (x as f64) * (x as f64)).sum::<f64>());
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - libm::pow(b1, self.t as f64);
        let c2 = 1.0 - libm::pow(b2, self.t as f64);
        let step = (lr / c1) as f32;
        let inv_c2 = (1.0 / c2) as f32;
        let (b1, b2, eps, clip) = (b1 as f32, b2 as f32, self.cfg.eps as f32, clip as f32);
        for ((id, g), (m, v)) in grads.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if g.is_empty() || !store.is_trainable(id) {
                continue;
            }
            let w = store.value_mut(id).data_mut();
            for i in 0..g.len() {
                let gi = g[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                w[i] -= step * m[i] / (libm::sqrtf(v[i] * inv_c2) + eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn minimizes_quadratic_and_skips_frozen() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::new(&[2], alloc::vec![3.0, -2.0]).unwrap()).unwrap();
        let b = s.add_filled("b", &[1], 1.0).unwrap();
        s.set_trainable("b", false);
        let mut opt = Adam::new(&s, AdamConfig::default());
        for _ in 0..500 {
            let mut buf = GradBuffer::for_store(&s);
            {
                let mut g = Graph::new(&s);
                let an = g.param(a);
                let sq = g.mul(an, an).unwrap();
                let bn = g.param(b);
                let bs = g.sum(bn).unwrap();
                let l = g.sum(sq).unwrap();
                let l = g.lin(&[(l, 1.0), (bs, 1.0)]).unwrap();
                g.backward(l, &mut buf).unwrap();
            }
            opt.step(&mut s, &buf, 0.05).unwrap();
        }
        assert!(s.value(a).data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(s.value(b).data(), &[1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step has magnitude lr regardless of gradient scale
        let mut s = ParamStore::new();
        let a = s.add_filled("a", &[1], 0.0).unwrap();
        let mut opt = Adam::new(&s, AdamConfig::default());
        let mut buf = GradBuffer::for_store(&s);
        buf.get_mut(a)[0] = 123.0;
        opt.step(&mut s, &buf, 0.01).unwrap();
        assert!((s.value(a).data()[0] + 0.01).abs() < 1e-6);
    }
}
