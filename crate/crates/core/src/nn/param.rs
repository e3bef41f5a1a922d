use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<F = f32> {
    pub name: String,
    pub value: Tensor<F>,
    pub trainable: bool,
}

/// Named parameter table shared by every module of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F = f32> {
    params: Vec<Parameter<F>>,
    index: BTreeMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Parameter { name: name.to_string(), value, trainable: true });
        Ok(ParamId(id))
    }

    /// Glorot-uniform matrix `[fan_in x fan_out]`.
    pub fn add_glorot(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let data = (0..fan_in * fan_out).map(|_| F::of(rng::uniform(rng, -limit, limit))).collect();
        self.add(name, Tensor::new(&[fan_in, fan_out], data)?)
    }

    pub fn add_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::of(std * rng::normal(rng))).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_filled(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, Tensor::filled(shape, F::of(v)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Set the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Same names and shapes in the same order.
    pub fn same_layout<G: Real>(&self, other: &ParamStore<G>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copy values of every parameter with a matching name and shape from
    /// `other`. Returns the number of parameters copied.
    pub fn load_matching(&mut self, other: &ParamStore<F>, prefix: &str) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if !p.name.starts_with(prefix) {
                continue;
            }
            if let Some(src) = other.id(&p.name).map(|id| other.get(id)) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    n += 1;
                }
            }
        }
        n
    }

    /// Replace a parameter's values, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{name}: shape {:?} vs {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}

/// Gradient accumulator aligned with a [`ParamStore`]. Frozen parameters
/// keep an empty buffer and never receive gradient.
#[derive(Clone, Debug)]
pub struct GradBuffer<F = f32> {
    grads: Vec<Vec<F>>,
}

impl<F: Real> GradBuffer<F> {
    pub fn for_store(store: &ParamStore<F>) -> Self {
        let grads = store
            .iter()
            .map(|(_, p)| if p.trainable { vec![F::zero(); p.value.numel()] } else { Vec::new() })
            .collect();
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.grads[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[F]) {
        let buf = &mut self.grads[id.0];
        if buf.is_empty() {
            return;
        }
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add_filled("a", &[2], 0.0).unwrap();
        assert!(s.add_filled("a", &[2], 0.0).is_err());
    }

    #[test]
    fn frozen_params_get_no_buffer() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add_filled("enc.a", &[3], 0.0).unwrap();
        let b = s.add_filled("conn.b", &[2], 0.0).unwrap();
        s.set_trainable("enc.", false);
        let mut g = GradBuffer::for_store(&s);
        g.accumulate(a, &[1.0, 1.0, 1.0]);
        g.accumulate(b, &[1.0, 2.0]);
        assert!(g.get(a).is_empty());
        assert_eq!(g.get(b), &[1.0, 2.0]);
        assert_eq!(s.trainable_count(), 2);
    }
}
