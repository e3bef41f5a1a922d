//! Finite-difference verification of analytic gradients.
//!
//! The objective is evaluated in f64 so that central differences are not
//! swamped by single-precision rounding; the backward formulas under test
//! are the same generic code the f32 training path runs.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::param::{GradBuffer, ParamStore};
use crate::real::Real;
use crate::rng;

/// A deterministic scalar-valued computation over a parameter store.
pub trait Objective {
    fn eval<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<NodeId>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    pub abs_floor: f64,
    /// Elements probed per parameter; larger tensors are subsampled.
    pub max_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, tol: 1e-4, abs_floor: 1e-6, max_per_param: 24, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst_abs(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

/// Relative error with an absolute floor: differences below `abs_floor`
/// count as exact.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

fn eval_loss<O: Objective>(obj: &O, store: &ParamStore<f64>) -> Result<f64> {
    let mut g = Graph::new(store);
    let l = obj.eval(&mut g)?;
    let v = g.scalar(l);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective"));
    }
    Ok(v)
}

/// Compare analytic and central-difference gradients for every trainable
/// parameter of `store`.
pub fn grad_check<F: Real, O: Objective>(
    obj: &O,
    store: &ParamStore<F>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.step > 0.0) {
        return Err(Error::Precondition("finite-difference step must be positive".into()));
    }
    let mut work: ParamStore<f64> = store.cast();
    let mut buf = GradBuffer::for_store(&work);
    {
        let mut g = Graph::new(&work);
        let l = obj.eval(&mut g)?;
        if !g.scalar(l).is_finite() {
            return Err(Error::NonFinite("grad_check objective"));
        }
        g.backward(l, &mut buf)?;
    }
    let mut rng = rng::rng(opts.seed);
    let ids: Vec<_> = work.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut params = Vec::new();
    for id in ids {
        let n = work.value(id).numel();
        let idx: Vec<usize> = if n <= opts.max_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_per_param).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst = 0.0f64;
        let mut worst_abs = 0.0f64;
        for &i in &idx {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + opts.step;
            let up = eval_loss(obj, &work)?;
            work.value_mut(id).data_mut()[i] = orig - opts.step;
            let down = eval_loss(obj, &work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let analytic = buf.get(id)[i];
            worst = worst.max(relative_error(analytic, numeric, opts.abs_floor));
            worst_abs = worst_abs.max((analytic - numeric).abs());
        }
        params.push(ParamCheck {
            name: work.get(id).name.clone(),
            checked: idx.len(),
            max_rel_err: worst,
            max_abs_err: worst_abs,
            passed: worst <= opts.tol,
        });
    }
    Ok(GradCheckReport { params, tol: opts.tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::ParamId;
    use crate::tensor::Tensor;
    use alloc::vec;

    struct SigmoidSum(ParamId);

    impl Objective for SigmoidSum {
        fn eval<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<NodeId> {
            let w = g.param(self.0);
            let s = g.sigmoid(w);
            g.sum(s)
        }
    }

    #[test]
    fn sigmoid_at_zero_has_quarter_slope() {
        let mut s = ParamStore::<f32>::new();
        let w = s.add_filled("w", &[1], 0.0).unwrap();
        let obj = SigmoidSum(w);
        let mut buf = GradBuffer::for_store(&s);
        let mut g = Graph::new(&s);
        let l = obj.eval(&mut g).unwrap();
        g.backward(l, &mut buf).unwrap();
        assert_eq!(buf.get(w), &[0.25]);
        let rep = grad_check(&obj, &s, &GradCheckOptions::default()).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    /// Value of sum(w^2) paired with a deliberately wrong gradient (w instead of 2w).
    struct WrongBackward(ParamId);

    impl Objective for WrongBackward {
        fn eval<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<NodeId> {
            let w = g.param(self.0);
            let vals = g.value(w).data().to_vec();
            let v: F = vals.iter().map(|&x| x * x).sum();
            g.precomputed_loss(w, v, vals)
        }
    }

    #[test]
    fn wrong_backward_is_named_in_report() {
        let mut s = ParamStore::<f32>::new();
        let w = s.add("bad.weight", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let rep = grad_check(&WrongBackward(w), &s, &GradCheckOptions::default()).unwrap();
        assert!(!rep.passed());
        let names: Vec<_> = rep.failures().map(|p| p.name.as_str()).collect();
        assert_eq!(names, vec!["bad.weight"]);
    }

    struct LogOf(ParamId);

    impl Objective for LogOf {
        fn eval<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<NodeId> {
            let w = g.param(self.0);
            let v = g.value(w).data()[0].ln();
            g.precomputed_loss(w, v, vec![F::one()])
        }
    }

    #[test]
    fn non_finite_objective_aborts() {
        let mut s = ParamStore::<f32>::new();
        let w = s.add_filled("w", &[1], -1.0).unwrap();
        let r = grad_check(&LogOf(w), &s, &GradCheckOptions::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
