//! Connectionist Temporal Classification.
//!
//! Labels are `0..V`; the blank is index `V`, the last column of every
//! log-probability row. The loss runs the forward-backward recursions over
//! the `2|y| + 1` state lattice in log space with f64 accumulation.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::real::{log_add, log_sum_exp, Real};
use crate::tensor::{argmax, Tensor};

/// Row-normalized log-probabilities `[T x (V+1)]` plus a blank-free target.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcInstance {
    log_probs: Vec<f64>,
    frames: usize,
    classes: usize,
    target: Vec<usize>,
}

impl CtcInstance {
    pub fn new(log_probs: Vec<f64>, classes: usize, target: Vec<usize>) -> Result<Self> {
        if classes < 2 || log_probs.len() % classes != 0 {
            return Err(Error::Dimension {
                op: "ctc",
                detail: alloc::format!("{} values for {} classes", log_probs.len(), classes),
            });
        }
        let frames = log_probs.len() / classes;
        for row in log_probs.chunks(classes) {
            let z = log_sum_exp(row);
            if !z.is_finite() || z.abs() > 1e-5 {
                return Err(Error::Precondition(alloc::format!("ctc row not normalized (logsumexp {z})")));
            }
        }
        let blank = classes - 1;
        if let Some(&bad) = target.iter().find(|&&t| t >= blank) {
            return Err(Error::Index { what: "ctc target label", index: bad, size: blank });
        }
        Ok(Self { log_probs, frames, classes, target })
    }

    /// Build from unnormalized logits by applying a log-softmax per row.
    pub fn from_logits(logits: &[f64], classes: usize, target: Vec<usize>) -> Result<Self> {
        let lp = log_softmax_rows(logits, classes);
        Self::new(lp, classes, target)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn blank(&self) -> usize {
        self.classes - 1
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn target(&self) -> &[usize] {
        &self.target
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    #[inline]
    fn lp(&self, t: usize, k: usize) -> f64 {
        self.log_probs[t * self.classes + k]
    }
}

pub fn log_softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let z = log_sum_exp(row);
        out.extend(row.iter().map(|&x| x - z));
    }
    out
}

/// Minimum number of frames needed to emit `target`: one per label plus a
/// separating blank between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood and its gradient w.r.t. the log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcLoss {
    pub nll: f64,
    pub grad_log_probs: Vec<f64>,
}

pub fn ctc_loss(inst: &CtcInstance) -> Result<CtcLoss> {
    let t_len = inst.frames;
    let need = min_frames(&inst.target);
    if need > t_len {
        return Err(Error::InfeasibleAlignment { target_len: inst.target.len(), frames: t_len });
    }
    let blank = inst.blank();
    let s_len = 2 * inst.target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { blank } else { inst.target[s / 2] };
    // transition s-2 -> s allowed for non-blank states whose label differs
    let skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = inst.lp(0, blank);
    if s_len > 1 {
        alpha[1] = inst.lp(0, label(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if skip(s) {
                a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + inst.lp(t, label(s)) };
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p == ninf {
        return Err(Error::InfeasibleAlignment { target_len: inst.target.len(), frames: t_len });
    }
    if !log_p.is_finite() {
        return Err(Error::NonFinite("ctc forward"));
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = inst.lp(t_len - 1, label(s_len - 1));
    if s_len > 1 {
        beta[last + s_len - 2] = inst.lp(t_len - 1, label(s_len - 2));
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = log_add(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_add(b, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + inst.lp(t, label(s)) };
        }
    }

    // d(-log p)/d lp[t,k] = -sum_{s: label(s)=k} alpha*beta / y[t,k] / p
    let classes = inst.classes;
    let mut grad = vec![0.0f64; t_len * classes];
    let mut occ = vec![ninf; classes];
    for t in 0..t_len {
        occ.iter_mut().for_each(|o| *o = ninf);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > ninf {
                let k = label(s);
                occ[k] = log_add(occ[k], ab);
            }
        }
        for k in 0..classes {
            if occ[k] > ninf {
                grad[t * classes + k] = -libm::exp(occ[k] - inst.lp(t, k) - log_p);
            }
        }
    }
    Ok(CtcLoss { nll: -log_p, grad_log_probs: grad })
}

/// CTC loss on raw logits, with the gradient pushed through the row-wise
/// log-softmax.
pub fn ctc_loss_from_logits(logits: &[f64], classes: usize, target: &[usize]) -> Result<CtcLoss> {
    let inst = CtcInstance::from_logits(logits, classes, target.to_vec())?;
    let CtcLoss { nll, grad_log_probs } = ctc_loss(&inst)?;
    let mut grad = vec![0.0; logits.len()];
    for (t, (g_row, lp_row)) in grad_log_probs.chunks(classes).zip(inst.log_probs.chunks(classes)).enumerate() {
        let total: f64 = g_row.iter().sum();
        for k in 0..classes {
            grad[t * classes + k] = g_row[k] - libm::exp(lp_row[k]) * total;
        }
    }
    Ok(CtcLoss { nll, grad_log_probs: grad })
}

/// Graph node computing the CTC loss of `logits [T x (V+1)]`.
pub fn ctc_loss_node<F: Real>(g: &mut Graph<'_, F>, logits: NodeId, target: &[usize]) -> Result<NodeId> {
    let classes = g.cols(logits);
    let vals: Vec<f64> = g.value(logits).data().iter().map(|v| v.as_f64()).collect();
    let loss = ctc_loss_from_logits(&vals, classes, target)?;
    let grad = loss.grad_log_probs.iter().map(|&v| F::of(v)).collect();
    g.precomputed_loss(logits, F::of(loss.nll), grad)
}

/// Per-frame argmax, collapse repeats, drop blanks.
pub fn ctc_greedy_decode<F: Real>(scores: &Tensor<F>) -> Vec<usize> {
    let blank = scores.cols() - 1;
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..scores.rows() {
        let k = argmax(scores.row(t));
        if k != prev && k != blank {
            out.push(k);
        }
        prev = k;
    }
    out
}

/// Collapse an alignment path: merge repeats, then remove blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &k in path {
        if k != prev && k != blank {
            out.push(k);
        }
        prev = k;
    }
    out
}

/// Upper bound on the number of paths the brute-force oracle will visit.
pub const ORACLE_MAX_PATHS: u128 = 1_000_000;

/// Exact NLL by enumerating all `(V+1)^T` alignment paths.
pub fn ctc_bruteforce_oracle(inst: &CtcInstance) -> Result<f64> {
    let (t_len, classes) = (inst.frames, inst.classes);
    let total = (classes as u128).checked_pow(t_len as u32).unwrap_or(u128::MAX);
    if total > ORACLE_MAX_PATHS {
        return Err(Error::OracleTooLarge(total));
    }
    let blank = inst.blank();
    let mut path = vec![0usize; t_len];
    let mut terms = Vec::new();
    for mut code in 0..total as u64 {
        for p in path.iter_mut() {
            *p = (code % classes as u64) as usize;
            code /= classes as u64;
        }
        if collapse(&path, blank) == inst.target {
            terms.push(path.iter().enumerate().map(|(t, &k)| inst.lp(t, k)).sum::<f64>());
        }
    }
    if terms.is_empty() {
        return Err(Error::InfeasibleAlignment { target_len: inst.target.len(), frames: t_len });
    }
    Ok(-log_sum_exp(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn uniform_inst(t: usize, classes: usize, target: Vec<usize>) -> CtcInstance {
        let lp = vec![-libm::log(classes as f64); t * classes];
        CtcInstance::new(lp, classes, target).unwrap()
    }

    #[test]
    fn single_frame_single_path() {
        let lp = vec![libm::log(0.7), libm::log(0.3)];
        let inst = CtcInstance::new(lp, 2, vec![0]).unwrap();
        let l = ctc_loss(&inst).unwrap();
        assert!((l.nll + libm::log(0.7)).abs() < 1e-12);
    }

    #[test]
    fn two_frames_uniform_three_classes_is_log3() {
        // paths (a,a), (a,-), (-,a) out of 9
        let inst = uniform_inst(2, 3, vec![0]);
        let l = ctc_loss(&inst).unwrap();
        assert!((l.nll - libm::log(3.0)).abs() < 1e-12);
        assert!((ctc_bruteforce_oracle(&inst).unwrap() - libm::log(3.0)).abs() < 1e-12);
    }

    #[test]
    fn infeasible_targets_rejected() {
        let inst = uniform_inst(2, 3, vec![0, 0]);
        assert!(matches!(ctc_loss(&inst), Err(Error::InfeasibleAlignment { .. })));
        assert!(matches!(ctc_bruteforce_oracle(&inst), Err(Error::InfeasibleAlignment { .. })));
        let inst = uniform_inst(3, 3, vec![0, 0]);
        assert!(ctc_loss(&inst).is_ok());
    }

    #[test]
    fn unnormalized_rows_rejected() {
        assert!(matches!(CtcInstance::new(vec![0.0, 0.0], 2, vec![0]), Err(Error::Precondition(_))));
    }

    #[test]
    fn oracle_size_guard() {
        let inst = uniform_inst(12, 4, vec![0]);
        assert!(matches!(ctc_bruteforce_oracle(&inst), Err(Error::OracleTooLarge(_))));
    }

    #[test]
    fn greedy_decode_rules() {
        // classes a=0, b=1, blank=2
        let onehot = |ks: &[usize]| {
            let mut d = vec![0.0f32; ks.len() * 3];
            for (t, &k) in ks.iter().enumerate() {
                d[t * 3 + k] = 1.0;
            }
            Tensor::new(&[ks.len(), 3], d).unwrap()
        };
        assert_eq!(ctc_greedy_decode(&onehot(&[0, 0, 2, 1])), vec![0, 1]);
        assert_eq!(ctc_greedy_decode(&onehot(&[2, 2, 2])), Vec::<usize>::new());
        assert_eq!(ctc_greedy_decode(&onehot(&[0, 2, 0])), vec![0, 0]);
    }

    #[test]
    fn certain_path_has_zero_loss() {
        // frame 0 certainly 'a', frame 1 certainly blank
        let ninf = -1e300;
        let lp = vec![0.0, ninf, ninf, ninf, ninf, 0.0];
        let inst = CtcInstance::new(lp, 3, vec![0]).unwrap();
        assert!(ctc_loss(&inst).unwrap().nll.abs() < 1e-12);
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut r = rng::rng(7);
        for _ in 0..50 {
            let t = r.gen_range(1..=6);
            let classes = r.gen_range(2..=4);
            let len = r.gen_range(0..=t.min(3));
            let target: Vec<usize> = (0..len).map(|_| r.gen_range(0..classes - 1)).collect();
            let logits: Vec<f64> = (0..t * classes).map(|_| 2.0 * rng::normal(&mut r)).collect();
            let inst = CtcInstance::from_logits(&logits, classes, target).unwrap();
            match (ctc_loss(&inst), ctc_bruteforce_oracle(&inst)) {
                (Ok(l), Ok(o)) => assert!((l.nll - o).abs() < 1e-9, "{} vs {}", l.nll, o),
                (Err(Error::InfeasibleAlignment { .. }), Err(Error::InfeasibleAlignment { .. })) => {}
                other => panic!("disagreement: {other:?}"),
            }
        }
    }
}
