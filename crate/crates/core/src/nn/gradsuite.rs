//! Finite-difference checks for every differentiable building block, each
//! on several shapes. Shared by the `grad-check` command and the tests.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::ctc::ctc_loss_node;
use crate::error::Result;
use crate::nn::gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Objective};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::{downsample_conv, Conv1d, Dense, LayerNorm, TransformerBlock, TransformerEncoderConfig};
use crate::nn::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng;

/// Operation families covered by the suite.
pub const FAMILIES: [&str; 9] =
    ["dense", "layer_norm", "attention_block", "conv", "ctc", "cross_entropy", "gate", "fusion", "lid"];

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub family: &'static str,
    pub shape: String,
    pub report: GradCheckReport,
}

/// Fixed pseudo-random linear readout so vector outputs reduce to a scalar
/// with non-uniform upstream gradients.
fn readout<F: Real>(g: &mut Graph<'_, F>, y: NodeId, seed: u64) -> Result<NodeId> {
    let n = g.value(y).numel();
    let mut r = rng::rng(seed);
    let w = (0..n).map(|_| F::of(rng::normal(&mut r))).collect();
    g.dot_const(y, w)
}

fn input(store: &mut ParamStore<f32>, name: &str, rows: usize, cols: usize, seed: u64) -> Result<ParamId> {
    let mut r = rng::rng(seed);
    store.add_normal(name, &[rows, cols], 1.0, &mut r)
}

struct DenseCase {
    x: ParamId,
    layer: Dense,
}

impl Objective for DenseCase {
    fn eval<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<NodeId> {
        let x = g.param(self.x);
        let y = self.layer.forward(g, x)?;
        readout(g, y, 1)
    }
}

struct LayerNormCase {
    x: ParamId,
    ln: LayerNorm,
}

impl Objective for LayerNormCase {
    fn eval<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<NodeId> {
        let x = g.param(self.x);
        let y = self.ln.forward(g, x)?;
        readout(g, y, 2)
    }
}

struct BlockCase {
    x: ParamId,
    block: TransformerBlock,
}

impl Objective for BlockCase {
    fn eval<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<NodeId> {
        let x = g.param(self.x);
        let y = self.block.forward(g, x)?;
        readout(g, y, 3)
    }
}

struct ConvCase {
    x: ParamId,
    conv: Conv1d,
}

impl Objective for ConvCase {
    fn eval<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<NodeId> {
        let x = g.param(self.x);
        let y = self.conv.forward(g, x)?;
        let y = g.gelu(y);
        readout(g, y, 4)
    }
}

struct CtcCase {
    x: ParamId,
    head: Dense,
    target: Vec<usize>,
}

impl Objective for CtcCase {
    fn eval<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<NodeId> {
        let x = g.param(self.x);
        let logits = self.head.forward(g, x)?;
        ctc_loss_node(g, logits, &self.target)
    }
}

struct CeCase {
    x: ParamId,
    head: Dense,
    targets: Vec<usize>,
}

impl Objective for CeCase {
    fn eval<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<NodeId> {
        let x = g.param(self.x);
        let logits = self.head.forward(g, x)?;
        g.cross_entropy(logits, &self.targets)
    }
}

/// Gate table lookup, sigmoid, convex mix of two streams.
struct GateCase {
    table: ParamId,
    language: usize,
    hw: ParamId,
    hm: ParamId,
}

impl Objective for GateCase {
    fn eval<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<NodeId> {
        let t = g.param(self.table);
        let w = g.gather(t, &[self.language])?;
        let w = g.sigmoid(w);
        let hw = g.param(self.hw);
        let hm = g.param(self.hm);
        let h = g.mix(hw, hm, w)?;
        readout(g, h, 5)
    }
}

/// Blank-frame placement of the shorter stream, gated mix, downsampling.
struct FusionCase {
    table: ParamId,
    hw: ParamId,
    hm: ParamId,
    positions: Vec<usize>,
    conv: Conv1d,
}

impl Objective for FusionCase {
    fn eval<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<NodeId> {
        let t = g.param(self.table);
        let w = g.gather(t, &[0])?;
        let w = g.sigmoid(w);
        let hw = g.param(self.hw);
        let hm = g.param(self.hm);
        let total = g.rows(hw);
        let hm = g.place_rows(hm, &self.positions, total)?;
        let h = g.mix(hw, hm, w)?;
        let e = self.conv.forward(g, h)?;
        readout(g, e, 6)
    }
}

/// Mean-pool both streams, sum, classify.
struct LidCase {
    hw: ParamId,
    hm: ParamId,
    head: Dense,
    language: usize,
}

impl Objective for LidCase {
    fn eval<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<NodeId> {
        let hw = g.param(self.hw);
        let hm = g.param(self.hm);
        let pw = g.mean_rows(hw)?;
        let pm = g.mean_rows(hm)?;
        let p = g.add(pw, pm)?;
        let logits = self.head.forward(g, p)?;
        g.cross_entropy(logits, &[self.language])
    }
}

fn check<O: Objective>(
    out: &mut Vec<SuiteResult>,
    family: &'static str,
    shape: String,
    obj: &O,
    store: &ParamStore<f32>,
    opts: &GradCheckOptions,
) -> Result<()> {
    let report = grad_check(obj, store, opts)?;
    out.push(SuiteResult { family, shape, report });
    Ok(())
}

/// Run every family on three or more shapes.
pub fn run_suite(opts: &GradCheckOptions) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    let mut r = rng::rng(opts.seed ^ 0x9e37);

    for (t, d_in, d_out) in [(1, 2, 3), (3, 4, 2), (5, 7, 6)] {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", t, d_in, 10)?;
        let layer = Dense::new(&mut s, "dense", d_in, d_out, &mut r)?;
        check(&mut out, "dense", format!("{t}x{d_in}->{d_out}"), &DenseCase { x, layer }, &s, opts)?;
    }
    for (t, d) in [(1, 4), (3, 5), (6, 16)] {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", t, d, 11)?;
        let ln = LayerNorm::new(&mut s, "ln", d)?;
        // move gain and bias off their identity initialization
        for p in s.iter_mut() {
            if p.name.starts_with("ln.") {
                for v in p.value.data_mut() {
                    *v += 0.3 * rng::normal(&mut r) as f32;
                }
            }
        }
        check(&mut out, "layer_norm", format!("{t}x{d}"), &LayerNormCase { x, ln }, &s, opts)?;
    }
    for (t, d, heads, causal) in [(1, 8, 2, false), (4, 8, 2, false), (5, 12, 3, false), (6, 8, 4, true)] {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", t, d, 12)?;
        let cfg = TransformerEncoderConfig { layers: 1, model_dim: d, heads, ff_dim: 2 * d, dropout: 0.0 };
        let block = TransformerBlock::new(&mut s, "block", &cfg, causal, &mut r)?;
        let tag = if causal { " causal" } else { "" };
        check(&mut out, "attention_block", format!("{t}x{d} h{heads}{tag}"), &BlockCase { x, block }, &s, opts)?;
    }
    for (t, c_in, c_out, kernel, stride, pad) in [(6, 4, 3, 3, 2, 1), (11, 3, 2, 3, 2, 1), (9, 2, 3, 5, 2, 2), (20, 1, 4, 5, 5, 0)]
    {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", t, c_in, 13)?;
        let conv = if stride == 2 {
            downsample_conv(&mut s, "conv", c_in, c_out, kernel, &mut r)?
        } else {
            Conv1d::new(&mut s, "conv", c_in, c_out, kernel, stride, pad, &mut r)?
        };
        let shape = format!("{t}x{c_in} k{kernel} s{stride}");
        check(&mut out, "conv", shape, &ConvCase { x, conv }, &s, opts)?;
    }
    for (t, d, v, target) in [(4, 3, 2, vec![0, 1]), (6, 4, 3, vec![0, 1, 0]), (8, 5, 4, vec![2, 2, 1])] {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", t, d, 14)?;
        let head = Dense::new(&mut s, "ctc_head", d, v + 1, &mut r)?;
        let shape = format!("T{t} V{v} |y|{}", target.len());
        check(&mut out, "ctc", shape, &CtcCase { x, head, target }, &s, opts)?;
    }
    for (t, d, v) in [(1, 3, 2), (3, 4, 5), (7, 6, 11)] {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", t, d, 15)?;
        let head = Dense::new(&mut s, "ce_head", d, v, &mut r)?;
        let targets = (0..t).map(|i| (i * 7 + 1) % v).collect();
        check(&mut out, "cross_entropy", format!("{t}x{d} V{v}"), &CeCase { x, head, targets }, &s, opts)?;
    }
    for (langs, t, d, language) in [(2, 3, 4, 1), (4, 5, 2, 2), (8, 1, 6, 7)] {
        let mut s = ParamStore::new();
        let table = s.add_normal("gate", &[langs, 1], 1.0, &mut r)?;
        let hw = input(&mut s, "hw", t, d, 16)?;
        let hm = input(&mut s, "hm", t, d, 17)?;
        let shape = format!("L{langs} {t}x{d}");
        check(&mut out, "gate", shape, &GateCase { table, language, hw, hm }, &s, opts)?;
    }
    for (tw, tm, d) in [(6, 3, 2), (9, 5, 3), (10, 4, 4)] {
        let mut s = ParamStore::new();
        let table = s.add_normal("gate", &[1, 1], 1.0, &mut r)?;
        let hw = input(&mut s, "hw", tw, d, 18)?;
        let hm = input(&mut s, "hm", tm, d, 19)?;
        let conv = downsample_conv(&mut s, "down", d, d, 3, &mut r)?;
        let positions = (0..tm).map(|k| (2 * k).min(tw - 1)).collect();
        let shape = format!("{tw}+{tm}x{d}");
        check(&mut out, "fusion", shape, &FusionCase { table, hw, hm, positions, conv }, &s, opts)?;
    }
    for (tw, tm, d, langs) in [(3, 2, 4, 2), (5, 3, 3, 4), (1, 1, 6, 3)] {
        let mut s = ParamStore::new();
        let hw = input(&mut s, "hw", tw, d, 20)?;
        let hm = input(&mut s, "hm", tm, d, 21)?;
        let head = Dense::new(&mut s, "lid", d, langs, &mut r)?;
        let shape = format!("{tw}+{tm}x{d} L{langs}");
        check(&mut out, "lid", shape, &LidCase { hw, hm, head, language: langs - 1 }, &s, opts)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_family_has_three_shapes() {
        let res = run_suite(&GradCheckOptions::default()).unwrap();
        for fam in FAMILIES {
            assert!(res.iter().filter(|r| r.family == fam).count() >= 3, "{fam}");
        }
    }
}
