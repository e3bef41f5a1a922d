//! Human-readable and line-delimited renderings of evaluation and
//! analysis results.

use std::fmt::Write as _;

use dualfuse_core::eval::{EvalReport, GateRow, Separation};
use serde_json::json;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn eval_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "task {}  split {}  variant {}  utterances {}",
        r.task.as_str(),
        r.split.as_str(),
        r.variant,
        r.utterances
    );
    let _ = writeln!(s, "{:<12} {:>6} {:>8} {:>8}", "language", "utts", "WER", "BLEU");
    for l in &r.per_language {
        let _ = writeln!(s, "{:<12} {:>6} {:>8.4} {:>8.2}", l.language, l.utterances, l.wer, l.bleu);
    }
    let _ = writeln!(s, "{:<12} {:>6} {:>8.4} {:>8.2}", "Avg", r.utterances, r.wer, r.bleu);
    let _ = writeln!(s, "LID accuracy {}", opt(r.lid_accuracy));
    if let Some(c) = r.cot_well_formed {
        let _ = writeln!(s, "transcript-then-translation outputs {:.4}", c);
    }
    s
}

/// One JSON object per line: a summary, one row per language, one per
/// utterance.
pub fn eval_jsonl(r: &EvalReport, ids: &dyn Fn(usize) -> String) -> String {
    let mut lines = vec![json!({
        "kind": "summary",
        "task": r.task.as_str(),
        "split": r.split.as_str(),
        "variant": r.variant,
        "utterances": r.utterances,
        "wer": r.wer,
        "bleu": r.bleu,
        "lid_acc": r.lid_accuracy,
        "cot_well_formed": r.cot_well_formed,
    })];
    for l in &r.per_language {
        lines.push(json!({"kind": "language", "language": l.language, "utterances": l.utterances, "wer": l.wer, "bleu": l.bleu}));
    }
    for u in &r.results {
        lines.push(json!({
            "kind": "utterance",
            "id": ids(u.record),
            "language": u.language,
            "reference": u.reference,
            "hypothesis": u.hypothesis,
            "transcript": u.transcript,
            "lid": u.lid,
            "gate": u.gate,
            "well_formed": u.well_formed,
            "truncated": u.truncated,
        }));
    }
    lines.into_iter().map(|v| v.to_string() + "\n").collect()
}

/// Gate table; with a second model, the change of each weight.
pub fn gate_table(a: &[GateRow], b: Option<&[GateRow]>) -> String {
    let mut s = String::new();
    match b {
        None => {
            let _ = writeln!(s, "{:<12} {:>9} {:>8} {:>8}", "language", "raw", "w'", "vs-rest");
            for g in a {
                let _ = writeln!(s, "{:<12} {:>9.4} {:>8.4} {:>+8.4}", g.language, g.raw, g.weight, g.delta);
            }
        }
        Some(b) => {
            let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8}", "language", "w'(1)", "w'(2)", "delta");
            for (x, y) in a.iter().zip(b) {
                let _ = writeln!(s, "{:<12} {:>8.4} {:>8.4} {:>+8.4}", x.language, x.weight, y.weight, y.weight - x.weight);
            }
        }
    }
    s
}

pub fn gate_jsonl(a: &[GateRow], b: Option<&[GateRow]>) -> String {
    a.iter()
        .enumerate()
        .map(|(i, g)| {
            let mut v = json!({"kind": "gate", "language": g.language, "raw": g.raw, "weight": g.weight, "vs_rest": g.delta});
            if let Some(y) = b.and_then(|b| b.get(i)) {
                v["weight_2"] = json!(y.weight);
                v["delta"] = json!(y.weight - g.weight);
            }
            v.to_string() + "\n"
        })
        .collect()
}

pub fn separation_table(sep: &Separation, languages: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>10}", "language", "silhouette");
    for (name, v) in languages.iter().zip(&sep.per_language) {
        let _ = writeln!(s, "{:<12} {:>10.4}", name, v);
    }
    let _ = writeln!(s, "{:<12} {:>10.4}", "mean", sep.silhouette);
    s
}

/// Projected points as `x<TAB>y<TAB>language` lines.
pub fn pca_tsv(sep: &Separation, languages: &[String]) -> String {
    let mut s = String::from("x\ty\tlanguage\n");
    for (x, y, l) in &sep.points {
        let _ = writeln!(s, "{x:.6}\t{y:.6}\t{}", languages.get(*l).map_or("?", String::as_str));
    }
    s
}
