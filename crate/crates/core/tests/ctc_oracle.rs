use dualfuse_core::ctc::{ctc_loss, CtcInstance};
use dualfuse_core::error::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sum over every frame labelling whose collapse equals the target.
fn enumerate_nll(log_probs: &[f64], classes: usize, target: &[usize]) -> Option<f64> {
    let frames = log_probs.len() / classes;
    let blank = classes - 1;
    let mut prob = 0.0f64;
    let mut found = false;
    let mut path = vec![0usize; frames];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if k != blank && Some(k) != prev {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            found = true;
            prob += path.iter().enumerate().map(|(t, &k)| log_probs[t * classes + k]).sum::<f64>().exp();
        }
        // odometer increment
        let mut i = 0;
        while i < frames {
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == frames {
            break;
        }
    }
    found.then(|| -prob.ln())
}

fn log_softmax(logits: &[f64], classes: usize) -> Vec<f64> {
    logits
        .chunks(classes)
        .flat_map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter().map(move |x| x - z).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn forward_backward_matches_enumeration_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut feasible = 0;
    for _ in 0..200 {
        let frames = rng.gen_range(1..=8);
        let vocab = rng.gen_range(1..=3);
        let classes = vocab + 1;
        let len = rng.gen_range(0..=frames.min(4));
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let logits: Vec<f64> = (0..frames * classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lp = log_softmax(&logits, classes);
        let inst = CtcInstance::new(lp.clone(), classes, target.clone()).unwrap();
        match (ctc_loss(&inst), enumerate_nll(&lp, classes, &target)) {
            (Ok(l), Some(o)) => {
                worst = worst.max((l.nll - o).abs());
                feasible += 1;
            }
            (Err(Error::InfeasibleAlignment { .. }), None) => {}
            (a, b) => panic!("disagreement on {target:?} over {frames} frames: {a:?} vs {b:?}"),
        }
    }
    assert!(worst <= 1e-6, "worst abs error {worst}");
    assert!(feasible > 150);
}

#[test]
fn uniform_two_frame_closed_form() {
    // of 9 paths, a-a, a-blank and blank-a collapse to "a"
    let lp = vec![-(3f64.ln()); 6];
    let l = ctc_loss(&CtcInstance::new(lp, 3, vec![0]).unwrap()).unwrap();
    assert!((l.nll - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn repeated_label_needs_a_separating_blank() {
    let lp = vec![-(2f64.ln()); 4];
    assert!(matches!(
        ctc_loss(&CtcInstance::new(lp, 2, vec![0, 0]).unwrap()),
        Err(Error::InfeasibleAlignment { .. })
    ));
    // a blank a is the only path out of 8
    let lp = vec![-(2f64.ln()); 6];
    let l = ctc_loss(&CtcInstance::new(lp, 2, vec![0, 0]).unwrap()).unwrap();
    assert!((l.nll - 8f64.ln()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn loss_is_a_nonnegative_log_probability(
        frames in 1usize..7,
        vocab in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = vocab + 1;
        let len = rng.gen_range(0..=frames.min(3));
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let logits: Vec<f64> = (0..frames * classes).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let lp = log_softmax(&logits, classes);
        if let Ok(l) = ctc_loss(&CtcInstance::new(lp.clone(), classes, target.clone()).unwrap()) {
            prop_assert!(l.nll >= -1e-12);
            let o = enumerate_nll(&lp, classes, &target).unwrap();
            prop_assert!((l.nll - o).abs() <= 1e-6);
        }
    }
}
