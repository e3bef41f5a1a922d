use dualfuse_core::connector::{alignment_positions, BlankPlacement};
use dualfuse_core::corpus::{language_specs, Reordering, Translator};
use dualfuse_core::encoders::{EncoderFeatures, FeatureSource};
use dualfuse_core::nn::{GradBuffer, Graph, ParamStore};
use dualfuse_core::training::schedule::{lr_at, TrainSchedule};
use dualfuse_core::training::{average_stores, combine_losses, loss_weights, LanguageSampler};
use dualfuse_core::vocab::Vocab;
use dualfuse_core::Tensor;
use proptest::prelude::*;

fn features(source: FeatureSource, t: usize, rate: f64) -> EncoderFeatures {
    EncoderFeatures { source, frames: Tensor::new(&[t, 1], vec![0.0; t]).unwrap(), frame_rate: rate, offset: 0.0125 }
}

#[test]
fn default_weights_give_reference_total() {
    let b = combine_losses(2.0, 5.0, 0.7, 0.1, 0.05).unwrap();
    // 0.9 * 2 + 0.1 * 5 + 0.05 * 0.7
    assert!((b.l_all - 2.335).abs() < 1e-12);
}

proptest! {
    #[test]
    fn total_loss_is_linear_in_its_weights(
        d in 0.0f64..20.0, c in 0.0f64..50.0, l in 0.0f64..5.0,
        a1 in 0.0f64..0.99, a2 in 0.0f64..0.99, b1 in 0.0f64..2.0, b2 in 0.0f64..2.0,
    ) {
        let f = |a: f64, b: f64| combine_losses(d, c, l, a, b).unwrap().l_all;
        let am = 0.5 * (a1 + a2);
        let bm = 0.5 * (b1 + b2);
        prop_assert!((f(am, bm) - 0.5 * (f(a1, b1) + f(a2, b2))).abs() < 1e-9);
        prop_assert!((f(a1, b1) - f(a2, b1) - (a1 - a2) * (c - d)).abs() < 1e-9);
        prop_assert!((f(a1, b1) - f(a1, b2) - (b1 - b2) * l).abs() < 1e-9);
        prop_assert_eq!(loss_weights(a1, b1), [1.0 - a1, a1, b1]);
    }

    #[test]
    fn mix_stays_between_its_inputs(
        rows in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..10),
        z in -8.0f64..8.0,
    ) {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let n = rows.len();
        let a = g.constant(Tensor::new(&[n, 1], rows.iter().map(|r| r.0).collect()).unwrap());
        let b = g.constant(Tensor::new(&[n, 1], rows.iter().map(|r| r.1).collect()).unwrap());
        let zn = g.variable(Tensor::scalar(z));
        let w = g.sigmoid(zn);
        let wv = g.scalar(w);
        prop_assert!(wv > 0.0 && wv < 1.0);
        let m = g.mix(a, b, w).unwrap();
        for (v, (x, y)) in g.value(m).data().iter().zip(&rows) {
            prop_assert!(*v >= x.min(*y) - 1e-12 && *v <= x.max(*y) + 1e-12);
            prop_assert!((v - (x * (1.0 - wv) + y * wv)).abs() < 1e-12);
        }
        // d sum(mix) / dz = sigmoid'(z) * sum(b - a)
        let s = g.sum(m).unwrap();
        let mut buf = GradBuffer::for_store(&store);
        let grads = g.backward(s, &mut buf).unwrap();
        let expect = wv * (1.0 - wv) * rows.iter().map(|r| r.1 - r.0).sum::<f64>();
        prop_assert!((grads.get(zn).unwrap()[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn alignment_positions_are_strictly_increasing_and_in_range(
        short in 1usize..80, extra in 0usize..120, tail in any::<bool>(),
    ) {
        let long = short + extra;
        let placement = if tail { BlankPlacement::Tail } else { BlankPlacement::TimeAligned };
        let s = features(FeatureSource::Waveform, short, 50.0);
        let l = features(FeatureSource::Spectral, long, 100.0);
        let pos = alignment_positions(&s, &l, placement);
        prop_assert_eq!(pos.len(), short);
        prop_assert!(pos.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*pos.last().unwrap() < long);
    }

    #[test]
    fn sampler_follows_tempered_counts(
        counts in prop::collection::vec(1usize..5000, 1..8), gamma in 0.0f64..1.0,
    ) {
        let s = LanguageSampler::new(&counts, gamma).unwrap();
        let p = s.probabilities();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let z: f64 = counts.iter().map(|&n| (n as f64).powf(gamma)).sum();
        for (pi, &n) in p.iter().zip(&counts) {
            prop_assert!((pi - (n as f64).powf(gamma) / z).abs() < 1e-12);
        }
    }

    #[test]
    fn averaging_copies_is_the_identity(vals in prop::collection::vec(-10.0f32..10.0, 1..40), k in 1usize..6) {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::new(&[vals.len()], vals.clone()).unwrap()).unwrap();
        let copies: Vec<&ParamStore<f32>> = (0..k).map(|_| &store).collect();
        let avg = average_stores(&copies).unwrap();
        let w = avg.id("w").unwrap();
        for (a, b) in avg.value(w).data().iter().zip(&vals) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn learning_rate_never_exceeds_the_peak(step in 0u64..100_000, warmup in 0u64..5000, peak in 1e-5f64..1e-2) {
        let sched = TrainSchedule { peak_lr: peak, warmup_steps: warmup, total_steps: 100_000, accumulation: 1, seed: 0 };
        let lr = lr_at(step, &sched);
        prop_assert!(lr > 0.0 && lr <= peak * (1.0 + 1e-12));
        if step > warmup {
            prop_assert!(lr_at(step + 1, &sched) <= lr);
        }
    }

    #[test]
    fn translation_round_trips(words in prop::collection::vec(prop::collection::vec(0usize..10, 1..6), 1..6), src in 0usize..4, off in 1usize..4) {
        let langs = language_specs(4, 1).unwrap();
        let tgt = (src + off) % 4;
        let text: String = words
            .iter()
            .map(|w| w.iter().map(|&i| langs[src].letters[i]).collect::<String>())
            .collect::<Vec<_>>()
            .join(" ");
        for r in [Reordering::None, Reordering::SwapWordPairs, Reordering::SwapTokenPairs] {
            let fwd = Translator::new(&langs[src], &langs[tgt], r).unwrap();
            let back = Translator::new(&langs[tgt], &langs[src], r).unwrap();
            let t = fwd.translate(&text).unwrap();
            prop_assert_eq!(t.chars().count(), text.chars().count());
            prop_assert!(t.chars().all(|c| c == ' ' || langs[tgt].letters.contains(&c)));
            prop_assert_eq!(back.translate(&t).unwrap(), text.clone());
        }
    }

    #[test]
    fn text_encoding_round_trips(words in prop::collection::vec("[a-ik-pr]{1,6}", 1..6)) {
        let vocab = Vocab::build(&["one", "two"]).unwrap();
        let text = words.join(" ");
        let ids = vocab.encode_text(&text).unwrap();
        prop_assert_eq!(ids.len(), text.chars().count());
        prop_assert_eq!(vocab.decode_text(&ids), text);
    }
}
