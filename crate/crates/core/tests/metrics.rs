use dualfuse_core::eval::{char_bleu, char_tokens, corpus_bleu, corpus_wer, edit_distance, pca2, silhouette, silhouette_samples, wer};
use proptest::prelude::*;

#[test]
fn wer_reference_cases() {
    assert_eq!(wer("a b c", "a b c").unwrap(), 0.0);
    assert!((wer("a b c", "a x c").unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(wer("a b c", "").unwrap(), 1.0);
    assert_eq!(wer("a b", "x y z w").unwrap(), 2.0);
    assert!(wer("", "a").is_err());
}

#[test]
fn corpus_wer_pools_counts() {
    // 1 error over 3 words plus 0 over 1
    let w = corpus_wer(&[("a b c", "a c"), ("d", "d")]).unwrap();
    assert!((w - 0.25).abs() < 1e-15);
}

#[test]
fn edit_distance_small_cases() {
    assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
    assert_eq!(edit_distance::<u8>(b"", b"abc"), 3);
    assert_eq!(edit_distance(b"flaw", b"lawn"), 2);
}

#[test]
fn bleu_closed_form() {
    // precisions 5/5, 3/4, 1/3 and a smoothed 1/(2*2); brevity exp(1 - 6/5)
    let expected = 100.0 * (1.0f64 - 6.0 / 5.0).exp() * (1.0 * 0.75 * (1.0 / 3.0) * 0.25f64).powf(0.25);
    let b = corpus_bleu(&[("the cat sat on the mat", "the cat on the mat")]);
    assert!((b - expected).abs() < 1e-9, "{b} vs {expected}");
    assert!((b - 40.93653765389909).abs() < 0.01);
}

#[test]
fn bleu_identity_and_disjoint() {
    assert!((corpus_bleu(&[("a b c d e", "a b c d e"), ("f g h i", "f g h i")]) - 100.0).abs() < 1e-9);
    assert_eq!(corpus_bleu(&[("a b c d", "w x y z")]), 0.0);
    assert_eq!(corpus_bleu(&[("a b c d", "")]), 0.0);
}

#[test]
fn bleu_clips_repeated_words() {
    // "the" clipped to its reference count gives 2/7, higher orders are smoothed
    let b = corpus_bleu(&[("the cat is on the mat", "the the the the the the the")]);
    let expected = 100.0 * (2.0 / 7.0 / 12.0 / 20.0 / 32.0f64).powf(0.25);
    assert!((b - expected).abs() < 1e-9, "{b} vs {expected}");
}

#[test]
fn character_bleu_tokenizes_letters_and_boundaries() {
    assert_eq!(char_tokens("ab cd"), "a b \u{2581} c d");
    assert_eq!(char_tokens("  a  "), "a");
    assert_eq!(char_tokens(""), "");
    assert!((char_bleu(&[("ab cd", "ab cd")]) - 100.0).abs() < 1e-9);
    // "a b ▁ c e" against "a b ▁ c d": 4/5, 3/4, 2/3 and 1/2
    let expected = 100.0 * (0.8 * 0.75 * (2.0 / 3.0) * 0.5f64).powf(0.25);
    assert!((char_bleu(&[("ab cd", "ab ce")]) - expected).abs() < 1e-9);
}

#[test]
fn silhouette_hand_example() {
    // clusters {0, 1} and {10, 12} on a line
    let pts: Vec<Vec<f64>> = [0.0, 1.0, 10.0, 12.0].iter().map(|&x| vec![x]).collect();
    let s = silhouette_samples(&pts, &[0, 0, 1, 1]).unwrap();
    let expect = [
        (11.0 - 1.0) / 11.0,
        (10.0 - 1.0) / 10.0,
        (9.5 - 2.0) / 9.5,
        (11.5 - 2.0) / 11.5,
    ];
    for (a, b) in s.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    let mean = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
    assert!((mean - expect.iter().sum::<f64>() / 4.0).abs() < 1e-12);
}

#[test]
fn silhouette_rejects_one_cluster() {
    let pts = vec![vec![0.0], vec![1.0]];
    assert!(silhouette(&pts, &[0, 0]).is_err());
    assert!(silhouette(&pts, &[0]).is_err());
}

#[test]
fn pca_recovers_a_line() {
    // points on the direction (3, 4) / 5, centred at (1, 1)
    let ts = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let pts: Vec<Vec<f64>> = ts.iter().map(|t| vec![1.0 + 0.6 * t, 1.0 + 0.8 * t]).collect();
    let proj = pca2(&pts).unwrap();
    for ((x, y), t) in proj.iter().zip(ts) {
        assert!((x - t).abs() < 1e-9);
        assert!(y.abs() < 1e-9);
    }
}

#[test]
fn pca_orders_axes_by_variance() {
    let pts: Vec<Vec<f64>> = (0..20)
        .map(|i| {
            let a = (i % 5) as f64 - 2.0;
            let b = (i / 5) as f64 - 1.5;
            vec![0.1 * b, 10.0 * a, 1.0 * b]
        })
        .collect();
    let proj = pca2(&pts).unwrap();
    let var = |f: &dyn Fn(&(f64, f64)) -> f64| proj.iter().map(|p| f(p) * f(p)).sum::<f64>();
    assert!(var(&|p| p.0) > var(&|p| p.1));
    assert!((var(&|p| p.0) / 20.0 - 200.0).abs() < 1e-6);
}

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..12).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn wer_is_zero_only_for_equal_word_sequences(r in words(), h in words()) {
        let w = wer(&r, &h).unwrap();
        prop_assert!(w >= 0.0);
        prop_assert_eq!(w == 0.0, r == h);
        prop_assert!(w <= h.split_whitespace().count().max(r.split_whitespace().count()) as f64 / r.split_whitespace().count() as f64);
    }

    #[test]
    fn bleu_is_bounded_and_maximal_on_copies(r in words(), h in words()) {
        let b = corpus_bleu(&[(&r, &h)]);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
        if r.split_whitespace().count() >= 4 {
            prop_assert!((corpus_bleu(&[(&r, &r)]) - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn edit_distance_is_a_metric(a in "[abc]{0,8}", b in "[abc]{0,8}", c in "[abc]{0,8}") {
        let (a, b, c) = (a.as_bytes(), b.as_bytes(), c.as_bytes());
        prop_assert_eq!(edit_distance(a, b), edit_distance(b, a));
        prop_assert!(edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c));
        prop_assert_eq!(edit_distance(a, a), 0);
    }

    #[test]
    fn silhouette_lies_in_unit_interval(
        pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 4..20),
    ) {
        let labels: Vec<usize> = (0..pts.len()).map(|i| i % 2).collect();
        let p: Vec<Vec<f64>> = pts.iter().map(|&(x, y)| vec![x, y]).collect();
        for s in silhouette_samples(&p, &labels).unwrap() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        }
    }
}
