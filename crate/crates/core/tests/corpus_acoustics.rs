use dualfuse_core::audio::{log_mel, synth_utterance};
use dualfuse_core::corpus::language_specs;

fn mean_abs(x: &[f32], y: &[f32]) -> f64 {
    x.iter().zip(y).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / x.len() as f64
}

#[test]
fn twins_differ_only_in_phase() {
    for lang in language_specs(4, 7).unwrap() {
        assert!(!lang.twins.is_empty());
        for &(a, b) in &lang.twins {
            let wa = synth_utterance(&[a, a], &lang.voice, 1).unwrap();
            let wb = synth_utterance(&[b, b], &lang.voice, 1).unwrap();
            let wn = synth_utterance(&[a, a], &lang.voice, 2).unwrap();
            let (ma, mb, mn) = (log_mel(&wa).unwrap(), log_mel(&wb).unwrap(), log_mel(&wn).unwrap());
            let twin_mel = mean_abs(ma.frames.data(), mb.frames.data());
            let noise_mel = mean_abs(ma.frames.data(), mn.frames.data());
            assert!(twin_mel < 0.05 * noise_mel, "{}: {twin_mel} vs {noise_mel}", lang.name);
            let twin_wave = mean_abs(&wa.samples, &wb.samples);
            let noise_wave = mean_abs(&wa.samples, &wn.samples);
            assert!(twin_wave > 3.0 * noise_wave, "{}: {twin_wave} vs {noise_wave}", lang.name);
        }
    }
}

#[test]
fn distinct_letters_differ_in_mel() {
    for lang in language_specs(4, 3).unwrap() {
        let twin_members: Vec<char> = lang.twins.iter().flat_map(|t| [t.0, t.1]).collect();
        let plain: Vec<char> = lang.letters.iter().copied().filter(|c| !twin_members.contains(c)).collect();
        let wa = synth_utterance(&[plain[0]; 3], &lang.voice, 1).unwrap();
        let wb = synth_utterance(&[plain[1]; 3], &lang.voice, 1).unwrap();
        let d = mean_abs(log_mel(&wa).unwrap().frames.data(), log_mel(&wb).unwrap().frames.data());
        assert!(d > 0.2, "{}: {d}", lang.name);
    }
}
