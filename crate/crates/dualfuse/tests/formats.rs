use std::path::{Path, PathBuf};

use dualfuse::checkpoint::{Checkpoint, CheckpointKind, OptimizerState, Provenance, MAGIC, VERSION};
use dualfuse::config::RunConfig;
use dualfuse::error::FormatError;
use dualfuse::manifest::{read_manifest, write_manifest, ManifestRow, HEADER};
use dualfuse::metrics::{read_log, LogRecord, MetricLog};
use dualfuse::vocab_file::{read_vocab, write_vocab};
use dualfuse::wav::{dequantize, quantize, read_wav, write_wav};
use dualfuse_core::audio::Waveform;
use dualfuse_core::corpus::Split;
use dualfuse_core::nn::ParamStore;
use dualfuse_core::vocab::Vocab;
use dualfuse_core::Tensor;
use proptest::prelude::*;

fn reference_file() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.cfg")
}

#[test]
fn reference_config_lists_every_default() {
    let text = std::fs::read_to_string(reference_file()).unwrap();
    assert_eq!(text, RunConfig::reference_text());
    for k in RunConfig::KEYS {
        assert!(text.lines().any(|l| l.starts_with(&format!("{k}="))), "{k} missing");
    }
    assert_eq!(RunConfig::load(&reference_file()).unwrap(), RunConfig::default());
}

#[test]
fn config_text_round_trips() {
    let mut c = RunConfig::default();
    c.set("alpha", "0.25").unwrap();
    c.set("variant", "no-ws").unwrap();
    c.set("task", "ast-cot").unwrap();
    c.set("output_dir", "somewhere/else").unwrap();
    assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
}

#[test]
fn config_rejects_unknown_and_repeated_keys() {
    assert!(matches!(RunConfig::from_text("alpah=0.2"), Err(FormatError::Config(_))));
    assert!(matches!(RunConfig::from_text("alpha=0.2\nalpha=0.3"), Err(FormatError::Config(_))));
    assert!(matches!(RunConfig::from_text("alpha"), Err(FormatError::Config(_))));
    assert!(matches!(RunConfig::from_text("alpha=1.5"), Err(FormatError::Config(_))));
    assert!(matches!(RunConfig::from_text("variant=triple"), Err(FormatError::Config(_))));
    let c = RunConfig::from_text("# comment\n\n beta = 0.2 \n").unwrap();
    assert_eq!(c.beta, 0.2);
}

fn store() -> ParamStore {
    let mut s = ParamStore::new();
    s.add("a.w", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, -0.0, 7e-8]).unwrap()).unwrap();
    s.add("b", Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
    s.set_trainable("b", false);
    s
}

fn checkpoint() -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Model,
        pretrained: Some(true),
        config: RunConfig::default().to_text(),
        vocab: vec!["<pad>".into(), "a".into()],
        params: store(),
        provenance: Provenance { step: 42, dev_loss: Some(0.125), parent: Some("00ff00ff00ff00ff".into()) },
        optimizer: Some(OptimizerState {
            t: 42,
            consecutive_skips: 1,
            total_skips: 3,
            m: vec![vec![0.5; 6], vec![0.25; 4]],
            v: vec![vec![1e-3; 6], vec![2e-3; 4]],
        }),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    let c = checkpoint();
    c.save(&p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.provenance, c.provenance);
    assert_eq!(back.optimizer, c.optimizer);
    assert_eq!(back.pretrained, Some(true));
    assert!(!back.params.is_trainable(back.params.id("b").unwrap()));
    assert_eq!(back.id(), c.id());
    // no temporary files left behind by the atomic write
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn checkpoint_without_optional_parts() {
    let mut c = checkpoint();
    c.optimizer = None;
    c.pretrained = None;
    c.provenance = Provenance { step: 0, dev_loss: None, parent: None };
    let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("x")).unwrap();
    assert_eq!(back, c);
}

#[test]
fn checkpoint_errors_are_distinct() {
    let p = Path::new("x.ckpt");
    let bytes = checkpoint().to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(FormatError::BadMagic { .. })));
    let mut newer = bytes.clone();
    newer[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
    match Checkpoint::from_bytes(&newer, p) {
        Err(FormatError::Version { found, expected, .. }) => assert_eq!((found, expected), (VERSION + 1, VERSION)),
        other => panic!("{other:?}"),
    }
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p), Err(FormatError::Malformed { .. })));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(Checkpoint::from_bytes(&longer, p), Err(FormatError::Malformed { .. })));
}

#[test]
fn checkpoint_kind_is_checked() {
    let c = checkpoint();
    assert!(c.expect_kind(CheckpointKind::Model, Path::new("x")).is_ok());
    assert!(c.expect_kind(CheckpointKind::Encoders, Path::new("x")).is_err());
}

#[test]
fn wav_round_trip_within_one_code() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.wav");
    let samples: Vec<f32> = (0..1600).map(|i| (i as f32 * 0.01).sin() * 0.8).collect();
    write_wav(&p, &Waveform::new(samples.clone(), 16_000).unwrap()).unwrap();
    let back = read_wav(&p).unwrap();
    assert_eq!(back.sample_rate, 16_000);
    assert_eq!(back.samples.len(), samples.len());
    for (a, b) in back.samples.iter().zip(&samples) {
        assert!((a - b).abs() <= 0.5 / i16::MAX as f32 + 1e-7);
    }
    let again = dir.path().join("b.wav");
    write_wav(&again, &back).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn wav_rejects_other_formats() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("stereo.wav");
    let spec = hound::WavSpec { channels: 2, sample_rate: 16_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(&p, spec).unwrap();
    w.write_sample(0i16).unwrap();
    w.write_sample(0i16).unwrap();
    w.finalize().unwrap();
    assert!(matches!(read_wav(&p), Err(FormatError::Malformed { .. })));
}

fn rows() -> Vec<ManifestRow> {
    vec![
        ManifestRow {
            id: "lang0-train-00001".into(),
            language: "lang0".into(),
            split: Split::Train,
            duration: 1.3,
            audio: "audio/lang0-train-00001.wav".into(),
            transcript: "ab cd".into(),
            tgt_language: Some("lang1".into()),
            translation: Some("ef gh".into()),
        },
        ManifestRow {
            id: "lang1-dev-00002".into(),
            language: "lang1".into(),
            split: Split::Dev,
            duration: 0.9,
            audio: "audio/lang1-dev-00002.wav".into(),
            transcript: "ik".into(),
            tgt_language: None,
            translation: None,
        },
    ]
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("manifest.tsv");
    write_manifest(&p, &rows()).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().next().unwrap(), HEADER.join("\t"));
    assert_eq!(read_manifest(&p).unwrap(), rows());
}

#[test]
fn manifest_rejects_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("manifest.tsv");
    std::fs::write(&p, format!("{}\nx\tlang0\tnowhere\t1.0\ta.wav\tab\t\t\n", HEADER.join("\t"))).unwrap();
    assert!(matches!(read_manifest(&p), Err(FormatError::Malformed { .. })));
    std::fs::write(&p, "id\tlanguage\n").unwrap();
    assert!(read_manifest(&p).is_err());
}

#[test]
fn vocab_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vocab.txt");
    let v = Vocab::build(&["alpha", "beta"]).unwrap();
    write_vocab(&p, &v).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), v.len());
    assert_eq!(read_vocab(&p).unwrap(), v);
}

#[test]
fn metric_log_truncates_on_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jsonl");
    let dev = |step| LogRecord::Dev { step, l_dec: 0.1, l_ctc: 0.2, l_lid: 0.3, l_all: 0.123456789012345, lid_acc: Some(1.0), kept: true };
    let mut log = MetricLog::open(&p, None).unwrap();
    for s in 1..=5 {
        log.append(&dev(s)).unwrap();
    }
    drop(log);
    let lines: Vec<String> = std::fs::read_to_string(&p).unwrap().lines().map(String::from).collect();
    let mut log = MetricLog::open(&p, Some(3)).unwrap();
    log.append(&dev(4)).unwrap();
    drop(log);
    let after: Vec<String> = std::fs::read_to_string(&p).unwrap().lines().map(String::from).collect();
    assert_eq!(after, lines[..4]);
    assert_eq!(read_log(&p).unwrap().len(), 4);
    assert!(after[0].contains("\"kind\":\"dev\""));
}

proptest! {
    #[test]
    fn quantize_is_nearest_code(s in -1.0f32..1.0) {
        let q = quantize(s);
        let err = (dequantize(q) - s).abs();
        prop_assert!(err <= 0.5 / i16::MAX as f32 + 1e-7);
        prop_assert_eq!(quantize(dequantize(q)), q);
    }

    #[test]
    fn config_set_get_round_trips(alpha in 0.0f64..0.999, beta in 0.0f64..5.0, steps in 1u64..100_000) {
        let mut c = RunConfig::default();
        c.set("alpha", &alpha.to_string()).unwrap();
        c.set("beta", &format!("{beta:?}")).unwrap();
        c.set("total_steps", &steps.to_string()).unwrap();
        prop_assert_eq!(c.alpha, alpha);
        prop_assert_eq!(c.beta, beta);
        let back = RunConfig::from_text(&c.to_text());
        if steps > c.warmup_steps {
            prop_assert_eq!(back.unwrap(), c);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(vals in prop::collection::vec(any::<f32>(), 1..64), step in any::<u64>()) {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[vals.len()], vals.clone()).unwrap()).unwrap();
        let c = Checkpoint {
            kind: CheckpointKind::Decoder,
            pretrained: None,
            config: String::new(),
            vocab: vec![],
            params: s,
            provenance: Provenance { step, dev_loss: None, parent: None },
            optimizer: None,
        };
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("p")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let got: Vec<u32> = back.params.value(back.params.id("p").unwrap()).data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = vals.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, want);
    }
}
