use std::fs;

use speechmt::data::{
    build_examples, cache_features, gather_features, load_features, load_manifest, make_toy_corpus, ExampleInput,
    MappingRule, TaskKind, ToySpec,
};
use speechmt::frontend::{FeatureNormalizer, FrontendConfig, Waveform};
use speechmt::vocab::Vocabulary;
use speechmt::Error;

fn small_spec(n: usize) -> ToySpec {
    ToySpec {
        num_utterances: n,
        ..ToySpec::default()
    }
}

fn manifest_error_line(text: &str) -> (usize, String) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.wav"), b"x").unwrap();
    let path = dir.path().join("m.jsonl");
    fs::write(&path, text).unwrap();
    match load_manifest(&path) {
        Err(Error::Manifest { line, detail, .. }) => (line, detail),
        other => panic!("expected a manifest error, got {other:?}"),
    }
}

#[test]
fn manifest_errors_name_the_line() {
    let ok = r#"{"id": "a", "audio": "a.wav", "source": "sol"}"#;
    assert_eq!(manifest_error_line(&format!("{ok}\n{{not json\n")).0, 2);
    let (line, detail) = manifest_error_line(&format!("{ok}\n\n{ok}\n"));
    assert_eq!(line, 3);
    assert!(detail.contains("duplicate"));
    let (line, detail) = manifest_error_line(r#"{"id": "b", "audio": "missing.wav"}"#);
    assert_eq!(line, 1);
    assert!(detail.contains("does not exist"));
    assert_eq!(manifest_error_line(r#"{"id": "c", "speaker": 3}"#).0, 1);
    assert_eq!(manifest_error_line(r#"{"id": "has space"}"#).0, 1);
}

#[test]
fn toy_corpus_is_reproducible_and_mapped() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = make_toy_corpus(&small_spec(12), a.path()).unwrap();
    let mb = make_toy_corpus(&small_spec(12), b.path()).unwrap();
    assert_eq!(ma.entries, mb.entries);
    assert_eq!(ma.len(), 12);
    for e in &ma.entries {
        assert_eq!(e.targets, vec![MappingRule::ReverseChars.apply(&e.source)]);
        let wa = fs::read(a.path().join(e.audio.as_ref().unwrap())).unwrap();
        let wb = fs::read(b.path().join(e.audio.as_ref().unwrap())).unwrap();
        assert_eq!(wa, wb);
    }
    let loaded = load_manifest(a.path().join("manifest.jsonl")).unwrap();
    assert_eq!(loaded.entries, ma.entries);
    let bad = ToySpec {
        min_words: 3,
        max_words: 2,
        ..ToySpec::default()
    };
    assert!(make_toy_corpus(&bad, a.path().join("bad")).is_err());
}

#[test]
fn feature_cache_is_idempotent_and_isolates_failures() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_toy_corpus(&small_spec(5), dir.path()).unwrap();
    let cfg = FrontendConfig::default();
    let cache = dir.path().join("cache");
    let (w, s, f) = cache_features(&m, &cfg, &cache).unwrap();
    assert_eq!((w, s, f.len()), (5, 0, 0));
    let first = fs::read(cache.join("toy0000.sqt")).unwrap();
    let (w, s, f) = cache_features(&m, &cfg, &cache).unwrap();
    assert_eq!((w, s, f.len()), (0, 5, 0));
    assert_eq!(fs::read(cache.join("toy0000.sqt")).unwrap(), first);

    // A corrupt file is reported and the rest are still processed.
    fs::write(dir.path().join("audio/toy0002.wav"), b"RIFF....garbage").unwrap();
    fs::remove_dir_all(&cache).unwrap();
    let (w, _, f) = cache_features(&m, &cfg, &cache).unwrap();
    assert_eq!(w, 4);
    assert_eq!(f.len(), 1);
    assert!(f[0].0.ends_with("toy0002.wav"));
    assert!(matches!(f[0].1, Error::Wav { .. }), "{}", f[0].1);

    let (feats, failures) = gather_features(&m, Some(&cache), &cfg);
    assert_eq!(feats.len(), 4);
    assert_eq!(failures.len(), 1);
    assert!(load_features(&m, Some(&cache)).is_err());
}

#[test]
fn features_have_the_expected_shape() {
    let w = Waveform::new(vec![0.1; 16000], 16000).unwrap();
    let fs = speechmt::frontend::stack_features("one", &w, &FrontendConfig::default()).unwrap();
    assert_eq!(fs.frames.shape(), &[98, 80, 3]);
    let dir = tempfile::tempdir().unwrap();
    fs.save(dir.path(), "one").unwrap();
    let back = speechmt::frontend::FeatureSequence::load(dir.path(), "one").unwrap();
    assert_eq!(back.frames, fs.frames);
}

#[test]
fn examples_follow_the_task() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_toy_corpus(&small_spec(4), dir.path()).unwrap();
    let cfg = FrontendConfig::default();
    let (feats, failures) = gather_features(&m, None, &cfg);
    assert!(failures.is_empty());
    let norm = FeatureNormalizer::fit(feats.values()).unwrap();
    let v = Vocabulary::canonical();
    let asr = build_examples(&m, TaskKind::Asr, &feats, Some(&norm), &v).unwrap();
    let st = build_examples(&m, TaskKind::St, &feats, Some(&norm), &v).unwrap();
    let nmt = build_examples(&m, TaskKind::Nmt, &feats, None, &v).unwrap();
    for ((a, s), n) in asr.iter().zip(&st).zip(&nmt) {
        let e = m.get(&a.id).unwrap();
        assert_eq!(v.decode(&a.target).unwrap(), e.source);
        assert_eq!(v.decode(&s.target).unwrap(), e.targets[0]);
        assert_eq!(n.input, ExampleInput::Tokens(v.encode(&e.source)));
        assert_eq!(a.input, s.input);
    }
    assert!(build_examples(&m, TaskKind::St, &Default::default(), None, &v).is_err());
    assert!(TaskKind::from_name("mt").is_err());
}
