use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn speechmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speechmt"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = speechmt(args);
    assert!(
        o.status.success(),
        "{args:?} failed:\n{}\n{}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const MICRO_CONFIG: &str = r#"
seed = 3

[model]
input = "speech"
tasks = ["st", "asr"]

[model.speech]
conv_filters = 2
conv_lstm_filters = 2
lstm_layers = 2
lstm_units = 6
projection_dim = 8

[model.decoder]
depth = 2
units = 8
embedding_dim = 4
attention_hidden = 6
attention_dim = 4

[optimizer]
batch_size = 3
noise_start = 3
learning_rate = 0.005

[schedule]
tasks = ["st", "asr"]
probabilities = [0.75, 0.25]

[training]
steps = 4
checkpoint_every = 2

[data]
train_manifest = "corpus/manifest.jsonl"
feature_cache = "cache"
"#;

fn digest(train_stdout: &str) -> String {
    train_stdout
        .lines()
        .find_map(|l| l.split_once(" digest ").map(|(_, d)| d.to_string()))
        .expect("digest line")
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    let s = ok(&["make-toy-corpus", "--out", p(&corpus), "--num", "6"]);
    assert!(s.contains("wrote 6 utterances"));
    assert!(corpus.join("ref.st.tsv").exists() && corpus.join("ref.asr.tsv").exists());
    let config = root.join("micro.toml");
    fs::write(&config, MICRO_CONFIG).unwrap();
    let manifest = corpus.join("manifest.jsonl");
    let cache = root.join("cache");

    let s = ok(&["featurize", "--manifest", p(&manifest), "--out", p(&cache), "--config", p(&config)]);
    assert!(s.contains("cached 6, up to date 0, failed 0"), "{s}");
    let s = ok(&["featurize", "--manifest", p(&manifest), "--out", p(&cache), "--config", p(&config)]);
    assert!(s.contains("cached 0, up to date 6, failed 0"), "{s}");

    // Training is deterministic.
    let run_a = root.join("run_a");
    let run_b = root.join("run_b");
    let a = ok(&["train", "--config", p(&config), "--task", "multitask", "--out", p(&run_a)]);
    let b = ok(&["train", "--config", p(&config), "--task", "multitask", "--out", p(&run_b)]);
    assert!(a.contains("config hash "));
    assert_eq!(digest(&a), digest(&b));
    assert!(run_a.join("checkpoint-000002").is_dir());
    let log = fs::read_to_string(run_a.join("train.log")).unwrap();
    assert!(log.starts_with("# step\ttask\tloss"));
    assert_eq!(log.lines().count(), 5);

    // Resuming from the mid-run checkpoint reproduces the final weights.
    let run_c = root.join("run_c");
    let c = ok(&[
        "train",
        "--config",
        p(&config),
        "--task",
        "multitask",
        "--out",
        p(&run_c),
        "--resume",
        p(&run_a.join("checkpoint-000002")),
    ]);
    assert_eq!(digest(&c), digest(&a));

    // Decode with attention dumps.
    let dec = root.join("dec");
    let ckpt = run_a.join("final");
    ok(&[
        "decode",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--out",
        p(&dec),
        "--task",
        "asr",
        "--config",
        p(&config),
        "--feature-cache",
        p(&cache),
        "--attention",
    ]);
    let nbest = fs::read_to_string(dec.join("nbest.tsv")).unwrap();
    let best: Vec<&str> = nbest.lines().filter(|l| l.split('\t').nth(1) == Some("1")).collect();
    assert_eq!(best.len(), 6);
    for line in best {
        let id = line.split('\t').next().unwrap();
        let att = fs::read_to_string(dec.join("attention").join(format!("{id}.tsv"))).unwrap();
        let m = speechmt::decoder::AlignmentMatrix::from_tsv(&att).unwrap();
        assert!(m.max_row_sum_error() < 1e-5);
        let text = line.splitn(5, '\t').nth(4).unwrap();
        let eos = usize::from(m.tokens.last().map(String::as_str) == Some("</s>"));
        assert_eq!(m.num_rows(), text.chars().count() + eos, "{id}");
    }

    // Scoring references against themselves.
    let refs = corpus.join("ref.st.tsv");
    let perfect = root.join("perfect.tsv");
    let lines: String = fs::read_to_string(&refs)
        .unwrap()
        .lines()
        .map(|l| {
            let (id, text) = l.split_once('\t').unwrap();
            format!("{id}\t1\t0.0\t0.0\t{text}\n")
        })
        .collect();
    fs::write(&perfect, lines).unwrap();
    let s = ok(&["evaluate", "--nbest", p(&perfect), "--references", p(&refs), "--task", "st"]);
    assert!(s.contains("BLEU 100.00"), "{s}");
    assert!(root.join("perfect.tsv.report.tsv").exists());
    let asr_refs = corpus.join("ref.asr.tsv");
    fs::write(&perfect, fs::read_to_string(&asr_refs).unwrap().lines().map(|l| {
        let (id, text) = l.split_once('\t').unwrap();
        format!("{id}\t1\t0.0\t0.0\t{text}\n")
    }).collect::<String>()).unwrap();
    let s = ok(&["evaluate", "--nbest", p(&perfect), "--references", p(&asr_refs), "--task", "asr"]);
    assert!(s.contains("WER 0.00"), "{s}");

    let s = ok(&["inspect", "--checkpoint", p(&ckpt)]);
    assert!(s.contains("step 4") && s.contains("total\t"), "{s}");
}

#[test]
fn featurize_reports_corrupt_audio_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["make-toy-corpus", "--out", p(&corpus), "--num", "10"]);
    fs::write(corpus.join("audio/toy0004.wav"), b"not a wav file at all").unwrap();
    let cache = dir.path().join("cache");
    let o = speechmt(&["featurize", "--manifest", p(&corpus.join("manifest.jsonl")), "--out", p(&cache)]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("cached 9, up to date 0, failed 1"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("toy0004.wav"));
    let cached = fs::read_dir(&cache)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "sqt"))
        .count();
    assert_eq!(cached, 9);
}

#[test]
fn inspect_and_usage_errors() {
    let s = ok(&["inspect"]);
    assert!(s.contains("relative to 9.8M"), "{s}");
    let o = speechmt(&["train", "--task", "st"]);
    assert!(!o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[optimizer]\nlearning_rat = 1\n").unwrap();
    let o = speechmt(&["inspect", "--config", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));
}
