//! Corpus manifests, feature caching, toy-corpus generation and batching.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{stack_features, FeatureNormalizer, FeatureSequence, FrontendConfig, Waveform};
use crate::tensor::Tensor;
use crate::vocab::{normalize_text, Vocabulary};

/// One line of a JSON-lines manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    /// Source-language transcript.
    #[serde(default)]
    pub source: String,
    /// Target-language translations (one or more references).
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    /// Directory against which relative paths resolve.
    pub base: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn split(&self, name: &str) -> CorpusManifest {
        CorpusManifest {
            base: self.base.clone(),
            entries: self.entries.iter().filter(|e| e.split == name).cloned().collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Parses and validates a JSON-lines manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let err = |line: usize, detail: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut manifest = CorpusManifest {
        base,
        entries: Vec::new(),
    };
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line).map_err(|e| err(n, e.to_string()))?;
        if e.id.is_empty() || e.id.contains(char::is_whitespace) {
            return Err(err(n, format!("invalid utterance id {:?}", e.id)));
        }
        if !seen.insert(e.id.clone()) {
            return Err(err(n, format!("duplicate utterance id {:?}", e.id)));
        }
        for p in e.audio.iter().chain(&e.features) {
            let full = manifest.resolve(p);
            if !full.exists() {
                return Err(err(n, format!("referenced file {} does not exist", full.display())));
            }
        }
        manifest.entries.push(e);
    }
    Ok(manifest)
}

/// How toy targets are derived from toy transcripts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingRule {
    Copy,
    /// Reverses the character order of the whole transcript.
    ReverseChars,
    ReverseWords,
}

impl MappingRule {
    pub fn apply(self, s: &str) -> String {
        match self {
            MappingRule::Copy => s.to_string(),
            MappingRule::ReverseChars => s.chars().rev().collect(),
            MappingRule::ReverseWords => s.split(' ').rev().collect::<Vec<_>>().join(" "),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub words: Vec<String>,
    pub num_utterances: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub mapping: MappingRule,
    pub seed: u64,
    pub sample_rate: u32,
    /// Duration of the tone for one character.
    pub char_ms: f64,
    /// Silence between words and at both ends.
    pub gap_ms: f64,
    /// Standard deviation of additive white noise.
    pub noise: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            words: ["sol", "mar", "luz", "pan", "oro"].map(String::from).to_vec(),
            num_utterances: 50,
            min_words: 1,
            max_words: 3,
            mapping: MappingRule::ReverseChars,
            seed: 1,
            sample_rate: 8000,
            char_ms: 60.0,
            gap_ms: 50.0,
            noise: 0.01,
        }
    }
}

/// Tone frequency for a character: letters spread over 300–3300 Hz.
pub fn char_tone_hz(c: char) -> f64 {
    let idx = match c {
        'a'..='z' => c as u32 - 'a' as u32,
        _ => 26 + (c as u32 % 5),
    };
    300.0 + 120.0 * idx as f64
}

impl ToySpec {
    fn validate(&self) -> Result<()> {
        if self.words.is_empty() || self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("toy spec needs words and 1 ≤ min_words ≤ max_words".into()));
        }
        for w in &self.words {
            if w.is_empty() || normalize_text(w) != *w || w.contains(' ') {
                return Err(Error::Config(format!("toy word {w:?} is not a normalized single word")));
            }
        }
        Waveform::new(Vec::new(), self.sample_rate)?;
        Ok(())
    }

    /// Synthesizes the waveform of a transcript: one tone per character,
    /// silence between words.
    pub fn synthesize<R: Rng>(&self, text: &str, rng: &mut R) -> Result<Waveform> {
        let rate = self.sample_rate as f64;
        let char_n = (self.char_ms * rate / 1000.0).round() as usize;
        let gap_n = (self.gap_ms * rate / 1000.0).round() as usize;
        let mut samples = vec![0.0; gap_n];
        for (wi, word) in text.split(' ').enumerate() {
            if wi > 0 {
                samples.extend(std::iter::repeat(0.0).take(gap_n));
            }
            for c in word.chars() {
                let f = char_tone_hz(c);
                let ramp = (char_n / 10).max(1);
                for i in 0..char_n {
                    let env = (i.min(char_n - 1 - i) as f64 / ramp as f64).min(1.0);
                    samples.push(0.5 * env * (2.0 * std::f64::consts::PI * f * i as f64 / rate).sin());
                }
            }
        }
        samples.extend(std::iter::repeat(0.0).take(gap_n));
        if self.noise > 0.0 {
            let n = Normal::new(0.0, self.noise).map_err(|e| Error::Config(e.to_string()))?;
            samples.iter_mut().for_each(|s| *s += n.sample(rng));
        }
        Waveform::new(samples, self.sample_rate)
    }
}

/// Writes `audio/<id>.wav` files and `manifest.jsonl` under `out`.
pub fn make_toy_corpus(spec: &ToySpec, out: impl AsRef<Path>) -> Result<CorpusManifest> {
    spec.validate()?;
    let out = out.as_ref();
    let audio = out.join("audio");
    fs::create_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = Vec::with_capacity(spec.num_utterances);
    let mut seen = HashSet::new();
    let mut i = 0;
    while entries.len() < spec.num_utterances {
        let n = rng.gen_range(spec.min_words..=spec.max_words);
        let words: Vec<&str> = (0..n)
            .map(|_| spec.words[rng.gen_range(0..spec.words.len())].as_str())
            .collect();
        let text = words.join(" ");
        i += 1;
        // Prefer distinct transcripts while the combinatorial space allows.
        if !seen.insert(text.clone()) && i < 20 * spec.num_utterances {
            continue;
        }
        let id = format!("toy{:04}", entries.len());
        let wave = spec.synthesize(&text, &mut rng)?;
        let rel = format!("audio/{id}.wav");
        wave.write_wav(out.join(&rel))?;
        entries.push(ManifestEntry {
            id,
            audio: Some(rel),
            features: None,
            targets: vec![spec.mapping.apply(&text)],
            source: text,
            split: "train".into(),
        });
    }
    let manifest = CorpusManifest {
        base: out.to_path_buf(),
        entries,
    };
    manifest.save(out.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Extracts stacked features for every entry with audio.
pub fn featurize_manifest(manifest: &CorpusManifest, cfg: &FrontendConfig) -> Result<Vec<FeatureSequence>> {
    manifest
        .entries
        .iter()
        .filter_map(|e| e.audio.as_ref().map(|a| (e, a)))
        .map(|(e, a)| {
            let w = Waveform::read_wav(manifest.resolve(a))?;
            stack_features(&e.id, &w, cfg)
        })
        .collect()
}

/// Loads cached features for every entry: from `cache_dir/<id>.sqt` when
/// present there, else from the entry's `features` path.
pub fn load_features(manifest: &CorpusManifest, cache_dir: Option<&Path>) -> Result<HashMap<String, FeatureSequence>> {
    let mut out = HashMap::new();
    for e in &manifest.entries {
        let fs = match (cache_dir, &e.features) {
            (Some(dir), _) if dir.join(format!("{}.sqt", e.id)).exists() => FeatureSequence::load(dir, &e.id)?,
            (_, Some(p)) => {
                let full = manifest.resolve(p);
                let dir = full.parent().unwrap_or(Path::new("."));
                let stem = full
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::Input(format!("bad feature path {p:?}")))?;
                FeatureSequence::load(dir, stem)?
            }
            _ => return Err(Error::Input(format!("no cached features for utterance {:?}", e.id))),
        };
        out.insert(e.id.clone(), fs);
    }
    Ok(out)
}

/// Features for every entry, taken from `cache_dir`, the entry's own
/// feature file, or extracted from its audio, in that order. Entries that
/// fail are reported individually rather than aborting the rest.
pub fn gather_features(
    manifest: &CorpusManifest,
    cache_dir: Option<&Path>,
    cfg: &FrontendConfig,
) -> (HashMap<String, FeatureSequence>, Vec<(String, Error)>) {
    let mut out = HashMap::new();
    let mut failures = Vec::new();
    for e in &manifest.entries {
        let one = CorpusManifest {
            base: manifest.base.clone(),
            entries: vec![e.clone()],
        };
        let cached = cache_dir.is_some_and(|d| d.join(format!("{}.sqt", e.id)).exists());
        let result = if cached || e.features.is_some() {
            load_features(&one, cache_dir).map(|mut m| m.remove(&e.id).expect("loaded entry"))
        } else if let Some(a) = &e.audio {
            Waveform::read_wav(manifest.resolve(a)).and_then(|w| stack_features(&e.id, &w, cfg))
        } else {
            Err(Error::Input(format!("utterance {:?} has neither audio nor features", e.id)))
        };
        match result {
            Ok(fs) => {
                out.insert(e.id.clone(), fs);
            }
            Err(err) => failures.push((e.id.clone(), err)),
        }
    }
    (out, failures)
}

/// What a task reads from a manifest entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Features to source transcript.
    Asr,
    /// Features to the first target translation.
    St,
    /// Source transcript tokens to the first target translation.
    Nmt,
}

impl TaskKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "asr" => Ok(TaskKind::Asr),
            "st" => Ok(TaskKind::St),
            "nmt" => Ok(TaskKind::Nmt),
            other => Err(Error::Config(format!("unknown task {other:?} (expected asr, st or nmt)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Asr => "asr",
            TaskKind::St => "st",
            TaskKind::Nmt => "nmt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExampleInput {
    Features(Tensor),
    Tokens(Vec<usize>),
}

impl ExampleInput {
    pub fn len(&self) -> usize {
        match self {
            ExampleInput::Features(t) => t.shape()[0],
            ExampleInput::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_input(&self) -> crate::encoder::EncoderInput<'_> {
        match self {
            ExampleInput::Features(t) => crate::encoder::EncoderInput::Features(t),
            ExampleInput::Tokens(t) => crate::encoder::EncoderInput::Tokens(t),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub input: ExampleInput,
    pub target: Vec<usize>,
}

/// Builds training examples for one task. Text is normalized here.
pub fn build_examples(
    manifest: &CorpusManifest,
    kind: TaskKind,
    features: &HashMap<String, FeatureSequence>,
    normalizer: Option<&FeatureNormalizer>,
    vocab: &Vocabulary,
) -> Result<Vec<Example>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let first_target = || {
                e.targets
                    .first()
                    .ok_or_else(|| Error::Input(format!("utterance {:?} has no target translation", e.id)))
            };
            let target_text = match kind {
                TaskKind::Asr => &e.source,
                TaskKind::St | TaskKind::Nmt => first_target()?,
            };
            let target = vocab.encode(&normalize_text(target_text));
            if target.is_empty() {
                return Err(Error::Input(format!("utterance {:?} has an empty {} target", e.id, kind.name())));
            }
            let input = match kind {
                TaskKind::Nmt => {
                    let src = vocab.encode(&normalize_text(&e.source));
                    if src.is_empty() {
                        return Err(Error::Input(format!("utterance {:?} has an empty source", e.id)));
                    }
                    ExampleInput::Tokens(src)
                }
                _ => {
                    let fs = features
                        .get(&e.id)
                        .ok_or_else(|| Error::Input(format!("no features for utterance {:?}", e.id)))?;
                    let fs = match normalizer {
                        Some(n) => n.apply(fs)?,
                        None => fs.clone(),
                    };
                    ExampleInput::Features(fs.frames)
                }
            };
            Ok(Example {
                id: e.id.clone(),
                input,
                target,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Indices into the corpus.
    pub indices: Vec<usize>,
    /// Length every member would be padded to.
    pub padded_len: usize,
    /// Per member, `true` for real positions and `false` for padding.
    pub masks: Vec<Vec<bool>>,
}

impl Batch {
    pub fn padding(&self, lengths: &[usize]) -> usize {
        self.indices.iter().map(|&i| self.padded_len - lengths[i]).sum()
    }
}

/// Length-bucketed batching with a seeded shuffle per epoch.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    lengths: Vec<usize>,
    batch_size: usize,
    bucket_width: usize,
    seed: u64,
    epoch: u64,
    pos: usize,
    current: Vec<Batch>,
}

impl BatchIterator {
    pub fn new(lengths: Vec<usize>, batch_size: usize, bucket_width: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if bucket_width == 0 {
            return Err(Error::Config("bucket width must be at least 1".into()));
        }
        if lengths.is_empty() {
            return Err(Error::Config("cannot batch an empty corpus".into()));
        }
        let mut it = BatchIterator {
            lengths,
            batch_size,
            bucket_width,
            seed,
            epoch: 0,
            pos: 0,
            current: Vec::new(),
        };
        it.current = it.plan(0);
        Ok(it)
    }

    /// The batches of one epoch; a pure function of `(seed, epoch)`.
    pub fn plan(&self, epoch: u64) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.lengths.len()).collect();
        order.shuffle(&mut rng);
        order.sort_by_key(|&i| self.lengths[i] / self.bucket_width);
        let mut batches = Vec::new();
        let mut start = 0;
        while start < order.len() {
            let bucket = self.lengths[order[start]] / self.bucket_width;
            let mut end = start;
            while end < order.len() && end - start < self.batch_size && self.lengths[order[end]] / self.bucket_width == bucket {
                end += 1;
            }
            let indices = order[start..end].to_vec();
            let padded_len = indices.iter().map(|&i| self.lengths[i]).max().unwrap_or(0);
            let masks = indices
                .iter()
                .map(|&i| (0..padded_len).map(|t| t < self.lengths[i]).collect())
                .collect();
            batches.push(Batch {
                indices,
                padded_len,
                masks,
            });
            start = end;
        }
        batches.shuffle(&mut rng);
        batches
    }

    /// `(epoch, position within epoch)`.
    pub fn cursor(&self) -> (u64, usize) {
        (self.epoch, self.pos)
    }

    pub fn set_cursor(&mut self, epoch: u64, pos: usize) {
        self.epoch = epoch;
        self.pos = pos;
        self.current = self.plan(epoch);
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.pos >= self.current.len() {
            self.epoch += 1;
            self.pos = 0;
            self.current = self.plan(self.epoch);
        }
        self.pos += 1;
        self.current[self.pos - 1].clone()
    }
}

/// Writes features for every audio entry into `dir` as `<id>.sqt` plus
/// header. Entries whose recorded content hash (audio bytes plus frontend
/// settings) still matches are skipped. Returns
/// `(written, skipped, failures)`.
pub fn cache_features(
    manifest: &CorpusManifest,
    cfg: &FrontendConfig,
    dir: impl AsRef<Path>,
) -> Result<(usize, usize, Vec<(String, Error)>)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (mut written, mut skipped) = (0, 0);
    let mut failures = Vec::new();
    for e in &manifest.entries {
        let Some(audio) = &e.audio else {
            continue;
        };
        let src = manifest.resolve(audio);
        let stamp = dir.join(format!("{}.hash", e.id));
        let result = (|| -> Result<bool> {
            let bytes = fs::read(&src).map_err(|err| Error::io(&src, err))?;
            let digest = content_key(&bytes, cfg);
            if fs::read_to_string(&stamp).ok().as_deref() == Some(digest.as_str())
                && dir.join(format!("{}.sqt", e.id)).exists()
            {
                return Ok(false);
            }
            let w = Waveform::read_wav(&src)?;
            let fs = stack_features(&e.id, &w, cfg)?;
            fs.save(dir, &e.id)?;
            let mut f = fs::File::create(&stamp).map_err(|err| Error::io(&stamp, err))?;
            f.write_all(digest.as_bytes()).map_err(|err| Error::io(&stamp, err))?;
            Ok(true)
        })();
        match result {
            Ok(true) => written += 1,
            Ok(false) => skipped += 1,
            Err(err) => failures.push((src.display().to_string(), err)),
        }
    }
    Ok((written, skipped, failures))
}

fn content_key(audio: &[u8], cfg: &FrontendConfig) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(audio);
    h.update(toml::to_string(cfg).unwrap_or_default().as_bytes());
    hex::encode(h.finalize())
}
