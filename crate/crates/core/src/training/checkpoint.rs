//! Checkpoint directories: one SQT1 file per tensor plus a key=value
//! manifest, the vocabulary and the configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::trainer::{config_hash, TaskCorpus, TrainState, Trainer, TrainerConfig};
use super::Moments;
use crate::error::{Error, Result};
use crate::frontend::FeatureNormalizer;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const CHECKPOINT_FORMAT: &str = "speechmt-checkpoint-1";

/// A loaded checkpoint. `state` is absent for inference-only exports.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub trainer: TrainerConfig,
    pub vocab: Vocabulary,
    pub normalizer: Option<FeatureNormalizer>,
    pub config_hash: String,
    pub state: TrainState,
}

impl Checkpoint {
    /// Rebuilds a trainer over `corpora`, refusing a configuration whose
    /// hash differs from the one recorded at save time.
    pub fn resume(self, corpora: Vec<TaskCorpus>, expected_hash: &str) -> Result<Trainer> {
        if expected_hash != self.config_hash {
            return Err(Error::Config(format!(
                "checkpoint was written with config hash {} but the current config hashes to {}; \
                 resuming would mix two experiments",
                self.config_hash, expected_hash
            )));
        }
        Trainer::assemble(
            self.model,
            self.trainer,
            self.vocab,
            self.normalizer,
            self.config_hash,
            self.state,
            corpora,
        )
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn rng_fields(prefix: &str, rng: &ChaCha8Rng, out: &mut Vec<(String, String)>) {
    out.push((format!("{prefix}_seed"), hex::encode(rng.get_seed())));
    out.push((format!("{prefix}_stream"), rng.get_stream().to_string()));
    out.push((format!("{prefix}_word_pos"), rng.get_word_pos().to_string()));
}

pub fn save_checkpoint(trainer: &Trainer, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let tensors = dir.join("tensors");
    fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
    let store = &trainer.model.store;
    let st = &trainer.state;
    let mut kv: Vec<(String, String)> = vec![
        ("format".into(), CHECKPOINT_FORMAT.into()),
        ("config_hash".into(), trainer.config_hash.clone()),
        ("step".into(), st.step.to_string()),
        ("num_params".into(), store.len().to_string()),
        ("num_norms".into(), store.norms().len().to_string()),
        ("total_scalars".into(), store.num_scalars().to_string()),
        ("vocab_hash".into(), trainer.vocab.hash_hex()),
        ("normalizer".into(), trainer.normalizer.is_some().to_string()),
    ];
    rng_fields("task_rng", &st.task_rng, &mut kv);
    rng_fields("noise_rng", &st.noise_rng, &mut kv);
    let cursors: Vec<String> = st.cursors.iter().map(|(e, p)| format!("{e}:{p}")).collect();
    kv.push(("cursors".into(), cursors.join(",")));
    for (id, p) in store.iter() {
        let i = id.0;
        kv.push((format!("param.{i:04}"), format!("{} {}", p.name, p.kind.tag())));
        kv.push((format!("adam_steps.{i:04}"), st.adam_steps[i].to_string()));
        p.value.save(tensors.join(format!("p{i:04}.sqt")))?;
        st.moments[i].m.save(tensors.join(format!("m{i:04}.sqt")))?;
        st.moments[i].v.save(tensors.join(format!("v{i:04}.sqt")))?;
    }
    for (i, n) in store.norms().iter().enumerate() {
        kv.push((format!("norm.{i:04}"), format!("{} {}", n.name, n.initialized)));
        Tensor::vector(n.mean.clone()).save(tensors.join(format!("n{i:04}_mean.sqt")))?;
        Tensor::vector(n.var.clone()).save(tensors.join(format!("n{i:04}_var.sqt")))?;
    }
    if let Some(norm) = &trainer.normalizer {
        norm.to_tensor().save(tensors.join("normalizer.sqt"))?;
    }
    let manifest: String = kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    write_text(&dir.join("manifest.txt"), &manifest)?;
    write_text(&dir.join("vocab.txt"), &trainer.vocab.to_file_text())?;
    let model_toml = toml::to_string(&trainer.model.config).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&dir.join("model.toml"), &model_toml)?;
    let trainer_toml = toml::to_string(&trainer.config).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&dir.join("trainer.toml"), &trainer_toml)?;
    Ok(())
}

fn parse_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = read_text(path)?;
    let mut kv = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Manifest {
            path: path.to_path_buf(),
            line: n + 1,
            detail: "expected key=value".into(),
        })?;
        kv.insert(k.to_string(), v.to_string());
    }
    Ok(kv)
}

struct Fields<'a> {
    kv: &'a BTreeMap<String, String>,
    path: &'a Path,
}

impl Fields<'_> {
    fn get(&self, key: &str) -> Result<&str> {
        self.kv
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::corrupt(self.path, format!("missing key {key:?}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::corrupt(self.path, format!("bad value {v:?} for {key:?}")))
    }

    fn rng(&self, prefix: &str) -> Result<ChaCha8Rng> {
        let seed_hex = self.get(&format!("{prefix}_seed"))?;
        let bytes = hex::decode(seed_hex).map_err(|e| Error::corrupt(self.path, e.to_string()))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::corrupt(self.path, format!("{prefix} seed must be 32 bytes")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.parse(&format!("{prefix}_stream"))?);
        rng.set_word_pos(self.parse(&format!("{prefix}_word_pos"))?);
        Ok(rng)
    }
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.txt");
    let kv = parse_manifest(&manifest_path)?;
    let f = Fields {
        kv: &kv,
        path: &manifest_path,
    };
    if f.get("format")? != CHECKPOINT_FORMAT {
        return Err(Error::corrupt(
            &manifest_path,
            format!("unknown checkpoint format {:?}", f.get("format")?),
        ));
    }
    let model_config: ModelConfig = toml::from_str(&read_text(&dir.join("model.toml"))?)
        .map_err(|e| Error::corrupt(dir.join("model.toml"), e.to_string()))?;
    let trainer: TrainerConfig = toml::from_str(&read_text(&dir.join("trainer.toml"))?)
        .map_err(|e| Error::corrupt(dir.join("trainer.toml"), e.to_string()))?;
    let vocab = Vocabulary::parse(&read_text(&dir.join("vocab.txt"))?)?;
    if vocab.hash_hex() != f.get("vocab_hash")? {
        return Err(Error::corrupt(dir.join("vocab.txt"), "vocabulary does not match the recorded hash"));
    }

    let mut model = Model::new(&model_config, 0)?;
    let n_params: usize = f.parse("num_params")?;
    let n_norms: usize = f.parse("num_norms")?;
    if n_params != model.store.len() || n_norms != model.store.norms().len() {
        return Err(Error::corrupt(
            &manifest_path,
            format!(
                "checkpoint holds {n_params} parameters and {n_norms} norms, model config builds {} and {}",
                model.store.len(),
                model.store.norms().len()
            ),
        ));
    }
    let tensors = dir.join("tensors");
    let mut moments = Vec::with_capacity(n_params);
    let mut adam_steps = Vec::with_capacity(n_params);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let i = id.0;
        let recorded = f.get(&format!("param.{i:04}"))?;
        let name = recorded.split(' ').next().unwrap_or_default();
        let expected = &model.store.param(id).name;
        if name != expected {
            return Err(Error::corrupt(
                &manifest_path,
                format!("parameter {i} is {name:?}, model expects {expected:?}"),
            ));
        }
        let load = |stem: &str| -> Result<Tensor> {
            let path = tensors.join(format!("{stem}{i:04}.sqt"));
            let t = Tensor::load(&path)?;
            if t.shape() != model.store.value(id).shape() {
                return Err(Error::corrupt(
                    &path,
                    format!("shape {:?}, expected {:?}", t.shape(), model.store.value(id).shape()),
                ));
            }
            Ok(t)
        };
        let value = load("p")?;
        moments.push(Moments {
            m: load("m")?,
            v: load("v")?,
        });
        *model.store.value_mut(id) = value;
        adam_steps.push(f.parse(&format!("adam_steps.{i:04}"))?);
    }
    for i in 0..n_norms {
        let recorded = f.get(&format!("norm.{i:04}"))?;
        let initialized = recorded.ends_with(" true");
        let mean = Tensor::load(tensors.join(format!("n{i:04}_mean.sqt")))?.into_data();
        let var = Tensor::load(tensors.join(format!("n{i:04}_var.sqt")))?.into_data();
        let s = &mut model.store.norms_mut()[i];
        if mean.len() != s.mean.len() || var.len() != s.var.len() {
            return Err(Error::corrupt(&tensors, format!("norm {i} has the wrong channel count")));
        }
        s.mean = mean;
        s.var = var;
        s.initialized = initialized;
    }
    let normalizer = if f.parse::<bool>("normalizer")? {
        Some(FeatureNormalizer::from_tensor(&Tensor::load(tensors.join("normalizer.sqt"))?)?)
    } else {
        None
    };
    let cursors = f
        .get("cursors")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|c| {
            let (e, p) = c.split_once(':')?;
            Some((e.parse().ok()?, p.parse().ok()?))
        })
        .collect::<Option<Vec<(u64, usize)>>>()
        .ok_or_else(|| Error::corrupt(&manifest_path, "bad batch cursors"))?;
    if cursors.len() != trainer.schedule.tasks.len() {
        return Err(Error::corrupt(&manifest_path, "cursor count differs from the task count"));
    }
    let state = TrainState {
        step: f.parse("step")?,
        moments,
        adam_steps,
        task_rng: f.rng("task_rng")?,
        noise_rng: f.rng("noise_rng")?,
        cursors,
    };
    let recorded_hash = f.get("config_hash")?.to_string();
    Ok(Checkpoint {
        model,
        trainer,
        vocab,
        normalizer,
        config_hash: recorded_hash,
        state,
    })
}

/// Recomputes the default configuration hash of a loaded checkpoint.
pub fn default_hash(ckpt: &Checkpoint) -> String {
    config_hash(&ckpt.model.config, &ckpt.trainer)
}

/// SHA-256 over every file of a checkpoint directory, in path order.
pub fn checkpoint_digest(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(rel.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
