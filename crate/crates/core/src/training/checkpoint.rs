//! Binary checkpoint format:
//!
//! ```text
//! "NLMW" | version u32 | meta_len u32 | meta (UTF-8 key=value lines)
//! then per tensor: name_len u32 | name | rank u32 | dims u64 × rank | f32 × numel
//! ```
//!
//! All integers and floats are little-endian. Adam moments are stored as
//! `<param>.adam.m` and `<param>.adam.v`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use super::optim::{OptimizerKind, OptimizerState};
use super::trainer::TrainState;
use crate::autograd::Tensor;
use crate::error::{CheckpointError, Error, Result};
use crate::kv::KeyValue;
use crate::model::{build_model, ModelConfig, ModelVariant};
use crate::rng::fnv1a;
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"NLMW";
pub const VERSION: u32 = 1;

/// Stable hash of the architecture-defining config.
pub fn config_hash(config: &ModelConfig) -> String {
    let text: String = config.pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    format!("{:016x}", fnv1a(text.as_bytes()))
}

/// Raw decoded contents, before they are matched against a model.
#[derive(Debug, Clone)]
pub struct CheckpointFile {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn encode<'a>(
    meta: impl IntoIterator<Item = (&'a String, &'a String)>,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text: String = meta.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated { what: what.to_string() });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointFile, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::Magic { found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = r.u32("metadata length")? as usize;
    let text = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|e| CheckpointError::Metadata(format!("not UTF-8: {e}")))?;
    let mut meta = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Metadata(format!("line without '=': {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let mut tensors = Vec::new();
    while !r.done() {
        let name_len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|e| CheckpointError::Metadata(format!("tensor name not UTF-8: {e}")))?;
        let rank = r.u32(&format!("rank of {name}"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64(&format!("dims of {name}"))? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Truncated { what: format!("payload of {name}") })?;
        let payload = r.take(bytes, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    Ok(CheckpointFile { meta, tensors })
}

fn bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn from_bits(key: &str, s: &str) -> Result<f64, CheckpointError> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| CheckpointError::Metadata(format!("{key}: bad float bits {s:?}")))
}

fn to_f32<T: Scalar>(t: &Tensor<T>) -> Vec<f32> {
    t.data().iter().map(|v| v.as_f64() as f32).collect()
}

pub fn checkpoint_bytes<T: Scalar>(state: &TrainState<T>) -> Vec<u8> {
    let mut meta: Vec<(String, String)> = vec![
        ("config_hash".into(), config_hash(&state.model.config)),
        ("step".into(), state.step.to_string()),
        ("seed".into(), state.seed.to_string()),
        ("loss_sum".into(), bits(state.loss_sum)),
        ("loss_count".into(), state.loss_count.to_string()),
        ("last_loss".into(), bits(state.last_loss)),
        ("best_valid".into(), state.best_valid.map_or("none".into(), bits)),
        ("optimizer.step".into(), state.optimizer.step.to_string()),
    ];
    let o = &state.optimizer.config;
    meta.extend([
        ("optimizer.kind".into(), o.kind.to_string()),
        ("optimizer.beta1".into(), o.beta1.to_string()),
        ("optimizer.beta2".into(), o.beta2.to_string()),
        ("optimizer.eps".into(), o.eps.to_string()),
        ("optimizer.weight_decay".into(), o.weight_decay.to_string()),
        ("optimizer.clip_norm".into(), crate::kv::format_opt_f64(o.clip_norm)),
    ]);
    let s = &state.schedule;
    meta.extend([
        ("schedule.warmup_steps".into(), s.warmup_steps.to_string()),
        ("schedule.max_steps".into(), s.max_steps.to_string()),
        ("schedule.lr_peak".into(), s.lr_peak.to_string()),
        ("schedule.lr_min".into(), s.lr_min.to_string()),
    ]);
    meta.extend(state.model.config.pairs().into_iter().map(|(k, v)| (format!("model.{k}"), v)));

    let mut tensors = Vec::new();
    for (_, p) in state.model.params.iter() {
        tensors.push((p.name.clone(), p.tensor.shape().to_vec(), to_f32(&p.tensor)));
    }
    if state.optimizer.config.kind == OptimizerKind::Adam {
        for (((_, p), m), v) in state.model.params.iter().zip(&state.optimizer.m).zip(&state.optimizer.v) {
            tensors.push((format!("{}.adam.m", p.name), m.shape().to_vec(), to_f32(m)));
            tensors.push((format!("{}.adam.v", p.name), v.shape().to_vec(), to_f32(v)));
        }
    }
    encode(meta.iter().map(|(k, v)| (k, v)), &tensors)
}

/// Inverse of [`decode`]. Metadata is written in key order.
pub fn encode_file(file: &CheckpointFile) -> Vec<u8> {
    encode(&file.meta, &file.tensors)
}

pub fn checkpoint_save<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so a crash never leaves a half-written file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, checkpoint_bytes(state)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn meta_get<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str, CheckpointError> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| CheckpointError::Metadata(format!("missing key {key}")))
}

fn meta_parse<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T, CheckpointError> {
    let v = meta_get(meta, key)?;
    v.parse()
        .map_err(|_| CheckpointError::Metadata(format!("{key}: cannot parse {v:?}")))
}

/// Model configuration recorded in a checkpoint.
pub fn checkpoint_model_config(file: &CheckpointFile) -> Result<ModelConfig, CheckpointError> {
    let variant: ModelVariant = meta_get(&file.meta, "model.variant")?
        .parse()
        .map_err(|e: Error| CheckpointError::Metadata(e.to_string()))?;
    let mut config = ModelConfig::for_variant(variant);
    for (k, v) in &file.meta {
        if let Some(key) = k.strip_prefix("model.") {
            match config.set(key, v) {
                Ok(true) => {}
                Ok(false) => return Err(CheckpointError::Metadata(format!("unknown model key {key}"))),
                Err(e) => return Err(CheckpointError::Metadata(e)),
            }
        }
    }
    let hash = meta_get(&file.meta, "config_hash")?;
    if hash != config_hash(&config) {
        return Err(CheckpointError::Metadata(format!(
            "config_hash {hash} does not match the recorded model config"
        )));
    }
    Ok(config)
}

/// Keys on which two model configs disagree.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    a.pairs()
        .into_iter()
        .zip(b.pairs())
        .filter(|(x, y)| x.1 != y.1)
        .map(|((k, x), (_, y))| format!("{k} ({x} vs {y})"))
        .collect()
}

/// Rebuilds the full training state. Nothing outside the returned value
/// is touched, so a failed load leaves the caller's state intact.
pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<TrainState<T>> {
    let file = decode(bytes)?;
    let config = checkpoint_model_config(&file)?;
    let meta = &file.meta;
    let seed: u64 = meta_parse(meta, "seed")?;
    let mut model = build_model::<T>(&config, seed)?;

    let m = |e: String| Error::Checkpoint(CheckpointError::Metadata(e));
    let opt = super::optim::OptimizerConfig {
        kind: meta_get(meta, "optimizer.kind")?.parse()?,
        beta1: meta_parse(meta, "optimizer.beta1")?,
        beta2: meta_parse(meta, "optimizer.beta2")?,
        eps: meta_parse(meta, "optimizer.eps")?,
        weight_decay: meta_parse(meta, "optimizer.weight_decay")?,
        clip_norm: crate::kv::parse_opt_f64("optimizer.clip_norm", meta_get(meta, "optimizer.clip_norm")?).map_err(m)?,
    };
    let schedule = super::schedule::ScheduleConfig {
        warmup_steps: meta_parse(meta, "schedule.warmup_steps")?,
        max_steps: meta_parse(meta, "schedule.max_steps")?,
        lr_peak: meta_parse(meta, "schedule.lr_peak")?,
        lr_min: meta_parse(meta, "schedule.lr_min")?,
    };

    let mut records: HashMap<&str, (&[usize], &[f32])> = HashMap::new();
    for (name, shape, data) in &file.tensors {
        records.insert(name.as_str(), (shape.as_slice(), data.as_slice()));
    }
    let adam = opt.kind == OptimizerKind::Adam;
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    for (_, p) in model.params.iter() {
        expected.push((p.name.clone(), p.tensor.shape().to_vec()));
        if adam {
            expected.push((format!("{}.adam.m", p.name), p.tensor.shape().to_vec()));
            expected.push((format!("{}.adam.v", p.name), p.tensor.shape().to_vec()));
        }
    }
    let known: std::collections::HashSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
    let mut unknown: Vec<String> = file
        .tensors
        .iter()
        .map(|(n, _, _)| n.clone())
        .filter(|n| !known.contains(n.as_str()))
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        return Err(CheckpointError::UnknownName { names: unknown }.into());
    }
    let missing: Vec<String> = expected
        .iter()
        .filter(|(n, _)| !records.contains_key(n.as_str()))
        .map(|(n, _)| n.clone())
        .collect();
    if !missing.is_empty() {
        return Err(CheckpointError::MissingName { names: missing }.into());
    }
    let load = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
        let (found, data) = records[name];
        if found != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                found: found.to_vec(),
                expected: shape.to_vec(),
            }
            .into());
        }
        Tensor::new(shape, data.iter().map(|&v| T::of(f64::from(v))).collect())
    };
    let mut moments = (Vec::new(), Vec::new());
    for p in model.params.iter_mut() {
        let shape = p.tensor.shape().to_vec();
        let t = load(&p.name, &shape)?;
        p.tensor.data_mut().copy_from_slice(t.data());
        if adam {
            moments.0.push(load(&format!("{}.adam.m", p.name), &shape)?);
            moments.1.push(load(&format!("{}.adam.v", p.name), &shape)?);
        }
    }
    let mut optimizer = OptimizerState::new(opt, &model.params);
    optimizer.m = moments.0;
    optimizer.v = moments.1;
    optimizer.step = meta_parse(meta, "optimizer.step")?;
    let best = meta_get(meta, "best_valid")?;
    Ok(TrainState {
        model,
        optimizer,
        schedule,
        seed,
        step: meta_parse(meta, "step")?,
        loss_sum: from_bits("loss_sum", meta_get(meta, "loss_sum")?)?,
        loss_count: meta_parse(meta, "loss_count")?,
        last_loss: from_bits("last_loss", meta_get(meta, "last_loss")?)?,
        best_valid: if best == "none" {
            None
        } else {
            Some(from_bits("best_valid", best)?)
        },
    })
}

pub fn checkpoint_load<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Loads a checkpoint whose architecture must equal `expected`.
pub fn checkpoint_load_matching<T: Scalar>(path: &Path, expected: &ModelConfig) -> Result<TrainState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file = decode(&bytes)?;
    let found = checkpoint_model_config(&file)?;
    let diff = config_diff(&found, expected);
    if !diff.is_empty() {
        return Err(CheckpointError::ConfigMismatch(format!("checkpoint vs config: {}", diff.join(", "))).into());
    }
    checkpoint_from_bytes(&bytes)
}
