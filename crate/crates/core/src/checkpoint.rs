//! Versioned checkpoint container.
//!
//! Layout: the magic line `EVACKPT1`, `header_len=<bytes>`, a text header of
//! `key=value` lines, `header_crc32=<hex>`, then the tensors as raw
//! little-endian f64. The header carries the model config (flattened to
//! dotted keys), the task words, training progress and a tensor directory
//! with name, shape, payload offset and CRC32 per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::data::TaskInfo;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Adam, AdamConfig, AdamMoments, Tensor};

pub const MAGIC: &[u8] = b"EVACKPT1\n";
pub const VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to continue it exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub cfg: AdamConfig,
    pub step: u64,
    /// Moments by parameter name.
    pub moments: BTreeMap<String, AdamMoments>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub task: TaskInfo,
    /// Parameter tensors in store order.
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
    pub progress: Progress,
    /// Free-form JSON values, e.g. the training configuration.
    pub extra: BTreeMap<String, Value>,
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, task: &TaskInfo, store: &ParamStore) -> Self {
        Checkpoint {
            config: config.clone(),
            task: task.clone(),
            params: store.ids().map(|id| (store.name(id).to_string(), store.get(id).clone())).collect(),
            optimizer: None,
            progress: Progress::default(),
            extra: BTreeMap::new(),
        }
    }

    pub fn with_optimizer(mut self, store: &ParamStore, adam: &Adam) -> Self {
        let moments = store.ids().map(|id| (store.name(id).to_string(), adam.moments[id.index()].clone())).collect();
        self.optimizer = Some(OptimizerState { cfg: adam.cfg, step: adam.step, moments });
        self
    }

    /// Builds the model described by the stored config and fills it.
    pub fn restore_model(&self) -> Result<(Model, ParamStore)> {
        let (model, mut store) = Model::new(self.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        self.load_params_into(&mut store)?;
        Ok((model, store))
    }

    /// Copies tensors into `store` by name. Any missing, unexpected or
    /// differently shaped tensor is reported; nothing is copied then.
    pub fn load_params_into(&self, store: &mut ParamStore) -> Result<()> {
        let stored: BTreeMap<&str, &Tensor> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut diffs = Vec::new();
        for id in store.ids() {
            let name = store.name(id);
            match stored.get(name) {
                None => diffs.push(format!("  missing in checkpoint: {name} {:?}", store.get(id).shape())),
                Some(t) if t.shape() != store.get(id).shape() => diffs.push(format!(
                    "  shape mismatch: {name} checkpoint {:?} vs model {:?}",
                    t.shape(),
                    store.get(id).shape()
                )),
                _ => {}
            }
        }
        for (name, t) in &stored {
            if store.find(name).is_none() {
                diffs.push(format!("  not in model: {name} {:?}", t.shape()));
            }
        }
        if !diffs.is_empty() {
            return Err(Error::CheckpointShape(diffs.join("\n")));
        }
        for id in store.ids().collect::<Vec<_>>() {
            let t = stored[store.name(id)].clone();
            store.set(id, t)?;
        }
        Ok(())
    }

    /// Optimizer aligned with `store`, or a fresh one if none was saved.
    pub fn restore_optimizer(&self, store: &ParamStore, fallback: AdamConfig) -> Result<Adam> {
        let Some(opt) = &self.optimizer else {
            return Ok(Adam::new(store, fallback));
        };
        let mut adam = Adam::new(store, opt.cfg);
        adam.step = opt.step;
        for id in store.ids() {
            let name = store.name(id);
            let m = opt
                .moments
                .get(name)
                .ok_or_else(|| Error::CheckpointShape(format!("  optimizer state missing for {name}")))?;
            if m.m.shape() != store.get(id).shape() {
                return Err(Error::CheckpointShape(format!("  optimizer state shape mismatch for {name}")));
            }
            adam.moments[id.index()] = m.clone();
        }
        Ok(adam)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write then rename so a crash never leaves a truncated file behind.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        let mut line = |k: &str, v: &str| {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        };
        line("version", &VERSION.to_string());
        let mut flat = Vec::new();
        flatten("config", &serde_json::to_value(&self.config)?, &mut flat);
        for (k, v) in &flat {
            line(k, v);
        }
        line("task.words", &self.task.words.join(" "));
        for g in &self.task.homophone_groups {
            line("task.group", &g.join(" "));
        }
        let p = &self.progress;
        line("progress.epoch", &p.epoch.to_string());
        line("progress.step", &p.step.to_string());
        line("progress.rng", &format!("{} {} {}", p.rng.seed, p.rng.stream, p.rng.word_pos));
        for (k, v) in &self.extra {
            line(&format!("extra.{k}"), &serde_json::to_string(v)?);
        }
        let mut tensors: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (format!("param.{n}"), t)).collect();
        if let Some(opt) = &self.optimizer {
            line("adam.config", &serde_json::to_string(&opt.cfg)?);
            line("adam.step", &opt.step.to_string());
            for (n, m) in &opt.moments {
                tensors.push((format!("adam.m.{n}"), &m.m));
                tensors.push((format!("adam.v.{n}"), &m.v));
            }
        }
        let mut payload = Vec::new();
        for (name, t) in &tensors {
            if name.contains(char::is_whitespace) {
                return Err(Error::Checkpoint(format!("tensor name {name:?} contains whitespace")));
            }
            let start = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&payload[start..]);
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            line("tensor", &format!("{name} {} {start} {crc:08x}", shape.join("x")));
        }
        let mut out = Vec::with_capacity(header.len() + payload.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(format!("header_len={}\n", header.len()).as_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(format!("header_crc32={:08x}\n", crc32fast::hash(header.as_bytes())).as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("not a checkpoint (bad magic)"))?;
        let (len_line, rest) = split_line(rest).ok_or_else(|| bad("truncated header length"))?;
        let header_len: usize = len_line
            .strip_prefix("header_len=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("malformed header length"))?;
        if rest.len() < header_len {
            return Err(bad("truncated header"));
        }
        let (header_bytes, rest) = rest.split_at(header_len);
        let (crc_line, payload) = split_line(rest).ok_or_else(|| bad("missing header checksum"))?;
        let stored = crc_line
            .strip_prefix("header_crc32=")
            .and_then(|v| u32::from_str_radix(v, 16).ok())
            .ok_or_else(|| bad("malformed header checksum"))?;
        let computed = crc32fast::hash(header_bytes);
        if stored != computed {
            return Err(Error::Checksum { section: "header".into(), stored, computed });
        }
        let header = std::str::from_utf8(header_bytes).map_err(|_| bad("header is not UTF-8"))?;

        let mut version = None;
        let mut config_flat = Vec::new();
        let mut task = TaskInfo::default();
        let mut progress = Progress::default();
        let mut extra = BTreeMap::new();
        let mut adam_cfg = None;
        let mut adam_step = None;
        let mut params = Vec::new();
        let mut moments: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(&format!("malformed header line {line:?}")))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| bad(&format!("bad number in {line:?}")));
            match k {
                "version" => version = Some(num(v)?),
                "task.words" => task.words = v.split_whitespace().map(str::to_string).collect(),
                "task.group" => task.homophone_groups.push(v.split_whitespace().map(str::to_string).collect()),
                "progress.epoch" => progress.epoch = num(v)? as usize,
                "progress.step" => progress.step = num(v)?,
                "progress.rng" => {
                    let parts: Vec<&str> = v.split_whitespace().collect();
                    let [seed, stream, pos] = parts[..] else {
                        return Err(bad("malformed rng state"));
                    };
                    progress.rng = RngState {
                        seed: num(seed)?,
                        stream: num(stream)?,
                        word_pos: pos.parse().map_err(|_| bad("malformed rng position"))?,
                    };
                }
                "adam.config" => adam_cfg = Some(serde_json::from_str::<AdamConfig>(v)?),
                "adam.step" => adam_step = Some(num(v)?),
                "tensor" => {
                    let (name, t) = read_tensor(v, payload)?;
                    if let Some(p) = name.strip_prefix("param.") {
                        params.push((p.to_string(), t));
                    } else if let Some(p) = name.strip_prefix("adam.m.") {
                        moments.entry(p.to_string()).or_default().0 = Some(t);
                    } else if let Some(p) = name.strip_prefix("adam.v.") {
                        moments.entry(p.to_string()).or_default().1 = Some(t);
                    } else {
                        return Err(bad(&format!("unknown tensor {name}")));
                    }
                }
                _ if k.starts_with("config.") => config_flat.push((k.to_string(), v.to_string())),
                _ if k.starts_with("extra.") => {
                    extra.insert(k["extra.".len()..].to_string(), serde_json::from_str(v)?);
                }
                _ => return Err(bad(&format!("unknown header key {k:?}"))),
            }
        }
        match version {
            Some(v) if v == VERSION as u64 => {}
            Some(v) => return Err(Error::Checkpoint(format!("unsupported version {v}, expected {VERSION}"))),
            None => return Err(bad("missing version")),
        }
        let config: ModelConfig = serde_json::from_value(unflatten("config", &config_flat)?)?;
        let optimizer = match (adam_cfg, adam_step) {
            (Some(cfg), Some(step)) => {
                let mut out = BTreeMap::new();
                for (name, pair) in moments {
                    let (Some(m), Some(v)) = pair else {
                        return Err(bad(&format!("incomplete optimizer state for {name}")));
                    };
                    out.insert(name, AdamMoments { m, v });
                }
                Some(OptimizerState { cfg, step, moments: out })
            }
            (None, None) if moments.is_empty() => None,
            _ => return Err(bad("incomplete optimizer section")),
        };
        Ok(Checkpoint { config, task, params, optimizer, progress, extra })
    }
}

fn split_line(bytes: &[u8]) -> Option<(&str, &[u8])> {
    let end = bytes.iter().position(|&b| b == b'\n')?;
    let line = std::str::from_utf8(&bytes[..end]).ok()?;
    Some((line, &bytes[end + 1..]))
}

fn read_tensor(entry: &str, payload: &[u8]) -> Result<(String, Tensor)> {
    let bad = || Error::Checkpoint(format!("malformed tensor entry {entry:?}"));
    let parts: Vec<&str> = entry.split_whitespace().collect();
    let [name, shape, offset, crc] = parts[..] else {
        return Err(bad());
    };
    let shape: Vec<usize> = shape.split('x').map(|d| d.parse().map_err(|_| bad())).collect::<Result<_>>()?;
    let offset: usize = offset.parse().map_err(|_| bad())?;
    let stored = u32::from_str_radix(crc, 16).map_err(|_| bad())?;
    let count: usize = shape.iter().product();
    let end = offset.checked_add(count * 8).ok_or_else(bad)?;
    let bytes = payload
        .get(offset..end)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the end of the file")))?;
    let computed = crc32fast::hash(bytes);
    if stored != computed {
        return Err(Error::Checksum { section: name.to_string(), stored, computed });
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((name.to_string(), Tensor::new(shape, data)?))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, child) in map {
                flatten(&format!("{prefix}.{k}"), child, out);
            }
        }
        _ => out.push((prefix.to_string(), v.to_string())),
    }
}

fn unflatten(prefix: &str, flat: &[(String, String)]) -> Result<Value> {
    let mut root = Map::new();
    for (key, raw) in flat {
        let path: Vec<&str> = key[prefix.len() + 1..].split('.').collect();
        let value: Value = serde_json::from_str(raw)?;
        let mut node = &mut root;
        for part in &path[..path.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .ok_or_else(|| Error::Checkpoint(format!("config key {key} conflicts with a value")))?;
        }
        node.insert(path[path.len() - 1].to_string(), value);
    }
    Ok(Value::Object(root))
}
