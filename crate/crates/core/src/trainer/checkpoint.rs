//! Binary checkpoints with a plain-text sidecar manifest.

use std::fs;
use std::path::{Path, PathBuf};

use ea_tensor::{Adam, AdamConfig, ParamKind, ParamStore, Tensor};
use sha2::{Digest, Sha256};

use crate::data::TaskMode;
use crate::error::{Error, Result};
use crate::kv;
use crate::models::{Interpolator, ModelConfig};

const MAGIC: &[u8; 8] = b"EAICKPT1";

/// One Adam state per network, in the same order as the model's stores.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub flow: Adam<f32>,
    pub refiner: Option<Adam<f32>>,
    pub frame_critic: Option<Adam<f32>>,
    pub edge_critic: Option<Adam<f32>>,
}

impl Optimizers {
    pub fn new(model: &Interpolator) -> Self {
        let cfg = AdamConfig::default();
        Self {
            flow: Adam::new(model.flow.store(), cfg),
            refiner: model.refiner.as_ref().map(|r| Adam::new(r.store(), cfg)),
            frame_critic: model.frame_critic.as_ref().map(|d| Adam::new(d.store(), cfg)),
            edge_critic: model.edge_critic.as_ref().map(|d| Adam::new(d.store(), cfg)),
        }
    }
}

/// Model, optimizer moments and progress counters.
#[derive(Debug)]
pub struct TrainState {
    pub model: Interpolator,
    pub optim: Optimizers,
    pub mode: TaskMode,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed generator steps.
    pub step: usize,
}

impl TrainState {
    pub fn new(model: Interpolator, mode: TaskMode, seed: u64) -> Self {
        let optim = Optimizers::new(&model);
        Self {
            model,
            optim,
            mode,
            seed,
            epoch: 0,
            step: 0,
        }
    }

    fn sections(&self) -> Vec<(&ParamStore<f32>, &Adam<f32>)> {
        let m = &self.model;
        let o = &self.optim;
        let mut out = vec![(m.flow.store(), &o.flow)];
        if let (Some(r), Some(a)) = (&m.refiner, &o.refiner) {
            out.push((r.store(), a));
        }
        if let (Some(d), Some(a)) = (&m.frame_critic, &o.frame_critic) {
            out.push((d.store(), a));
        }
        if let (Some(d), Some(a)) = (&m.edge_critic, &o.edge_critic) {
            out.push((d.store(), a));
        }
        out
    }

    /// Manifest text: run identity followed by the model configuration.
    pub fn manifest(&self) -> String {
        let cfg = self.model.config();
        let mut entries = vec![
            ("mode".to_string(), self.mode.to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("epoch".to_string(), self.epoch.to_string()),
            ("step".to_string(), self.step.to_string()),
            ("config_hash".to_string(), cfg.hash()),
        ];
        entries.extend(cfg.entries());
        kv::render(&entries)
    }
}

/// Path of the checkpoint written after `epoch`.
pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("{epoch:04}.ckpt"))
}

pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("manifest")
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_floats(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the state; the same state always yields the same bytes.
pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut buf = MAGIC.to_vec();
    let manifest = state.manifest();
    put_u32(&mut buf, manifest.len() as u32);
    buf.extend_from_slice(manifest.as_bytes());
    let sections = state.sections();
    put_u32(&mut buf, sections.len() as u32);
    for (store, adam) in sections {
        put_u32(&mut buf, store.len() as u32);
        for e in store.entries() {
            put_u32(&mut buf, e.name.len() as u32);
            buf.extend_from_slice(e.name.as_bytes());
            buf.push(match e.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            for d in e.value.shape() {
                put_u64(&mut buf, d as u64);
            }
            put_floats(&mut buf, &e.value);
        }
        put_u64(&mut buf, adam.step);
        for (m, v) in adam.first_moment.iter().zip(&adam.second_moment) {
            put_floats(&mut buf, m);
            put_floats(&mut buf, v);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("unexpected end of data")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, shape: [usize; 4]) -> std::result::Result<Tensor<f32>, String> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::from_vec(shape, data).map_err(|e| e.to_string())
    }
}

/// Parsed manifest of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub mode: TaskMode,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    pub config_hash: String,
    pub config: ModelConfig,
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut model = ModelConfig::default();
    let (mut mode, mut seed, mut epoch, mut step, mut hash) = (None, None, None, None, None);
    for (k, v) in kv::parse(text)? {
        match k.as_str() {
            "mode" => mode = Some(v.parse()?),
            "seed" => seed = Some(kv::value(&k, &v)?),
            "epoch" => epoch = Some(kv::value(&k, &v)?),
            "step" => step = Some(kv::value(&k, &v)?),
            "config_hash" => hash = Some(v),
            _ => {
                if !model.set(&k, &v)? {
                    return Err(Error::Config(format!("unknown manifest key `{k}`")));
                }
            }
        }
    }
    let missing = |k: &str| Error::Config(format!("manifest lacks `{k}`"));
    Ok(Manifest {
        mode: mode.ok_or_else(|| missing("mode"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
        epoch: epoch.ok_or_else(|| missing("epoch"))?,
        step: step.ok_or_else(|| missing("step"))?,
        config_hash: hash.ok_or_else(|| missing("config_hash"))?,
        config: model,
    })
}

/// Rebuilds a state from bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> std::result::Result<TrainState, String> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err("not a checkpoint file".into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err("checksum mismatch".into());
    }
    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|e| e.to_string())?;
    let manifest = parse_manifest(text).map_err(|e| e.to_string())?;
    if manifest.config.hash() != manifest.config_hash {
        return Err("manifest config does not match its recorded hash".into());
    }
    let model = Interpolator::build(manifest.config.clone(), manifest.seed).map_err(|e| e.to_string())?;
    let mut state = TrainState::new(model, manifest.mode, manifest.seed);
    state.epoch = manifest.epoch;
    state.step = manifest.step;
    let count = r.u32()? as usize;
    let TrainState { model, optim, .. } = &mut state;
    let mut targets: Vec<(&mut ParamStore<f32>, &mut Adam<f32>)> = vec![(model.flow.store_mut(), &mut optim.flow)];
    if let (Some(m), Some(a)) = (model.refiner.as_mut(), optim.refiner.as_mut()) {
        targets.push((m.store_mut(), a));
    }
    if let (Some(m), Some(a)) = (model.frame_critic.as_mut(), optim.frame_critic.as_mut()) {
        targets.push((m.store_mut(), a));
    }
    if let (Some(m), Some(a)) = (model.edge_critic.as_mut(), optim.edge_critic.as_mut()) {
        targets.push((m.store_mut(), a));
    }
    if count != targets.len() {
        return Err(format!("expected {} parameter sections, found {count}", targets.len()));
    }
    for (store, adam) in targets {
        let n = r.u32()? as usize;
        if n != store.len() {
            return Err(format!("expected {} tensors in a section, found {n}", store.len()));
        }
        for i in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|e| e.to_string())?.to_string();
            let _kind = r.u8()?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u64()? as usize;
            }
            let value = r.floats(shape)?;
            if store.entries()[i].name != name {
                return Err(format!("tensor {i}: expected `{}`, found `{name}`", store.entries()[i].name));
            }
            store.assign(&name, value).map_err(|e| e.to_string())?;
        }
        adam.step = r.u64()?;
        for i in 0..n {
            let shape = store.entries()[i].value.shape();
            adam.first_moment[i] = r.floats(shape)?;
            adam.second_moment[i] = r.floats(shape)?;
        }
    }
    if r.pos != body.len() {
        return Err("trailing data".into());
    }
    Ok(state)
}

/// Writes `path` and its sidecar manifest.
pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io(dir.to_path_buf(), e))?;
    }
    fs::write(path, encode(state)).map_err(|e| Error::Write(path.to_path_buf(), e.to_string()))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, state.manifest()).map_err(|e| Error::Write(mpath, e.to_string()))
}

/// Loads a checkpoint. When `expected` is given, a differing configuration
/// hash is an error unless `force` is set.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>, force: bool) -> Result<TrainState> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::Io(path.to_path_buf(), e))?;
    let state = decode(&bytes).map_err(|e| Error::Checkpoint(path.to_path_buf(), e))?;
    if let Some(expected) = expected {
        let found = state.model.config();
        if found.hash() != expected.hash() {
            let differing: Vec<String> = found
                .entries()
                .into_iter()
                .zip(expected.entries())
                .filter(|(a, b)| a.1 != b.1)
                .map(|(a, b)| format!("{} (checkpoint {}, expected {})", a.0, a.1, b.1))
                .collect();
            let msg = format!("configuration hash mismatch: {}", differing.join("; "));
            if !force {
                return Err(Error::Checkpoint(path.to_path_buf(), msg));
            }
            log::warn!("{}: {msg}; loading anyway", path.display());
        }
    }
    Ok(state)
}
