//! Checkpoint files.
//!
//! Layout: the magic `NATRCKPT`, a little-endian `u32` format version, a
//! `u64`-length-prefixed UTF-8 header, a `u64`-length-prefixed payload of
//! little-endian `f32`s, and a SHA-256 digest of everything before it.
//!
//! The header holds `key = value` lines (model and optimiser settings,
//! counters, sampler state, vocabulary) followed by the manifest: one line
//! per parameter tensor (`param NAME DIMS OFFSET LEN`) and per optimiser
//! moment buffer (`moment m|v NAME OFFSET LEN`). Offsets count `f32`
//! elements and must tile the payload exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use natr_core::autograd::{AdamConfig, AdamState, Tensor};
use natr_core::model::{ModelConfig, NatModel};
use natr_core::train::{StepConfig, Trainer};
use natr_core::Vocabulary;

use crate::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"NATRCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint: {what} needs {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("manifest does not match payload: {0}")]
    Manifest(String),
    #[error("checksum mismatch: file is corrupted")]
    Checksum,
    #[error("bad header: {0}")]
    Header(String),
    #[error("checkpoint does not fit the model: {0}")]
    Model(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

/// Where the trainer's sampling stream stands.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub vocab: Vec<String>,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
    pub finetune_step: u64,
    pub rng: Option<RngState>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn dims(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "-".into();
    }
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_dims(s: &str) -> Option<Vec<usize>> {
    if s == "-" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let available = (self.bytes.len() - self.pos) as u64;
        if n > available {
            return Err(CheckpointError::Truncated {
                what,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

impl Checkpoint {
    /// Parameters only, e.g. for averaged weights.
    pub fn of_model(model: &NatModel<f32>, adam: AdamConfig, vocab: &Vocabulary) -> Self {
        Checkpoint {
            model: model.config().clone(),
            adam,
            vocab: vocab.tokens().to_vec(),
            params: model
                .params()
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape.clone(),
                    data: p.value.data.clone(),
                })
                .collect(),
            optimizer: None,
            step: 0,
            finetune_step: 0,
            rng: None,
        }
    }

    /// Parameters, optimiser moments, counters and sampler state.
    pub fn of_trainer(trainer: &Trainer<f32>, vocab: &Vocabulary) -> Self {
        let mut c = Self::of_model(&trainer.model, trainer.adam.config, vocab);
        c.optimizer = Some(OptimizerState {
            t: trainer.adam.t,
            m: trainer.adam.m.clone(),
            v: trainer.adam.v.clone(),
        });
        c.step = trainer.step;
        c.finetune_step = trainer.finetune_step;
        c.rng = Some(RngState::of(&trainer.rng));
        c
    }

    pub fn vocabulary(&self) -> Result<Vocabulary, CheckpointError> {
        Vocabulary::from_tokens(&self.vocab).map_err(|e| CheckpointError::Header(e.to_string()))
    }

    /// A model with this checkpoint's configuration and weights.
    pub fn build_model(&self) -> Result<NatModel<f32>, CheckpointError> {
        let mut model = NatModel::new(self.model.clone(), 0)
            .map_err(|e| CheckpointError::Model(e.to_string()))?;
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(CheckpointError::Model(format!(
                "model has {} tensors, checkpoint {}",
                store.len(),
                self.params.len()
            )));
        }
        for p in &self.params {
            let id = store
                .find(&p.name)
                .ok_or_else(|| CheckpointError::Model(format!("unknown tensor {}", p.name)))?;
            let value = store.value_mut(id);
            if value.shape != p.shape {
                return Err(CheckpointError::Model(format!(
                    "{}: shape {:?} in model, {:?} in checkpoint",
                    p.name, value.shape, p.shape
                )));
            }
            *value = Tensor::new(p.shape.clone(), p.data.clone());
        }
        Ok(model)
    }

    /// A trainer that continues where this checkpoint left off.
    pub fn build_trainer(&self, config: StepConfig) -> Result<Trainer<f32>, CheckpointError> {
        let model = self.build_model()?;
        let mut t = Trainer::new(model, self.adam, config, 0)
            .map_err(|e| CheckpointError::Model(e.to_string()))?;
        if let Some(o) = &self.optimizer {
            t.adam = AdamState {
                config: self.adam,
                m: o.m.clone(),
                v: o.v.clone(),
                t: o.t,
            };
        }
        if let Some(r) = &self.rng {
            t.rng = r.restore();
        }
        t.step = self.step;
        t.finetune_step = self.finetune_step;
        Ok(t)
    }

    fn header_and_payload(&self) -> (String, Vec<f32>) {
        let mut rc = RunConfig::default();
        rc.model = self.model.clone();
        rc.adam = self.adam;
        let mut h = String::new();
        for (k, v) in rc.entries() {
            if k.starts_with("model.") || (k.starts_with("optim.") && k != "optim.reset") {
                let _ = writeln!(h, "{k} = {v}");
            }
        }
        let _ = writeln!(h, "step = {}", self.step);
        let _ = writeln!(h, "finetune_step = {}", self.finetune_step);
        if let Some(r) = &self.rng {
            let _ = writeln!(h, "rng.seed = {}", hex(&r.seed));
            let _ = writeln!(h, "rng.stream = {}", r.stream);
            let _ = writeln!(h, "rng.word_pos = {}", r.word_pos);
        }
        if let Some(o) = &self.optimizer {
            let _ = writeln!(h, "optim.t = {}", o.t);
        }
        let _ = writeln!(h, "vocab = {}", self.vocab.join(" "));

        let mut payload = Vec::new();
        for p in &self.params {
            let _ = writeln!(
                h,
                "param {} {} {} {}",
                p.name,
                dims(&p.shape),
                payload.len(),
                p.data.len()
            );
            payload.extend_from_slice(&p.data);
        }
        if let Some(o) = &self.optimizer {
            for (tag, bufs) in [("m", &o.m), ("v", &o.v)] {
                for (p, buf) in self.params.iter().zip(bufs) {
                    let _ = writeln!(h, "moment {tag} {} {} {}", p.name, payload.len(), buf.len());
                    payload.extend_from_slice(buf);
                }
            }
        }
        (h, payload)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (header, payload) = self.header_and_payload();
        let mut out = Vec::with_capacity(64 + header.len() + 4 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(4 * payload.len() as u64).to_le_bytes());
        for x in &payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = r.u64("header length")?;
        let header = r.take(header_len, "header")?;
        let payload_len = r.u64("payload length")?;
        let payload = r.take(payload_len, "payload")?;
        let body_end = r.pos;
        let digest = r.take(32, "checksum")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Manifest(format!(
                "{} trailing bytes after the checksum",
                bytes.len() - r.pos
            )));
        }
        if payload_len % 4 != 0 {
            return Err(CheckpointError::Manifest(format!(
                "payload of {payload_len} bytes is not a whole number of f32 values"
            )));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let header =
            std::str::from_utf8(header).map_err(|_| CheckpointError::Header("not UTF-8".into()))?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::parse(header, &values)
    }

    fn parse(header: &str, payload: &[f32]) -> Result<Self, CheckpointError> {
        let herr = |m: String| CheckpointError::Header(m);
        let merr = |m: String| CheckpointError::Manifest(m);
        let mut rc = RunConfig::default();
        let mut vocab = None;
        let (mut step, mut finetune_step, mut opt_t) = (0, 0, None);
        let (mut seed, mut stream, mut word_pos) = (None, None, None);
        let mut params = Vec::new();
        let mut moments: [Vec<Vec<f32>>; 2] = [Vec::new(), Vec::new()];
        let mut cursor = 0usize;
        let mut slice = |off: &str, len: &str, what: &str| -> Result<Vec<f32>, CheckpointError> {
            let off: usize = off
                .parse()
                .map_err(|_| merr(format!("{what}: bad offset")))?;
            let len: usize = len
                .parse()
                .map_err(|_| merr(format!("{what}: bad length")))?;
            if off != cursor {
                return Err(merr(format!("{what}: offset {off}, expected {cursor}")));
            }
            if off + len > payload.len() {
                return Err(merr(format!(
                    "{what}: ends at {} past payload of {}",
                    off + len,
                    payload.len()
                )));
            }
            cursor += len;
            Ok(payload[off..off + len].to_vec())
        };
        for line in header.lines() {
            let words: Vec<&str> = line.split(' ').collect();
            match words.as_slice() {
                ["param", name, shape, off, len] => {
                    let shape =
                        parse_dims(shape).ok_or_else(|| merr(format!("{name}: bad shape")))?;
                    let data = slice(off, len, name)?;
                    if shape.iter().product::<usize>() != data.len() {
                        return Err(merr(format!(
                            "{name}: shape {shape:?} does not hold {} values",
                            data.len()
                        )));
                    }
                    params.push(ParamEntry {
                        name: (*name).to_owned(),
                        shape,
                        data,
                    });
                }
                ["moment", tag, name, off, len] => {
                    let which = match *tag {
                        "m" => 0,
                        "v" => 1,
                        _ => return Err(merr(format!("unknown moment `{tag}`"))),
                    };
                    let i = moments[which].len();
                    let p: &ParamEntry = params
                        .get(i)
                        .ok_or_else(|| merr(format!("moment for unknown tensor {name}")))?;
                    let data = slice(off, len, name)?;
                    if p.name != *name || p.data.len() != data.len() {
                        return Err(merr(format!(
                            "moment {tag} {name} does not match tensor {}",
                            p.name
                        )));
                    }
                    moments[which].push(data);
                }
                _ => {
                    let (k, v) = line
                        .split_once(" = ")
                        .ok_or_else(|| herr(format!("unreadable line `{line}`")))?;
                    match k {
                        "vocab" => {
                            vocab = Some(v.split(' ').map(str::to_owned).collect::<Vec<_>>())
                        }
                        "step" => step = v.parse().map_err(|_| herr(format!("bad step `{v}`")))?,
                        "finetune_step" => {
                            finetune_step =
                                v.parse().map_err(|_| herr(format!("bad step `{v}`")))?
                        }
                        "optim.t" => {
                            opt_t = Some(v.parse().map_err(|_| herr(format!("bad optim.t `{v}`")))?)
                        }
                        "rng.seed" => {
                            seed = Some(unhex(v).ok_or_else(|| herr("bad rng seed".into()))?)
                        }
                        "rng.stream" => {
                            stream = Some(v.parse().map_err(|_| herr("bad rng stream".into()))?)
                        }
                        "rng.word_pos" => {
                            word_pos = Some(v.parse().map_err(|_| herr("bad rng position".into()))?)
                        }
                        _ => rc.set(k, v).map_err(|e| herr(e.to_string()))?,
                    }
                }
            }
        }
        if cursor != payload.len() {
            return Err(merr(format!(
                "manifest covers {cursor} values, payload holds {}",
                payload.len()
            )));
        }
        let vocab = vocab.ok_or_else(|| herr("missing vocabulary".into()))?;
        let mut model = rc.model;
        model.vocab_size = vocab.len();
        let [m, v] = moments;
        let optimizer = match opt_t {
            Some(t) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(merr("optimiser moments do not cover every tensor".into()));
                }
                Some(OptimizerState { t, m, v })
            }
            None if m.is_empty() && v.is_empty() => None,
            None => {
                return Err(merr(
                    "moments present without an optimiser step count".into(),
                ))
            }
        };
        let rng = match (seed, stream, word_pos) {
            (Some(seed), Some(stream), Some(word_pos)) => Some(RngState {
                seed,
                stream,
                word_pos,
            }),
            (None, None, None) => None,
            _ => return Err(herr("incomplete sampler state".into())),
        };
        Ok(Checkpoint {
            model,
            adam: rc.adam,
            vocab,
            params,
            optimizer,
            step,
            finetune_step,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
