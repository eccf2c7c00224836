//! Binary persistence for transition datasets and training checkpoints.
//!
//! Dataset file (little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `PVND` |
//! | 4 | u32 version (1) |
//! | 8 | u64 transition count `n` |
//! | 4 | u32 observation dim `d` |
//! | 4 | u32 action count |
//! | 8nd | observations, f64 row-major |
//! | 4n | actions, u32 |
//! | 8nd | next observations, f64 row-major |
//! | n | terminal flags, u8 (0 or 1) |
//! | 8n | episode ids, u64 |
//!
//! Checkpoint file: magic `PVNC`, u32 version, u32 section count, then
//! sections `[u32 tag][u64 length][payload]`, then a SHA-256 digest of every
//! preceding byte. Sections: config (hash and TOML text), encoder (network
//! plus parameter checksum), task family, trainer state (step and RNG
//! position). Files are written to a temporary sibling and renamed into
//! place.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::indicators::{
    ExplicitSetIndicator, HashIndicator, IndicatorTask, QuantileBias, RandomCumulant, RandomNetworkIndicator,
    TaskFamily, TaskKind,
};
use crate::mdp::TransitionDataset;
use crate::nn::{Activation, Dense, Encoder, Mlp};

pub const DATASET_MAGIC: &[u8; 4] = b"PVND";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PVNC";
pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_HEADER_BYTES: usize = 24;

const TAG_CONFIG: u32 = 1;
const TAG_ENCODER: u32 = 2;
const TAG_TASKS: u32 = 3;
const TAG_TRAINER: u32 = 4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version {found}")]
    UnsupportedVersion { found: u32 },

    #[error("truncated file while reading {field}")]
    Truncated { field: &'static str },

    #[error("invalid {field}: {detail}")]
    Invalid { field: &'static str, detail: String },

    #[error("checksum mismatch in {section}")]
    ChecksumMismatch { section: &'static str },

    #[error("missing section {0}")]
    MissingSection(&'static str),

    #[error("config hash mismatch: checkpoint has {stored}, run expects {expected}")]
    ConfigHashMismatch { stored: String, expected: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type StoreResult<T> = std::result::Result<T, StoreError>;

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Writes `bytes` to a temporary file beside `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> StoreResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| StoreError::Io(e.error))?;
    Ok(())
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }
    fn section(&mut self, tag: u32, payload: &[u8]) {
        self.u32(tag);
        self.u64(payload.len() as u64);
        self.bytes(payload);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn take(&mut self, n: usize, field: &'static str) -> StoreResult<&'a [u8]> {
        if self.remaining() < n {
            return Err(StoreError::Truncated { field });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn array<const N: usize>(&mut self, field: &'static str) -> StoreResult<[u8; N]> {
        Ok(self.take(N, field)?.try_into().unwrap())
    }
    fn u8(&mut self, field: &'static str) -> StoreResult<u8> {
        Ok(self.take(1, field)?[0])
    }
    fn u32(&mut self, field: &'static str) -> StoreResult<u32> {
        Ok(u32::from_le_bytes(self.array(field)?))
    }
    fn u64(&mut self, field: &'static str) -> StoreResult<u64> {
        Ok(u64::from_le_bytes(self.array(field)?))
    }
    fn u128(&mut self, field: &'static str) -> StoreResult<u128> {
        Ok(u128::from_le_bytes(self.array(field)?))
    }
    fn f64(&mut self, field: &'static str) -> StoreResult<f64> {
        Ok(f64::from_le_bytes(self.array(field)?))
    }
    /// A length that must fit in the remaining bytes at `unit` bytes each.
    fn len(&mut self, field: &'static str, unit: usize) -> StoreResult<usize> {
        let n = self.u64(field)?;
        if unit > 0 && n > (self.remaining() / unit) as u64 {
            return Err(StoreError::Truncated { field });
        }
        Ok(n as usize)
    }
    fn f64_vec(&mut self, n: usize, field: &'static str) -> StoreResult<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(StoreError::Truncated { field })?, field)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn finish(&self, field: &'static str) -> StoreResult<()> {
        if self.remaining() != 0 {
            return Err(StoreError::Invalid {
                field,
                detail: format!("{} trailing bytes", self.remaining()),
            });
        }
        Ok(())
    }
}

fn check_magic(r: &mut Reader, magic: &[u8; 4]) -> StoreResult<()> {
    let found = r.array::<4>("magic")?;
    if &found != magic {
        return Err(StoreError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion { found: version });
    }
    Ok(())
}

pub fn encode_dataset(d: &TransitionDataset) -> Vec<u8> {
    let n = d.len();
    let dim = d.obs_dim();
    let mut w = Writer {
        buf: Vec::with_capacity(DATASET_HEADER_BYTES + n * (16 * dim + 13)),
    };
    w.bytes(DATASET_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(n as u64);
    w.u32(dim as u32);
    w.u32(d.n_actions);
    w.f64s(d.observations.iter());
    for &a in &d.actions {
        w.u32(a);
    }
    w.f64s(d.next_observations.iter());
    for &t in &d.terminals {
        w.u8(t as u8);
    }
    for &e in &d.episode_ids {
        w.u64(e);
    }
    w.buf
}

pub fn decode_dataset(bytes: &[u8]) -> StoreResult<TransitionDataset> {
    let mut r = Reader::new(bytes);
    check_magic(&mut r, DATASET_MAGIC)?;
    let n = r.u64("transition count")?;
    let dim = r.u32("observation dim")? as usize;
    let n_actions = r.u32("action count")?;
    let per = (16 * dim + 13) as u64;
    if n.checked_mul(per).is_none_or(|b| b > r.remaining() as u64) {
        return Err(StoreError::Truncated { field: "payload" });
    }
    let n = n as usize;
    let obs = r.f64_vec(n * dim, "observations")?;
    let mut actions = Vec::with_capacity(n);
    for _ in 0..n {
        let a = r.u32("actions")?;
        if a >= n_actions {
            return Err(StoreError::Invalid {
                field: "actions",
                detail: format!("action {a} out of range for {n_actions} actions"),
            });
        }
        actions.push(a);
    }
    let next = r.f64_vec(n * dim, "next observations")?;
    let mut terminals = Vec::with_capacity(n);
    for _ in 0..n {
        terminals.push(match r.u8("terminals")? {
            0 => false,
            1 => true,
            v => {
                return Err(StoreError::Invalid {
                    field: "terminals",
                    detail: format!("flag {v}"),
                })
            }
        });
    }
    let mut episode_ids = Vec::with_capacity(n);
    for _ in 0..n {
        episode_ids.push(r.u64("episode ids")?);
    }
    r.finish("payload")?;
    Ok(TransitionDataset {
        n_actions,
        observations: Array2::from_shape_vec((n, dim), obs).expect("length checked"),
        actions,
        next_observations: Array2::from_shape_vec((n, dim), next).expect("length checked"),
        terminals,
        episode_ids,
    })
}

pub fn write_dataset(d: &TransitionDataset, path: &Path) -> StoreResult<()> {
    write_atomic(path, &encode_dataset(d))
}

pub fn read_dataset(path: &Path) -> StoreResult<TransitionDataset> {
    decode_dataset(&fs::read(path)?)
}

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub config_text: String,
    pub encoder: Encoder,
    pub tasks: TaskFamily,
    pub step: u64,
    pub rng: RngState,
}

fn put_mlp(w: &mut Writer, net: &Mlp) {
    w.u64(net.layers.len() as u64);
    for l in &net.layers {
        w.u64(l.fan_in() as u64);
        w.u64(l.fan_out() as u64);
        w.u8(l.activation.tag());
        w.f64s(l.weight.iter());
        w.f64s(l.bias.iter());
    }
}

fn get_mlp(r: &mut Reader) -> StoreResult<Mlp> {
    let count = r.len("layer count", 17)?;
    if count == 0 {
        return Err(StoreError::Invalid {
            field: "layer count",
            detail: "network has no layers".into(),
        });
    }
    let mut layers = Vec::with_capacity(count);
    let mut prev_out = None;
    for _ in 0..count {
        // a head with no tasks has no weights, so only the reads below bound the shape
        let fan_in = r.len("layer shape", 0)?;
        let fan_out = r.len("layer shape", 0)?;
        if prev_out.is_some_and(|p| p != fan_in) {
            return Err(StoreError::Invalid {
                field: "layer shape",
                detail: "layer widths do not chain".into(),
            });
        }
        prev_out = Some(fan_out);
        let tag = r.u8("activation")?;
        let activation = Activation::from_tag(tag).ok_or(StoreError::Invalid {
            field: "activation",
            detail: format!("tag {tag}"),
        })?;
        let n = fan_in.checked_mul(fan_out).ok_or(StoreError::Truncated { field: "weights" })?;
        let weight = Array2::from_shape_vec((fan_in, fan_out), r.f64_vec(n, "weights")?).expect("length read");
        let bias = Array1::from_vec(r.f64_vec(fan_out, "biases")?);
        layers.push(Dense {
            weight,
            bias,
            activation,
        });
    }
    Ok(Mlp { layers })
}

fn encode_tasks(w: &mut Writer, family: &TaskFamily) {
    w.u8(family.kind.tag());
    w.u64(family.tasks.len() as u64);
    for task in &family.tasks {
        match task {
            IndicatorTask::Explicit(e) => {
                w.u8(0);
                w.u64(e.members.len() as u64);
                for &m in &e.members {
                    w.u64(m as u64);
                }
            }
            IndicatorTask::Hash(h) => {
                w.u8(1);
                w.u64(h.modulus);
                w.u64(h.coefficients.len() as u64);
                for &c in &h.coefficients {
                    w.u64(c);
                }
            }
            IndicatorTask::Rni(rni) => {
                w.u8(2);
                put_mlp(w, &rni.network);
                w.f64(rni.quantile.bias);
                w.f64(rni.quantile.target);
                w.f64(rni.quantile.lr);
            }
            IndicatorTask::Cumulant(c) => {
                w.u8(3);
                put_mlp(w, &c.network);
                w.f64(c.scale);
            }
        }
    }
}

fn decode_tasks(r: &mut Reader) -> StoreResult<TaskFamily> {
    let tag = r.u8("task kind")?;
    let kind = TaskKind::from_tag(tag).ok_or(StoreError::Invalid {
        field: "task kind",
        detail: format!("tag {tag}"),
    })?;
    let count = r.len("task count", 1)?;
    let mut tasks = Vec::with_capacity(count);
    for _ in 0..count {
        let variant = r.u8("task variant")?;
        tasks.push(match variant {
            0 => {
                let n = r.len("set size", 8)?;
                let mut members = std::collections::BTreeSet::new();
                for _ in 0..n {
                    members.insert(r.u64("set member")? as usize);
                }
                if members.len() != n {
                    return Err(StoreError::Invalid {
                        field: "set member",
                        detail: "duplicate members".into(),
                    });
                }
                IndicatorTask::Explicit(ExplicitSetIndicator { members })
            }
            1 => {
                let modulus = r.u64("hash modulus")?;
                let n = r.len("hash coefficients", 8)?;
                let coefficients = (0..n).map(|_| r.u64("hash coefficients")).collect::<StoreResult<Vec<_>>>()?;
                IndicatorTask::Hash(HashIndicator::new(coefficients, modulus).map_err(|e| StoreError::Invalid {
                    field: "hash indicator",
                    detail: e.to_string(),
                })?)
            }
            2 => {
                let network = get_mlp(r)?;
                let bias = r.f64("rni bias")?;
                let target = r.f64("rni proportion")?;
                let lr = r.f64("rni learning rate")?;
                IndicatorTask::Rni(RandomNetworkIndicator {
                    network,
                    quantile: QuantileBias { bias, target, lr },
                })
            }
            3 => {
                let network = get_mlp(r)?;
                let scale = r.f64("cumulant scale")?;
                IndicatorTask::Cumulant(RandomCumulant { network, scale })
            }
            v => {
                return Err(StoreError::Invalid {
                    field: "task variant",
                    detail: format!("tag {v}"),
                })
            }
        });
    }
    Ok(TaskFamily { kind, tasks })
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(4);

    let mut s = Writer::default();
    s.bytes(&c.config_hash);
    s.u64(c.config_text.len() as u64);
    s.bytes(c.config_text.as_bytes());
    w.section(TAG_CONFIG, &s.buf);

    let mut s = Writer::default();
    s.u64(c.encoder.n_heads as u64);
    s.u64(c.encoder.n_actions as u64);
    put_mlp(&mut s, &c.encoder.net);
    s.bytes(&c.encoder.net.checksum());
    w.section(TAG_ENCODER, &s.buf);

    let mut s = Writer::default();
    encode_tasks(&mut s, &c.tasks);
    w.section(TAG_TASKS, &s.buf);

    let mut s = Writer::default();
    s.u64(c.step);
    s.bytes(&c.rng.seed);
    s.u64(c.rng.stream);
    s.u128(c.rng.word_pos);
    w.section(TAG_TRAINER, &s.buf);

    let digest = sha256(&w.buf);
    w.bytes(&digest);
    w.buf
}

/// Decodes a checkpoint. With `expected_hash`, a checkpoint written under a
/// different configuration is refused.
pub fn decode_checkpoint(bytes: &[u8], expected_hash: Option<&[u8; 32]>) -> StoreResult<Checkpoint> {
    let mut r = Reader::new(bytes);
    check_magic(&mut r, CHECKPOINT_MAGIC)?;
    if bytes.len() < 12 + 32 {
        return Err(StoreError::Truncated { field: "checksum" });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if sha256(body) != digest {
        return Err(StoreError::ChecksumMismatch { section: "file" });
    }
    let mut r = Reader::new(body);
    r.pos = 8;
    let count = r.u32("section count")?;
    let mut config = None;
    let mut encoder = None;
    let mut tasks = None;
    let mut trainer = None;
    for _ in 0..count {
        let tag = r.u32("section tag")?;
        let len = r.len("section length", 1)?;
        let mut s = Reader::new(r.take(len, "section payload")?);
        match tag {
            TAG_CONFIG => {
                let hash = s.array::<32>("config hash")?;
                let n = s.len("config text", 1)?;
                let text = String::from_utf8(s.take(n, "config text")?.to_vec()).map_err(|_| StoreError::Invalid {
                    field: "config text",
                    detail: "not UTF-8".into(),
                })?;
                s.finish("config section")?;
                config = Some((hash, text));
            }
            TAG_ENCODER => {
                let n_heads = s.u64("head count")? as usize;
                let n_actions = s.u64("action count")? as usize;
                let net = get_mlp(&mut s)?;
                let stored = s.array::<32>("encoder checksum")?;
                s.finish("encoder section")?;
                if net.checksum() != stored {
                    return Err(StoreError::ChecksumMismatch { section: "encoder" });
                }
                if net.output_dim() != n_heads * n_actions {
                    return Err(StoreError::Invalid {
                        field: "head count",
                        detail: format!("{n_heads} x {n_actions} heads vs {} outputs", net.output_dim()),
                    });
                }
                encoder = Some(Encoder { net, n_heads, n_actions });
            }
            TAG_TASKS => {
                tasks = Some(decode_tasks(&mut s)?);
                s.finish("task section")?;
            }
            TAG_TRAINER => {
                let step = s.u64("trainer step")?;
                let seed = s.array::<32>("rng seed")?;
                let stream = s.u64("rng stream")?;
                let word_pos = s.u128("rng position")?;
                s.finish("trainer section")?;
                trainer = Some((step, RngState { seed, stream, word_pos }));
            }
            other => {
                return Err(StoreError::Invalid {
                    field: "section tag",
                    detail: format!("unknown tag {other}"),
                })
            }
        }
    }
    r.finish("checkpoint")?;
    let (config_hash, config_text) = config.ok_or(StoreError::MissingSection("config"))?;
    let encoder = encoder.ok_or(StoreError::MissingSection("encoder"))?;
    let tasks = tasks.ok_or(StoreError::MissingSection("tasks"))?;
    let (step, rng) = trainer.ok_or(StoreError::MissingSection("trainer"))?;
    if let Some(expected) = expected_hash {
        if expected != &config_hash {
            return Err(StoreError::ConfigHashMismatch {
                stored: hex(&config_hash),
                expected: hex(expected),
            });
        }
    }
    Ok(Checkpoint {
        config_hash,
        config_text,
        encoder,
        tasks,
        step,
        rng,
    })
}

pub fn write_checkpoint(c: &Checkpoint, path: &Path) -> StoreResult<()> {
    write_atomic(path, &encode_checkpoint(c))
}

pub fn read_checkpoint(path: &Path, expected_hash: Option<&[u8; 32]>) -> StoreResult<Checkpoint> {
    decode_checkpoint(&fs::read(path)?, expected_hash)
}
