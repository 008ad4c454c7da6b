//! `MXCM` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MXCM" | version: u32 | count: u32
//! per tensor: name_len: u32 | name (UTF-8) | rank: u32 | extents: u64 * rank | payload: f64 * numel
//! ```
//!
//! Optimizer state shares the container under the reserved `adam/` prefix;
//! trainer bookkeeping lives under `train/`.

use std::path::Path;

use thiserror::Error;

use super::{AdamConfig, AdamState, ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MXCM";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_PREFIX: &str = "adam/";
const TRAIN_PREFIX: &str = "train/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: &Tensor) {
        let name = name.into();
        let value = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("tensor is consistent");
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parameters plus, optionally, the optimizer state that tracks them.
    pub fn from_params(params: &ParamSet, adam: Option<&AdamState>) -> Self {
        let mut ck = Self::new();
        for (name, t) in params.iter() {
            ck.insert(name, t);
        }
        if let Some(state) = adam {
            let c = state.config;
            ck.insert(
                format!("{ADAM_PREFIX}config"),
                &Tensor::new(&[5], vec![c.learning_rate, c.beta1, c.beta2, c.epsilon, c.weight_decay])
                    .expect("5 values"),
            );
            ck.insert(format!("{ADAM_PREFIX}step"), &Tensor::scalar(state.step as f64));
            for (i, (name, t)) in params.iter().enumerate() {
                let m = Tensor::new(t.shape(), state.first[i].clone()).expect("moment shape");
                let v = Tensor::new(t.shape(), state.second[i].clone()).expect("moment shape");
                ck.insert(format!("{ADAM_PREFIX}m/{name}"), &m);
                ck.insert(format!("{ADAM_PREFIX}v/{name}"), &v);
            }
        }
        ck
    }

    pub fn set_train_value(&mut self, key: &str, value: f64) {
        self.insert(format!("{TRAIN_PREFIX}{key}"), &Tensor::scalar(value));
    }

    pub fn train_value(&self, key: &str) -> Option<f64> {
        self.get(&format!("{TRAIN_PREFIX}{key}")).map(|t| t.data()[0])
    }

    /// Every entry outside the reserved prefixes, as trainable parameters.
    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, t) in &self.entries {
            if !name.starts_with(ADAM_PREFIX) && !name.starts_with(TRAIN_PREFIX) {
                p.push(name.clone(), t.clone());
            }
        }
        p
    }

    /// Optimizer state aligned with `params`, if the checkpoint carries one.
    pub fn adam_state(&self, params: &ParamSet) -> Result<Option<AdamState>, CheckpointError> {
        let Some(cfg) = self.get(&format!("{ADAM_PREFIX}config")) else {
            return Ok(None);
        };
        let c = cfg.data();
        if c.len() != 5 {
            return Err(CheckpointError::Malformed("adam config must hold 5 values".into()));
        }
        let step = self
            .get(&format!("{ADAM_PREFIX}step"))
            .ok_or_else(|| CheckpointError::Malformed("adam step missing".into()))?
            .data()[0];
        let moment = |kind: &str, name: &str, numel: usize| {
            let t = self
                .get(&format!("{ADAM_PREFIX}{kind}/{name}"))
                .ok_or_else(|| CheckpointError::Malformed(format!("adam {kind} missing for {name}")))?;
            if t.numel() != numel {
                return Err(CheckpointError::Malformed(format!(
                    "adam {kind} shape mismatch for {name}"
                )));
            }
            Ok(t.data().to_vec())
        };
        let mut first = Vec::with_capacity(params.len());
        let mut second = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            first.push(moment("m", name, t.numel())?);
            second.push(moment("v", name, t.numel())?);
        }
        Ok(Some(AdamState {
            config: AdamConfig {
                learning_rate: c[0],
                beta1: c[1],
                beta2: c[2],
                epsilon: c[3],
                weight_decay: c[4],
            },
            step: step as u64,
            first,
            second,
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic {
                found: magic,
                expected: *CHECKPOINT_MAGIC,
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| CheckpointError::InvalidName)?
                .to_owned();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64("extent")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| CheckpointError::Malformed(format!("extent overflow in {name}")))?;
            let bytes = numel
                .checked_mul(8)
                .ok_or_else(|| CheckpointError::Malformed(format!("extent overflow in {name}")))?;
            let payload = r.take(bytes, "payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).expect("payload sized from shape");
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ParamSet {
        let mut p = ParamSet::new();
        p.push("conv.weight", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.1 - 0.4));
        p.push("fc.bias", Tensor::from_fn(&[2], |i| -(i as f64)));
        p
    }

    #[test]
    fn header_layout() {
        let bytes = Checkpoint::from_params(&sample_params(), None).to_bytes();
        assert_eq!(&bytes[..4], b"MXCM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 11);
        assert_eq!(&bytes[16..27], b"conv.weight");
        // name, rank, 4 extents, 18 doubles; then the bias entry.
        let first = 4 + 11 + 4 + 4 * 8 + 18 * 8;
        assert_eq!(bytes.len(), 12 + first + (4 + 7 + 4 + 8 + 2 * 8));
    }

    #[test]
    fn adam_state_round_trips() {
        let mut params = sample_params();
        for (_, t) in params.iter_mut() {
            let g = vec![0.25; t.numel()];
            t.accumulate_grad(&g).unwrap();
        }
        let mut state = AdamState::new(&params, AdamConfig::default());
        state.step(&mut params).unwrap();
        let ck = Checkpoint::from_params(&params, Some(&state));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let restored = back.params();
        assert_eq!(restored.len(), 2);
        let restored_state = back.adam_state(&restored).unwrap().unwrap();
        assert_eq!(restored_state, state);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn rejects_corrupt_input() {
        let bytes = Checkpoint::from_params(&sample_params(), None).to_bytes();
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(CheckpointError::Truncated(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&long),
            Err(CheckpointError::Malformed(_))
        ));
    }
}
