//! Versioned binary checkpoints.
//!
//! Layout: `"DSCK"`, u16 version, then a payload of little-endian fields
//! (kind tag, config JSON, four tensor groups, counters, PRNG state,
//! optional tokenizers) followed by the CRC-32 of the payload.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::{RngState, Tensor};
use crate::tokenizers::{Codebook, FitStats, Normalizer, Tokenizers};

const MAGIC: &[u8; 4] = b"DSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("expected a {expected:?} checkpoint, found {found:?}")]
    KindMismatch { expected: ModelKind, found: ModelKind },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Prior,
    DisCon,
    Tokenizer,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Prior => 1,
            ModelKind::DisCon => 2,
            ModelKind::Tokenizer => 3,
        }
    }

    fn from_tag(t: u8) -> Result<Self, CheckpointError> {
        Ok(match t {
            1 => ModelKind::Prior,
            2 => ModelKind::DisCon,
            3 => ModelKind::Tokenizer,
            _ => return Err(CheckpointError::Malformed(format!("unknown kind tag {t}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// JSON echo of every configuration the state was produced under.
    pub config_json: String,
    pub names: Vec<String>,
    pub params: Vec<Tensor<f64>>,
    pub ema: Vec<Tensor<f64>>,
    pub adam_m: Vec<Tensor<f64>>,
    pub adam_v: Vec<Tensor<f64>>,
    pub adam_t: u64,
    pub step: u64,
    pub epoch: u64,
    pub rng: RngState,
    pub tokenizers: Option<Tokenizers<f64>>,
}

impl Checkpoint {
    pub fn tokenizer_only(tk: Tokenizers<f64>, config_json: String, seed: u64) -> Self {
        Self {
            kind: ModelKind::Tokenizer,
            config_json,
            names: vec![],
            params: vec![],
            ema: vec![],
            adam_m: vec![],
            adam_v: vec![],
            adam_t: 0,
            step: 0,
            epoch: 0,
            rng: RngState {
                seed,
                stream: 0,
                word_pos: 0,
            },
            tokenizers: Some(tk),
        }
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::KindMismatch {
                expected: kind,
                found: self.kind,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.push(self.kind.tag());
        w.bytes(self.config_json.as_bytes());
        w.u32(self.names.len());
        for n in &self.names {
            w.bytes(n.as_bytes());
        }
        for group in [&self.params, &self.ema, &self.adam_m, &self.adam_v] {
            w.u32(group.len());
            for t in group {
                w.tensor(t);
            }
        }
        for v in [self.adam_t, self.step, self.epoch, self.rng.seed, self.rng.stream] {
            w.u64(v);
        }
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        match &self.tokenizers {
            None => w.0.push(0),
            Some(tk) => {
                w.0.push(1);
                w.u32(tk.normalizer.dim());
                w.f64s(&tk.normalizer.mean);
                w.f64s(&tk.normalizer.scale);
                let cb = &tk.codebook;
                w.u32(cb.vocab);
                w.u32(cb.dim);
                w.f64s(&cb.vectors);
                w.0.extend_from_slice(&cb.fit_stats.inertia.to_le_bytes());
                w.u64(cb.fit_stats.iterations as u64);
                w.u32(cb.fit_stats.inertia_history.len());
                w.f64s(&cb.fit_stats.inertia_history);
            }
        }
        let payload = w.0;
        let mut out = Vec::with_capacity(payload.len() + 10);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 6 {
            return Err(CheckpointError::Truncated);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 10 {
            return Err(CheckpointError::Truncated);
        }
        let payload = &bytes[6..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        let mut r = Reader { buf: payload, pos: 0 };
        match r.checkpoint() {
            Ok(c) if r.pos == payload.len() && computed == stored => Ok(c),
            Err(CheckpointError::Truncated) => Err(CheckpointError::Truncated),
            _ if computed != stored => Err(CheckpointError::Checksum { stored, computed }),
            Ok(_) => Err(CheckpointError::Malformed("trailing bytes after payload".into())),
            Err(e) => Err(e),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        // Write-then-rename so an interrupted save never clobbers a good file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint, lowercase hex.
    pub fn hash(&self) -> String {
        hash_bytes(&self.to_bytes())
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String, std::io::Error> {
    Ok(hash_bytes(&std::fs::read(path)?))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn tensor(&mut self, t: &Tensor<f64>) {
        self.u32(t.shape().len());
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.f64s(t.data());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if n > self.buf.len() - self.pos {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")) as usize)
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn count(&self, n: usize, elem: usize) -> Result<usize, CheckpointError> {
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(CheckpointError::Truncated);
        }
        Ok(n)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let n = self.count(n, 8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()?;
        let b = self.take(n)?.to_vec();
        String::from_utf8(b).map_err(|_| CheckpointError::Malformed("invalid utf-8 string".into()))
    }
    fn tensor(&mut self) -> Result<Tensor<f64>, CheckpointError> {
        let nd = self.u32()?;
        let nd = self.count(nd, 8)?;
        let shape = (0..nd).map(|_| self.u64().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or(CheckpointError::Truncated)?;
        let data = self.f64s(len)?;
        Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
    fn group(&mut self) -> Result<Vec<Tensor<f64>>, CheckpointError> {
        let n = self.u32()?;
        let n = self.count(n, 4)?;
        (0..n).map(|_| self.tensor()).collect()
    }

    fn checkpoint(&mut self) -> Result<Checkpoint, CheckpointError> {
        let kind = ModelKind::from_tag(self.u8()?)?;
        let config_json = self.string()?;
        let n = self.u32()?;
        let n = self.count(n, 4)?;
        let names = (0..n).map(|_| self.string()).collect::<Result<Vec<_>, _>>()?;
        let params = self.group()?;
        let ema = self.group()?;
        let adam_m = self.group()?;
        let adam_v = self.group()?;
        let adam_t = self.u64()?;
        let step = self.u64()?;
        let epoch = self.u64()?;
        let seed = self.u64()?;
        let stream = self.u64()?;
        let word_pos = u128::from_le_bytes(self.take(16)?.try_into().expect("16"));
        let tokenizers = match self.u8()? {
            0 => None,
            1 => {
                let d = self.u32()?;
                let mean = self.f64s(d)?;
                let scale = self.f64s(d)?;
                let vocab = self.u32()?;
                let dim = self.u32()?;
                let vectors = self.f64s(vocab.saturating_mul(dim))?;
                let inertia = self.f64()?;
                let iterations = self.u64()? as usize;
                let h = self.u32()?;
                let inertia_history = self.f64s(h)?;
                Some(Tokenizers {
                    codebook: Codebook {
                        vectors,
                        vocab,
                        dim,
                        fit_stats: FitStats {
                            inertia,
                            iterations,
                            inertia_history,
                        },
                    },
                    normalizer: Normalizer { mean, scale },
                })
            }
            t => return Err(CheckpointError::Malformed(format!("bad tokenizer flag {t}"))),
        };
        if [params.len(), ema.len()].iter().any(|&l| l != names.len()) {
            return Err(CheckpointError::Malformed("tensor groups disagree with parameter names".into()));
        }
        Ok(Checkpoint {
            kind,
            config_json,
            names,
            params,
            ema,
            adam_m,
            adam_v,
            adam_t,
            step,
            epoch,
            rng: RngState { seed, stream, word_pos },
            tokenizers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let t = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let tk = Tokenizers {
            codebook: Codebook {
                vectors: vec![0.0, 1.0, 2.0, 3.0],
                vocab: 2,
                dim: 2,
                fit_stats: FitStats {
                    inertia: 0.5,
                    iterations: 3,
                    inertia_history: vec![1.0, 0.7, 0.5],
                },
            },
            normalizer: Normalizer {
                mean: vec![0.1, 0.2],
                scale: vec![1.5, 2.5],
            },
        };
        Checkpoint {
            kind: ModelKind::DisCon,
            config_json: "{\"a\":1}".into(),
            names: vec!["w".into()],
            params: vec![t.clone()],
            ema: vec![t.clone()],
            adam_m: vec![t.clone()],
            adam_v: vec![t],
            adam_t: 7,
            step: 7,
            epoch: 2,
            rng: RngState {
                seed: 3,
                stream: 4,
                word_pos: 1 << 70,
            },
            tokenizers: Some(tk),
        }
    }

    #[test]
    fn roundtrip_and_hash() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn corruption_is_reported_distinctly() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        let k = flipped.len() - 40;
        flipped[k] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Checksum { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(CheckpointError::Truncated)));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CheckpointError::VersionMismatch { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"NOPE...."), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn kind_check() {
        let c = sample();
        assert!(c.expect_kind(ModelKind::DisCon).is_ok());
        assert!(matches!(c.expect_kind(ModelKind::Prior), Err(CheckpointError::KindMismatch { .. })));
    }
}
