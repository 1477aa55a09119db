//! Synthetic data drawn from a finite set of disjoint continuous modes.
//!
//! Each sample is a class label plus a sequence of `M` continuous tokens in
//! `R^d`; every token comes from one mode of the class's mode subset.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Rng;

const MAGIC: &[u8; 4] = b"DSCN";
pub const FORMAT_VERSION: u16 = 1;
const MIN_SEPARATION: f64 = 6.0;
const PLACEMENT_RETRIES: usize = 1000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid mixture spec: {0}")]
    InvalidSpec(String),
    #[error("could not place {modes} centers at separation {separation} after {retries} retries")]
    Placement {
        modes: usize,
        separation: f64,
        retries: usize,
    },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("dataset format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("dataset file is truncated")]
    Truncated,
    #[error("dataset checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeShape {
    Gaussian,
    Annulus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub n_modes: usize,
    pub token_dim: usize,
    pub seq_len: usize,
    /// Minimum center distance in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    pub mode_shape: ModeShape,
    pub n_classes: usize,
    pub class_to_modes: Vec<Vec<usize>>,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            n_modes: 8,
            token_dim: 2,
            seq_len: 16,
            separation: 10.0,
            sigma: 1.0,
            mode_shape: ModeShape::Gaussian,
            n_classes: 4,
            class_to_modes: (0..4).map(|c| vec![2 * c, 2 * c + 1]).collect(),
        }
    }
}

impl MixtureSpec {
    /// Spec whose classes own consecutive, equally sized groups of modes.
    pub fn grouped(n_modes: usize, token_dim: usize, seq_len: usize, n_classes: usize) -> Self {
        let per = n_modes / n_classes.max(1);
        Self {
            n_modes,
            token_dim,
            seq_len,
            n_classes,
            class_to_modes: (0..n_classes)
                .map(|c| {
                    let end = if c + 1 == n_classes { n_modes } else { (c + 1) * per };
                    (c * per..end).collect()
                })
                .collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.n_modes == 0 || self.token_dim == 0 || self.seq_len == 0 || self.n_classes == 0 {
            return bad("n_modes, token_dim, seq_len and n_classes must be positive".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive and finite, got {}", self.sigma));
        }
        if !(self.separation >= MIN_SEPARATION && self.separation.is_finite()) {
            return bad(format!("separation must be >= {MIN_SEPARATION}, got {}", self.separation));
        }
        if self.class_to_modes.len() != self.n_classes {
            return bad(format!(
                "class_to_modes lists {} classes, expected {}",
                self.class_to_modes.len(),
                self.n_classes
            ));
        }
        let mut owner = vec![None; self.n_modes];
        for (c, modes) in self.class_to_modes.iter().enumerate() {
            if modes.is_empty() {
                return bad(format!("class {c} owns no modes"));
            }
            for &m in modes {
                if m >= self.n_modes {
                    return bad(format!("class {c} references mode {m} >= {}", self.n_modes));
                }
                if let Some(prev) = owner[m].replace(c) {
                    return bad(format!("mode {m} belongs to classes {prev} and {c}"));
                }
            }
        }
        if let Some(m) = owner.iter().position(Option::is_none) {
            return bad(format!("mode {m} belongs to no class"));
        }
        Ok(())
    }

    pub fn mode_class(&self, mode: usize) -> usize {
        self.class_to_modes
            .iter()
            .position(|ms| ms.contains(&mode))
            .expect("validated spec assigns every mode")
    }
}

/// A mixture spec together with its realized mode centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub spec: MixtureSpec,
    /// `n_modes × token_dim`, row-major.
    pub centers: Vec<f64>,
}

fn min_pairwise(centers: &[f64], d: usize) -> f64 {
    let k = centers.len() / d;
    let mut best = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            let dist: f64 = (0..d)
                .map(|c| (centers[i * d + c] - centers[j * d + c]).powi(2))
                .sum::<f64>()
                .sqrt();
            best = best.min(dist);
        }
    }
    best
}

impl Mixture {
    /// Places centers on a jittered lattice whose spacing guarantees the
    /// separation constraint; falls back to rejection sampling if the
    /// verification ever fails.
    pub fn place(spec: &MixtureSpec, rng: &mut Rng) -> Result<Self, DataError> {
        spec.validate()?;
        let (k, d) = (spec.n_modes, spec.token_dim);
        let min_dist = spec.separation * spec.sigma;
        let spacing = 1.5 * min_dist;
        // Per-coordinate jitter of ±a keeps lattice neighbours ≥ spacing − 2a apart.
        let jitter = (spacing - min_dist) / 2.0 * 0.999;
        let mut side = 1usize;
        while side.pow(d as u32) < k {
            side += 1;
        }
        let sites = side.pow(d as u32);
        let mut order = rng.permutation(sites);
        order.truncate(k);
        let offset = (side - 1) as f64 * spacing / 2.0;
        let mut centers = Vec::with_capacity(k * d);
        for &site in &order {
            let mut rest = site;
            for _ in 0..d {
                let coord = (rest % side) as f64 * spacing - offset;
                rest /= side;
                centers.push(coord + rng.uniform_range(-jitter, jitter));
            }
        }
        if k < 2 || min_pairwise(&centers, d) >= min_dist {
            return Ok(Self { spec: spec.clone(), centers });
        }
        let radius = spacing * side as f64;
        for _ in 0..PLACEMENT_RETRIES {
            let cand: Vec<f64> = (0..k * d).map(|_| rng.uniform_range(-radius, radius)).collect();
            if min_pairwise(&cand, d) >= min_dist {
                return Ok(Self {
                    spec: spec.clone(),
                    centers: cand,
                });
            }
        }
        Err(DataError::Placement {
            modes: k,
            separation: spec.separation,
            retries: PLACEMENT_RETRIES,
        })
    }

    pub fn center(&self, mode: usize) -> &[f64] {
        let d = self.spec.token_dim;
        &self.centers[mode * d..(mode + 1) * d]
    }

    pub fn min_center_distance(&self) -> f64 {
        min_pairwise(&self.centers, self.spec.token_dim)
    }

    /// Index of the nearest center and its distance.
    pub fn nearest(&self, token: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for m in 0..self.spec.n_modes {
            let d2: f64 = self.center(m).iter().zip(token).map(|(c, x)| (c - x).powi(2)).sum();
            if d2 < best.1 {
                best = (m, d2);
            }
        }
        (best.0, best.1.sqrt())
    }

    fn draw_point(&self, mode: usize, rng: &mut Rng, out: &mut Vec<f64>) {
        let s = self.spec.sigma;
        let c = self.center(mode);
        match self.spec.mode_shape {
            ModeShape::Gaussian => out.extend(c.iter().map(|&v| v + s * rng.normal::<f64>())),
            ModeShape::Annulus => {
                let dir: Vec<f64> = rng.normal_vec(c.len());
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                let r = 2.0 * s + 0.25 * s * rng.normal::<f64>();
                out.extend(c.iter().zip(&dir).map(|(&v, &u)| v + r * u / norm));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `seq_len × token_dim`, row-major.
    pub tokens: Vec<f64>,
    pub mode_ids: Vec<usize>,
    pub class_label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub mixture: Mixture,
    pub samples: Vec<Sample>,
}

/// Draws `n` samples. Deterministic under `(spec, n, seed)`.
pub fn generate(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::InvalidSpec("sample count must be at least 1".into()));
    }
    let root = Rng::new(seed);
    let mixture = Mixture::place(spec, &mut root.split(0))?;
    let mut rng = root.split(1);
    let samples = (0..n)
        .map(|_| {
            let class_label = rng.below(spec.n_classes);
            let modes = &spec.class_to_modes[class_label];
            let mut tokens = Vec::with_capacity(spec.seq_len * spec.token_dim);
            let mode_ids: Vec<usize> = (0..spec.seq_len)
                .map(|_| {
                    let m = modes[rng.below(modes.len())];
                    mixture.draw_point(m, &mut rng, &mut tokens);
                    m
                })
                .collect();
            Sample {
                tokens,
                mode_ids,
                class_label,
            }
        })
        .collect();
    Ok(Dataset { mixture, samples })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.mixture.spec
    }

    /// All tokens of all samples, `(n·M) × d` row-major.
    pub fn pooled_tokens(&self) -> Vec<f64> {
        self.samples.iter().flat_map(|s| s.tokens.iter().copied()).collect()
    }

    pub fn of_class(&self, class: usize) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.class_label == class)
    }

    /// Stratified split: each class contributes `round(fraction · n_c)`
    /// samples to the first part.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(DataError::InvalidSplit(format!("fraction {fraction} not in (0, 1)")));
        }
        let mut rng = Rng::new(seed);
        let mut in_train = vec![false; self.samples.len()];
        for c in 0..self.spec().n_classes {
            let mut idx: Vec<usize> = (0..self.samples.len())
                .filter(|&i| self.samples[i].class_label == c)
                .collect();
            rng.shuffle(&mut idx);
            let take = (fraction * idx.len() as f64).round() as usize;
            for &i in &idx[..take] {
                in_train[i] = true;
            }
        }
        let pick = |flag: bool| Dataset {
            mixture: self.mixture.clone(),
            samples: self
                .samples
                .iter()
                .zip(&in_train)
                .filter(|(_, &t)| t == flag)
                .map(|(s, _)| s.clone())
                .collect(),
        };
        let (train, val) = (pick(true), pick(false));
        if train.is_empty() || val.is_empty() {
            return Err(DataError::InvalidSplit(format!(
                "fraction {fraction} leaves an empty split ({} / {})",
                train.len(),
                val.len()
            )));
        }
        Ok((train, val))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.spec();
        let mut p = Vec::new();
        let u32le = |p: &mut Vec<u8>, v: usize| p.extend_from_slice(&(v as u32).to_le_bytes());
        u32le(&mut p, spec.n_modes);
        u32le(&mut p, spec.token_dim);
        u32le(&mut p, spec.seq_len);
        p.extend_from_slice(&spec.separation.to_le_bytes());
        p.extend_from_slice(&spec.sigma.to_le_bytes());
        p.push(match spec.mode_shape {
            ModeShape::Gaussian => 0,
            ModeShape::Annulus => 1,
        });
        u32le(&mut p, spec.n_classes);
        for modes in &spec.class_to_modes {
            u32le(&mut p, modes.len());
            for &m in modes {
                u32le(&mut p, m);
            }
        }
        for v in &self.mixture.centers {
            p.extend_from_slice(&v.to_le_bytes());
        }
        p.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            for v in &s.tokens {
                p.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in &self.samples {
            for &m in &s.mode_ids {
                u32le(&mut p, m);
            }
        }
        for s in &self.samples {
            u32le(&mut p, s.class_label);
        }
        let mut out = Vec::with_capacity(p.len() + 10);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&p);
        out.extend_from_slice(&crc32fast::hash(&p).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < 6 {
            return Err(if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                DataError::BadMagic
            } else {
                DataError::Truncated
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(DataError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(DataError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 10 {
            return Err(DataError::Truncated);
        }
        let payload = &bytes[6..bytes.len() - 4];
        let mut r = ByteReader { buf: payload, pos: 0 };
        // Parse before the checksum so a short file reports truncation.
        let parsed = r.dataset();
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let ds = match parsed {
            Ok(ds) if r.pos == payload.len() => ds,
            Ok(_) => return Err(DataError::Malformed("trailing bytes after payload".into())),
            Err(DataError::Truncated) => return Err(DataError::Truncated),
            Err(e) => {
                let computed = crc32fast::hash(payload);
                return Err(if computed != stored {
                    DataError::Checksum { stored, computed }
                } else {
                    e
                });
            }
        };
        let computed = crc32fast::hash(payload);
        if computed != stored {
            return Err(DataError::Checksum { stored, computed });
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DataError> {
        if self.pos + n > self.buf.len() {
            return Err(DataError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn count(&mut self, n: usize, elem: usize) -> Result<usize, DataError> {
        // Bound counts by the remaining bytes so corrupt headers cannot
        // trigger huge allocations.
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(DataError::Truncated);
        }
        Ok(n)
    }

    fn dataset(&mut self) -> Result<Dataset, DataError> {
        let n_modes = self.u32()?;
        let token_dim = self.u32()?;
        let seq_len = self.u32()?;
        let separation = self.f64()?;
        let sigma = self.f64()?;
        let mode_shape = match self.take(1)?[0] {
            0 => ModeShape::Gaussian,
            1 => ModeShape::Annulus,
            t => return Err(DataError::Malformed(format!("unknown mode shape tag {t}"))),
        };
        let n_classes = self.u32()?;
        let n_classes = self.count(n_classes, 4)?;
        let mut class_to_modes = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let len = self.u32()?;
            let len = self.count(len, 4)?;
            class_to_modes.push((0..len).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?);
        }
        let n_centers = self.count(n_modes.saturating_mul(token_dim), 8)?;
        let centers = (0..n_centers).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        let n = self.u64()? as usize;
        let per = seq_len.saturating_mul(token_dim);
        self.count(n.saturating_mul(per), 8)?;
        let mut samples: Vec<Sample> = (0..n)
            .map(|_| {
                Ok(Sample {
                    tokens: (0..per).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?,
                    mode_ids: Vec::new(),
                    class_label: 0,
                })
            })
            .collect::<Result<_, DataError>>()?;
        for s in &mut samples {
            s.mode_ids = (0..seq_len).map(|_| self.u32()).collect::<Result<_, _>>()?;
        }
        for s in &mut samples {
            s.class_label = self.u32()?;
        }
        let spec = MixtureSpec {
            n_modes,
            token_dim,
            seq_len,
            separation,
            sigma,
            mode_shape,
            n_classes,
            class_to_modes,
        };
        spec.validate().map_err(|e| DataError::Malformed(e.to_string()))?;
        Ok(Dataset {
            mixture: Mixture { spec, centers },
            samples,
        })
    }
}
