//! Dual tokenization: a k-means codebook for discrete tokens and an affine
//! normalizer for continuous tokens (whose inverse is the decoder).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{frechet_distance, EvalError};
use crate::numerics::{Real, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("need at least {needed} distinct points to fit {needed} codes, found {found}")]
    TooFewDistinct { needed: usize, found: usize },
    #[error("token dimension {found} does not match tokenizer dimension {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid tokenizer argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub inertia: f64,
    pub iterations: usize,
    /// Mean squared distance to the assigned code after each Lloyd step.
    pub inertia_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<S> {
    /// `vocab × dim`, row-major.
    pub vectors: Vec<S>,
    pub vocab: usize,
    pub dim: usize,
    pub fit_stats: FitStats,
}

fn sq_dist<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum()
}

fn nearest<S: Real>(codes: &[S], dim: usize, x: &[S]) -> (usize, S) {
    let mut best = (0, S::infinity());
    for (j, c) in codes.chunks(dim).enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn count_distinct<S: Real>(points: &[S], dim: usize, cap: usize) -> usize {
    let mut seen: Vec<&[S]> = Vec::new();
    for p in points.chunks(dim) {
        if !seen.iter().any(|q| *q == p) {
            seen.push(p);
            if seen.len() >= cap {
                break;
            }
        }
    }
    seen.len()
}

/// k-means++ initialization followed by Lloyd iterations until the
/// assignment stops changing or `max_iters` is reached. Clusters that end
/// up empty are reseeded at the point farthest from its code.
pub fn fit_codebook<S: Real>(
    tokens: &[S],
    dim: usize,
    vocab: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Codebook<S>, TokenizerError> {
    if dim == 0 || vocab == 0 || tokens.len() % dim != 0 {
        return Err(TokenizerError::Invalid(format!(
            "dim {dim}, vocab {vocab}, {} values",
            tokens.len()
        )));
    }
    let distinct = count_distinct(tokens, dim, vocab);
    if distinct < vocab {
        return Err(TokenizerError::TooFewDistinct {
            needed: vocab,
            found: distinct,
        });
    }
    let n = tokens.len() / dim;
    let point = |i: usize| &tokens[i * dim..(i + 1) * dim];
    let mut rng = Rng::new(seed);

    let mut codes: Vec<S> = Vec::with_capacity(vocab * dim);
    codes.extend_from_slice(point(rng.below(n)));
    let mut d2: Vec<S> = (0..n).map(|i| sq_dist(point(i), &codes[..dim])).collect();
    while codes.len() < vocab * dim {
        let total: S = d2.iter().copied().sum();
        let pick = if total > S::zero() {
            rng.categorical(&d2)
        } else {
            // Unreachable with >= vocab distinct points; kept total.
            rng.below(n)
        };
        codes.extend_from_slice(point(pick));
        let newest = codes.len() / dim - 1;
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(point(i), &codes[newest * dim..(newest + 1) * dim]));
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![S::zero(); n];
        for i in 0..n {
            let (j, d) = nearest(&codes, dim, point(i));
            dists[i] = d;
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
        }
        if !changed {
            history.push((dists.iter().copied().sum::<S>() / S::from_usize_lossy(n)).as_f64());
            break;
        }
        let mut sums = vec![S::zero(); vocab * dim];
        let mut counts = vec![0usize; vocab];
        for i in 0..n {
            counts[assign[i]] += 1;
            for c in 0..dim {
                sums[assign[i] * dim + c] += point(i)[c];
            }
        }
        for j in 0..vocab {
            if counts[j] > 0 {
                let cnt = S::from_usize_lossy(counts[j]);
                for c in 0..dim {
                    codes[j * dim + c] = sums[j * dim + c] / cnt;
                }
            }
        }
        for j in 0..vocab {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(point(a), &codes[assign[a] * dim..(assign[a] + 1) * dim]);
                        let db = sq_dist(point(b), &codes[assign[b] * dim..(assign[b] + 1) * dim]);
                        da.partial_cmp(&db).expect("finite distances").then(b.cmp(&a))
                    })
                    .expect("n > 0");
                codes[j * dim..(j + 1) * dim].copy_from_slice(point(far));
                assign[far] = j;
            }
        }
        let inertia: S = (0..n)
            .map(|i| sq_dist(point(i), &codes[assign[i] * dim..(assign[i] + 1) * dim]))
            .sum::<S>()
            / S::from_usize_lossy(n);
        history.push(inertia.as_f64());
    }
    let inertia = *history.last().expect("at least one iteration");
    Ok(Codebook {
        vectors: codes,
        vocab,
        dim,
        fit_stats: FitStats {
            inertia,
            iterations,
            inertia_history: history,
        },
    })
}

impl<S: Real> Codebook<S> {
    pub fn code(&self, j: usize) -> &[S] {
        &self.vectors[j * self.dim..(j + 1) * self.dim]
    }

    /// Nearest code per token; ties go to the lowest index.
    pub fn encode(&self, tokens: &[S]) -> Result<Vec<usize>, TokenizerError> {
        if tokens.len() % self.dim != 0 {
            return Err(TokenizerError::DimMismatch {
                expected: self.dim,
                found: tokens.len() % self.dim,
            });
        }
        Ok(tokens.chunks(self.dim).map(|t| nearest(&self.vectors, self.dim, t).0).collect())
    }

    /// Encodes a sequence whose token width is given explicitly.
    pub fn encode_checked(&self, tokens: &[S], token_dim: usize) -> Result<Vec<usize>, TokenizerError> {
        if token_dim != self.dim {
            return Err(TokenizerError::DimMismatch {
                expected: self.dim,
                found: token_dim,
            });
        }
        self.encode(tokens)
    }

    pub fn lookup(&self, ids: &[usize]) -> Vec<S> {
        ids.iter().flat_map(|&j| self.code(j).iter().copied()).collect()
    }

    pub fn min_code_distance(&self) -> S {
        let mut best = S::infinity();
        for i in 0..self.vocab {
            for j in i + 1..self.vocab {
                best = best.min(sq_dist(self.code(i), self.code(j)).sqrt());
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer<S> {
    pub mean: Vec<S>,
    pub scale: Vec<S>,
}

impl<S: Real> Normalizer<S> {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![S::zero(); dim],
            scale: vec![S::one(); dim],
        }
    }

    /// Per-dimension mean and population standard deviation; a constant
    /// dimension gets scale 1.
    pub fn fit(tokens: &[S], dim: usize) -> Result<Self, TokenizerError> {
        if dim == 0 || tokens.is_empty() || tokens.len() % dim != 0 {
            return Err(TokenizerError::Invalid("normalizer needs a non-empty n×d token matrix".into()));
        }
        let n = S::from_usize_lossy(tokens.len() / dim);
        let mut mean = vec![S::zero(); dim];
        for t in tokens.chunks(dim) {
            for c in 0..dim {
                mean[c] += t[c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![S::zero(); dim];
        for t in tokens.chunks(dim) {
            for c in 0..dim {
                var[c] += (t[c] - mean[c]) * (t[c] - mean[c]);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > S::zero() {
                    s
                } else {
                    S::one()
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, tokens: &[S]) -> Result<(), TokenizerError> {
        if tokens.len() % self.dim() != 0 {
            return Err(TokenizerError::DimMismatch {
                expected: self.dim(),
                found: tokens.len() % self.dim(),
            });
        }
        Ok(())
    }

    /// `(x − mean) / scale`
    pub fn encode(&self, tokens: &[S]) -> Result<Vec<S>, TokenizerError> {
        self.check(tokens)?;
        let d = self.dim();
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - self.mean[i % d]) / self.scale[i % d])
            .collect())
    }

    /// `x · scale + mean`
    pub fn decode(&self, tokens: &[S]) -> Result<Vec<S>, TokenizerError> {
        self.check(tokens)?;
        let d = self.dim();
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(i, &x)| x * self.scale[i % d] + self.mean[i % d])
            .collect())
    }
}

/// Fitted pair of tokenizers. The codebook lives in normalized space.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizers<S> {
    pub codebook: Codebook<S>,
    pub normalizer: Normalizer<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconstructionPath {
    Continuous,
    Discrete,
}

impl<S: Real> Tokenizers<S> {
    pub fn fit(tokens: &[S], dim: usize, vocab: usize, seed: u64, max_iters: usize) -> Result<Self, TokenizerError> {
        let normalizer = Normalizer::fit(tokens, dim)?;
        let normalized = normalizer.encode(tokens)?;
        let codebook = fit_codebook(&normalized, dim, vocab, seed, max_iters)?;
        Ok(Self { codebook, normalizer })
    }

    pub fn encode_discrete(&self, raw: &[S]) -> Result<Vec<usize>, TokenizerError> {
        self.codebook.encode(&self.normalizer.encode(raw)?)
    }

    /// Raw tokens passed through one tokenizer and back.
    pub fn reconstruct(&self, raw: &[S], path: ReconstructionPath) -> Result<Vec<S>, TokenizerError> {
        let z = self.normalizer.encode(raw)?;
        match path {
            ReconstructionPath::Continuous => self.normalizer.decode(&z),
            ReconstructionPath::Discrete => {
                let ids = self.codebook.encode(&z)?;
                self.normalizer.decode(&self.codebook.lookup(&ids))
            }
        }
    }

    /// Fréchet distance between the original pooled tokens and their
    /// reconstruction through `path`.
    pub fn reconstruction_fd(&self, raw: &[S], path: ReconstructionPath) -> Result<S, TokenizerError> {
        let rec = self.reconstruct(raw, path)?;
        Ok(frechet_distance(raw, &rec, self.normalizer.dim())?)
    }
}
