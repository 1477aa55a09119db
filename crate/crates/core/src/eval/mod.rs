//! Distribution-level metrics on token sets: a Fréchet distance between
//! Gaussian moment fits, and mode-level hit / artifact statistics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::linalg::{matmul, sqrt_psd};
use crate::numerics::Real;
use crate::synthdata::Mixture;

pub mod oracle;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("need at least {needed} points of dimension {dim}, got {found}")]
    TooFewPoints { needed: usize, found: usize, dim: usize },
    #[error("token array of length {len} is not a multiple of dimension {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("instance too large to enumerate: {0}")]
    TooLarge(String),
    #[error("{0}")]
    Model(String),
}

/// Diagonal added to both covariances before the distance is taken.
pub const COV_REGULARIZER: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments<S> {
    pub mean: Vec<S>,
    /// `d×d`, row-major, unbiased.
    pub covariance: Vec<S>,
}

impl<S: Real> GaussianMoments<S> {
    pub fn fit(points: &[S], dim: usize) -> Result<Self, EvalError> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(EvalError::Ragged { len: points.len(), dim });
        }
        let n = points.len() / dim;
        if n < dim + 1 || n < 2 {
            return Err(EvalError::TooFewPoints {
                needed: (dim + 1).max(2),
                found: n,
                dim,
            });
        }
        let nf = S::from_usize_lossy(n);
        let mut mean = vec![S::zero(); dim];
        for p in points.chunks(dim) {
            for (m, &x) in mean.iter_mut().zip(p) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut cov = vec![S::zero(); dim * dim];
        for p in points.chunks(dim) {
            for i in 0..dim {
                let di = p[i] - mean[i];
                for j in i..dim {
                    cov[i * dim + j] += di * (p[j] - mean[j]);
                }
            }
        }
        let denom = S::from_usize_lossy(n - 1);
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / denom;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        Ok(Self { mean, covariance: cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fréchet distance to `other`, both covariances regularized.
    pub fn frechet(&self, other: &Self) -> S {
        let d = self.dim();
        let reg = |c: &[S]| {
            let mut c = c.to_vec();
            for i in 0..d {
                c[i * d + i] += S::lit(COV_REGULARIZER);
            }
            c
        };
        let a = reg(&self.covariance);
        let b = reg(&other.covariance);
        // Tr((A B)^{1/2}) = Tr((A^{1/2} B A^{1/2})^{1/2}); the inner product
        // is symmetric PSD, which keeps the square root real.
        let ra = sqrt_psd(&a, d);
        let inner = matmul(&matmul(&ra, &b, d, d, d), &ra, d, d, d);
        let mut sym = inner.clone();
        for i in 0..d {
            for j in 0..d {
                sym[i * d + j] = (inner[i * d + j] + inner[j * d + i]) * S::lit(0.5);
            }
        }
        let root = sqrt_psd(&sym, d);
        let mut dist = S::zero();
        for i in 0..d {
            let dm = self.mean[i] - other.mean[i];
            dist += dm * dm;
            dist += a[i * d + i] + b[i * d + i] - S::lit(2.0) * root[i * d + i];
        }
        dist.max(S::zero())
    }
}

pub fn frechet_distance<S: Real>(a: &[S], b: &[S], dim: usize) -> Result<S, EvalError> {
    Ok(GaussianMoments::fit(a, dim)?.frechet(&GaussianMoments::fit(b, dim)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub hits: Vec<usize>,
    pub coverage: f64,
    pub purity: f64,
    pub ood_rate: f64,
    pub n_tokens: usize,
}

/// Nearest-center statistics. A hit is a token within 3σ of its nearest
/// center; tokens beyond 6σ of every center count as artifacts.
pub fn mode_report(tokens: &[f64], mixture: &Mixture) -> ModeReport {
    let spec = &mixture.spec;
    let d = spec.token_dim;
    let mut hits = vec![0usize; spec.n_modes];
    let (mut inside, mut ood) = (0usize, 0usize);
    let n = tokens.len() / d;
    for t in tokens.chunks_exact(d) {
        let (mode, dist) = mixture.nearest(t);
        if dist <= 3.0 * spec.sigma {
            hits[mode] += 1;
            inside += 1;
        } else if dist > 6.0 * spec.sigma {
            ood += 1;
        }
    }
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    ModeReport {
        coverage: hits.iter().filter(|h| **h > 0).count() as f64 / spec.n_modes as f64,
        purity: frac(inside),
        ood_rate: frac(ood),
        hits,
        n_tokens: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::synthdata::{generate, MixtureSpec};

    fn cloud(n: usize, d: usize, rng: &mut Rng, shift: f64) -> Vec<f64> {
        (0..n * d).map(|i| rng.normal::<f64>() * (1.0 + (i % d) as f64 * 0.5) + shift).collect()
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = Rng::new(1);
        let a = cloud(500, 3, &mut rng, 0.0);
        assert!(frechet_distance(&a, &a, 3).unwrap().abs() < 1e-9);
    }

    #[test]
    fn mean_shift_gives_squared_norm() {
        let mut rng = Rng::new(2);
        let a = cloud(400, 2, &mut rng, 0.0);
        let delta = [1.5, -0.5];
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + delta[i % 2]).collect();
        let fd = frechet_distance(&a, &b, 2).unwrap();
        assert!((fd - 2.5).abs() < 1e-9, "{fd}");
    }

    #[test]
    fn symmetric_and_non_negative() {
        let mut rng = Rng::new(3);
        let a = cloud(50, 4, &mut rng, 0.0);
        let b = cloud(60, 4, &mut rng, 0.3);
        let ab = frechet_distance(&a, &b, 4).unwrap();
        let ba = frechet_distance(&b, &a, 4).unwrap();
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-9);
    }

    #[test]
    fn too_few_points() {
        let a = vec![0.0; 4];
        assert!(matches!(frechet_distance(&a, &a, 2), Err(EvalError::TooFewPoints { .. })));
        assert!(matches!(frechet_distance(&[0.0; 5], &a, 2), Err(EvalError::Ragged { .. })));
    }

    #[test]
    fn covariance_is_symmetric() {
        let mut rng = Rng::new(4);
        let m = GaussianMoments::fit(&cloud(30, 3, &mut rng, 1.0), 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.covariance[i * 3 + j], m.covariance[j * 3 + i]);
            }
        }
    }

    #[test]
    fn exact_centers_and_far_tokens() {
        let ds = generate(&MixtureSpec::default(), 1, 0).unwrap();
        let mx = &ds.mixture;
        let at_centers: Vec<f64> = (0..3).flat_map(|k| mx.center(k).to_vec()).collect();
        let r = mode_report(&at_centers, mx);
        assert_eq!((r.purity, r.ood_rate, r.coverage), (1.0, 0.0, 3.0 / 8.0));
        assert_eq!(&r.hits[..4], &[1, 1, 1, 0]);

        // A point 10σ beyond the farthest extent of the layout.
        let far_x = mx.centers.iter().step_by(2).cloned().fold(f64::MIN, f64::max) + 10.0;
        let far = vec![far_x, mx.centers[1], far_x + 50.0, 0.0];
        let r = mode_report(&far, mx);
        assert_eq!(r.ood_rate, 1.0);
        assert_eq!(r.purity + r.ood_rate, 1.0);
    }

    #[test]
    fn mixture_draws_are_in_mode_and_order_free() {
        let ds = generate(&MixtureSpec::default(), 6250, 11).unwrap();
        let toks = ds.pooled_tokens();
        let r = mode_report(&toks, &ds.mixture);
        // Chi-squared (2 dof) tail: P(r <= 3σ) = 1 − exp(−4.5).
        let expected = 1.0 - (-4.5f64).exp();
        let stderr = (expected * (1.0 - expected) / r.n_tokens as f64).sqrt();
        assert!((r.purity - expected).abs() < 4.0 * stderr, "{} vs {expected}", r.purity);
        assert!(r.ood_rate <= 1e-5);
        assert_eq!(r.coverage, 1.0);

        let mut rng = Rng::new(0);
        let perm = rng.permutation(toks.len() / 2);
        let shuffled: Vec<f64> = perm.iter().flat_map(|&i| [toks[2 * i], toks[2 * i + 1]]).collect();
        assert_eq!(mode_report(&shuffled, &ds.mixture), r);
    }
}
