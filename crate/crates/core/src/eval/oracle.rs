//! Brute-force check that end-to-end samples follow the mixture
//! `p(x_c) = Σ_{x_d} p(x_c | x_d) p(x_d)` on instances small enough to
//! enumerate every discrete sequence.

use serde::{Deserialize, Serialize};

use super::{EvalError, GaussianMoments};
use crate::backbone::DisConModel;
use crate::numerics::Rng;
use crate::pipeline::{generate, ConditionSource, SampleRequest};
use crate::prior::PriorModel;
use crate::tokenizers::Tokenizers;

pub const MAX_VOCAB: usize = 4;
pub const MAX_SEQ_LEN: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    pub class: usize,
    /// Conditioned samples drawn per discrete sequence.
    pub samples_per_sequence: usize,
    pub end_to_end_samples: usize,
    pub steps: usize,
    pub temperature: f64,
    pub cfg_scale: f64,
    pub prior_temperature: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// Fréchet distance between the enumerated mixture and end-to-end samples.
    pub fd: f64,
    pub sequences: Vec<Vec<usize>>,
    pub probabilities: Vec<f64>,
    pub mixture_mean: Vec<f64>,
    pub end_to_end_mean: Vec<f64>,
}

/// Moments of the mixture `Σ w_k N(μ_k, Σ_k)`.
pub fn mixture_moments(weights: &[f64], parts: &[GaussianMoments<f64>]) -> GaussianMoments<f64> {
    let dim = parts[0].dim();
    let total: f64 = weights.iter().sum();
    let mut mean = vec![0.0; dim];
    let mut second = vec![0.0; dim * dim];
    for (w, p) in weights.iter().zip(parts) {
        let w = w / total;
        for i in 0..dim {
            mean[i] += w * p.mean[i];
            for j in 0..dim {
                second[i * dim + j] += w * (p.covariance[i * dim + j] + p.mean[i] * p.mean[j]);
            }
        }
    }
    let covariance = (0..dim * dim).map(|k| second[k] - mean[k / dim] * mean[k % dim]).collect();
    GaussianMoments { mean, covariance }
}

/// Runs the enumeration check. Sequences are compared as flattened
/// `M·d` vectors so the check sees cross-position structure.
pub fn marginal_oracle(
    prior: &PriorModel<f64>,
    model: &DisConModel<f64>,
    tk: &Tokenizers<f64>,
    s: &OracleSettings,
) -> Result<OracleReport, EvalError> {
    let (v, m) = (prior.config.vocab, prior.config.seq_len);
    if v > MAX_VOCAB || m > MAX_SEQ_LEN {
        return Err(EvalError::TooLarge(format!(
            "V={v}, M={m}; enumeration is limited to V <= {MAX_VOCAB}, M <= {MAX_SEQ_LEN}"
        )));
    }
    let dim = m * model.config.token_dim;
    let model_err = |e: crate::pipeline::SampleError| EvalError::Model(e.to_string());
    let sequences: Vec<Vec<usize>> = (0..v.pow(m as u32))
        .map(|code| (0..m).map(|i| code / v.pow((m - 1 - i) as u32) % v).collect())
        .collect();
    let flat: Vec<usize> = sequences.iter().flatten().copied().collect();
    let log_p = prior
        .sequence_log_prob(&flat, &vec![s.class; sequences.len()], s.cfg_scale, s.prior_temperature)
        .map_err(|e| EvalError::Model(e.to_string()))?;
    let probabilities: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();

    let root = Rng::new(s.seed);
    let mut parts = Vec::with_capacity(sequences.len());
    for (k, seq) in sequences.iter().enumerate() {
        let req = SampleRequest {
            class: s.class,
            n: s.samples_per_sequence,
            steps: s.steps,
            temperature: s.temperature,
            cfg_scale: s.cfg_scale,
            prior_temperature: s.prior_temperature,
            seed: root.split(k as u64).next_u64(),
            source: ConditionSource::GroundTruth,
        };
        let gt: Vec<usize> = (0..s.samples_per_sequence).flat_map(|_| seq.iter().copied()).collect();
        let out = generate(Some(prior), model, tk, &req, Some(&gt)).map_err(model_err)?;
        parts.push(GaussianMoments::fit(&out.tokens, dim)?);
    }
    let mixture = mixture_moments(&probabilities, &parts);

    let req = SampleRequest {
        class: s.class,
        n: s.end_to_end_samples,
        steps: s.steps,
        temperature: s.temperature,
        cfg_scale: s.cfg_scale,
        prior_temperature: s.prior_temperature,
        seed: root.split(u64::MAX).next_u64(),
        source: ConditionSource::Prior,
    };
    let e2e = generate(Some(prior), model, tk, &req, None).map_err(model_err)?;
    let e2e = GaussianMoments::fit(&e2e.tokens, dim)?;
    Ok(OracleReport {
        fd: mixture.frechet(&e2e),
        sequences,
        probabilities,
        mixture_mean: mixture.mean,
        end_to_end_mean: e2e.mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_pair_of_modes_has_zero_mixture_mean() {
        let mut rng = Rng::new(12);
        let c = 4.0;
        let n = 10_000;
        let draw = |rng: &mut Rng, mu: f64| -> Vec<f64> { (0..n).map(|_| mu + rng.normal::<f64>()).collect() };
        let a = GaussianMoments::fit(&draw(&mut rng, c), 1).unwrap();
        let b = GaussianMoments::fit(&draw(&mut rng, -c), 1).unwrap();
        let mix = mixture_moments(&[0.5, 0.5], &[a, b]);
        // Mixture variance is 1 + c², so the mean of 2n draws has this stderr.
        let stderr = ((1.0 + c * c) / (2 * n) as f64).sqrt();
        assert!(mix.mean[0].abs() < 3.0 * stderr, "{}", mix.mean[0]);
        assert!((mix.covariance[0] - (1.0 + c * c)).abs() < 0.2);
    }

    #[test]
    fn single_component_mixture_is_that_component() {
        let g = GaussianMoments {
            mean: vec![1.0, 2.0],
            covariance: vec![2.0, 0.3, 0.3, 1.0],
        };
        let z = GaussianMoments {
            mean: vec![-5.0, 0.0],
            covariance: vec![1.0, 0.0, 0.0, 1.0],
        };
        let mix = mixture_moments(&[1.0, 0.0], &[g.clone(), z]);
        for (a, b) in mix.mean.iter().zip(&g.mean) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in mix.covariance.iter().zip(&g.covariance) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
