//! End-to-end generation: discrete tokens from the prior (or the data),
//! then S rounds of masked continuous decoding, then the decoder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{Checkpoint, CheckpointError};
use super::models::{load_discon, load_prior};
use super::schedule::reveal_counts;
use crate::backbone::{Conditioning, Context, DisConModel};
use crate::diffhead::sample_tokens;
use crate::eval::{frechet_distance, mode_report, EvalError, ModeReport};
use crate::numerics::{Graph, NumericsError, Rng};
use crate::prior::PriorModel;
use crate::synthdata::Dataset;
use crate::tokenizers::{TokenizerError, Tokenizers};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid sample request: {0}")]
    Request(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    Prior,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub class: usize,
    pub n: usize,
    /// Number of masked decoding rounds.
    pub steps: usize,
    /// Diffusion temperature.
    pub temperature: f64,
    pub cfg_scale: f64,
    pub prior_temperature: f64,
    pub seed: u64,
    pub source: ConditionSource,
}

impl SampleRequest {
    pub fn validate(&self, seq_len: usize) -> Result<(), SampleError> {
        if self.steps == 0 || self.steps > seq_len {
            return Err(SampleError::Request(format!(
                "steps must satisfy 1 <= S <= M (S={}, M={seq_len})",
                self.steps
            )));
        }
        if self.n == 0 {
            return Err(SampleError::Request("n must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.prior_temperature > 0.0) || !(self.cfg_scale >= 0.0) {
            return Err(SampleError::Request("temperatures must be positive, cfg_scale non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Decoded tokens, `n·M·d`.
    pub tokens: Vec<f64>,
    /// Conditioning sequences actually used, `n·M` (zeros when the model
    /// ignores them).
    pub discrete: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub discon_checkpoint: String,
    pub prior_checkpoint: Option<String>,
    pub discon_config: serde_json::Value,
    pub prior_config: Option<serde_json::Value>,
    pub request: SampleRequest,
}

/// Samples `req.n` sequences of class `req.class`.
///
/// `ground_truth` supplies `n·M` discrete ids when `req.source` asks for
/// them. Randomness: prior from `seed/0`, reveal orders from `seed/1/b`,
/// diffusion noise of round `s` from `seed/2/s`.
pub fn generate(
    prior: Option<&PriorModel<f64>>,
    model: &DisConModel<f64>,
    tk: &Tokenizers<f64>,
    req: &SampleRequest,
    ground_truth: Option<&[usize]>,
) -> Result<Generated, SampleError> {
    let cfg = &model.config;
    let (m, d) = (cfg.seq_len, cfg.token_dim);
    req.validate(m)?;
    if req.class >= cfg.n_classes {
        return Err(SampleError::Request(format!("class {} out of range", req.class)));
    }
    let root = Rng::new(req.seed);
    let n = req.n;
    let discrete = match (cfg.conditioning, req.source) {
        (Conditioning::Disabled, _) => vec![0; n * m],
        (Conditioning::Prefix, ConditionSource::Prior) => {
            let prior = prior.ok_or_else(|| SampleError::Request("prior-conditioned sampling needs a prior".into()))?;
            if prior.config.seq_len != m || prior.config.vocab != cfg.vocab {
                return Err(SampleError::Request("prior and model disagree on M or V".into()));
            }
            prior.sample(&vec![req.class; n], req.cfg_scale, req.prior_temperature, &root.split(0))?
        }
        (Conditioning::Prefix, ConditionSource::GroundTruth) => {
            let gt = ground_truth.ok_or_else(|| SampleError::Request("ground-truth conditioning needs x_d".into()))?;
            if gt.len() != n * m {
                return Err(SampleError::Request(format!("expected {} ground-truth ids, got {}", n * m, gt.len())));
            }
            gt.to_vec()
        }
    };
    let orders: Vec<Vec<usize>> = (0..n).map(|b| root.split(1).split(b as u64).permutation(m)).collect();
    let counts = reveal_counts(m, req.steps)?;
    let mut x_c = vec![0.0; n * m * d];
    let mut masks = vec![vec![true; m]; n];
    let mut done = 0;
    for (s, &k) in counts.iter().enumerate() {
        let targets: Vec<(usize, usize)> = (0..n)
            .flat_map(|b| orders[b][done..done + k].iter().map(move |&i| (b, i)))
            .collect();
        let z = {
            let ctx: Vec<Context<'_, f64>> = (0..n)
                .map(|b| Context {
                    x_c: &x_c[b * m * d..(b + 1) * m * d],
                    x_d: &discrete[b * m..(b + 1) * m],
                    class: req.class,
                    mask: &masks[b],
                })
                .collect();
            let mut g = Graph::inference();
            let z = model.backbone.encode(&mut g, &model.store, &ctx, &targets, None)?;
            g.value(z).clone()
        };
        let out = sample_tokens(&model.head.bind(&model.store), &z, req.temperature, &root.split(2).split(s as u64))?;
        for (r, &(b, i)) in targets.iter().enumerate() {
            x_c[(b * m + i) * d..(b * m + i + 1) * d].copy_from_slice(out.row(r));
            masks[b][i] = false;
        }
        done += k;
    }
    Ok(Generated {
        tokens: tk.normalizer.decode(&x_c)?,
        discrete,
    })
}

/// Generation from checkpoints (EMA weights), with a provenance record.
pub fn generate_from_checkpoints(
    prior: Option<&Checkpoint>,
    discon: &Checkpoint,
    req: &SampleRequest,
    ground_truth: Option<&[usize]>,
) -> Result<(Generated, Provenance), SampleError> {
    let (model, tk) = load_discon(discon, true)?;
    let prior_model = prior.map(|c| load_prior(c, true)).transpose()?;
    let out = generate(prior_model.as_ref(), &model, &tk, req, ground_truth)?;
    let parse = |s: &str| serde_json::from_str(s).unwrap_or(serde_json::Value::Null);
    let prov = Provenance {
        discon_checkpoint: discon.hash(),
        prior_checkpoint: prior.map(Checkpoint::hash),
        discon_config: parse(&discon.config_json),
        prior_config: prior.map(|c| parse(&c.config_json)),
        request: req.clone(),
    };
    Ok((out, prov))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationEval {
    /// Mean over classes of the Fréchet distance between generated and
    /// reference tokens of that class.
    pub fd: f64,
    pub per_class_fd: Vec<f64>,
    pub report: ModeReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n_per_class: usize,
    pub steps: usize,
    pub temperature: f64,
    pub cfg_scale: f64,
    pub prior_temperature: f64,
    pub seed: u64,
    pub source: ConditionSource,
}

/// Generates `n_per_class` sequences for every class and scores them
/// against `reference`. Ground-truth conditioning cycles through the
/// reference samples of each class.
pub fn evaluate_generation(
    prior: Option<&PriorModel<f64>>,
    model: &DisConModel<f64>,
    tk: &Tokenizers<f64>,
    reference: &Dataset,
    s: &EvalSettings,
) -> Result<GenerationEval, SampleError> {
    let spec = reference.spec();
    let d = spec.token_dim;
    let mut all = Vec::new();
    let mut per_class = Vec::new();
    for class in 0..spec.n_classes {
        let refs: Vec<&crate::synthdata::Sample> = reference.of_class(class).collect();
        if refs.is_empty() {
            return Err(SampleError::Request(format!("reference set has no samples of class {class}")));
        }
        let gt: Option<Vec<usize>> = match s.source {
            ConditionSource::GroundTruth => {
                let mut ids = Vec::with_capacity(s.n_per_class * spec.seq_len);
                for b in 0..s.n_per_class {
                    ids.extend(tk.encode_discrete(&refs[b % refs.len()].tokens)?);
                }
                Some(ids)
            }
            ConditionSource::Prior => None,
        };
        let req = SampleRequest {
            class,
            n: s.n_per_class,
            steps: s.steps,
            temperature: s.temperature,
            cfg_scale: s.cfg_scale,
            prior_temperature: s.prior_temperature,
            seed: Rng::new(s.seed).split(class as u64).next_u64(),
            source: s.source,
        };
        let out = generate(prior, model, tk, &req, gt.as_deref())?;
        let real: Vec<f64> = refs.iter().flat_map(|r| r.tokens.iter().copied()).collect();
        per_class.push(frechet_distance(&out.tokens, &real, d)?);
        all.extend(out.tokens);
    }
    Ok(GenerationEval {
        fd: per_class.iter().sum::<f64>() / per_class.len() as f64,
        per_class_fd: per_class,
        report: mode_report(&all, &reference.mixture),
    })
}
