//! Experiment configuration: one TOML file with sections `data`,
//! `tokenizer`, `prior`, `discon`, `train`, `sample`, `eval`. Every key has
//! a default, unknown keys are rejected, and the resolved value is what the
//! manifest records.

use std::path::Path;

use discon::backbone::{Conditioning, DisConConfig};
use discon::pipeline::{ConditionSource, EvalSettings, SampleRequest, TrainConfig};
use discon::prior::PriorConfig;
use discon::synthdata::{MixtureSpec, ModeShape};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_modes: usize,
    pub token_dim: usize,
    pub seq_len: usize,
    pub separation: f64,
    pub sigma: f64,
    pub mode_shape: ModeShape,
    pub n_classes: usize,
    /// Left empty, resolution fills in consecutive equal groups of modes.
    pub class_to_modes: Vec<Vec<usize>>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = MixtureSpec::default();
        Self {
            n_modes: s.n_modes,
            token_dim: s.token_dim,
            seq_len: s.seq_len,
            separation: s.separation,
            sigma: s.sigma,
            mode_shape: s.mode_shape,
            n_classes: s.n_classes,
            class_to_modes: Vec::new(),
            n_train: 1000,
            n_val: 500,
            n_test: 2000,
            seed: 0,
        }
    }
}

impl DataSection {
    pub fn spec(&self) -> MixtureSpec {
        let mut spec = MixtureSpec::grouped(self.n_modes, self.token_dim, self.seq_len, self.n_classes);
        spec.separation = self.separation;
        spec.sigma = self.sigma;
        spec.mode_shape = self.mode_shape;
        if !self.class_to_modes.is_empty() {
            spec.class_to_modes = self.class_to_modes.clone();
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            vocab: 16,
            max_iters: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub dropout: f64,
    pub cfg_null_prob: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 32,
            heads: 2,
            dropout: 0.0,
            cfg_null_prob: 0.1,
            epochs: 20,
            learning_rate: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisConSection {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mask_ratio_lo: f64,
    pub mask_ratio_hi: f64,
    pub conditioning: Conditioning,
    pub dropout: f64,
    pub head_depth: usize,
    pub head_width: usize,
    pub diffusion_steps: usize,
    pub diffusion_repeats: usize,
    /// Clamp on the denoised estimate during sampling; 0 turns it off.
    pub x0_clip: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for DisConSection {
    fn default() -> Self {
        let d = DisConConfig::default();
        Self {
            layers: 2,
            width: 32,
            heads: 2,
            mask_ratio_lo: d.mask_ratio_lo,
            mask_ratio_hi: d.mask_ratio_hi,
            conditioning: d.conditioning,
            dropout: 0.0,
            head_depth: 2,
            head_width: 32,
            diffusion_steps: 50,
            diffusion_repeats: d.diffusion_repeats,
            x0_clip: d.x0_clip.unwrap_or(0.0),
            epochs: 10,
            learning_rate: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            warmup_steps: t.warmup_steps,
            ema_decay: t.ema_decay,
            grad_clip: t.grad_clip,
            weight_decay: t.weight_decay,
            seed: t.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub class: usize,
    pub n: usize,
    pub steps: usize,
    pub temperature: f64,
    pub cfg_scale: f64,
    pub prior_temperature: f64,
    pub seed: u64,
    pub source: ConditionSource,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            class: 0,
            n: 200,
            steps: 16,
            temperature: 1.0,
            cfg_scale: 1.0,
            prior_temperature: 1.0,
            seed: 0,
            source: ConditionSource::Prior,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Val,
    Test,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_per_class: usize,
    /// Grid of AR step counts.
    pub steps: Vec<usize>,
    /// Grid of diffusion temperatures.
    pub temperatures: Vec<f64>,
    pub cfg_scale: f64,
    pub prior_temperature: f64,
    pub seed: u64,
    pub source: ConditionSource,
    pub split: EvalSplit,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_per_class: 200,
            steps: vec![16],
            temperatures: vec![1.0],
            cfg_scale: 1.0,
            prior_temperature: 1.0,
            seed: 0,
            source: ConditionSource::Prior,
            split: EvalSplit::Val,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataSection,
    pub tokenizer: TokenizerSection,
    pub prior: PriorSection,
    pub discon: DisConSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

/// Parses the right-hand side of `--set` as a TOML value, falling back to
/// a bare string so `--set discon.conditioning=disabled` works unquoted.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects section.key=value, got `{assignment}`")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.len() != 2 || path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("--set key must be section.key, got `{key}`")));
    }
    let section = table
        .entry(path[0])
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let section = section
        .as_table_mut()
        .ok_or_else(|| invalid(format!("`{}` is not a section", path[0])))?;
    section.insert(path[1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Config {
    /// Reads `path` (or starts from defaults), applies overrides, and
    /// validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| invalid(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| invalid(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: Config = toml::Value::Table(table).try_into().map_err(invalid)?;
        if cfg.data.class_to_modes.is_empty() {
            cfg.data.class_to_modes = cfg.data.spec().class_to_modes;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.spec().validate().map_err(invalid)?;
        if self.data.n_train == 0 {
            return Err(invalid("data.n_train must be positive"));
        }
        if self.tokenizer.vocab == 0 {
            return Err(invalid("tokenizer.vocab must be positive"));
        }
        self.prior_config().validate().map_err(invalid)?;
        self.discon_config().validate().map_err(invalid)?;
        self.train_config(self.prior.epochs, self.prior.learning_rate)
            .validate()
            .map_err(invalid)?;
        self.train_config(self.discon.epochs, self.discon.learning_rate)
            .validate()
            .map_err(invalid)?;
        let m = self.data.seq_len;
        self.sample_request()
            .validate(m)
            .map_err(|e| invalid(format!("sample: {e}")))?;
        if self.sample.class >= self.data.n_classes {
            return Err(invalid(format!("sample.class must be < data.n_classes ({})", self.data.n_classes)));
        }
        if self.eval.steps.is_empty() || self.eval.temperatures.is_empty() {
            return Err(invalid("eval.steps and eval.temperatures must be non-empty"));
        }
        for &s in &self.eval.steps {
            for &t in &self.eval.temperatures {
                self.eval_request(s, t)
                    .validate(m)
                    .map_err(|e| invalid(format!("eval: {e}")))?;
            }
        }
        if self.eval.n_per_class < 2 {
            return Err(invalid("eval.n_per_class must be at least 2"));
        }
        Ok(())
    }

    pub fn prior_config(&self) -> PriorConfig {
        PriorConfig {
            layers: self.prior.layers,
            width: self.prior.width,
            heads: self.prior.heads,
            vocab: self.tokenizer.vocab,
            seq_len: self.data.seq_len,
            n_classes: self.data.n_classes,
            dropout: self.prior.dropout,
            cfg_null_prob: self.prior.cfg_null_prob,
        }
    }

    pub fn discon_config(&self) -> DisConConfig {
        let d = &self.discon;
        DisConConfig {
            layers: d.layers,
            width: d.width,
            heads: d.heads,
            seq_len: self.data.seq_len,
            token_dim: self.data.token_dim,
            vocab: self.tokenizer.vocab,
            n_classes: self.data.n_classes,
            mask_ratio_lo: d.mask_ratio_lo,
            mask_ratio_hi: d.mask_ratio_hi,
            conditioning: d.conditioning,
            dropout: d.dropout,
            head_depth: d.head_depth,
            head_width: d.head_width,
            diffusion_steps: d.diffusion_steps,
            diffusion_repeats: d.diffusion_repeats,
            x0_clip: (d.x0_clip > 0.0).then_some(d.x0_clip),
        }
    }

    pub fn train_config(&self, epochs: usize, learning_rate: f64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs,
            batch_size: t.batch_size,
            learning_rate,
            warmup_steps: t.warmup_steps,
            ema_decay: t.ema_decay,
            grad_clip: t.grad_clip,
            weight_decay: t.weight_decay,
            seed: t.seed,
        }
    }

    pub fn sample_request(&self) -> SampleRequest {
        let s = &self.sample;
        SampleRequest {
            class: s.class,
            n: s.n,
            steps: s.steps,
            temperature: s.temperature,
            cfg_scale: s.cfg_scale,
            prior_temperature: s.prior_temperature,
            seed: s.seed,
            source: s.source,
        }
    }

    fn eval_request(&self, steps: usize, temperature: f64) -> SampleRequest {
        let e = &self.eval;
        SampleRequest {
            class: 0,
            n: e.n_per_class,
            steps,
            temperature,
            cfg_scale: e.cfg_scale,
            prior_temperature: e.prior_temperature,
            seed: e.seed,
            source: e.source,
        }
    }

    pub fn eval_settings(&self, steps: usize, temperature: f64) -> EvalSettings {
        let e = &self.eval;
        EvalSettings {
            n_per_class: e.n_per_class,
            steps,
            temperature,
            cfg_scale: e.cfg_scale,
            prior_temperature: e.prior_temperature,
            seed: e.seed,
            source: e.source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn overrides_are_typed() {
        let cfg = Config::resolve(
            None,
            &[
                "discon.conditioning=disabled".into(),
                "eval.temperatures=[0.2, 0.6]".into(),
                "train.seed=7".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.discon.conditioning, Conditioning::Disabled);
        assert_eq!(cfg.eval.temperatures, vec![0.2, 0.6]);
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::resolve(None, &["train.learnin_rate=0.1".into()]).unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
        assert!(err.to_string().contains("learnin_rate"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips_through_json() {
        let cfg = Config::resolve(None, &["data.n_classes=2".into()]).unwrap();
        assert_eq!(cfg.data.class_to_modes, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
        let back: Config = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, back);
    }
}
