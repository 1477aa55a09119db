//! Training data views and objectives for the two models, and model
//! reconstruction from checkpoints.

use serde::Deserialize;

use super::checkpoint::{Checkpoint, CheckpointError, ModelKind};
use super::train::{Objective, Split};
use crate::backbone::{DisConConfig, DisConModel, TrainItem};
use crate::nn::ParamStore;
use crate::numerics::{Graph, NumericsError, Rng, Var};
use crate::prior::{PriorConfig, PriorModel};
use crate::synthdata::Dataset;
use crate::tokenizers::{TokenizerError, Tokenizers};

/// A dataset seen through fitted tokenizers.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedData {
    pub seq_len: usize,
    pub token_dim: usize,
    /// Normalized continuous tokens, `N·M·d`.
    pub x_c: Vec<f64>,
    /// Discrete token ids, `N·M`.
    pub x_d: Vec<usize>,
    pub classes: Vec<usize>,
}

impl EncodedData {
    pub fn new(ds: &Dataset, tk: &Tokenizers<f64>) -> Result<Self, TokenizerError> {
        let spec = ds.spec();
        let raw = ds.pooled_tokens();
        Ok(Self {
            seq_len: spec.seq_len,
            token_dim: spec.token_dim,
            x_c: tk.normalizer.encode(&raw)?,
            x_d: tk.encode_discrete(&raw)?,
            classes: ds.samples.iter().map(|s| s.class_label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn x_c(&self, i: usize) -> &[f64] {
        let w = self.seq_len * self.token_dim;
        &self.x_c[i * w..(i + 1) * w]
    }

    pub fn x_d(&self, i: usize) -> &[usize] {
        &self.x_d[i * self.seq_len..(i + 1) * self.seq_len]
    }
}

pub struct PriorObjective {
    pub model: PriorModel<f64>,
    pub train: EncodedData,
    pub val: EncodedData,
}

impl PriorObjective {
    fn data(&self, split: Split) -> &EncodedData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

impl Objective for PriorObjective {
    fn kind(&self) -> ModelKind {
        ModelKind::Prior
    }
    fn store(&self) -> &ParamStore<f64> {
        &self.model.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.model.store
    }
    fn len(&self, split: Split) -> usize {
        self.data(split).len()
    }
    fn loss(&self, g: &mut Graph<f64>, split: Split, idx: &[usize], rng: &mut Rng, train: bool) -> Result<Var, NumericsError> {
        let d = self.data(split);
        let tokens: Vec<usize> = idx.iter().flat_map(|&i| d.x_d(i).iter().copied()).collect();
        let classes: Vec<usize> = idx.iter().map(|&i| d.classes[i]).collect();
        self.model.loss(g, &tokens, &classes, if train { Some(rng) } else { None })
    }
    fn model_config(&self) -> serde_json::Value {
        serde_json::to_value(&self.model.config).expect("serializable config")
    }
}

pub struct DisConObjective {
    pub model: DisConModel<f64>,
    pub tokenizers: Tokenizers<f64>,
    pub train: EncodedData,
    pub val: EncodedData,
}

impl Objective for DisConObjective {
    fn kind(&self) -> ModelKind {
        ModelKind::DisCon
    }
    fn store(&self) -> &ParamStore<f64> {
        &self.model.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.model.store
    }
    fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train.len(),
            Split::Val => self.val.len(),
        }
    }
    fn loss(&self, g: &mut Graph<f64>, split: Split, idx: &[usize], rng: &mut Rng, train: bool) -> Result<Var, NumericsError> {
        let d = match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        };
        let items: Vec<TrainItem<'_, f64>> = idx
            .iter()
            .map(|&i| TrainItem {
                x_c: d.x_c(i),
                x_d: d.x_d(i),
                class: d.classes[i],
            })
            .collect();
        self.model.loss(g, &items, rng, train)
    }
    fn model_config(&self) -> serde_json::Value {
        serde_json::to_value(&self.model.config).expect("serializable config")
    }
    fn tokenizers(&self) -> Option<&Tokenizers<f64>> {
        Some(&self.tokenizers)
    }
}

#[derive(Deserialize)]
struct Echo<C> {
    model: C,
}

fn model_config<C: for<'de> Deserialize<'de>>(c: &Checkpoint) -> Result<C, CheckpointError> {
    serde_json::from_str::<Echo<C>>(&c.config_json)
        .map(|e| e.model)
        .map_err(|e| CheckpointError::Malformed(format!("config echo: {e}")))
}

fn weights(c: &Checkpoint, ema: bool) -> Vec<crate::numerics::Tensor<f64>> {
    if ema {
        c.ema.clone()
    } else {
        c.params.clone()
    }
}

/// Rebuilds a prior; `ema` selects the shadow weights over the live ones.
pub fn load_prior(c: &Checkpoint, ema: bool) -> Result<PriorModel<f64>, CheckpointError> {
    c.expect_kind(ModelKind::Prior)?;
    let cfg: PriorConfig = model_config(c)?;
    let mut m = PriorModel::new(cfg, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    m.store
        .load(&c.names, weights(c, ema))
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok(m)
}

pub fn load_discon(c: &Checkpoint, ema: bool) -> Result<(DisConModel<f64>, Tokenizers<f64>), CheckpointError> {
    c.expect_kind(ModelKind::DisCon)?;
    let cfg: DisConConfig = model_config(c)?;
    let mut m = DisConModel::new(cfg, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    m.store
        .load(&c.names, weights(c, ema))
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let tk = c
        .tokenizers
        .clone()
        .ok_or_else(|| CheckpointError::Malformed("model checkpoint carries no tokenizers".into()))?;
    Ok((m, tk))
}
