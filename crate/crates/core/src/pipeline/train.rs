//! Generic training loop shared by the prior and the DisCon model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{Checkpoint, CheckpointError, ModelKind};
use super::optim::{clip_global_norm, collect_grads, warmup_lr, AdamW, AdamWConfig, Ema};
use crate::nn::ParamStore;
use crate::numerics::{Graph, NumericsError, Rng, Var};
use crate::tokenizers::Tokenizers;

const STEP_STREAM: u64 = 0;
const EPOCH_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_steps: 100,
            ema_decay: 0.999,
            grad_clip: 1.0,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if !(self.grad_clip > 0.0) || !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("grad_clip and learning_rate must be positive, weight_decay non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss or gradient at step {step}; last good checkpoint retained")]
    NonFinite {
        step: u64,
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Other(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A model together with the data it is fit to.
pub trait Objective {
    fn kind(&self) -> ModelKind;
    fn store(&self) -> &ParamStore<f64>;
    fn store_mut(&mut self) -> &mut ParamStore<f64>;
    fn len(&self, split: Split) -> usize;
    /// Scalar loss on examples `idx` of `split`. `train` enables the
    /// stochastic training-only pieces (dropout, class dropping).
    fn loss(&self, g: &mut Graph<f64>, split: Split, idx: &[usize], rng: &mut Rng, train: bool) -> Result<Var, NumericsError>;
    fn model_config(&self) -> serde_json::Value;
    fn tokenizers(&self) -> Option<&Tokenizers<f64>> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(step: u64, split: &str, metric: &str, value: f64) -> Self {
        Self {
            step,
            split: split.into(),
            metric: metric.into(),
            value,
        }
    }
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut s = String::from("step,split,metric,value\n");
    for r in records {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.split, r.metric, r.value));
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRecord>, String> {
    let mut lines = text.lines();
    if lines.next() != Some("step,split,metric,value") {
        return Err("metrics file lacks the step,split,metric,value header".into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(format!("bad metrics row {l:?}"));
            }
            Ok(MetricRecord {
                step: f[0].parse().map_err(|_| format!("bad step in {l:?}"))?,
                split: f[1].into(),
                metric: f[2].into(),
                value: f[3].parse().map_err(|_| format!("bad value in {l:?}"))?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<MetricRecord>,
    /// Training loss of every optimizer step taken in this call.
    pub step_losses: Vec<f64>,
}

struct State {
    step: u64,
    epoch: u64,
    adam: AdamW<f64>,
    ema: Ema<f64>,
}

fn snapshot<O: Objective>(obj: &O, cfg: &TrainConfig, st: &State) -> Checkpoint {
    let config_json = serde_json::json!({ "model": obj.model_config(), "train": cfg }).to_string();
    Checkpoint {
        kind: obj.kind(),
        config_json,
        names: obj.store().names().to_vec(),
        params: obj.store().tensors().to_vec(),
        ema: st.ema.shadow.clone(),
        adam_m: st.adam.m.clone(),
        adam_v: st.adam.v.clone(),
        adam_t: st.adam.t,
        step: st.step,
        epoch: st.epoch,
        rng: Rng::new(cfg.seed).split(STEP_STREAM).split(st.step).state(),
        tokenizers: obj.tokenizers().cloned(),
    }
}

/// Mean loss over a split with the EMA weights swapped in.
fn evaluate<O: Objective>(obj: &mut O, ema: &Ema<f64>, split: Split, cfg: &TrainConfig) -> Result<f64, NumericsError> {
    let n = obj.len(split);
    if n == 0 {
        return Ok(f64::NAN);
    }
    let shadow = ema.apply(obj.store());
    let live = std::mem::replace(obj.store_mut(), shadow);
    let mut rng = Rng::new(cfg.seed).split(VAL_STREAM);
    let mut total = 0.0;
    let mut result = Ok(());
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(cfg.batch_size) {
        let mut g = Graph::inference();
        match obj.loss(&mut g, split, chunk, &mut rng, false) {
            Ok(l) => total += g.value(l).item() * chunk.len() as f64,
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    *obj.store_mut() = live;
    result.map(|_| total / n as f64)
}

/// Runs epochs `resume.epoch .. cfg.epochs`. Every batch draws its
/// randomness from `(seed, step)` and every epoch's shuffle from
/// `(seed, epoch)`, so resuming from an epoch-boundary checkpoint replays
/// the uninterrupted run exactly. `on_epoch` sees each epoch's checkpoint.
pub fn train<O: Objective>(
    obj: &mut O,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    on_epoch: &mut dyn FnMut(&Checkpoint, &[MetricRecord]) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut st = State {
        step: 0,
        epoch: 0,
        adam: AdamW::new(
            obj.store(),
            AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
        ),
        ema: Ema::new(obj.store(), cfg.ema_decay),
    };
    let mut records = Vec::new();
    match resume {
        Some(c) => {
            c.expect_kind(obj.kind())?;
            let names = obj.store().names().to_vec();
            obj.store_mut().load(&names, c.params.clone())?;
            st.ema.shadow = c.ema.clone();
            st.adam.m = c.adam_m.clone();
            st.adam.v = c.adam_v.clone();
            st.adam.t = c.adam_t;
            st.step = c.step;
            st.epoch = c.epoch;
        }
        None => {
            let v = evaluate(obj, &st.ema, Split::Val, cfg)?;
            records.push(MetricRecord::new(0, "val", "loss", v));
        }
    }
    let root = Rng::new(cfg.seed);
    let mut last_good = snapshot(obj, cfg, &st);
    let mut step_losses = Vec::new();
    let n = obj.len(Split::Train);
    if n == 0 {
        return Err(TrainError::Config("training split is empty".into()));
    }
    while (st.epoch as usize) < cfg.epochs {
        let perm = root.split(EPOCH_STREAM).split(st.epoch).permutation(n);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in perm.chunks(cfg.batch_size) {
            let mut rng = root.split(STEP_STREAM).split(st.step);
            let mut g = Graph::new();
            let fail = |st: &State, last_good: &Checkpoint| TrainError::NonFinite {
                step: st.step,
                last_good: Box::new(last_good.clone()),
            };
            let loss = match obj.loss(&mut g, Split::Train, batch, &mut rng, true) {
                Ok(l) => l,
                Err(NumericsError::NonFinite { .. }) => return Err(fail(&st, &last_good)),
                Err(e) => return Err(e.into()),
            };
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(fail(&st, &last_good));
            }
            let grads = match g.backward(loss) {
                Ok(gr) => gr,
                Err(NumericsError::NonFinite { .. }) => return Err(fail(&st, &last_good)),
                Err(e) => return Err(e.into()),
            };
            let mut grads = collect_grads(obj.store(), &grads);
            let norm = clip_global_norm(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(fail(&st, &last_good));
            }
            lr = warmup_lr(cfg.learning_rate, cfg.warmup_steps, st.step);
            st.adam.step(obj.store_mut(), &grads, lr);
            st.ema.update(obj.store(), st.step);
            st.step += 1;
            epoch_loss += lv * batch.len() as f64;
            step_losses.push(lv);
        }
        st.epoch += 1;
        let val = evaluate(obj, &st.ema, Split::Val, cfg)?;
        let new = vec![
            MetricRecord::new(st.step, "train", "loss", epoch_loss / n as f64),
            MetricRecord::new(st.step, "train", "lr", lr),
            MetricRecord::new(st.step, "val", "loss", val),
        ];
        records.extend(new.iter().cloned());
        last_good = snapshot(obj, cfg, &st);
        on_epoch(&last_good, &new)?;
    }
    Ok(TrainOutcome {
        checkpoint: last_good,
        records,
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    /// Least squares `‖X w − y‖²` with a switch that poisons the loss.
    struct Toy {
        store: ParamStore<f64>,
        x: Tensor<f64>,
        y: Tensor<f64>,
        poison_after: Option<u64>,
        calls: std::cell::Cell<u64>,
    }

    impl Toy {
        fn new() -> Self {
            let mut rng = Rng::new(1);
            let x = Tensor::from_fn(&[40, 3], |_| rng.normal());
            let y = Tensor::from_fn(&[40, 1], |i| x.data()[i * 3] * 2.0 - x.data()[i * 3 + 2]);
            let mut store = ParamStore::new();
            store.zeros("w", &[3, 1]);
            Self {
                store,
                x,
                y,
                poison_after: None,
                calls: 0.into(),
            }
        }
    }

    impl Objective for Toy {
        fn kind(&self) -> ModelKind {
            ModelKind::Prior
        }
        fn store(&self) -> &ParamStore<f64> {
            &self.store
        }
        fn store_mut(&mut self) -> &mut ParamStore<f64> {
            &mut self.store
        }
        fn len(&self, split: Split) -> usize {
            match split {
                Split::Train => 32,
                Split::Val => 8,
            }
        }
        fn loss(&self, g: &mut Graph<f64>, split: Split, idx: &[usize], rng: &mut Rng, train: bool) -> Result<Var, NumericsError> {
            let off = if split == Split::Val { 32 } else { 0 };
            let rows: Vec<usize> = idx.iter().map(|i| i + off).collect();
            let x = g.constant(self.x.clone());
            let x = g.gather_rows(x, &rows)?;
            let y = g.constant(self.y.clone());
            let y = g.gather_rows(y, &rows)?;
            let w = self.store.var(g, crate::numerics::ParamId(0));
            let p = g.matmul(x, w)?;
            // Random jitter so the step stream matters.
            let p = g.scale(p, 1.0 + 1e-3 * rng.normal::<f64>())?;
            if train {
                self.calls.set(self.calls.get() + 1);
                if self.poison_after.is_some_and(|k| self.calls.get() > k) {
                    let bad = g.constant(Tensor::full(&[idx.len(), 1], f64::INFINITY));
                    return g.add(p, bad);
                }
            }
            g.mse(p, y)
        }
        fn model_config(&self) -> serde_json::Value {
            serde_json::json!({"toy": true})
        }
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            learning_rate: 0.2,
            warmup_steps: 3,
            ema_decay: 0.9,
            grad_clip: 10.0,
            weight_decay: 0.0,
            seed: 5,
        }
    }

    #[test]
    fn loss_falls_and_runs_are_reproducible() {
        let mut a = Toy::new();
        let out = train(&mut a, &cfg(6), None, &mut |_, _| Ok(())).unwrap();
        let vals: Vec<f64> = out.records.iter().filter(|r| r.split == "val" && r.metric == "loss").map(|r| r.value).collect();
        assert!(vals.last().unwrap() < &(0.5 * vals[0]), "{vals:?} {:?}", out.step_losses);
        let mut b = Toy::new();
        let again = train(&mut b, &cfg(6), None, &mut |_, _| Ok(())).unwrap();
        assert_eq!(out.step_losses, again.step_losses);
        assert_eq!(metrics_csv(&out.records), metrics_csv(&again.records));
        assert_eq!(parse_metrics_csv(&metrics_csv(&out.records)).unwrap(), out.records);
    }

    #[test]
    fn resume_replays_the_uninterrupted_run() {
        let mut full = Toy::new();
        let whole = train(&mut full, &cfg(5), None, &mut |_, _| Ok(())).unwrap();
        let mut first = Toy::new();
        let part = train(&mut first, &cfg(2), None, &mut |_, _| Ok(())).unwrap();
        let bytes = part.checkpoint.to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let mut second = Toy::new();
        let rest = train(&mut second, &cfg(5), Some(&ckpt), &mut |_, _| Ok(())).unwrap();
        let mut joined = part.step_losses.clone();
        joined.extend(rest.step_losses);
        assert_eq!(joined, whole.step_losses);
        assert_eq!(rest.checkpoint.params, whole.checkpoint.params);
    }

    #[test]
    fn non_finite_loss_returns_last_good_checkpoint() {
        let mut t = Toy::new();
        t.poison_after = Some(9);
        let err = train(&mut t, &cfg(5), None, &mut |_, _| Ok(())).unwrap_err();
        match err {
            TrainError::NonFinite { step, last_good } => {
                assert_eq!(step, 9);
                assert_eq!(last_good.step, 8);
                assert_eq!(last_good.epoch, 2);
                assert!(last_good.params[0].all_finite());
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(1);
        c.ema_decay = 1.0;
        assert!(c.validate().is_err());
        c.ema_decay = 0.0;
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
