//! Grid evaluation of trained runs into one results table.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{hash_bytes, Checkpoint};
use super::models::{load_discon, load_prior};
use super::sampler::{evaluate_generation, ConditionSource, EvalSettings, SampleError};
use crate::synthdata::Dataset;

pub const RESULTS_HEADER: &str = "run_id,conditioning,S,tau,cfg,fd,mode_coverage,ood_rate,sec_per_batch,ckpt_hash";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub run_id: String,
    pub discon_checkpoint: PathBuf,
    pub prior_checkpoint: Option<PathBuf>,
    pub steps: usize,
    pub temperature: f64,
    pub cfg_scale: f64,
    pub n_per_class: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub conditioning: String,
    pub steps: usize,
    pub tau: f64,
    pub cfg: f64,
    pub fd: Option<f64>,
    pub mode_coverage: Option<f64>,
    pub ood_rate: Option<f64>,
    pub sec_per_batch: Option<f64>,
    pub ckpt_hash: String,
    pub error: Option<String>,
}

fn run_cell(cell: &GridCell, reference: &Dataset) -> Result<ResultRow, String> {
    let bytes = std::fs::read(&cell.discon_checkpoint)
        .map_err(|e| format!("{}: {e}", cell.discon_checkpoint.display()))?;
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let (model, tk) = load_discon(&ckpt, true).map_err(|e| e.to_string())?;
    let prior = match &cell.prior_checkpoint {
        Some(p) => {
            let c = Checkpoint::load(p).map_err(|e| format!("{}: {e}", p.display()))?;
            Some(load_prior(&c, true).map_err(|e| e.to_string())?)
        }
        None => None,
    };
    let settings = EvalSettings {
        n_per_class: cell.n_per_class,
        steps: cell.steps,
        temperature: cell.temperature,
        cfg_scale: cell.cfg_scale,
        prior_temperature: 1.0,
        seed: cell.seed,
        source: ConditionSource::Prior,
    };
    let t0 = Instant::now();
    let ev = evaluate_generation(prior.as_ref(), &model, &tk, reference, &settings).map_err(|e: SampleError| e.to_string())?;
    let batches = reference.spec().n_classes as f64;
    Ok(ResultRow {
        run_id: cell.run_id.clone(),
        conditioning: model.config.conditioning.to_string(),
        steps: cell.steps,
        tau: cell.temperature,
        cfg: cell.cfg_scale,
        fd: Some(ev.fd),
        mode_coverage: Some(ev.report.coverage),
        ood_rate: Some(ev.report.ood_rate),
        sec_per_batch: Some(t0.elapsed().as_secs_f64() / batches),
        ckpt_hash: hash_bytes(&bytes),
        error: None,
    })
}

/// Evaluates every cell; a failing cell yields a row with empty metrics
/// and its error, and the remaining cells still run.
pub fn compare_runs(cells: &[GridCell], reference: &Dataset) -> Vec<ResultRow> {
    cells
        .iter()
        .map(|cell| {
            run_cell(cell, reference).unwrap_or_else(|e| ResultRow {
                run_id: cell.run_id.clone(),
                conditioning: String::new(),
                steps: cell.steps,
                tau: cell.temperature,
                cfg: cell.cfg_scale,
                fd: None,
                mode_coverage: None,
                ood_rate: None,
                sec_per_batch: None,
                ckpt_hash: String::new(),
                error: Some(e),
            })
        })
        .collect()
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.run_id,
            r.conditioning,
            r.steps,
            r.tau,
            r.cfg,
            opt(r.fd),
            opt(r.mode_coverage),
            opt(r.ood_rate),
            opt(r.sec_per_batch),
            r.ckpt_hash
        ));
    }
    s
}
