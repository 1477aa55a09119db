//! Subcommand bodies. Each one reads its inputs, writes artifacts through a
//! [`RunDir`], and finishes with a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use discon::backbone::DisConModel;
use discon::gradcheck::{full_suite, TOLERANCE};
use discon::pipeline::checkpoint::hash_file;
use discon::pipeline::{
    compare_runs, evaluate_generation, generate_from_checkpoints, load_discon, load_prior, metrics_csv, results_csv,
    train, Checkpoint, ConditionSource, DisConObjective, EncodedData, GridCell, MetricRecord, ModelKind,
    PriorObjective, ResultRow, SampleError, TrainError, TrainOutcome,
};
use discon::prior::PriorModel;
use discon::synthdata::{generate as draw_dataset, Dataset};
use discon::tokenizers::{ReconstructionPath, Tokenizers};

use crate::config::Config;
use crate::run::{run_id, Inputs, RunDir, RunManifest, METRICS};
use crate::{hash_inputs, plot, CliError};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const TOKENIZER_FILE: &str = "checkpoints/tokenizer.dsck";
pub const PRIOR_FILE: &str = "checkpoints/prior.dsck";
pub const DISCON_FILE: &str = "checkpoints/discon.dsck";
pub const RESULTS_FILE: &str = "results.csv";

type Render = fn(&str) -> Result<(String, String), String>;

pub fn split_path(data_dir: &Path, split: &str) -> PathBuf {
    data_dir.join(format!("{split}.dsd"))
}

fn need<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| CliError::Usage(format!("{flag} is required")))
}

fn load_split(dir: &Path, split: &str) -> Result<Dataset, CliError> {
    let p = split_path(dir, split);
    Dataset::load(&p).map_err(|e| CliError::Runtime(anyhow!("loading {}: {e}", p.display())))
}

fn load_checkpoint(path: &Path, kind: ModelKind) -> Result<Checkpoint, CliError> {
    let c = Checkpoint::load(path).map_err(|e| CliError::Runtime(anyhow!("loading {}: {e}", path.display())))?;
    c.expect_kind(kind)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(c)
}

fn tokenizers_from(path: &Path) -> Result<Tokenizers<f64>, CliError> {
    load_checkpoint(path, ModelKind::Tokenizer)?
        .tokenizers
        .ok_or_else(|| CliError::Runtime(anyhow!("{} carries no tokenizers", path.display())))
}

fn sample_error(e: SampleError) -> CliError {
    match e {
        SampleError::Request(m) => CliError::Validation(m),
        other => CliError::Runtime(other.into()),
    }
}

fn rt<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Runtime(anyhow!("{context}: {e}"))
}

/// Runs `command` with a resolved config. `run_dir` may be omitted only
/// for `gradcheck`.
pub fn execute(command: &str, cfg: &Config, inputs: &Inputs, run_dir: Option<&Path>) -> Result<RunManifest, CliError> {
    let input_hashes = hash_inputs(inputs);
    let manifest = RunManifest {
        run_id: run_id(command, cfg, &input_hashes),
        command: command.to_string(),
        config: cfg.clone(),
        inputs: inputs.clone(),
        input_hashes,
        artifacts: BTreeMap::new(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timings: BTreeMap::new(),
    };
    if command == "gradcheck" && run_dir.is_none() {
        gradcheck(cfg, None)?;
        return Ok(manifest);
    }
    let dir = run_dir.ok_or_else(|| CliError::Usage("--run-dir is required".into()))?;
    let mut rd = RunDir::open(dir)?;
    let t0 = Instant::now();
    let mut timings = BTreeMap::new();
    match command {
        "gen-data" => gen_data(cfg, &mut rd)?,
        "fit-tokenizer" => fit_tokenizer(cfg, inputs, &mut rd)?,
        "train-prior" => train_prior(cfg, inputs, &mut rd)?,
        "train-discon" => train_discon(cfg, inputs, &mut rd)?,
        "sample" => sample(cfg, inputs, &mut rd)?,
        "eval" => eval(cfg, inputs, &mut rd, &manifest.run_id)?,
        "ablate" => ablate(cfg, inputs, &mut rd)?,
        "gradcheck" => gradcheck(cfg, Some(&mut rd))?,
        "plot" => plot_cmd(inputs, &mut rd)?,
        other => return Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
    timings.insert("total".to_string(), t0.elapsed().as_secs_f64());
    let out = rd.finish(RunManifest { timings, ..manifest })?;
    println!("{command}: run {} written to {}", out.run_id, dir.display());
    Ok(out)
}

fn gen_data(cfg: &Config, rd: &mut RunDir) -> Result<(), CliError> {
    let d = &cfg.data;
    if d.n_val == 0 || d.n_test == 0 {
        return Err(CliError::Validation("data.n_val and data.n_test must be positive".into()));
    }
    let spec = d.spec();
    let all = draw_dataset(&spec, d.n_train + d.n_val + d.n_test, d.seed).map_err(rt("generating data"))?;
    let cuts = [0, d.n_train, d.n_train + d.n_val, all.len()];
    for (k, name) in SPLITS.iter().enumerate() {
        let part = Dataset {
            mixture: all.mixture.clone(),
            samples: all.samples[cuts[k]..cuts[k + 1]].to_vec(),
        };
        rd.write(&format!("data/{name}.dsd"), &part.to_bytes())?;
    }
    Ok(())
}

fn fit_tokenizer(cfg: &Config, inputs: &Inputs, rd: &mut RunDir) -> Result<(), CliError> {
    let data = need(&inputs.data, "--data")?;
    let train_ds = load_split(data, "train")?;
    let val = load_split(data, "val")?;
    let t = &cfg.tokenizer;
    let d = train_ds.spec().token_dim;
    let tk = Tokenizers::fit(&train_ds.pooled_tokens(), d, t.vocab, t.seed, t.max_iters).map_err(rt("fitting tokenizer"))?;
    let raw = val.pooled_tokens();
    let fd_c = tk.reconstruction_fd(&raw, ReconstructionPath::Continuous).map_err(rt("continuous reconstruction"))?;
    let fd_d = tk.reconstruction_fd(&raw, ReconstructionPath::Discrete).map_err(rt("discrete reconstruction"))?;
    let records = vec![
        MetricRecord::new(0, "val", "rfd_continuous", fd_c),
        MetricRecord::new(0, "val", "rfd_discrete", fd_d),
        MetricRecord::new(tk.codebook.fit_stats.iterations as u64, "train", "kmeans_inertia", tk.codebook.fit_stats.inertia),
    ];
    let config_json = serde_json::to_string(t).map_err(|e| CliError::Runtime(e.into()))?;
    let ckpt = Checkpoint::tokenizer_only(tk, config_json, t.seed);
    rd.write(TOKENIZER_FILE, &ckpt.to_bytes())?;
    rd.write(METRICS, metrics_csv(&records).as_bytes())?;
    println!("rFD continuous {fd_c:.3e}, discrete {fd_d:.4}");
    Ok(())
}

/// Shared tail of both training commands: per-epoch checkpoint and metric
/// stream, and on divergence the last good checkpoint is kept.
fn finish_training(
    rd: &mut RunDir,
    file: &str,
    run: impl FnOnce(&mut dyn FnMut(&Checkpoint, &[MetricRecord]) -> Result<(), TrainError>) -> Result<TrainOutcome, TrainError>,
) -> Result<(), CliError> {
    let ckpt_path = rd.path(file);
    let metrics_path = rd.path(METRICS);
    std::fs::create_dir_all(ckpt_path.parent().unwrap_or(Path::new("."))).map_err(|e| CliError::Runtime(e.into()))?;
    let mut stream = String::from("step,split,metric,value\n");
    let mut on_epoch = |c: &Checkpoint, recs: &[MetricRecord]| -> Result<(), TrainError> {
        c.save(&ckpt_path)?;
        for r in recs {
            let _ = writeln!(stream, "{},{},{},{}", r.step, r.split, r.metric, r.value);
        }
        std::fs::write(&metrics_path, &stream).map_err(|e| TrainError::Other(e.to_string()))?;
        Ok(())
    };
    match run(&mut on_epoch) {
        Ok(out) => {
            out.checkpoint.save(&ckpt_path).map_err(rt("saving checkpoint"))?;
            rd.write(METRICS, metrics_csv(&out.records).as_bytes())?;
            rd.record(file)?;
            if let Some(v) = out.records.iter().rev().find(|r| r.split == "val" && r.metric == "loss") {
                println!("final val loss {:.4}", v.value);
            }
            Ok(())
        }
        Err(TrainError::NonFinite { step, last_good }) => {
            last_good.save(&ckpt_path).map_err(rt("saving last good checkpoint"))?;
            rd.record(file)?;
            if metrics_path.exists() {
                rd.record(METRICS)?;
            }
            Err(CliError::Runtime(anyhow!(
                "non-finite loss at step {step}; last good checkpoint kept at {}",
                ckpt_path.display()
            )))
        }
        Err(TrainError::Config(m)) => Err(CliError::Validation(m)),
        Err(e) => Err(CliError::Runtime(e.into())),
    }
}

struct TrainingData {
    tk: Tokenizers<f64>,
    train: EncodedData,
    val: EncodedData,
}

fn training_data(cfg: &Config, inputs: &Inputs) -> Result<TrainingData, CliError> {
    let data = need(&inputs.data, "--data")?;
    let tk = tokenizers_from(need(&inputs.tokenizer, "--tokenizer")?)?;
    let train_ds = load_split(data, "train")?;
    let val = load_split(data, "val")?;
    let spec = train_ds.spec();
    if spec.seq_len != cfg.data.seq_len || spec.n_classes != cfg.data.n_classes || spec.token_dim != cfg.data.token_dim {
        return Err(CliError::Validation(format!(
            "dataset shape (M={}, d={}, classes={}) disagrees with the [data] section",
            spec.seq_len, spec.token_dim, spec.n_classes
        )));
    }
    if tk.codebook.vocab != cfg.tokenizer.vocab {
        return Err(CliError::Validation(format!(
            "tokenizer has V={} but tokenizer.vocab={}",
            tk.codebook.vocab, cfg.tokenizer.vocab
        )));
    }
    Ok(TrainingData {
        train: EncodedData::new(&train_ds, &tk).map_err(rt("encoding train split"))?,
        val: EncodedData::new(&val, &tk).map_err(rt("encoding val split"))?,
        tk,
    })
}

fn resume_from(inputs: &Inputs, kind: ModelKind) -> Result<Option<Checkpoint>, CliError> {
    inputs.resume.as_deref().map(|p| load_checkpoint(p, kind)).transpose()
}

fn train_prior(cfg: &Config, inputs: &Inputs, rd: &mut RunDir) -> Result<(), CliError> {
    let td = training_data(cfg, inputs)?;
    let resume = resume_from(inputs, ModelKind::Prior)?;
    let tc = cfg.train_config(cfg.prior.epochs, cfg.prior.learning_rate);
    let model = PriorModel::new(cfg.prior_config(), tc.seed).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut obj = PriorObjective {
        model,
        train: td.train,
        val: td.val,
    };
    finish_training(rd, PRIOR_FILE, |cb| train(&mut obj, &tc, resume.as_ref(), cb))
}

fn train_discon(cfg: &Config, inputs: &Inputs, rd: &mut RunDir) -> Result<(), CliError> {
    let td = training_data(cfg, inputs)?;
    let resume = resume_from(inputs, ModelKind::DisCon)?;
    let tc = cfg.train_config(cfg.discon.epochs, cfg.discon.learning_rate);
    let model = DisConModel::new(cfg.discon_config(), tc.seed).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut obj = DisConObjective {
        model,
        tokenizers: td.tk,
        train: td.train,
        val: td.val,
    };
    finish_training(rd, DISCON_FILE, |cb| train(&mut obj, &tc, resume.as_ref(), cb))
}

fn single_discon(inputs: &Inputs) -> Result<&Path, CliError> {
    match inputs.discon.as_slice() {
        [(_, p)] => Ok(p),
        [] => Err(CliError::Usage("--discon is required".into())),
        _ => Err(CliError::Usage("exactly one --discon checkpoint is expected".into())),
    }
}

fn sample(cfg: &Config, inputs: &Inputs, rd: &mut RunDir) -> Result<(), CliError> {
    let data = need(&inputs.data, "--data")?;
    let reference = load_split(data, "val")?;
    let discon = load_checkpoint(single_discon(inputs)?, ModelKind::DisCon)?;
    let prior = inputs.prior.as_deref().map(|p| load_checkpoint(p, ModelKind::Prior)).transpose()?;
    let req = cfg.sample_request();
    let (_, tk) = load_discon(&discon, true).map_err(rt("loading model"))?;
    let gt = match req.source {
        ConditionSource::GroundTruth => {
            let refs: Vec<_> = reference.of_class(req.class).collect();
            if refs.is_empty() {
                return Err(CliError::Validation(format!("validation split has no samples of class {}", req.class)));
            }
            let mut ids = Vec::new();
            for b in 0..req.n {
                ids.extend(tk.encode_discrete(&refs[b % refs.len()].tokens).map_err(rt("encoding"))?);
            }
            Some(ids)
        }
        ConditionSource::Prior => None,
    };
    let (out, prov) = generate_from_checkpoints(prior.as_ref(), &discon, &req, gt.as_deref()).map_err(sample_error)?;
    let d = reference.spec().token_dim;
    let m = out.discrete.len() / req.n;
    let mut csv = String::from(plot::SAMPLES_HEADER_PREFIX);
    for k in 0..d {
        let _ = write!(csv, ",x{k}");
    }
    csv.push('\n');
    for (t, tok) in out.tokens.chunks(d).enumerate() {
        let (mode, _) = reference.mixture.nearest(tok);
        let _ = write!(csv, "{},{},{},{mode}", t / m, t % m, out.discrete[t]);
        for v in tok {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    rd.write(plot::SAMPLES_FILE, csv.as_bytes())?;
    let prov = serde_json::to_string_pretty(&prov).map_err(|e| CliError::Runtime(e.into()))?;
    rd.write("provenance.json", prov.as_bytes())?;
    let rep = discon::eval::mode_report(&out.tokens, &reference.mixture);
    let records = vec![
        MetricRecord::new(0, "sample", "mode_coverage", rep.coverage),
        MetricRecord::new(0, "sample", "purity", rep.purity),
        MetricRecord::new(0, "sample", "ood_rate", rep.ood_rate),
    ];
    rd.write(METRICS, metrics_csv(&records).as_bytes())?;
    Ok(())
}

fn eval(cfg: &Config, inputs: &Inputs, rd: &mut RunDir, run_id: &str) -> Result<(), CliError> {
    let data = need(&inputs.data, "--data")?;
    let split = cfg.eval.split.name();
    let reference = load_split(data, split)?;
    let discon_path = single_discon(inputs)?;
    let ckpt_hash = hash_file(discon_path).map_err(rt("hashing checkpoint"))?;
    let discon = load_checkpoint(discon_path, ModelKind::DisCon)?;
    let (model, tk) = load_discon(&discon, true).map_err(rt("loading model"))?;
    let prior = match inputs.prior.as_deref() {
        Some(p) => Some(load_prior(&load_checkpoint(p, ModelKind::Prior)?, true).map_err(rt("loading prior"))?),
        None => None,
    };
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut reports = Vec::new();
    for &s in &cfg.eval.steps {
        for &tau in &cfg.eval.temperatures {
            let settings = cfg.eval_settings(s, tau);
            let t0 = Instant::now();
            let ev = evaluate_generation(prior.as_ref(), &model, &tk, &reference, &settings).map_err(sample_error)?;
            let secs = t0.elapsed().as_secs_f64() / reference.spec().n_classes as f64;
            for (name, v) in [
                ("fd", ev.fd),
                ("mode_coverage", ev.report.coverage),
                ("purity", ev.report.purity),
                ("ood_rate", ev.report.ood_rate),
            ] {
                records.push(MetricRecord::new(s as u64, split, &format!("{name}@tau={tau}"), v));
            }
            println!(
                "S={s} tau={tau}: fd {:.4} coverage {:.3} ood {:.5}",
                ev.fd, ev.report.coverage, ev.report.ood_rate
            );
            rows.push(ResultRow {
                run_id: run_id.to_string(),
                conditioning: model.config.conditioning.to_string(),
                steps: s,
                tau,
                cfg: settings.cfg_scale,
                fd: Some(ev.fd),
                mode_coverage: Some(ev.report.coverage),
                ood_rate: Some(ev.report.ood_rate),
                sec_per_batch: Some(secs),
                ckpt_hash: ckpt_hash.clone(),
                error: None,
            });
            reports.push(serde_json::json!({ "settings": settings, "result": ev }));
        }
    }
    rd.write(RESULTS_FILE, results_csv(&rows).as_bytes())?;
    rd.write(METRICS, metrics_csv(&records).as_bytes())?;
    let detail = serde_json::to_string_pretty(&reports).map_err(|e| CliError::Runtime(e.into()))?;
    rd.write("eval.json", detail.as_bytes())?;
    Ok(())
}

fn ablate(cfg: &Config, inputs: &Inputs, rd: &mut RunDir) -> Result<(), CliError> {
    let data = need(&inputs.data, "--data")?;
    if inputs.discon.is_empty() {
        return Err(CliError::Usage("at least one --discon id=path is required".into()));
    }
    let reference = load_split(data, cfg.eval.split.name())?;
    let mut cells = Vec::new();
    for (id, path) in &inputs.discon {
        for &s in &cfg.eval.steps {
            for &tau in &cfg.eval.temperatures {
                cells.push(GridCell {
                    run_id: id.clone(),
                    discon_checkpoint: path.clone(),
                    prior_checkpoint: inputs.prior.clone(),
                    steps: s,
                    temperature: tau,
                    cfg_scale: cfg.eval.cfg_scale,
                    n_per_class: cfg.eval.n_per_class,
                    seed: cfg.eval.seed,
                });
            }
        }
    }
    let rows = compare_runs(&cells, &reference);
    let mut records = Vec::new();
    for r in &rows {
        match (&r.error, r.fd) {
            (Some(e), _) => eprintln!("cell {} S={} tau={}: {e}", r.run_id, r.steps, r.tau),
            (None, Some(fd)) => {
                records.push(MetricRecord::new(r.steps as u64, &r.run_id, &format!("fd@tau={}", r.tau), fd));
                if let Some(o) = r.ood_rate {
                    records.push(MetricRecord::new(r.steps as u64, &r.run_id, &format!("ood_rate@tau={}", r.tau), o));
                }
            }
            _ => {}
        }
    }
    rd.write(RESULTS_FILE, results_csv(&rows).as_bytes())?;
    rd.write(METRICS, metrics_csv(&records).as_bytes())?;
    let detail = serde_json::to_string_pretty(&rows).map_err(|e| CliError::Runtime(e.into()))?;
    rd.write("ablate.json", detail.as_bytes())?;
    Ok(())
}

fn gradcheck(cfg: &Config, rd: Option<&mut RunDir>) -> Result<(), CliError> {
    let entries = full_suite(cfg.train.seed).map_err(rt("gradient check"))?;
    let mut csv = String::from("name,max_rel_error,passed\n");
    for e in &entries {
        println!("{:<28} {:.3e} {}", e.name, e.max_rel_error, if e.passed() { "ok" } else { "FAIL" });
        let _ = writeln!(csv, "{},{:e},{}", e.name, e.max_rel_error, e.passed());
    }
    if let Some(rd) = rd {
        rd.write("gradcheck.csv", csv.as_bytes())?;
    }
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!(
            "{} checks above tolerance {TOLERANCE:e}: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}

fn plot_cmd(inputs: &Inputs, rd: &mut RunDir) -> Result<(), CliError> {
    let from = need(&inputs.from, "--from")?;
    let kind = need(&inputs.kind, "--kind")?;
    let (file, render): (&str, Render) = match kind.as_str() {
        "scatter" => (plot::SAMPLES_FILE, plot::scatter),
        "curve" => (METRICS, plot::curve),
        other => return Err(CliError::Usage(format!("unknown plot kind `{other}`"))),
    };
    let src = from.join(file);
    let text = std::fs::read_to_string(&src)
        .with_context(|| format!("expected {file} in {}", from.display()))
        .map_err(CliError::Runtime)?;
    let (svg, csv) = render(&text).map_err(|e| CliError::Runtime(anyhow!("{}: {e}", src.display())))?;
    rd.write(&format!("plots/{kind}.svg"), svg.as_bytes())?;
    rd.write(&format!("plots/{kind}.csv"), csv.as_bytes())?;
    Ok(())
}
