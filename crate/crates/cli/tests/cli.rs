use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use discon::gradcheck::op_suite;
use discon::pipeline::checkpoint::hash_file;
use discon::pipeline::parse_metrics_csv;
use discon_cli::run::RunManifest;

const TINY: &str = r#"
[data]
n_modes = 4
seq_len = 4
n_classes = 2
n_train = 60
n_val = 24
n_test = 24

[tokenizer]
vocab = 4

[prior]
layers = 1
width = 8
epochs = 1

[discon]
layers = 1
width = 8
head_depth = 1
head_width = 8
diffusion_steps = 5
diffusion_repeats = 1
epochs = 1

[train]
batch_size = 16
warmup_steps = 2

[sample]
n = 8
steps = 2

[eval]
n_per_class = 8
steps = [2, 4]
"#;

fn discon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_discon")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = discon(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn missing_run_dir_is_a_usage_error() {
    assert_eq!(code(&discon(&["gen-data"])), 1);
}

#[test]
fn steps_above_sequence_length_fail_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[data]\nseq_len = 16\n[sample]\nsteps = 17\n");
    let o = discon(&["sample", "--config", s(&cfg), "--run-dir", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("S <= M"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_fails_validation_and_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[train]\nbatch_sise = 8\n");
    let o = discon(&["gen-data", "--config", s(&cfg), "--run-dir", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("batch_sise"), "{}", stderr(&o));
    let o = discon(&["gen-data", "--set", "nosection.x=1", "--run-dir", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nosection"), "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_every_op() {
    let tmp = tempfile::tempdir().unwrap();
    let o = discon(&["gradcheck", "--run-dir", s(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    for e in op_suite(0).unwrap() {
        assert!(out.contains(&e.name), "{} missing", e.name);
    }
    let csv = std::fs::read_to_string(tmp.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    assert!(manifest(tmp.path()).artifacts.contains_key("gradcheck.csv"));
}

#[test]
fn empty_scatter_is_axes_only() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    std::fs::create_dir_all(&src).unwrap();
    std::fs::write(src.join("samples.csv"), "sample,position,code,mode,x0,x1\n").unwrap();
    let out = tmp.path().join("out");
    let o = discon(&["plot", "--kind", "scatter", "--from", s(&src), "--run-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = std::fs::read_to_string(out.join("plots/scatter.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("<path") && !svg.contains("<circle"));
}

#[test]
fn identical_inputs_give_identical_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let metrics = "step,split,metric,value\n0,val,loss,2.5\n10,train,loss,2.1\n10,val,loss,2.0\n20,val,loss,1.25\n";
    let samples = "sample,position,code,mode,x0,x1\n0,0,1,3,0.5,-2.25\n0,1,0,1,10.125,4\n";
    let mut outputs = Vec::new();
    for k in 0..2 {
        let src = tmp.path().join(format!("src{k}"));
        std::fs::create_dir_all(&src).unwrap();
        std::fs::write(src.join("metrics.csv"), metrics).unwrap();
        std::fs::write(src.join("samples.csv"), samples).unwrap();
        let out = tmp.path().join(format!("out{k}"));
        for kind in ["scatter", "curve"] {
            let o = discon(&["plot", "--kind", kind, "--from", s(&src), "--run-dir", s(&out)]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
        }
        outputs.push(out);
    }
    for f in ["plots/scatter.svg", "plots/scatter.csv", "plots/curve.svg", "plots/curve.csv"] {
        let a = std::fs::read(outputs[0].join(f)).unwrap();
        let b = std::fs::read(outputs[1].join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let n = parse_metrics_csv(metrics).unwrap().len();
    let rows = std::fs::read_to_string(outputs[0].join("plots/curve.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows, n);
}

#[test]
fn curve_without_metrics_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("empty");
    std::fs::create_dir_all(&src).unwrap();
    let o = discon(&["plot", "--kind", "curve", "--from", s(&src), "--run-dir", s(&tmp.path().join("out"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("metrics.csv"), "{}", stderr(&o));
}

#[test]
fn locked_run_dir_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join(".lock"), "").unwrap();
    let o = discon(&["gen-data", "--run-dir", s(tmp.path())]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("in use"), "{}", stderr(&o));
}

/// Every file in the run directory except the manifest itself is listed
/// with its current hash.
fn assert_manifest_complete(dir: &Path) {
    let m = manifest(dir);
    let mut found = BTreeSet::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                found.insert(p.strip_prefix(dir).unwrap().to_str().unwrap().to_string());
            }
        }
    }
    found.remove("manifest.json");
    assert_eq!(found, m.artifacts.keys().cloned().collect::<BTreeSet<_>>(), "{}", dir.display());
    for (rel, h) in &m.artifacts {
        assert_eq!(&hash_file(&dir.join(rel)).unwrap(), h, "{rel}");
    }
}

#[test]
fn tiny_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = write_config(t, TINY);
    let c = s(&cfg);
    let run = |args: &[&str]| {
        let o = discon(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        o
    };
    run(&["gen-data", "--config", c, "--run-dir", s(&t.join("data"))]);
    let data = t.join("data/data");
    run(&["fit-tokenizer", "--config", c, "--data", s(&data), "--run-dir", s(&t.join("tok"))]);
    let tok = t.join("tok/checkpoints/tokenizer.dsck");
    run(&["train-prior", "--config", c, "--data", s(&data), "--tokenizer", s(&tok), "--run-dir", s(&t.join("prior"))]);
    let prior = t.join("prior/checkpoints/prior.dsck");
    run(&["train-discon", "--config", c, "--data", s(&data), "--tokenizer", s(&tok), "--run-dir", s(&t.join("dc"))]);
    let dc = t.join("dc/checkpoints/discon.dsck");
    run(&["sample", "--config", c, "--data", s(&data), "--prior", s(&prior), "--discon", s(&dc), "--run-dir", s(&t.join("smp"))]);
    run(&["plot", "--kind", "scatter", "--from", s(&t.join("smp")), "--run-dir", s(&t.join("plot"))]);
    run(&["eval", "--config", c, "--data", s(&data), "--prior", s(&prior), "--discon", s(&dc), "--run-dir", s(&t.join("ev"))]);
    let ablate = format!("a={}", s(&dc));
    let missing = format!("b={}", s(&t.join("nope.dsck")));
    run(&["ablate", "--config", c, "--data", s(&data), "--prior", s(&prior), "--discon", &ablate, "--discon", &missing, "--run-dir", s(&t.join("ab"))]);

    for d in ["data", "tok", "prior", "dc", "smp", "plot", "ev", "ab"] {
        assert_manifest_complete(&t.join(d));
        assert!(!t.join(d).join(".lock").exists());
    }

    // 8 samples of M=4 tokens, one row each.
    let samples = std::fs::read_to_string(t.join("smp/samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 8 * 4);
    let scatter = std::fs::read_to_string(t.join("plot/plots/scatter.svg")).unwrap();
    assert_eq!(scatter.matches("<circle").count(), 32);

    // Two S values, one tau: two result rows. The ablation keeps the failing cell.
    let results = std::fs::read_to_string(t.join("ev/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 3);
    let ab = std::fs::read_to_string(t.join("ab/results.csv")).unwrap();
    assert_eq!(ab.lines().count(), 5);
    assert!(ab.lines().any(|l| l.starts_with("b,")));

    // Replaying the manifest reproduces the metrics and run id.
    let o = run(&["eval", "--manifest", s(&t.join("ev/manifest.json")), "--run-dir", s(&t.join("ev2"))]);
    drop(o);
    assert_eq!(
        std::fs::read(t.join("ev/metrics.csv")).unwrap(),
        std::fs::read(t.join("ev2/metrics.csv")).unwrap()
    );
    assert_eq!(manifest(&t.join("ev")).run_id, manifest(&t.join("ev2")).run_id);
    let o = discon(&["sample", "--manifest", s(&t.join("ev/manifest.json")), "--run-dir", s(&t.join("x"))]);
    assert_eq!(code(&o), 2);

    // Wrong checkpoint kinds are validation errors.
    let o = discon(&["train-prior", "--config", c, "--data", s(&data), "--tokenizer", s(&tok), "--resume", s(&dc), "--run-dir", s(&t.join("bad"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = discon(&["eval", "--config", c, "--data", s(&data), "--discon", s(&prior), "--run-dir", s(&t.join("bad2"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    // Sampling more steps than the checkpoint's sequence length.
    let o = discon(&["sample", "--config", c, "--set", "sample.steps=5", "--data", s(&data), "--prior", s(&prior), "--discon", s(&dc), "--run-dir", s(&t.join("bad3"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("S <= M"), "{}", stderr(&o));

    // Resuming the finished prior run for one more epoch.
    run(&["train-prior", "--config", c, "--set", "prior.epochs=2", "--data", s(&data), "--tokenizer", s(&tok), "--resume", s(&prior), "--run-dir", s(&t.join("prior2"))]);
    let m = std::fs::read_to_string(t.join("prior2/metrics.csv")).unwrap();
    assert_eq!(parse_metrics_csv(&m).unwrap().len(), 3);
}
