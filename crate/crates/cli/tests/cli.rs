use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SPEC: &str = r#"
version = 1

[model]
image_size = 16
patch_size = 4
channels = 3
embed_dim = 16
num_layers = 1
num_heads = 2
num_classes = 3

[model.prompt]
visual_len = 2
kv_len = 2
segments = 4

[pretrain]
optimizer = "adamw"
base_lr = 0.002
weight_decay = 0.05
epochs = 2
warmup_epochs = 1
batch_size = 16

[finetune]
base_lr = 0.1
epochs = 2
warmup_epochs = 1
batch_size = 16

[data.source]
kind = "shift"
seed = 0
classes = 3
per_class = 8

[data.target]
kind = "shift"
seed = 0
classes = 3
per_class = 8
"#;

fn write_spec(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("spec.toml");
    fs::write(&path, text).unwrap();
    path
}

fn kvprompt(spec: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvprompt"))
        .args(args)
        .arg("--config")
        .arg(spec)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn read_toml(path: &Path) -> toml::Table {
    fs::read_to_string(path).unwrap().parse().unwrap()
}

#[test]
fn prune_before_finetune_is_a_pipeline_error() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), SPEC);
    let o = kvprompt(&spec, &tmp.path().join("runs"), &["prune"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("finetune"), "{err}");
}

#[test]
fn bad_config_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), &SPEC.replace("num_classes = 3", "num_classes = 3\nwidth = 9"));
    let o = kvprompt(&spec, &tmp.path().join("runs"), &["pretrain"]);
    assert_eq!(o.status.code(), Some(2));
    let o = kvprompt(&tmp.path().join("absent.toml"), &tmp.path().join("runs"), &["pretrain"]);
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_kvprompt"))
        .args(["pretrain", "--precision", "16"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_finetune_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), &SPEC.replace("base_lr = 0.1", "base_lr = 1e200"));
    let out = tmp.path().join("runs");
    ok(kvprompt(&spec, &out, &["pretrain", "--quiet"]));
    let o = kvprompt(&spec, &out, &["finetune"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_of_pretrain_checkpoint_matches_finetune_epoch_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), SPEC);
    let out = tmp.path().join("runs");
    ok(kvprompt(&spec, &out, &["pretrain"]));
    ok(kvprompt(&spec, &out, &["finetune"]));
    let ckpt = out.join("pretrain/checkpoint");
    ok(kvprompt(&spec, &out, &["eval", "--checkpoint", ckpt.to_str().unwrap()]));

    let metrics = read_toml(&out.join("eval/metrics.toml"));
    let eval_acc = metrics["val_acc"].as_float().unwrap();
    let mut rows = csv::Reader::from_path(out.join("finetune/epochs.csv")).unwrap();
    let header = rows.headers().unwrap().clone();
    let col = header.iter().position(|h| h == "val_acc").unwrap();
    let first = rows.records().next().unwrap().unwrap();
    assert_eq!(first.get(0), Some("finetune"));
    assert_eq!(first.get(1), Some("0"));
    let epoch0: f64 = first.get(col).unwrap().parse().unwrap();
    assert_eq!(eval_acc, epoch0);
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), SPEC);
    let out = tmp.path().join("runs");
    for cmd in ["pretrain", "finetune", "prune", "rewind", "embed"] {
        ok(kvprompt(&spec, &out, &[cmd]));
    }
    for f in [
        "pretrain/checkpoint/manifest.toml",
        "finetune/record.toml",
        "finetune/epochs.csv",
        "prune/importance.csv",
        "prune/summary.toml",
        "rewind/checkpoint/manifest.toml",
        "embed/points.csv",
        "embed/scatter.svg",
        "embed/recall.csv",
        "embed/metadata.toml",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let summary = read_toml(&out.join("prune/summary.toml"));
    assert!(summary["visual_params_after"].as_integer() < summary["visual_params_before"].as_integer());
    let o = kvprompt(&spec, &out, &["prune"]);
    assert_eq!(o.status.code(), Some(0), "prune reruns from the finetune checkpoint");
    let rewind_ckpt = out.join("rewind/checkpoint");
    let o = kvprompt(&spec, &out, &["rewind", "--checkpoint", rewind_ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_prints_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), SPEC);
    let out = tmp.path().join("runs");
    ok(kvprompt(&spec, &out, &["pretrain", "--quiet"]));
    let stdout = ok(kvprompt(&spec, &out, &["ablate"]));
    let lines: Vec<&str> = stdout.lines().collect();
    for h in ["Pruning", "Tuned/Total", "Accuracy"] {
        assert!(lines[0].contains(h), "{}", lines[0]);
    }
    let rows: Vec<&&str> = lines[2..].iter().filter(|l| l.trim_end().ends_with('%')).collect();
    assert_eq!(rows.len(), 4, "{stdout}");
    assert!(out.join("ablate/rows.csv").is_file());
}

#[test]
fn sweep_runs_a_small_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SPEC.replace("base_lr = 0.1", "base_lr = 0.1\nlr_grid = [0.5, 0.1]\nwd_grid = [0.0]");
    let spec = write_spec(tmp.path(), &text);
    let out = tmp.path().join("runs");
    ok(kvprompt(&spec, &out, &["pretrain", "--quiet"]));
    ok(kvprompt(&spec, &out, &["sweep"]));
    let mut cells = csv::Reader::from_path(out.join("sweep/cells.csv")).unwrap();
    assert_eq!(cells.records().count(), 2);
    assert!(out.join("sweep/checkpoint/manifest.toml").is_file());
}

#[test]
fn seed_and_precision_flags_override_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), SPEC);
    let out = tmp.path().join("runs");
    ok(kvprompt(&spec, &out, &["pretrain", "--seed", "7", "--precision", "32", "--quiet"]));
    let snapshot = read_toml(&out.join("pretrain/config.toml"));
    assert_eq!(snapshot["model"]["seed"].as_integer(), Some(7));
    assert_eq!(snapshot["model"]["precision"].as_str(), Some("32"));
    let manifest = read_toml(&out.join("pretrain/checkpoint/manifest.toml"));
    assert_eq!(manifest["precision"].as_str(), Some("32"));
}

#[test]
fn eval_from_the_finetune_snapshot_reproduces_its_record() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), SPEC);
    let out = tmp.path().join("runs");
    ok(kvprompt(&spec, &out, &["pretrain", "--quiet"]));
    ok(kvprompt(&spec, &out, &["finetune", "--quiet"]));
    let snapshot = out.join("finetune/config.toml");
    let ckpt = out.join("finetune/checkpoint");
    let again = tmp.path().join("again");
    ok(kvprompt(&snapshot, &again, &["eval", "--checkpoint", ckpt.to_str().unwrap()]));
    let record = read_toml(&out.join("finetune/record.toml"));
    let metrics = read_toml(&again.join("eval/metrics.toml"));
    let best = record["best_val_acc"].as_float().unwrap();
    assert_eq!(metrics["val_acc"].as_float().unwrap(), best);
}
