//! End-to-end tests of the `drsf` binary: subcommands, file outputs, and
//! exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

fn drsf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drsf"))
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

const TINY_BENCH: &str = r#"
train_per_domain = 16
test_per_domain = 8
master_seed = 7
"#;

fn tiny_train_config(data_dir: &Path) -> String {
    format!(
        r#"
steps = 4
batch_size = 4
seeds = [1]
k = 1
data_dir = "{}"
"#,
        data_dir.display()
    )
}

#[test]
fn generate_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bench_cfg = dir.path().join("bench.toml");
    write(&bench_cfg, TINY_BENCH);
    let data = dir.path().join("data");

    let out = drsf()
        .args(["generate-data", "--config"])
        .arg(&bench_cfg)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("benchmark.toml").exists());

    let train_cfg = dir.path().join("train.toml");
    write(&train_cfg, &tiny_train_config(&data));
    let run_dir = dir.path().join("run");
    let out = drsf()
        .args(["train", "--config"])
        .arg(&train_cfg)
        .arg("--out")
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let checkpoint = run_dir.join("model_seed1.drsfck");
    assert!(checkpoint.exists());
    assert!(run_dir.join("metrics.csv").exists());
    assert!(run_dir.join("summary.json").exists());

    // eval against the benchmark directory
    let out = drsf()
        .args(["eval", "--checkpoint"])
        .arg(&checkpoint)
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mPT"), "missing mPT line: {stdout}");

    // eval against one dataset file
    let one = fs::read_dir(&data)
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.file_name().to_string_lossy().starts_with("target_"))
        .unwrap();
    let out = drsf()
        .args(["eval", "--checkpoint"])
        .arg(&checkpoint)
        .arg("--data")
        .arg(one.path())
        .output()
        .unwrap();
    assert!(out.status.success());
}

#[test]
fn generate_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let bench_cfg = dir.path().join("bench.toml");
    write(&bench_cfg, TINY_BENCH);
    let mut hashes = Vec::new();
    for sub in ["a", "b"] {
        let data = dir.path().join(sub);
        let out = drsf()
            .args(["generate-data", "--config"])
            .arg(&bench_cfg)
            .arg("--out")
            .arg(&data)
            .output()
            .unwrap();
        assert!(out.status.success());
        let bytes = fs::read(data.join("source_train_day.drsf")).unwrap();
        hashes.push(drsf_core::hash::fnv64(&bytes));
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    write(&cfg, "steps = 5\nmystery_knob = 1\n");
    let out = drsf()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_config_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    write(&cfg, "lr = -0.5\n");
    let out = drsf()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_dir_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    write(
        &cfg,
        &format!("data_dir = \"{}\"\n", dir.path().join("nope").display()),
    );
    let out = drsf()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn corrupt_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bench_cfg = dir.path().join("bench.toml");
    write(&bench_cfg, TINY_BENCH);
    let data = dir.path().join("data");
    assert!(drsf()
        .args(["generate-data", "--config"])
        .arg(&bench_cfg)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    // truncate one dataset
    let victim = data.join("source_train_day.drsf");
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() - 32]).unwrap();
    let train_cfg = dir.path().join("train.toml");
    write(&train_cfg, &tiny_train_config(&data));
    let out = drsf()
        .args(["train", "--config"])
        .arg(&train_cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_suite_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = drsf()
        .args(["ablate", "--suite", "made_up", "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_layer_mask_emits_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let bench_cfg = dir.path().join("bench.toml");
    write(&bench_cfg, TINY_BENCH);
    let data = dir.path().join("data");
    assert!(drsf()
        .args(["generate-data", "--config"])
        .arg(&bench_cfg)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    let cfg = dir.path().join("ablate.toml");
    write(
        &cfg,
        &format!(
            "steps = 2\nbatch_size = 4\nseeds = [1]\nk = 3\ndata_dir = \"{}\"\n",
            data.display()
        ),
    );
    let out_dir = dir.path().join("out");
    let out = drsf()
        .args(["ablate", "--suite", "layer_mask", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .env("DRSF_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(out_dir.join("table.csv")).unwrap();
    // header + 6 rows
    assert_eq!(table.lines().count(), 7, "{table}");
    assert!(table.contains("s123"));
}

#[test]
fn grad_check_succeeds() {
    let out = drsf().arg("grad-check").output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("all"), "{stdout}");
}
