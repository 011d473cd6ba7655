use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use textlab_core::data::{load_jsonl, nearest_signature};

fn textlab(args: &[&str]) -> Output {
    textlab_env(args, None)
}

fn textlab_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_textlab"));
    cmd.args(args).env_remove("TEXTLAB_SEED");
    if let Some(s) = seed {
        cmd.env("TEXTLAB_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

const TOY_CONFIG: &str = r#"{
    "name": "toy",
    "model": "transformer",
    "dims": {"dim": 16, "heads": 2, "ffn_dim": 32, "layers": 1, "context_dim": 8, "hidden_dim": 16},
    "optimizer": "adam",
    "hyper": {"lr": 0.01},
    "max_seq_len": 32,
    "epochs": 1,
    "seed": 5
}"#;

/// 16 perfectly separable examples, four per class.
fn toy_data(dir: &Path) -> PathBuf {
    let profile = dir.join("profile.json");
    fs::write(&profile, "[4, 4, 4, 4]").unwrap();
    let data = dir.join("toy.jsonl");
    ok(&textlab(&[
        "gen-data",
        "--out",
        s(&data),
        "--q",
        "1.0",
        "--seed",
        "11",
        "--profile",
        s(&profile),
    ]));
    data
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn gen_data_default_profile() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("full.jsonl");
    let stdout = ok(&textlab(&["gen-data", "--out", s(&out)]));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 9649);
    assert!(stdout.contains("class 3: 2671"), "{stdout}");
    assert!(stdout.contains("class 0: 19"), "{stdout}");
}

#[test]
fn gen_data_scaled_profile() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("small.jsonl");
    let stdout = ok(&textlab(&["gen-data", "--out", s(&out), "--scale", "0.207"]));
    let lines = fs::read_to_string(&out).unwrap().lines().count();
    assert!((1990..=2010).contains(&lines), "{lines}");
    assert!(stdout.contains("class 0: 4\n"), "{stdout}");
}

#[test]
fn gen_data_fully_separable_corpus() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sep.jsonl");
    ok(&textlab(&["gen-data", "--out", s(&out), "--scale", "0.1", "--q", "1.0"]));
    let examples = load_jsonl(&out, 8).unwrap();
    assert!(examples.iter().all(|e| nearest_signature(&e.text, 8) == e.label));
}

#[test]
fn gen_data_errors() {
    let dir = TempDir::new().unwrap();
    let profile = dir.path().join("bad.json");
    fs::write(&profile, "[5, 0, 3]").unwrap();
    let out = dir.path().join("x.jsonl");
    let r = textlab(&["gen-data", "--out", s(&out), "--profile", s(&profile)]);
    assert_eq!(code(&r), 2, "{}", stderr(&r));
    assert!(stderr(&r).contains("class 1"));

    let unwritable = dir.path().join("missing-dir").join("x.jsonl");
    let r = textlab(&["gen-data", "--out", s(&unwritable), "--scale", "0.05"]);
    assert_eq!(code(&r), 3, "{}", stderr(&r));

    let r = textlab(&["gen-data", "--out", s(&out), "--q", "1.5"]);
    assert_eq!(code(&r), 2);
    assert!(!out.exists());
}

#[test]
fn train_writes_checkpoint_and_trace() {
    let dir = TempDir::new().unwrap();
    let data = toy_data(dir.path());
    let config = write_config(dir.path(), TOY_CONFIG);
    let out_dir = dir.path().join("run");
    ok(&textlab(&["train", "--config", s(&config), "--data", s(&data), "--out-dir", s(&out_dir)]));
    assert!(out_dir.join("checkpoint.json").is_file());
    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2, "{trace}");
    assert!(trace.starts_with("epoch,train_loss,val_accuracy,wall_time_s\n"));
    for name in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        assert!(out_dir.join(name).is_file());
    }
}

#[test]
fn train_data_path_from_config() {
    let dir = TempDir::new().unwrap();
    toy_data(dir.path());
    let body = TOY_CONFIG.replacen('{', r#"{"data": "toy.jsonl", "split_seed": 4,"#, 1);
    let config = write_config(dir.path(), &body);
    let out_dir = dir.path().join("run");
    ok(&textlab(&["train", "--config", s(&config), "--out-dir", s(&out_dir)]));
    assert!(out_dir.join("checkpoint.json").is_file());
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn train_is_bitwise_reproducible() {
    let dir = TempDir::new().unwrap();
    let data = toy_data(dir.path());
    let body = TOY_CONFIG.replace("\"epochs\": 1", "\"epochs\": 3");
    let config = write_config(dir.path(), &body);
    let before = fs::read(&data).unwrap();
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        ok(&textlab(&["train", "--config", s(&config), "--data", s(&data), "--out-dir", s(&out_dir)]));
        read_dir_bytes(&out_dir)
    };
    assert_eq!(run("a"), run("b"));
    assert_eq!(fs::read(&data).unwrap(), before);
}

#[test]
fn seed_env_overrides_config() {
    let dir = TempDir::new().unwrap();
    let data = toy_data(dir.path());
    let config = write_config(dir.path(), TOY_CONFIG);
    let run = |name: &str, seed: Option<&str>| {
        let out_dir = dir.path().join(name);
        ok(&textlab_env(
            &["train", "--config", s(&config), "--data", s(&data), "--out-dir", s(&out_dir)],
            seed,
        ));
        fs::read_to_string(out_dir.join("checkpoint.json")).unwrap()
    };
    let explicit = run("explicit", Some("5"));
    assert_eq!(explicit, run("config", None));
    let other = run("other", Some("6"));
    assert_ne!(explicit, other);
    let v: serde_json::Value = serde_json::from_str(&other).unwrap();
    assert_eq!(v["config"]["seed"], 6);

    let out_dir = dir.path().join("bad");
    let r = textlab_env(
        &["train", "--config", s(&config), "--data", s(&data), "--out-dir", s(&out_dir)],
        Some("minus one"),
    );
    assert_eq!(code(&r), 2);
}

#[test]
fn train_rejects_unknown_config_key() {
    let dir = TempDir::new().unwrap();
    let data = toy_data(dir.path());
    let body = TOY_CONFIG.replacen('{', r#"{"lr_warmup": 100,"#, 1);
    let config = write_config(dir.path(), &body);
    let out_dir = dir.path().join("run");
    let r = textlab(&["train", "--config", s(&config), "--data", s(&data), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("lr_warmup"), "{}", stderr(&r));
    assert!(!out_dir.exists());

    let nested = TOY_CONFIG.replace("\"lr\": 0.01", "\"lr\": 0.01, \"warmup\": 3");
    let config = write_config(dir.path(), &nested);
    let r = textlab(&["train", "--config", s(&config), "--data", s(&data), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("warmup"), "{}", stderr(&r));

    let invalid = TOY_CONFIG.replace("\"epochs\": 1", "\"epochs\": 0");
    let config = write_config(dir.path(), &invalid);
    let r = textlab(&["train", "--config", s(&config), "--data", s(&data), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("epochs"), "{}", stderr(&r));
}

#[test]
fn train_reports_data_line_numbers() {
    let dir = TempDir::new().unwrap();
    let data = toy_data(dir.path());
    let mut raw = fs::read_to_string(&data).unwrap();
    raw.push_str("{\"text\": \"broken\"}\n");
    fs::write(&data, raw).unwrap();
    let config = write_config(dir.path(), TOY_CONFIG);
    let out_dir = dir.path().join("run");
    let r = textlab(&["train", "--config", s(&config), "--data", s(&data), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&r), 3);
    assert!(stderr(&r).contains(":17:"), "{}", stderr(&r));
}

#[test]
fn train_non_finite_exits_with_numeric_code() {
    let dir = TempDir::new().unwrap();
    let data = toy_data(dir.path());
    let body = TOY_CONFIG
        .replace("\"adam\"", "\"sgd\"")
        .replace("\"lr\": 0.01", "\"lr\": 1e300")
        .replace("\"epochs\": 1", "\"epochs\": 5");
    let config = write_config(dir.path(), &body);
    let out_dir = dir.path().join("run");
    let r = textlab(&["train", "--config", s(&config), "--data", s(&data), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&r), 4, "{}", stderr(&r));
    assert!(stderr(&r).contains("non-finite"), "{}", stderr(&r));
}

fn trained_toy(dir: &Path) -> PathBuf {
    let data = toy_data(dir);
    let body = TOY_CONFIG.replace("\"epochs\": 1", "\"epochs\": 30, \"early_stop_patience\": 0");
    let config = write_config(dir, &body);
    let out_dir = dir.join("run");
    ok(&textlab(&["train", "--config", s(&config), "--data", s(&data), "--out-dir", s(&out_dir)]));
    out_dir
}

#[test]
fn eval_on_training_partition() {
    let dir = TempDir::new().unwrap();
    let run = trained_toy(dir.path());
    let eval_dir = dir.path().join("eval");
    let (ckpt, train_part) = (run.join("checkpoint.json"), run.join("train.jsonl"));
    let args = [
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&train_part),
        "--out-dir",
        s(&eval_dir),
    ];
    ok(&textlab(&args));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["accuracy"], 1.0);
    assert_eq!(metrics["wf1"], 1.0);

    let raw = fs::read_to_string(eval_dir.join("confusion.csv")).unwrap();
    let total: u64 = raw
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).map(|v| v.parse::<u64>().unwrap()).collect::<Vec<_>>())
        .sum();
    assert_eq!(total, 8);
    let normalized = fs::read_to_string(eval_dir.join("confusion_normalized.csv")).unwrap();
    for line in normalized.lines().skip(1) {
        let sum: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9, "{line}");
    }

    let first = read_dir_bytes(&eval_dir);
    ok(&textlab(&args));
    assert_eq!(first, read_dir_bytes(&eval_dir));
}

#[test]
fn eval_rejects_broken_checkpoints() {
    let dir = TempDir::new().unwrap();
    let data = toy_data(dir.path());
    let config = write_config(dir.path(), TOY_CONFIG);
    let run = dir.path().join("run");
    ok(&textlab(&["train", "--config", s(&config), "--data", s(&data), "--out-dir", s(&run)]));
    let original: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("checkpoint.json")).unwrap()).unwrap();

    let eval = |value: &serde_json::Value| {
        let path = dir.path().join("tampered.json");
        fs::write(&path, value.to_string()).unwrap();
        textlab(&["eval", "--checkpoint", s(&path), "--data", s(&data), "--out-dir", s(&dir.path().join("e"))])
    };

    let mut truncated = original.clone();
    let params = truncated["params"].as_object_mut().unwrap();
    let last = params.keys().last().unwrap().clone();
    params.remove(&last);
    let r = eval(&truncated);
    assert_eq!(code(&r), 3);
    assert!(stderr(&r).contains("checkpoint"), "{}", stderr(&r));

    let mut short = original.clone();
    short["params"]["head.weight"]["data"].as_array_mut().unwrap().pop();
    let r = eval(&short);
    assert_eq!(code(&r), 3);
    assert!(stderr(&r).contains("head.weight"), "{}", stderr(&r));

    let mut version = original.clone();
    version["format_version"] = 99.into();
    let r = eval(&version);
    assert_eq!(code(&r), 3);
    assert!(stderr(&r).contains("format_version"), "{}", stderr(&r));

    let path = dir.path().join("cut.json");
    let text = original.to_string();
    fs::write(&path, &text[..text.len() / 2]).unwrap();
    let r = textlab(&["eval", "--checkpoint", s(&path), "--data", s(&data), "--out-dir", s(&dir.path().join("e"))]);
    assert_eq!(code(&r), 3);
}

#[test]
fn curves_reductions_and_bracketing() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t0.csv");
    ok(&textlab(&["curves", "--p-points", "200", "--gammas", "2", "--ts", "0", "--out", s(&out)]));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 200);
    for r in &rows {
        let (ce, focal, cewf) = (r[3], r[4], r[5]);
        assert!((cewf - 0.5 * (ce + focal)).abs() < 1e-12);
    }

    let out = dir.path().join("g0.csv");
    ok(&textlab(&["curves", "--p-points", "200", "--gammas", "0", "--ts", "1", "--out", s(&out)]));
    for r in csv_rows(&out) {
        assert!((r[5] - r[3]).abs() < 1e-12);
        assert!((r[4] - r[3]).abs() < 1e-12);
    }

    let out = dir.path().join("grid.csv");
    ok(&textlab(&[
        "curves",
        "--p-points",
        "500",
        "--gammas",
        "0.5,1,2,5",
        "--ts",
        "0.5,1,2,4",
        "--out",
        s(&out),
    ]));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 500 * 16);
    for r in &rows {
        assert!(r[0] > 0.0 && r[0] < 1.0);
        assert!(r[4] <= r[5] + 1e-12 && r[5] <= r[3] + 1e-12, "{r:?}");
    }
}

#[test]
fn curves_rejects_bad_arguments() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c.csv");
    assert_eq!(code(&textlab(&["curves", "--p-points", "1", "--out", s(&out)])), 2);
    assert_eq!(code(&textlab(&["curves", "--gammas", "2,x", "--out", s(&out)])), 2);
    assert_eq!(code(&textlab(&["curves", "--ts", "-1", "--out", s(&out)])), 2);
    assert!(!out.exists());
}

#[test]
fn optim_demo_schedule() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("demo.csv");
    ok(&textlab(&["optim-demo", "--steps", "2000", "--out", s(&out)]));
    let header = fs::read_to_string(&out).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "step,lower,upper,adam_step_size,adabound_step_size");
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 2000);
    assert_eq!(rows[0][0], 1.0);
    assert!((rows[0][1] - 9.99000999000999e-5).abs() < 1e-15);
    assert!((rows[0][2] - 100.1).abs() < 1e-9);
    for w in rows.windows(2) {
        assert!(w[1][1] >= w[0][1]);
        assert!(w[1][2] <= w[0][2]);
    }
    for r in &rows {
        assert!(r[1] <= r[4] && r[4] <= r[2]);
    }
}

#[test]
fn optim_demo_long_run_settles_on_final_lr() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("long.csv");
    ok(&textlab(&["optim-demo", "--steps", "1000000", "--every", "100000", "--out", s(&out)]));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 10);
    let last = rows.last().unwrap();
    assert_eq!(last[0], 1e6);
    assert!((last[4] - 0.1).abs() < 1e-3, "{last:?}");
}

#[test]
fn optim_demo_rejects_zero_steps() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("demo.csv");
    assert_eq!(code(&textlab(&["optim-demo", "--steps", "0", "--out", s(&out)])), 2);
}

#[test]
fn commands_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let runs: Vec<Vec<String>> = vec![
        vec!["gen-data".into(), "--scale".into(), "0.05".into(), "--seed".into(), "9".into(), "--out".into()],
        vec!["curves".into(), "--gammas".into(), "1,2".into(), "--ts".into(), "0,3".into(), "--out".into()],
        vec!["optim-demo".into(), "--steps".into(), "500".into(), "--out".into()],
    ];
    for (i, args) in runs.iter().enumerate() {
        let a = d.join(format!("{i}-a"));
        let b = d.join(format!("{i}-b"));
        let mut first: Vec<&str> = args.iter().map(String::as_str).collect();
        let mut second = first.clone();
        first.push(s(&a));
        second.push(s(&b));
        let out_a = ok(&textlab(&first));
        let out_b = ok(&textlab(&second));
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{args:?}");
        assert_eq!(out_a.replace(s(&a), ""), out_b.replace(s(&b), ""));
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&textlab(&[])), 2);
    assert_eq!(code(&textlab(&["frobnicate"])), 2);
    assert_eq!(code(&textlab(&["train", "--config"])), 2);
}
