//! The `cluda` binary: subcommands, exit codes and the error line.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cluda(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cluda"));
    for a in args {
        cmd.arg(a);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// `error kind=<kind> message="..."` as the only stderr line.
fn assert_error_line(o: &Output, kind: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error kind={kind} message=\"")), "{err}");
    assert!(lines[0].ends_with('"'), "{err}");
}

fn write_config(dir: &Path, name: &str, iters: u64) -> std::path::PathBuf {
    let out = dir.join(format!("{name}-run"));
    let cfg = common::tiny_experiment(&out, iters);
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn gen_data_then_train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a", 4);
    let data = tmp.path().join("data");
    let o = cluda(&[&"gen-data", &cfg, &data]);
    assert!(o.status.success(), "{}", stderr(&o));
    for split in cluda::data::SPLITS {
        assert!(data.join(split).join(cluda::data::MANIFEST_FILE).exists());
    }

    // train on the written corpus
    let mut c = cluda::eval::ExperimentConfig::from_file(&cfg).unwrap();
    c.data.dir = Some(data.clone());
    fs::write(&cfg, c.to_toml().unwrap()).unwrap();
    let o = cluda(&[&"train", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("a-run");
    for f in ["metrics.csv", "eval.csv", "report.toml", "config.toml", "checkpoint/checkpoint.toml"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let train_miou = stdout(&o).split("miou=").nth(1).unwrap().split_whitespace().next().unwrap().to_string();

    // eval on the corpus root (held-out split) and on the split directly agree with training's report
    for dataset in [data.clone(), data.join(cluda::data::SPLITS[2])] {
        let o = cluda(&[&"eval", &run.join("checkpoint"), &dataset]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        let last = out.lines().last().unwrap();
        assert!(last.starts_with("iteration=4 images=4 miou="), "{out}");
        assert_eq!(last.split("miou=").nth(1).unwrap(), train_miou);
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad", 2);
    let mut text = fs::read_to_string(&cfg).unwrap();
    text = text.replace("[schedule]\n", "[schedule]\nlearning_rate = 0.1\n");
    fs::write(&cfg, text).unwrap();
    let o = cluda(&[&"train", &cfg]);
    assert_error_line(&o, "config");
    assert!(stderr(&o).contains("learning_rate"));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn invalid_toml_and_missing_files_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[data\nseed = ").unwrap();
    assert_error_line(&cluda(&[&"train", &bad]), "config");
    assert_error_line(&cluda(&[&"train", &tmp.path().join("nope.toml")]), "io");
    assert_error_line(&cluda(&[&"eval", &tmp.path().join("nope"), &tmp.path()]), "io");
}

#[test]
fn usage_errors_use_the_error_line() {
    let o = cluda(&[&"frobnicate"]);
    assert_error_line(&o, "usage");
    assert_eq!(o.status.code(), Some(2));
    assert_error_line(&cluda(&[&"ablate", &"table4a"]), "usage");
    assert!(cluda(&[&"--help"]).status.success());
}

#[test]
fn unknown_preset_is_a_config_error() {
    let o = cluda(&[&"ablate", &"table9", &"--seeds", &"1"]);
    assert_error_line(&o, "config");
    assert!(stderr(&o).contains("table9"));
}

#[test]
fn bad_thread_cap_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "t", 1);
    let o = Command::new(env!("CARGO_BIN_EXE_cluda"))
        .args(["ablate", "table4a", "--seeds", "1", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("abl"))
        .env("CLUDA_THREADS", "zero")
        .output()
        .unwrap();
    assert_error_line(&o, "config");
    assert!(stderr(&o).contains("CLUDA_THREADS"));
}

#[test]
fn tiny_ablation_prints_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "abl", 2);
    let o = Command::new(env!("CARGO_BIN_EXE_cluda"))
        .args(["ablate", "table4a", "--seeds", "1,2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("abl"))
        .env("CLUDA_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for name in ["no-cl", "unweighted-cl", "weighted-cl"] {
        assert!(out.contains(name), "{out}");
    }
    assert!(tmp.path().join("abl/weighted-cl/seed-2/report.toml").exists());
}

#[test]
fn check_subcommands_pass() {
    let o = cluda(&[&"oracle-check", &"--instances", &"5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("pass ")));
    let o = cluda(&[&"grad-check", &"--instances", &"2", &"--seed", &"3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().count() >= 30);
}
