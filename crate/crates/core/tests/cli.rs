use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--set",
    "n_train=24",
    "--set",
    "n_val=4",
    "--set",
    "n_test=4",
    "--set",
    "epochs=2",
    "--set",
    "hidden=16",
];

fn capsal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsal"))
        .args(args)
        .env_remove("CAPSAL_CONFIG")
        .output()
        .unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let out = capsal(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_small(args: &[&str]) -> Vec<String> {
    args.iter().chain(SMALL).map(|s| s.to_string()).collect()
}

fn run_small(args: &[&str]) -> String {
    let all = with_small(args);
    let refs: Vec<&str> = all.iter().map(String::as_str).collect();
    run_ok(&refs)
}

/// Synthesizes and trains a tiny model once; returns the working directory.
fn trained() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        run_small(&["synth", "--out", data.to_str().unwrap()]);
        run_small(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
        ]);
        dir
    })
    .path()
}

fn paths(dir: &Path) -> (String, String) {
    (
        dir.join("run/model.ckpt").display().to_string(),
        dir.join("data/test.tsv").display().to_string(),
    )
}

#[test]
fn captioning_twice_is_identical() {
    let (model, data) = paths(trained());
    let a = run_small(&["caption", "--model", &model, "--data", &data]);
    let b = run_small(&["caption", "--model", &model, "--data", &data]);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 4);
    assert!(a.lines().all(|l| l.contains('\t')));
}

#[test]
fn unknown_query_words_are_reported() {
    let dir = trained();
    let (model, data) = paths(dir);
    let out = dir.join("sal_oov");
    let stdout = run_small(&[
        "saliency",
        "--model",
        &model,
        "--data",
        &data,
        "--index",
        "1",
        "--query",
        "a purple ball",
        "--spatial",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.lines().any(|l| l.starts_with("purple\tunk")));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("saliency.json")).unwrap()).unwrap();
    assert_eq!(json["unk"], serde_json::json!([false, true, false]));
    let pgms = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "pgm")
        })
        .count();
    assert_eq!(pgms, 3 * 8);
}

#[test]
fn eval_rerun_is_byte_identical() {
    let dir = trained();
    let (model, data) = paths(dir);
    for name in ["eval_a", "eval_b"] {
        let out = dir.join(name);
        run_small(&[
            "eval",
            "--model",
            &model,
            "--data",
            &data,
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    for file in ["report.json", "report.txt", "config.txt"] {
        let a = std::fs::read(dir.join("eval_a").join(file)).unwrap();
        let b = std::fs::read(dir.join("eval_b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn unknown_config_key_is_a_single_error_line() {
    let out = capsal(&["keys", "--set", "epochz=3"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: kind=config msg=\""));
    assert!(err.contains("epochz"));
}

#[test]
fn missing_arguments_are_usage_errors() {
    let out = capsal(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: kind=usage"));
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn missing_data_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let out = capsal(&[
        "caption",
        "--model",
        "nope.ckpt",
        "--data",
        dir.path().join("x.tsv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .starts_with("error: kind=io"));
}

#[test]
fn config_file_from_environment_is_used() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny\nn_train=6\nn_val=2\nn_test=2\ngrid=3\n").unwrap();
    let data = dir.path().join("data");
    let out = Command::new(env!("CARGO_BIN_EXE_capsal"))
        .args(["synth", "--out", data.to_str().unwrap()])
        .env("CAPSAL_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    let echoed = std::fs::read_to_string(data.join("config.txt")).unwrap();
    assert!(echoed.contains("n_train=6\n"));
    assert!(echoed.contains("grid=3\n"));
    let lines = std::fs::read_to_string(data.join("train.tsv")).unwrap();
    assert_eq!(lines.lines().filter(|l| !l.starts_with('#')).count(), 6);
}

#[test]
fn keys_lists_every_default() {
    let out = run_ok(&["keys"]);
    assert!(out.lines().any(|l| l.starts_with("epochs=100\t")));
    assert!(out.lines().any(|l| l.starts_with("pooling=mean\t")));
}
