use std::path::Path;
use std::process::{Command, Output};

use dsgate::io::save_tensor;
use dsgate::tensor::Dims;
use dsgate::Tensor64;

fn dsgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsgate")).args(args).env_remove("DS_SEED").output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace().find_map(|kv| kv.strip_prefix(key)?.strip_prefix('=')).unwrap()
}

const TINY: [&str; 8] = ["--samples", "48", "--val-samples", "24", "--epochs", "1", "--batch", "16"];

#[test]
fn stats_on_a_single_hot_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.dst");
    save_tensor(&Tensor64::new(Dims::new(1, 1, 2, 2), vec![0.0, 0.0, 0.0, 4.0]).unwrap(), &path).unwrap();
    let out = stdout(&dsgate(&["stats", "--input", path.to_str().unwrap()]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines, ["batch,channel,mu,m,d,phi,label", "0,0,1,4,3,7,small"]);
}

#[test]
fn default_surface_grid() {
    let out = stdout(&dsgate(&["surface"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1 + 61 * 61);
    assert_eq!(lines[0], "mu,d,phi,label");
    assert_eq!(lines[1], "0,0,0,background");
    let corner: Vec<f64> = lines[61 * 61].split(',').take(3).map(|v| v.parse().unwrap()).collect();
    assert_eq!(corner, [3.0, 3.0, 15.0]);
}

#[test]
fn surface_file_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let args = ["surface", "--mu", "0:1:5", "--d", "0:2:3"];
    let printed = stdout(&dsgate(&args));
    stdout(&dsgate(&[&args[..], &["--out", path.to_str().unwrap()]].concat()));
    assert_eq!(std::fs::read_to_string(&path).unwrap(), printed);
}

#[test]
fn training_is_deterministic_and_seeded_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: Option<&str>| {
        let metrics = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dsgate"));
        cmd.args(["train", "--metrics", metrics.to_str().unwrap()]).args(TINY).env_remove("DS_SEED");
        if let Some(s) = seed {
            cmd.env("DS_SEED", s);
        }
        let line = stdout(&cmd.output().unwrap());
        (line, std::fs::read(metrics).unwrap())
    };
    let a = run("a.csv", Some("3"));
    let b = run("b.csv", Some("3"));
    assert_eq!(a, b);
    let flag = stdout(&dsgate(&[&["train", "--seed", "3"][..], &TINY].concat()));
    assert_eq!(flag, a.0);
    assert_ne!(run("c.csv", None).1, a.1);
}

#[test]
fn gates_off_changes_the_config_digest() {
    let on = stdout(&dsgate(&[&["train", "--epochs", "0"][..], &TINY[..4]].concat()));
    let off = stdout(&dsgate(&[&["train", "--epochs", "0", "--no-dsg", "--no-msg"][..], &TINY[..4]].concat()));
    assert_ne!(field(&on, "config"), field(&off, "config"));
}

#[test]
fn saved_model_evaluates_to_the_reported_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    stdout(&dsgate(&["gen-data", "--count", "48", "--out", data.to_str().unwrap()]));
    let line = stdout(&dsgate(&[
        &["train", "--data", data.to_str().unwrap(), "--save", model.to_str().unwrap()][..],
        &TINY[2..],
    ]
    .concat()));
    let confusion = dir.path().join("confusion.csv");
    let eval = stdout(&dsgate(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--samples",
        "24",
        "--confusion",
        confusion.to_str().unwrap(),
    ]));
    assert_eq!(field(&line, "val_acc"), field(&eval, "accuracy"));
    let rows = std::fs::read_to_string(&confusion).unwrap();
    assert_eq!(rows.lines().count(), 5);
}

#[test]
fn params_defaults() {
    assert_eq!(stdout(&dsgate(&["params"])).trim(), "dsg=8320 msg=585");
}

#[test]
fn exit_codes() {
    let code = |args: &[&str]| dsgate(args).status.code().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["surface", "--mu", "3:0:5"]), 1);
    assert_eq!(code(&["gradcheck", "--configs", "0"]), 1);
    assert_eq!(code(&["params", "--groups", "1"]), 1);
    assert_eq!(code(&["train", "--groups", "9", "--epochs", "0"]), 1);
    let missing = Path::new("/nonexistent/x.dst");
    assert_eq!(code(&["stats", "--input", missing.to_str().unwrap()]), 2);
    assert_eq!(code(&["eval", "--model", "/nonexistent"]), 2);
}
