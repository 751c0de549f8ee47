use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
grid_side = 2
hidden = 16
dec_hidden = 8
n_train = 32
n_eval = 8
batch_size = 8
r_near = 2
r_far = 2
steps = 6
milestones = 2
n_gen = 16
sample_steps = 4
";

fn coredi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coredi"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "bad.toml");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = coredi(&["train", "--config", &cfg, "--out", &p(dir.path(), "run")]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "bad.toml");
    fs::write(&cfg, "r_near = 5\nr_far = 2\n").unwrap();
    let out = coredi(&["dataset", "--config", &cfg, "--out", &p(dir.path(), "d.crds")]);
    assert_eq!(code(&out), 2);
    let out = coredi(&["gradcheck", "--module", "l_nope"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_input_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = coredi(&["metrics", "--in", &p(dir.path(), "absent.crds"), "--report", &p(dir.path(), "r.json")]);
    assert_eq!(code(&out), 4);
    let out = coredi(&["curves", "--run", &p(dir.path(), "nothing")]);
    assert_eq!(code(&out), 4);
}

#[test]
fn corrupt_input_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let bad = p(dir.path(), "bad.crds");
    fs::write(&bad, b"garbage").unwrap();
    let out = coredi(&["metrics", "--in", &bad, "--report", &p(dir.path(), "r.json")]);
    assert_eq!(code(&out), 4);
}

#[test]
fn failed_gradient_audit_exits_3() {
    let out = coredi(&["gradcheck", "--module", "l_orth", "--seeds", "1", "--tol", "0"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn gradient_audit_passes() {
    let out = coredi(&["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("worst relative error"));
}

#[test]
fn dataset_output_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (p(dir.path(), "a.crds"), p(dir.path(), "b.crds"));
    for out in [&a, &b] {
        assert_eq!(code(&coredi(&["dataset", "--config", &cfg, "--split", "eval", "--out", out])), 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let out = coredi(&["metrics", "--in", &a, "--report", &p(dir.path(), "m.json"), "--r-far", "2"]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(p(dir.path(), "m.json")).unwrap()).unwrap();
    assert!(report["effective_rank"].as_f64().unwrap() > 0.0);
}

#[test]
fn train_sample_metrics_curves_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = p(dir.path(), "run");
    let out = coredi(&["train", "--config", &cfg, "--seed", "3", "--out", &run]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["steps"], 6);

    let ckpt = p(Path::new(&run), "ckpt_2.crck");
    let (s1, s2) = (p(dir.path(), "s1.crds"), p(dir.path(), "s2.crds"));
    for s in [&s1, &s2] {
        let out = coredi(&["sample", "--checkpoint", &ckpt, "--seed", "7", "--n", "4", "--label", "1", "--out", s]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());

    let out = coredi(&["sample", "--checkpoint", &ckpt, "--label", "99", "--out", &s1]);
    assert_eq!(code(&out), 2);

    let data = p(dir.path(), "eval.crds");
    assert_eq!(code(&coredi(&["dataset", "--config", &cfg, "--split", "eval", "--out", &data])), 0);
    let out = coredi(&["metrics", "--in", &data, "--checkpoint", &ckpt, "--report", &p(dir.path(), "m.json"), "--r-far", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(code(&coredi(&["curves", "--run", &run])), 0);
    assert!(Path::new(&run).join("curves.json").exists());
}

#[test]
fn training_is_reproducible_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (p(dir.path(), "a"), p(dir.path(), "b"));
    for run in [&a, &b] {
        assert_eq!(code(&coredi(&["train", "--config", &cfg, "--out", run])), 0);
    }
    for f in ["loss.csv", "ckpt_2.crck", "summary.json", "milestone_2.json"] {
        assert_eq!(fs::read(Path::new(&a).join(f)).unwrap(), fs::read(Path::new(&b).join(f)).unwrap(), "{f}");
    }
}
