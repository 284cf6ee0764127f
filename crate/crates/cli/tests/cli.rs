use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lococontrast"));
    cmd.args(args)
        .env("RUST_LOG", "error")
        .env_remove("LOCOCONTRAST_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    let out = run(&["--help"], &[]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "train", "eval", "heatmap", "retrieve", "selfcheck"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
    assert_eq!(run(&["--version"], &[]).status.code(), Some(0));
    assert_eq!(run(&["eval", "--help"], &[]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[], &[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"], &[]).status.code(), Some(1));
    assert_eq!(run(&["eval", "--data", "x"], &[]).status.code(), Some(1));
    assert_eq!(
        run(
            &["eval", "--ckpt", "a", "--data", "b", "--mode", "edge"],
            &[]
        )
        .status
        .code(),
        Some(1)
    );
    assert_eq!(
        run(
            &["heatmap", "--ckpt", "a", "--image", "b", "--crop", "1,2"],
            &[]
        )
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = s(&dir.path().join("missing.ckpt"));
    let out = run(&["eval", "--ckpt", &missing, "--data", &s(dir.path())], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "batch_size": 0}"#).unwrap();
    assert_eq!(
        run(&["train", "--config", &s(&cfg)], &[]).status.code(),
        Some(2)
    );
    std::fs::write(&cfg, r#"{"epochz": 1}"#).unwrap();
    assert_eq!(
        run(&["train", "--config", &s(&cfg)], &[]).status.code(),
        Some(2)
    );
}

#[test]
fn synth_seed_comes_from_flag_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, args: &[&str], envs: &[(&str, &str)]| {
        let out_dir = dir.path().join(name);
        let out = s(&out_dir);
        let mut all = vec!["synth", "--out", &out, "--count", "2", "--size", "64"];
        all.extend_from_slice(args);
        assert_eq!(run(&all, envs).status.code(), Some(0));
        std::fs::read(out_dir.join("synth_00001.png")).unwrap()
    };
    let flag = gen("flag", &["--seed", "9"], &[]);
    let env = gen("env", &[], &[("LOCOCONTRAST_SEED", "9")]);
    let both = gen("both", &["--seed", "9"], &[("LOCOCONTRAST_SEED", "4")]);
    let other = gen("other", &[], &[("LOCOCONTRAST_SEED", "4")]);
    assert_eq!(flag, env);
    assert_eq!(flag, both);
    assert_ne!(flag, other);
    let bad = run(
        &["synth", "--out", &s(&dir.path().join("x")), "--count", "1"],
        &[("LOCOCONTRAST_SEED", "abc")],
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn selfcheck_passes() {
    let out = run(&["selfcheck"], &[]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 8);
    assert!(!text.contains("FAIL"));
}

#[test]
fn eval_is_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| s(&dir.path().join(n));
    assert!(run(
        &[
            "synth",
            "--out",
            &p("data"),
            "--count",
            "10",
            "--size",
            "64",
            "--seed",
            "5"
        ],
        &[]
    )
    .status
    .success());
    let cfg = r#"{"epochs": 1, "seed": 2, "output_dir": "OUT",
        "model": {"tiny_width": 4, "fpn_channels": 8, "embed_dim": 8, "projection_hidden": 8},
        "data": {"kind": "path", "path": "DATA"}}"#
        .replace("OUT", &p("run"))
        .replace("DATA", &p("data"));
    std::fs::write(p("cfg.json"), cfg).unwrap();
    assert!(run(&["train", "--config", &p("cfg.json")], &[])
        .status
        .success());
    assert!(!dir.path().join("run/train_log.csv.partial").exists());
    let ckpt = p("run/checkpoint-epoch0001.ckpt");
    let eval = |out: &str, workers: &str| {
        let o = run(
            &[
                "--workers",
                workers,
                "eval",
                "--ckpt",
                &ckpt,
                "--data",
                &p("data"),
                "--out",
                &p(out),
            ],
            &[("LOCOCONTRAST_SEED", "7")],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(dir.path().join(out).join("metrics.csv")).unwrap()
    };
    assert_eq!(eval("a", "1"), eval("b", "3"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/metrics.json")).unwrap())
            .unwrap();
    assert_eq!(json["seed"], 7);
    assert_eq!(json["provenance"]["command"], "eval");
}
