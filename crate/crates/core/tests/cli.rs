use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 8] = ["gen-data", "train-source", "adapt", "eval", "embed", "metrics", "plot", "gradcheck"];

const TINY: &str = r#"{
  "model": {"image_size": 16, "stem_channels": 4, "stage_blocks": [1, 1], "stage_dims": [4, 6], "latent_dim": 5, "hidden_dim": 6},
  "train": {"epochs": 2, "learning_rate": 0.001}
}"#;

fn mvcons(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvcons"))
        .args(args)
        .env("MVCONS_THREADS", threads)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mvcons(args, "1");
    assert!(
        out.status.success(),
        "{args:?} -> {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = mvcons(args, "1");
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// gen-data -> train-source -> (delete source) -> adapt -> embed -> metrics.
fn pipeline(dir: &Path, threads: &str) {
    let cfg = dir.join("c.json");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("d");
    let run = |args: &[&str]| {
        let out = mvcons(args, threads);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["gen-data", "--classes", "2", "--per-class", "4", "--image-size", "16", "--seed", "5", "--out", &s(&data)]);
    run(&["train-source", "--data", &s(&data.join("source")), "--config", &s(&cfg), "--out", &s(&dir.join("m.ckpt"))]);
    fs::remove_dir_all(data.join("source")).unwrap();
    run(&[
        "adapt",
        "--ckpt",
        &s(&dir.join("m.ckpt")),
        "--data",
        &s(&data.join("target")),
        "--config",
        &s(&cfg),
        "--train.lambda",
        "0.5",
        "--out",
        &s(&dir.join("m2.ckpt")),
    ]);
    run(&["embed", "--ckpt", &s(&dir.join("m2.ckpt")), "--data", &s(&data.join("target")), "--out", &s(&dir.join("emb.csv"))]);
    run(&["metrics", "--emb", &s(&dir.join("emb.csv")), "--out", &s(&dir.join("metrics.json"))]);
}

#[test]
fn help_documents_every_subcommand() {
    let top = ok(&["--help"]);
    for sub in SUBCOMMANDS {
        assert!(top.contains(sub), "{sub} missing from top-level help");
        let help = ok(&[sub, "--help"]);
        assert!(help.contains("Usage:"), "{sub}");
    }
    let embed = ok(&["embed", "--help"]);
    for flag in ["--ckpt", "--data", "--out", "--tsne", "--raw", "--perplexity", "--tsne-iters", "--seed"] {
        assert!(embed.contains(flag), "embed --help lacks {flag}");
    }
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fails_with(&["frobnicate"], 2);
    fails_with(&["eval", "--ckpt", "x"], 2);

    let bad_key = dir.path().join("bad_key.json");
    fs::write(&bad_key, "{\n  \"train\": {\n    \"lamda\": 0.5\n  }\n}").unwrap();
    let err = fails_with(&["train-source", "--config", &s(&bad_key), "--data", "d", "--out", "m"], 2);
    assert!(err.contains("lamda") && err.contains("line 3"), "{err}");

    let bad_json = dir.path().join("bad.json");
    fs::write(&bad_json, "{ \"train\": { \"epochs\": 3, } }").unwrap();
    let err = fails_with(&["train-source", "--config", &s(&bad_json), "--data", "d", "--out", "m"], 2);
    assert!(err.contains("line 1"), "{err}");

    let err = fails_with(&["train-source", "--data", "d", "--out", "m", "--train.lambda", "-1"], 2);
    assert!(err.contains("lambda"), "{err}");
    let err = fails_with(&["train-source", "--data", "d", "--out", "m", "--train.bogus", "1"], 2);
    assert!(err.contains("bogus"), "{err}");
    fails_with(&["metrics", "--emb", "e.csv", "--train.lambda", "1"], 2);

    let out = mvcons(&["gradcheck", "--help"], "lots");
    assert_eq!(out.status.code(), Some(0));
    let out = mvcons(&["metrics", "--emb", "e.csv"], "lots");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_are_runtime_errors_naming_the_path() {
    let err = fails_with(&["metrics", "--emb", "/no/such/emb.csv"], 1);
    assert!(err.contains("/no/such/emb.csv"), "{err}");
    let err = fails_with(&["eval", "--ckpt", "/no/such/m.ckpt", "--data", "/tmp"], 1);
    assert!(err.contains("/no/such/m.ckpt"), "{err}");
    let dir = tempfile::tempdir().unwrap();
    let err = fails_with(&["train-source", "--data", &s(&dir.path().join("absent")), "--out", &s(&dir.path().join("m"))], 1);
    assert!(err.contains("absent"), "{err}");
}

#[test]
fn pipeline_artifacts_and_source_free_adaptation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d, "1");

    let ckpt = fs::read(d.join("m.ckpt")).unwrap();
    assert_eq!(&ckpt[..4], b"MVCK");
    assert_eq!(&fs::read(d.join("m2.ckpt")).unwrap()[..4], b"MVCK");
    assert!(d.join("d/manifest.json").exists() && d.join("d/run.json").exists());

    let record: serde_json::Value = serde_json::from_slice(&fs::read(d.join("m2.ckpt.run.json")).unwrap()).unwrap();
    assert_eq!(record["command"], "adapt");
    assert_eq!(record["config"]["train"]["lambda"], 0.5);
    assert_eq!(record["config"]["train"]["epochs"], 2);
    assert_eq!(record["config"]["train"]["seed"], 0);

    let log = fs::read_to_string(d.join("m2.ckpt.log.csv")).unwrap();
    assert!(log.starts_with("epoch,lr,l_class,l_cons,combined,mean_pair_dist,accuracy\n"), "{log}");
    assert_eq!(log.lines().count(), 3);

    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(d.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n_samples"], 8);
    assert_eq!(metrics["n_clusters"], 2);

    let eval = ok(&["eval", "--ckpt", &s(&d.join("m2.ckpt")), "--data", &s(&d.join("d/target"))]);
    let eval: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(eval["n_samples"], 8);
    assert!((0.0..=1.0).contains(&eval["accuracy"].as_f64().unwrap()));
}

#[test]
fn tsne_and_plot_emit_one_point_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--classes", "3", "--per-class", "4", "--image-size", "16", "--out", &s(&d.join("d"))]);
    ok(&[
        "embed",
        "--raw",
        "--image-size",
        "16",
        "--data",
        &s(&d.join("d/target")),
        "--out",
        &s(&d.join("raw.csv")),
        "--tsne",
        &s(&d.join("tsne.csv")),
        "--tsne-iters",
        "300",
    ]);
    let tsne = fs::read_to_string(d.join("tsne.csv")).unwrap();
    assert!(tsne.starts_with("id,label,domain,y0,y1,kl_final\n"));
    assert_eq!(tsne.lines().count(), 13);
    ok(&["plot", "--input", &s(&d.join("tsne.csv")), "--out", &s(&d.join("p.svg"))]);
    let svg = fs::read_to_string(d.join("p.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("class=\"point\"").count(), 12);
}

#[test]
fn gradcheck_subcommand_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("all passed"), "{out}");
}

#[test]
fn pipeline_output_is_independent_of_thread_count() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), "1");
    pipeline(b.path(), "4");
    for f in ["m.ckpt.log.csv", "m2.ckpt.log.csv", "metrics.json", "emb.csv", "m2.ckpt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
}
