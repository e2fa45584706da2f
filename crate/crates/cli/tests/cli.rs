use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use midgan_cli::{resolve_config, Overrides};
use midgan_core::trainer::TrainConfig;

fn midgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_midgan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn count_pngs(root: &Path) -> usize {
    walk(root).into_iter().filter(|p| p.extension().is_some_and(|e| e == "png")).count()
}

fn walk(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(root).unwrap().flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

/// A miniature network trained on 8px toy images, small enough to run in seconds.
const TINY: &str = r#"
total_steps = 6
batch_size = 4
seed = 3
checkpoint_interval = 3
path_batch = 2

[network]
image_size = 8
latent_dim = 8
style_dim = 8
domain_embed_dim = 4
base_channels = 2
max_channels = 4
disc_hidden = 6
time_embed_dim = 4
phi_channels = [2, 3, 4]
"#;

fn tiny_dataset(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let out = midgan(&["datagen", "--out", data.to_str().unwrap(), "--per-domain", "8", "--size", "8", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn datagen_writes_one_file_per_image() {
    let tmp = tempfile::tempdir().unwrap();
    let out = midgan(&["datagen", "--out", tmp.path().join("d").to_str().unwrap(), "--per-domain", "4", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(count_pngs(&tmp.path().join("d")), 12);
    assert!(tmp.path().join("d/manifest.json").is_file());
}

#[test]
fn usage_errors_exit_with_one() {
    let out = midgan(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(midgan(&["datagen", "--out", "x", "--bogus"]).status.code(), Some(1));
    assert_eq!(midgan(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn help_lists_config_keys() {
    let out = midgan(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["total_steps", "lambda_domain", "domain_head", "t_max", "split_fraction"] {
        assert!(text.contains(key), "missing {key}");
    }
    let out = midgan(&["pad-bench", "--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("bonafide_domain"));
}

#[test]
fn missing_config_names_the_path() {
    let out = midgan(&["train", "--config", "missing.file", "--run-dir", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.file"));
    assert!(!Path::new("/tmp/never").exists());
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let src = tmp.path().join("src");
    fs::create_dir(&src).unwrap();
    let out = midgan(&[
        "generate", "--ckpt", bad.to_str().unwrap(), "--source-dir", src.to_str().unwrap(),
        "--source-domain", "0", "--target-domain", "1", "--out", tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_file_values() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.toml");
    fs::write(&path, "total_steps = 10\nbatch_size = 32\n").unwrap();
    let o = Overrides {
        batch_size: Some(16),
        set: vec!["loss.lambda_domain=2.5".into(), "network.domain_head=false".into()],
        ..Overrides::default()
    };
    let cfg = resolve_config(&path, &o).unwrap();
    assert_eq!(cfg.batch_size, 16);
    assert_eq!(cfg.loss.lambda_domain, 2.5);
    assert!(!cfg.network.domain_head);
    let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn config_key_errors_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.toml");
    fs::write(&path, "batch_size = 32\n").unwrap();
    let err = resolve_config(&path, &Overrides::default()).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("total_steps"), "{err}");

    fs::write(&path, "total_steps = 3\nbatch_sise = 32\n").unwrap();
    let err = resolve_config(&path, &Overrides::default()).unwrap_err();
    assert!(err.to_string().contains("batch_sise"), "{err}");
    let o = Overrides {
        set: vec!["loss.lambda_nope=1".into()],
        ..Overrides::default()
    };
    fs::write(&path, "total_steps = 3\n").unwrap();
    assert!(resolve_config(&path, &o).unwrap_err().to_string().contains("lambda_nope"));
}

#[test]
fn rerun_from_run_json_reproduces_metrics_and_resume_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(tmp.path());
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, format!("{TINY}\n[data]\nroot = \"data\"\n")).unwrap();
    let run_a = tmp.path().join("a");
    let out = midgan(&["train", "--config", cfg.to_str().unwrap(), "--run-dir", run_a.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_a.join("checkpoints/step_00000006.ckpt").is_file());

    let run_b = tmp.path().join("b");
    let run_json = run_a.join("run.json");
    let out = midgan(&["train", "--config", run_json.to_str().unwrap(), "--run-dir", run_b.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = |r: &Path| fs::read(r.join("metrics/metrics.jsonl")).unwrap();
    assert_eq!(metrics(&run_a), metrics(&run_b));

    let run_c = tmp.path().join("c");
    let out = midgan(&[
        "train", "--config", cfg.to_str().unwrap(), "--run-dir", run_c.to_str().unwrap(), "--total-steps", "3",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let ckpt = run_c.join("checkpoints/step_00000003.ckpt");
    let out = midgan(&[
        "train", "--config", cfg.to_str().unwrap(), "--run-dir", run_c.to_str().unwrap(),
        "--resume", ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(metrics(&run_a), metrics(&run_c));

    let gen = tmp.path().join("gen");
    let out = midgan(&[
        "generate", "--ckpt", run_a.join("checkpoints/step_00000006.ckpt").to_str().unwrap(),
        "--source-dir", data.join("bonafide").to_str().unwrap(), "--source-domain", "bonafide",
        "--target-domain", "print", "--out", gen.to_str().unwrap(), "--count", "5",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(count_pngs(&gen), 5);
    assert!(gen.join("translation.json").is_file());
}

#[test]
fn evaluate_and_pad_bench_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_dataset(tmp.path());
    let report = tmp.path().join("realism");
    let out = midgan(&[
        "evaluate", "--real", data.to_str().unwrap(), "--synth", data.to_str().unwrap(),
        "--out", report.to_str().unwrap(), "--bootstrap", "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["realism.json", "realism.md", "realism_histograms.png"] {
        assert!(report.join(f).is_file(), "{f}");
    }

    let pad_cfg = tmp.path().join("pad.toml");
    fs::write(
        &pad_cfg,
        format!(
            "data_root = {:?}\nsynth_dir = {:?}\nout = {:?}\n[detector]\nwidths = [4, 8]\nepochs = 2\nbatch_size = 8\n",
            data, data, tmp.path().join("pad")
        ),
    )
    .unwrap();
    let out = midgan(&["pad-bench", "--config", pad_cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let md = fs::read_to_string(tmp.path().join("pad/pad.md")).unwrap();
    assert!(md.contains("Experiment-0") && md.contains("Experiment-1"));
    assert!(md.contains("93.41%"));
}
