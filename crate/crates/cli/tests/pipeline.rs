use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chansim::corpus::{load_manifest, manifest_dir, write_manifest};

const TINY: &str = r#"
[corpus]
n_clean = 6
n_speakers = 2
n_per_domain = 2

[encoder]
stage_channels = [4, 8]
d_c = 8
epochs = 1

[gan]
widths = [4, 8, 8]
n_res_blocks = 1
disc_widths = [4, 8, 8, 8]
proj_dim = 8

[train]
n_patches = 8
batch_size = 2
epochs = 1
checkpoint_every = 1
"#;

fn chansim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chansim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = chansim(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn printed(stdout: String) -> PathBuf {
    PathBuf::from(stdout.trim())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Channel subset of `manifest` with absolute array paths.
fn subset(manifest: &Path, label: &str, out: PathBuf) -> PathBuf {
    let base = manifest_dir(manifest);
    let mut rs: Vec<_> = load_manifest(manifest).unwrap().into_iter().filter(|r| r.channel_label == label).collect();
    for r in &mut rs {
        r.audio_ref = base.join(&r.audio_ref).to_string_lossy().into_owned();
    }
    write_manifest(&out, &rs).unwrap();
    out
}

#[test]
fn every_subcommand_runs_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = root.join("run");

    let clean = printed(ok(&["gen-clean", "--config", s(&cfg), "--out", s(&root.join("clean"))]));
    assert_eq!(load_manifest(&clean).unwrap().len(), 6);

    let corpus = printed(ok(&["synth-corpus", "--clean", s(&clean), "--profiles", s(&cfg), "--out", s(&root.join("corpus"))]));
    assert_eq!(load_manifest(&corpus).unwrap().len(), 36);

    let feats = printed(ok(&["featurize", "--manifest", s(&clean), "--out", s(&root.join("feats")), "--config", s(&cfg)]));
    assert_eq!(load_manifest(&feats).unwrap().len(), 6);

    let enc = run.join("encoder.ckpt");
    ok(&["pretrain-encoder", "--corpus", s(&corpus), "--config", s(&cfg), "--out", s(&enc)]);
    assert!(run.join("encoder_metrics.csv").is_file());

    let train = run.join("train");
    ok(&["train", "--config", s(&cfg), "--encoder", s(&enc), "--corpus", s(&corpus), "--out", s(&train)]);
    let gen = train.join("generator.ckpt");
    assert!(gen.is_file());

    let src = subset(&corpus, "clean", root.join("src.jsonl"));
    let tgt = subset(&corpus, "webcam-ish", root.join("tgt.jsonl"));
    let sim = run.join("sim");
    let args = ["simulate", "--generator", s(&gen), "--encoder", s(&enc), "--source", s(&src), "--target", s(&tgt)];
    let sims = printed(ok(&[&args[..], &["--out", s(&sim), "--config", s(&cfg)]].concat()));
    let sims = load_manifest(&sims).unwrap();
    assert_eq!(sims.len(), 6);
    assert!(sim.join("metrics.json").is_file());

    let shown = ok(&["analyze-embeddings", "--encoder", s(&enc), "--corpus", s(&corpus), "--out", s(&run.join("embeddings")), "--per-channel", "3"]);
    assert!(shown.starts_with("silhouette"), "{shown}");

    ok(&["report", "--run", s(&run)]);
    for f in ["summary.json", "distance_curve.svg", "loss_curves.svg", "projection.svg"] {
        assert!(run.join("report").join(f).is_file(), "{f} missing");
    }
}

#[test]
fn resumed_training_continues_from_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY.replace("epochs = 1\ncheckpoint_every", "epochs = 2\ncheckpoint_every")).unwrap();
    let clean = printed(ok(&["gen-clean", "--config", s(&cfg), "--out", s(&root.join("clean"))]));
    let corpus = printed(ok(&["synth-corpus", "--clean", s(&clean), "--profiles", s(&cfg), "--out", s(&root.join("corpus"))]));
    let enc = root.join("encoder.ckpt");
    ok(&["pretrain-encoder", "--corpus", s(&corpus), "--config", s(&cfg), "--out", s(&enc)]);

    let base = ["train", "--config", s(&cfg), "--encoder", s(&enc), "--corpus", s(&corpus)];
    let full = root.join("full");
    ok(&[&base[..], &["--out", s(&full)]].concat());
    let first = full.join("checkpoints/epoch_0001.ckpt");
    let resumed = root.join("resumed");
    ok(&[&base[..], &["--out", s(&resumed), "--resume", s(&first)]].concat());
    assert_eq!(fs::read(full.join("generator.ckpt")).unwrap(), fs::read(resumed.join("generator.ckpt")).unwrap());
    assert_eq!(fs::read(full.join("metrics.csv")).unwrap(), fs::read(resumed.join("metrics.csv")).unwrap());
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = chansim(&["report", "--run", s(&dir.path().join("missing"))]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let out = chansim(&["gen-clean", "--config", s(&cfg), "--out", s(&dir.path().join("c"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}
