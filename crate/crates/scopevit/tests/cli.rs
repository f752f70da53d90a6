//! CLI behavior through the real binary: exit codes, reproducible outputs,
//! the leakage gate, and file formats.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scopevit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn hash_tree(root: &Path) -> BTreeMap<String, u32> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_str().unwrap().to_string();
                out.insert(rel, crc32fast::hash(&std::fs::read(&path).unwrap()));
            }
        }
    }
    out
}

fn micro_synth(dir: &Path) {
    let out = run(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "0",
        "--videos",
        "6",
        "--frames",
        "8",
        "--size",
        "16",
        "--phases",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn micro_config(path: &Path, task: &str, epochs: usize) {
    let cosine_end = (epochs as f64 * 2.0 / 3.0).max(1.5);
    let text = format!(
        r#"
task = "{task}"
preset = "tiny-desk"
batch_size = 4
epochs = {epochs}
swa_epochs = {swa}

[vit_override]
image_size = 16
patch_size = 8
embed_dim = 16
depth = 1
num_heads = 2
mlp_ratio = 2.0

[mae]
mask_ratio = 0.75
decoder_dim = 8
decoder_depth = 1
decoder_heads = 2
norm_pix = false

[schedule]
peak_lr = 1.5e-3
warmup_epochs = 1.0
cosine_end_epoch = {cosine_end}
total_epochs = {epochs}.0
min_lr = 0.0
"#,
        swa = 2.min(epochs),
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn unknown_command_and_flag_exit_2() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.to_lowercase().contains("usage") || msg.contains("Usage"), "{msg}");

    let out = run(&["synth", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn config_violation_exits_1_naming_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "synth",
        "--out",
        dir.path().to_str().unwrap(),
        "--videos",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("num_videos"), "{msg}");
}

#[test]
fn synth_rerun_is_hash_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    micro_synth(a.path());
    micro_synth(b.path());
    let ha = hash_tree(a.path());
    let hb = hash_tree(b.path());
    assert!(!ha.is_empty());
    assert_eq!(ha, hb);
    assert!(a.path().join("manifest.jsonl").exists());
    assert!(a.path().join("pretrain_manifest.jsonl").exists());
    assert!(a.path().join("run_config.toml").exists());
}

#[test]
fn pretrain_gate_names_leaked_videos_and_training_works() {
    let corpus = tempfile::tempdir().unwrap();
    micro_synth(corpus.path());
    let cfg_path = corpus.path().join("cfg.toml");
    micro_config(&cfg_path, "pretrain", 2);

    // Full manifest overlaps its own val/test videos: exit 1, names them.
    let outdir = tempfile::tempdir().unwrap();
    let out = run(&[
        "pretrain",
        "--manifest",
        corpus.path().join("manifest.jsonl").to_str().unwrap(),
        "--corpus",
        corpus.path().to_str().unwrap(),
        "--exclude",
        corpus.path().join("manifest.jsonl").to_str().unwrap(),
        "--out",
        outdir.path().to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("leakage"), "{msg}");
    assert!(msg.contains("video_004") || msg.contains("video_005"), "{msg}");

    // The curated pretraining manifest passes the gate.
    let out = run(&[
        "pretrain",
        "--manifest",
        corpus.path().join("pretrain_manifest.jsonl").to_str().unwrap(),
        "--corpus",
        corpus.path().to_str().unwrap(),
        "--exclude",
        corpus.path().join("manifest.jsonl").to_str().unwrap(),
        "--out",
        outdir.path().to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(outdir.path().join("checkpoint.bin").exists());
    assert!(outdir.path().join("train_log.jsonl").exists());
    assert!(outdir.path().join("run_config.toml").exists());

    // Training log lines parse and carry the expected fields.
    let log = std::fs::read_to_string(outdir.path().join("train_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "epoch_fraction", "lr", "loss", "swa_count"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn finetune_evaluate_render_flow() {
    let corpus = tempfile::tempdir().unwrap();
    micro_synth(corpus.path());
    let manifest = corpus.path().join("manifest.jsonl");
    let cfg_path = corpus.path().join("ft.toml");
    micro_config(&cfg_path, "triplet", 2);

    let ft = tempfile::tempdir().unwrap();
    let out = run(&[
        "finetune",
        "--task",
        "triplet",
        "--manifest",
        manifest.to_str().unwrap(),
        "--corpus",
        corpus.path().to_str().unwrap(),
        "--out",
        ft.path().to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--seed",
        "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = ft.path().join("checkpoint.bin");
    assert!(ckpt.exists());

    // evaluate twice: byte-identical report files.
    let r1 = corpus.path().join("r1.toml");
    let r2 = corpus.path().join("r2.toml");
    for r in [&r1, &r2] {
        let out = run(&[
            "evaluate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--corpus",
            corpus.path().to_str().unwrap(),
            "--out",
            r.to_str().unwrap(),
            "--batch",
            "8",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    let report: toml::Value = toml::from_str(&std::fs::read_to_string(&r1).unwrap()).unwrap();
    assert_eq!(report.get("metric").unwrap().as_str(), Some("mAP"));
    assert_eq!(report.get("n").unwrap().as_integer(), Some(1));

    // render-recon needs an MAE checkpoint; a triplet one is rejected.
    let grid = corpus.path().join("grid.png");
    let out = run(&[
        "render-recon",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--corpus",
        corpus.path().to_str().unwrap(),
        "--out",
        grid.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // Pretrain an MAE checkpoint and render a multi-mask grid from it.
    let pre_cfg = corpus.path().join("pre.toml");
    micro_config(&pre_cfg, "pretrain", 2);
    let pre = tempfile::tempdir().unwrap();
    let out = run(&[
        "pretrain",
        "--manifest",
        corpus.path().join("pretrain_manifest.jsonl").to_str().unwrap(),
        "--corpus",
        corpus.path().to_str().unwrap(),
        "--out",
        pre.path().to_str().unwrap(),
        "--config",
        pre_cfg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "render-recon",
        "--checkpoint",
        pre.path().join("checkpoint.bin").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--corpus",
        corpus.path().to_str().unwrap(),
        "--out",
        grid.to_str().unwrap(),
        "--count",
        "2",
        "--mask-seeds",
        "0,1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(grid.exists());
    assert!(corpus.path().join("grid.losses.tsv").exists());
}

#[test]
fn ingest_builds_manifest_from_frames_and_sidecar() {
    let root = tempfile::tempdir().unwrap();
    // Video A: integer-second names at 1 fps already.
    let va = root.path().join("vidA");
    std::fs::create_dir_all(&va).unwrap();
    for t in 0..3 {
        scopevit::data::images::save_png(&va.join(format!("{t}.png")), 4, 4, &[10; 48]).unwrap();
    }
    // Video B: 4 fps with a timestamps sidecar.
    let vb = root.path().join("vidB");
    std::fs::create_dir_all(&vb).unwrap();
    let mut sidecar = String::new();
    for i in 0..8 {
        let name = format!("f{i:03}.png");
        scopevit::data::images::save_png(&vb.join(&name), 4, 4, &[20; 48]).unwrap();
        sidecar.push_str(&format!("{name}\t{}\n", i as f64 * 0.25));
    }
    std::fs::write(vb.join("timestamps.tsv"), sidecar).unwrap();

    let manifest_path = root.path().join("ingested.jsonl");
    let out = run(&[
        "ingest",
        "--input",
        root.path().to_str().unwrap(),
        "--out",
        manifest_path.to_str().unwrap(),
        "--dataset",
        "demo",
        "--fps",
        "4",
        "--split",
        "pretrain",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = scopevit::data::CorpusManifest::load(&manifest_path).unwrap();
    // vidA: 3 frames at 1 fps (identity); vidB: 8 frames over 1.75 s -> 2.
    let a: Vec<_> = manifest.records.iter().filter(|r| r.video_id == "vidA").collect();
    let b: Vec<_> = manifest.records.iter().filter(|r| r.video_id == "vidB").collect();
    assert_eq!(a.len(), 3);
    assert_eq!(b.len(), 2);
    assert_eq!(b[0].time_s, 0.0);
    assert_eq!(b[1].time_s, 1.0);
    assert!(manifest_path.with_extension("config.toml").exists());
}
