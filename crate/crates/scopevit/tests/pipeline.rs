//! Pipeline behavior at micro scale: cadence, determinism, gates, and the
//! stage-1/stage-2 plumbing, all on a tiny generated corpus.

use std::collections::BTreeSet;

use scopevit::data::manifest::Split;
use scopevit::data::{leakage_filter, synthetic_filter, write_corpus, SynthCorpusConfig};
use scopevit::mae::MAEConfig;
use scopevit::optim::{lr_at, ScheduleConfig};
use scopevit::pipeline::{
    evaluate_run, fewshot_grid, finetune_run, pretrain_run, FrameCache, RunConfig, Task,
};
use scopevit::vit::ViTConfig;

fn micro_vit() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 16,
        depth: 1,
        num_heads: 2,
        mlp_ratio: 2.0,
    }
}

fn micro_mae() -> MAEConfig {
    MAEConfig {
        mask_ratio: 0.75,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        norm_pix: false,
    }
}

fn micro_corpus_cfg() -> SynthCorpusConfig {
    SynthCorpusConfig {
        num_videos: 6,
        frames_per_video: 8,
        image_size: 16,
        num_phases: 2,
        ..SynthCorpusConfig::default()
    }
}

fn micro_pretrain_cfg(epochs: usize) -> RunConfig {
    RunConfig {
        vit_override: Some(micro_vit()),
        mae: micro_mae(),
        schedule: ScheduleConfig {
            peak_lr: 1.5e-3,
            warmup_epochs: 1.0,
            cosine_end_epoch: (epochs as f64 * 2.0 / 3.0).max(2.0),
            total_epochs: epochs as f64,
            min_lr: 0.0,
        },
        epochs,
        batch_size: 4,
        swa_epochs: 5.min(epochs),
        ..RunConfig::default()
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    manifest: scopevit::data::CorpusManifest,
    pretrain_manifest: scopevit::data::CorpusManifest,
    cache: FrameCache,
    excluded: BTreeSet<(String, String)>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(&micro_corpus_cfg(), dir.path()).unwrap();
    let excluded: BTreeSet<(String, String)> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Val || r.split == Split::Test)
        .map(|r| (r.dataset.clone(), r.video_id.clone()))
        .collect();
    let (pretrain_manifest, _) = leakage_filter(&synthetic_filter(&manifest), &excluded);
    let cache = FrameCache::load(&manifest, dir.path()).unwrap();
    Fixture {
        _dir: dir,
        manifest,
        pretrain_manifest,
        cache,
        excluded,
    }
}

#[test]
fn pretrain_swa_cadence_and_checkpoint() {
    let f = fixture();
    let cfg = micro_pretrain_cfg(15);
    let out = pretrain_run(&cfg, &f.pretrain_manifest, &f.cache, &f.excluded).unwrap();

    // 4 pretraining videos minus 1 validation video = 24 train frames,
    // batch 4 -> 6 steps per epoch, 6 validations each; SWA over the last
    // 5 epochs.
    assert_eq!(out.swa_updates, 30);
    assert_eq!(out.swa_evals.len(), 30);
    let min_eval = out.swa_evals.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(
        out.best_swa_val <= min_eval + 1e-15,
        "best {} vs min {}",
        out.best_swa_val,
        min_eval
    );
    assert_eq!(out.log.len(), 15 * 6);
    for rec in &out.log {
        let expect = lr_at(rec.epoch_fraction, &cfg.schedule).unwrap();
        assert_eq!(rec.lr, expect);
        assert!(rec.loss.is_finite());
    }
    let vals = out.log.iter().filter(|r| r.val_loss.is_some()).count();
    assert_eq!(vals, 15 * 6);
    assert_eq!(out.checkpoint.kind(), "mae");
    assert_eq!(
        out.checkpoint.meta().get("swa_updates").unwrap().as_integer(),
        Some(30)
    );
}

#[test]
fn pretrain_is_bit_deterministic() {
    let f = fixture();
    let cfg = micro_pretrain_cfg(4);
    let a = pretrain_run(&cfg, &f.pretrain_manifest, &f.cache, &f.excluded).unwrap();
    let b = pretrain_run(&cfg, &f.pretrain_manifest, &f.cache, &f.excluded).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());

    let mut other = cfg.clone();
    other.seeds = vec![1];
    let c = pretrain_run(&other, &f.pretrain_manifest, &f.cache, &f.excluded).unwrap();
    assert_ne!(a.checkpoint.to_bytes(), c.checkpoint.to_bytes());
}

#[test]
fn leakage_gate_aborts_naming_videos() {
    let f = fixture();
    let cfg = micro_pretrain_cfg(4);
    // Plant the full manifest (val/test videos included).
    let err = pretrain_run(&cfg, &f.manifest, &f.cache, &f.excluded).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("leakage"), "{msg}");
    for (_, vid) in &f.excluded {
        assert!(msg.contains(vid), "{msg} missing {vid}");
    }
}

#[test]
fn pretrain_rejects_unfiltered_synthetic_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_corpus = SynthCorpusConfig {
        synthetic_videos: 1,
        ..micro_corpus_cfg()
    };
    let manifest = write_corpus(&cfg_corpus, dir.path()).unwrap();
    let excluded: BTreeSet<(String, String)> = manifest
        .records
        .iter()
        .filter(|r| r.split != Split::Train)
        .map(|r| (r.dataset.clone(), r.video_id.clone()))
        .collect();
    let (still_synthetic, _) = leakage_filter(&manifest, &excluded);
    let cache = FrameCache::load(&manifest, dir.path()).unwrap();
    let err = pretrain_run(&micro_pretrain_cfg(4), &still_synthetic, &cache, &excluded)
        .unwrap_err()
        .to_string();
    assert!(err.contains("synthetic"), "{err}");
}

fn micro_finetune_cfg(task: Task, epochs: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::finetune_desk(task, epochs);
    cfg.vit_override = Some(micro_vit());
    cfg.mae = micro_mae();
    cfg.batch_size = 8;
    cfg.seeds = vec![seed];
    cfg.mstcn_stages = 2;
    cfg.mstcn_layers = 3;
    cfg.mstcn_channels = 8;
    cfg
}

#[test]
fn finetune_evaluate_roundtrip_and_determinism() {
    let f = fixture();
    let cfg = micro_finetune_cfg(Task::Triplet, 2, 0);
    let out = finetune_run(&cfg, &f.manifest, &f.cache, None, None).unwrap();
    assert_eq!(out.checkpoint.kind(), "triplet");

    let r1 = evaluate_run(&out.checkpoint, &f.manifest, &f.cache, 8).unwrap();
    let r2 = evaluate_run(&out.checkpoint, &f.manifest, &f.cache, 8).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.n, 1);
    assert_eq!(r1.std, 0.0);
    assert_eq!(r1.metric, "mAP");
    assert!(r1.mean >= 0.0 && r1.mean <= 1.0);

    // Save -> load -> evaluate matches in-memory evaluation exactly.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    out.checkpoint.save(&path).unwrap();
    let loaded = scopevit::checkpoint::Checkpoint::load(&path).unwrap();
    let r3 = evaluate_run(&loaded, &f.manifest, &f.cache, 8).unwrap();
    assert_eq!(r1, r3);
}

#[test]
fn stage2_requires_stage1_and_freezes_backbone() {
    let f = fixture();
    let cfg2 = micro_finetune_cfg(Task::PhaseStage2, 2, 0);
    assert!(finetune_run(&cfg2, &f.manifest, &f.cache, None, None).is_err());

    let cfg1 = micro_finetune_cfg(Task::PhaseStage1, 2, 0);
    let s1 = finetune_run(&cfg1, &f.manifest, &f.cache, None, None).unwrap();
    assert_eq!(s1.checkpoint.kind(), "phase-stage1");

    // A triplet checkpoint is not a valid stage-2 init.
    let tri = finetune_run(&micro_finetune_cfg(Task::Triplet, 2, 0), &f.manifest, &f.cache, None, None)
        .unwrap();
    assert!(finetune_run(&cfg2, &f.manifest, &f.cache, Some(&tri.checkpoint), None).is_err());

    let s2 = finetune_run(&cfg2, &f.manifest, &f.cache, Some(&s1.checkpoint), None).unwrap();
    assert_eq!(s2.checkpoint.kind(), "phase-stage2");
    // Backbone tensors are bit-identical before and after stage 2.
    for name in s1.checkpoint.tensor_names() {
        assert_eq!(
            s1.checkpoint.tensor(name),
            s2.checkpoint.tensor(name),
            "backbone tensor {name} changed"
        );
    }
    let r = evaluate_run(&s2.checkpoint, &f.manifest, &f.cache, 8).unwrap();
    assert_eq!(r.metric, "phase_accuracy");

    // Initializing stage 1 from an MAE checkpoint is accepted.
    let pre = pretrain_run(&micro_pretrain_cfg(4), &f.pretrain_manifest, &f.cache, &f.excluded)
        .unwrap();
    let s1b = finetune_run(&cfg1, &f.manifest, &f.cache, Some(&pre.checkpoint), None).unwrap();
    assert_eq!(s1b.checkpoint.kind(), "phase-stage1");
}

#[test]
fn fewshot_micro_grid_counts_and_reproducibility() {
    let f = fixture();
    let pre = pretrain_run(&micro_pretrain_cfg(4), &f.pretrain_manifest, &f.cache, &f.excluded)
        .unwrap();
    let cfg = micro_finetune_cfg(Task::Triplet, 2, 0);
    let table = fewshot_grid(
        &cfg,
        &f.manifest,
        &f.cache,
        &pre.checkpoint,
        &[2],
        &[0, 1],
    )
    .unwrap();
    assert_eq!(table.runs, 4); // 1 k x 2 seeds x 2 arms
    assert_eq!(table.cells.len(), 2);
    let cell = table.cell(2, "pretrained").unwrap();
    assert_eq!(cell.report.n, 2);

    // A cell value equals re-running that configuration in isolation.
    let videos: Vec<String> = f
        .manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.video_id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let seed = 1u64;
    let selected = scopevit::data::few_shot_select(&videos, 2, {
        // same mixing as fewshot_grid
        let (s, k) = (seed, 2u64);
        let mut z = s ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
    .unwrap();
    let mut run_cfg = cfg.clone();
    run_cfg.seeds = vec![seed];
    let solo = finetune_run(&run_cfg, &f.manifest, &f.cache, Some(&pre.checkpoint), Some(&selected))
        .unwrap();
    let solo_metric = evaluate_run(&solo.checkpoint, &f.manifest, &f.cache, 8)
        .unwrap()
        .per_seed[0]
        .1;
    let cell_metric = cell
        .report
        .per_seed
        .iter()
        .find(|(s, _)| *s == seed)
        .unwrap()
        .1;
    assert_eq!(solo_metric, cell_metric);
}

#[test]
fn desk_example_loss_halves_on_64_images() {
    // tiny-desk on a 64-image corpus: 15 epochs cut the training loss in half.
    let dir = tempfile::tempdir().unwrap();
    let corpus = SynthCorpusConfig {
        num_videos: 4,
        frames_per_video: 16,
        image_size: 64,
        ..SynthCorpusConfig::default()
    };
    let manifest = write_corpus(&corpus, dir.path()).unwrap();
    let excluded: BTreeSet<(String, String)> = manifest
        .records
        .iter()
        .filter(|r| r.split != Split::Train)
        .map(|r| (r.dataset.clone(), r.video_id.clone()))
        .collect();
    let (pretrain_manifest, _) = leakage_filter(&synthetic_filter(&manifest), &excluded);
    let cache = FrameCache::load(&manifest, dir.path()).unwrap();
    let cfg = RunConfig {
        batch_size: 16,
        ..RunConfig::default()
    };
    let out = pretrain_run(&cfg, &pretrain_manifest, &cache, &excluded).unwrap();
    assert!(
        out.final_train_loss <= 0.5 * out.initial_train_loss,
        "final {} vs initial {}",
        out.final_train_loss,
        out.initial_train_loss
    );
}
