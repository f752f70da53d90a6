//! Manual calibration probe for the desk-scale directional experiments.
//! Run with: cargo test --test calibrate -- --ignored --nocapture

use std::collections::BTreeSet;
use std::time::Instant;

use scopevit::data::manifest::Split;
use scopevit::data::{leakage_filter, synthetic_filter, write_corpus, SynthCorpusConfig};
use scopevit::optim::ScheduleConfig;
use scopevit::pipeline::{
    evaluate_run, finetune_run, pretrain_run, FrameCache, RunConfig, Task,
};

#[test]
#[ignore]
fn calibrate_desk_scale() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let corpus_cfg = SynthCorpusConfig::default(); // 20 videos x 60 frames
    let manifest = write_corpus(&corpus_cfg, dir.path()).unwrap();
    println!("corpus written in {:.1} s", t0.elapsed().as_secs_f64());

    // Label stats.
    let mut pos = 0usize;
    let mut total = 0usize;
    let mut per_class = vec![0usize; corpus_cfg.num_triplet_classes];
    let mut test_per_class = vec![0usize; corpus_cfg.num_triplet_classes];
    for r in &manifest.records {
        let t = r.labels.as_ref().unwrap().triplets.as_ref().unwrap();
        for (c, &b) in t.iter().enumerate() {
            pos += b as usize;
            total += 1;
            per_class[c] += b as usize;
            if r.split == Split::Test {
                test_per_class[c] += b as usize;
            }
        }
    }
    println!(
        "positive rate {:.4}; classes with any positive: {}; test classes with positive: {}",
        pos as f64 / total as f64,
        per_class.iter().filter(|&&c| c > 0).count(),
        test_per_class.iter().filter(|&&c| c > 0).count()
    );

    let excluded: BTreeSet<(String, String)> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Val || r.split == Split::Test)
        .map(|r| (r.dataset.clone(), r.video_id.clone()))
        .collect();
    let (pretrain_manifest, _) = leakage_filter(&synthetic_filter(&manifest), &excluded);
    let cache = FrameCache::load(&manifest, dir.path()).unwrap();

    // Criterion-8 style pretraining.
    let t0 = Instant::now();
    let cfg = RunConfig::default();
    let out = pretrain_run(&cfg, &pretrain_manifest, &cache, &excluded).unwrap();
    println!(
        "pretrain: {:.1} s; initial {:.5} final {:.5} ratio {:.3}; swa updates {}; best {:.5} evals min {:.5}",
        t0.elapsed().as_secs_f64(),
        out.initial_train_loss,
        out.final_train_loss,
        out.final_train_loss / out.initial_train_loss,
        out.swa_updates,
        out.best_swa_val,
        out.swa_evals.iter().cloned().fold(f64::INFINITY, f64::min),
    );
    let pre = out.checkpoint;

    // Few-shot triplet, k in {2, 8}, seeds 0..3, both arms.
    let train_videos: Vec<String> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.video_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    for epochs in [4usize] {
        for k in [2usize, 8] {
            for seed in 0..3u64 {
                let sel = scopevit::data::few_shot_select(&train_videos, k, seed ^ k as u64)
                    .unwrap();
                for arm in ["random", "pretrained"] {
                    let t0 = Instant::now();
                    let mut fc = RunConfig::finetune_desk(Task::Triplet, epochs);
                    fc.seeds = vec![seed];
                    let init = (arm == "pretrained").then_some(&pre);
                    let ft = finetune_run(&fc, &manifest, &cache, init, Some(&sel)).unwrap();
                    let rep = evaluate_run(&ft.checkpoint, &manifest, &cache, 32).unwrap();
                    println!(
                        "triplet e{epochs} k{k} seed{seed} {arm}: mAP {:.4} ({:.0} s)",
                        rep.mean,
                        t0.elapsed().as_secs_f64()
                    );
                }
            }
        }
    }

    // Phase stage 1 + stage 2, pretrained arm, 3 seeds.
    for seed in 0..3u64 {
        let t0 = Instant::now();
        let mut c1 = RunConfig::finetune_desk(Task::PhaseStage1, 4);
        c1.seeds = vec![seed];
        let s1 = finetune_run(&c1, &manifest, &cache, Some(&pre), None).unwrap();
        let r1 = evaluate_run(&s1.checkpoint, &manifest, &cache, 32).unwrap();
        let mut c2 = RunConfig::finetune_desk(Task::PhaseStage2, 30);
        c2.seeds = vec![seed];
        c2.schedule = ScheduleConfig {
            peak_lr: 1e-3,
            warmup_epochs: 2.0,
            cosine_end_epoch: 30.0,
            total_epochs: 30.0,
            min_lr: 0.0,
        };
        let s2 = finetune_run(&c2, &manifest, &cache, Some(&s1.checkpoint), None).unwrap();
        let r2 = evaluate_run(&s2.checkpoint, &manifest, &cache, 32).unwrap();
        println!(
            "phase seed{seed}: stage1 {:.4} stage2 {:.4} ({:.0} s)",
            r1.mean,
            r2.mean,
            t0.elapsed().as_secs_f64()
        );
    }
}
