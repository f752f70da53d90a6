//! Command-line surface: corpus generation and ingestion, training runs,
//! evaluation, the few-shot grid, and reconstruction-grid rendering.
//!
//! Exit codes: 0 success, 1 domain/validation error, 2 usage error.
//! Config files are TOML; command-line flags override file values. Every
//! run writes its resolved configuration next to its outputs.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::data::manifest::{sample_fps, CorpusManifest, FrameRecord, Split};
use crate::data::synth::{write_corpus, SynthCorpusConfig};
use crate::error::{Error, Result};
use crate::mae::sample_mask;
use crate::pipeline::{
    evaluate_run, fewshot_grid, finetune_run, pretrain_run, run_config_of, FewshotTable,
    FrameCache, RunConfig, Task, TrainLogRecord,
};
use crate::render::{render_recon_grid, ReconRow};

#[derive(Parser)]
#[command(
    name = "scopevit",
    version,
    about = "Masked-image pretraining and downstream evaluation for endoscopic video models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural desk-scale corpus.
    Synth {
        /// Output directory for frames and manifest.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// TOML corpus config; flags override file values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        phases: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Build a manifest from a directory of extracted frames.
    Ingest {
        /// Root directory holding <video_id>/<seconds>.png frames, or a
        /// timestamps.tsv sidecar per video.
        #[arg(long)]
        input: PathBuf,
        /// Manifest file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: String,
        /// Source frame rate; frames are downsampled to 1 FPS.
        #[arg(long, default_value_t = 1.0)]
        fps: f64,
        #[arg(long, default_value = "pretrain")]
        split: String,
        /// Mark every ingested frame as synthetic.
        #[arg(long, default_value_t = false)]
        synthetic: bool,
    },
    /// Masked-reconstruction pretraining.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory frame_refs are relative to.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Manifests whose val/test videos must not appear in pretraining.
        #[arg(long)]
        exclude: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Downstream finetuning (triplet, phase-stage1, phase-stage2).
    Finetune {
        #[arg(long)]
        task: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to initialize from (omit for random init).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Restrict training to these comma-separated video ids.
        #[arg(long)]
        videos: Option<String>,
    },
    /// Deterministic evaluation of a checkpoint on a manifest's test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Few-shot comparison grid over video budgets, seeds, and init arms.
    Fewshot {
        #[arg(long)]
        task: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "2,4,8")]
        ks: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Render masked/reconstruction/truth/loss-heatmap grids.
    RenderRecon {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Output PNG; a .losses.tsv sidecar lands next to it.
        #[arg(long)]
        out: PathBuf,
        /// Explicit comma-separated frame_refs (default: first test frames).
        #[arg(long)]
        frames: Option<String>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// One grid row per seed and image.
        #[arg(long, default_value = "0")]
        mask_seeds: String,
        #[arg(long)]
        mask_ratio: Option<f64>,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| Error::config(format!("cannot parse {what} entry {p:?}")))
        })
        .collect()
}

fn load_toml_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(toml::from_str(&text)?)
}

fn write_provenance(dir_or_file: &Path, command: &str, config: &impl serde::Serialize) -> Result<()> {
    let path = if dir_or_file.is_dir() {
        dir_or_file.join("run_config.toml")
    } else {
        dir_or_file.with_extension("config.toml")
    };
    let mut doc = toml::map::Map::new();
    doc.insert("command".into(), toml::Value::String(command.into()));
    doc.insert(
        "config".into(),
        toml::Value::try_from(config).map_err(|e| Error::config(e.to_string()))?,
    );
    std::fs::write(path, toml::to_string(&toml::Value::Table(doc)).unwrap())?;
    Ok(())
}

fn write_train_log(path: &Path, log: &[TrainLogRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in log {
        serde_json::to_writer(&mut f, rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn resolve_run_config(
    task: Task,
    config: Option<&Path>,
    seed: Option<u64>,
    preset: Option<&str>,
    epochs: Option<usize>,
    batch: Option<usize>,
) -> Result<RunConfig> {
    let mut cfg: RunConfig = match config {
        Some(p) => load_toml_config(p)?,
        None => match task {
            Task::Pretrain => RunConfig::default(),
            t => RunConfig::finetune_desk(t, 6),
        },
    };
    cfg.task = task;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(p) = preset {
        cfg.preset = p.to_string();
        cfg.vit_override = None;
    }
    if let Some(e) = epochs {
        let old_total = cfg.schedule.total_epochs;
        cfg.epochs = e;
        cfg.schedule.total_epochs = e as f64;
        if cfg.schedule.cosine_end_epoch > e as f64 || cfg.schedule.cosine_end_epoch == old_total {
            cfg.schedule.cosine_end_epoch = e as f64;
        }
        cfg.schedule.warmup_epochs = cfg.schedule.warmup_epochs.min((e as f64 - 1.0).max(0.5));
    }
    if let Some(b) = batch {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Videos in the val/test splits of a manifest.
fn downstream_eval_videos(manifest: &CorpusManifest) -> BTreeSet<(String, String)> {
    manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Val || r.split == Split::Test)
        .map(|r| (r.dataset.clone(), r.video_id.clone()))
        .collect()
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            seed,
            config,
            videos,
            frames,
            size,
            phases,
            classes,
        } => {
            let mut cfg: SynthCorpusConfig = match config {
                Some(p) => load_toml_config(&p)?,
                None => SynthCorpusConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(v) = videos {
                cfg.num_videos = v;
            }
            if let Some(f) = frames {
                cfg.frames_per_video = f;
            }
            if let Some(s) = size {
                cfg.image_size = s;
            }
            if let Some(p) = phases {
                cfg.num_phases = p;
            }
            if let Some(c) = classes {
                cfg.num_triplet_classes = c;
            }
            cfg.validate()?;
            std::fs::create_dir_all(&out)?;
            let manifest = write_corpus(&cfg, &out)?;
            // Curated pretraining manifest: synthetic frames dropped, then
            // downstream val/test videos excluded.
            let (pretrain, report) = crate::data::leakage_filter(
                &crate::data::synthetic_filter(&manifest),
                &downstream_eval_videos(&manifest),
            );
            pretrain.save(&out.join("pretrain_manifest.jsonl"))?;
            write_provenance(&out, "synth", &cfg)?;
            println!(
                "wrote {} frames across {} videos to {}",
                manifest.len(),
                cfg.num_videos,
                out.display()
            );
            for (ds, n) in manifest.summary() {
                println!("  {ds}: {n}");
            }
            println!(
                "pretraining manifest: {} frames ({} excluded as downstream val/test)",
                pretrain.len(),
                report.total_removed()
            );
            Ok(())
        }
        Command::Ingest {
            input,
            out,
            dataset,
            fps,
            split,
            synthetic,
        } => {
            let split = match split.as_str() {
                "pretrain" => Split::Pretrain,
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => return Err(Error::config(format!("unknown split {other:?}"))),
            };
            let manifest = ingest_directory(&input, &dataset, fps, split, synthetic)?;
            manifest.save(&out)?;
            #[derive(serde::Serialize)]
            struct IngestConfig<'a> {
                input: &'a Path,
                dataset: &'a str,
                fps: f64,
                split: &'a str,
                synthetic: bool,
            }
            write_provenance(
                &out,
                "ingest",
                &IngestConfig {
                    input: &input,
                    dataset: &dataset,
                    fps,
                    split: match split {
                        Split::Pretrain => "pretrain",
                        Split::Train => "train",
                        Split::Val => "val",
                        Split::Test => "test",
                    },
                    synthetic,
                },
            )?;
            println!("ingested {} frames into {}", manifest.len(), out.display());
            Ok(())
        }
        Command::Pretrain {
            manifest,
            corpus,
            out,
            exclude,
            config,
            seed,
            preset,
            batch,
        } => {
            let cfg = resolve_run_config(
                Task::Pretrain,
                config.as_deref(),
                seed,
                preset.as_deref(),
                None,
                batch,
            )?;
            let manifest = CorpusManifest::load(&manifest)?;
            manifest.validate()?;
            let mut excluded = BTreeSet::new();
            for path in &exclude {
                excluded.extend(downstream_eval_videos(&CorpusManifest::load(path)?));
            }
            let cache = FrameCache::load(&manifest, &corpus)?;
            let outcome = pretrain_run(&cfg, &manifest, &cache, &excluded)?;
            std::fs::create_dir_all(&out)?;
            outcome.checkpoint.save(&out.join("checkpoint.bin"))?;
            write_train_log(&out.join("train_log.jsonl"), &outcome.log)?;
            write_provenance(&out, "pretrain", &cfg)?;
            println!(
                "pretrained: initial loss {:.6}, final loss {:.6}, best SWA val {:.6} ({} SWA updates)",
                outcome.initial_train_loss,
                outcome.final_train_loss,
                outcome.best_swa_val,
                outcome.swa_updates
            );
            Ok(())
        }
        Command::Finetune {
            task,
            manifest,
            corpus,
            out,
            init,
            config,
            seed,
            preset,
            epochs,
            batch,
            videos,
        } => {
            let task: Task = task.parse()?;
            if !matches!(task, Task::Triplet | Task::PhaseStage1 | Task::PhaseStage2) {
                return Err(Error::config(format!(
                    "finetune task must be triplet, phase-stage1, or phase-stage2, got {:?}",
                    task.name()
                )));
            }
            let cfg = resolve_run_config(task, config.as_deref(), seed, preset.as_deref(), epochs, batch)?;
            let manifest = CorpusManifest::load(&manifest)?;
            let cache = FrameCache::load(&manifest, &corpus)?;
            let init_ck = init.map(|p| Checkpoint::load(&p)).transpose()?;
            let selected: Option<Vec<String>> = videos
                .map(|v| parse_list::<String>(&v, "videos"))
                .transpose()?;
            let outcome = finetune_run(
                &cfg,
                &manifest,
                &cache,
                init_ck.as_ref(),
                selected.as_deref(),
            )?;
            std::fs::create_dir_all(&out)?;
            outcome.checkpoint.save(&out.join("checkpoint.bin"))?;
            write_train_log(&out.join("train_log.jsonl"), &outcome.log)?;
            write_provenance(&out, "finetune", &cfg)?;
            let report = evaluate_run(&outcome.checkpoint, &manifest, &cache, cfg.batch_size)?;
            std::fs::write(
                out.join("report.toml"),
                toml::to_string(&report).map_err(|e| Error::config(e.to_string()))?,
            )?;
            println!(
                "finetuned {}: {} = {:.4}",
                task.name(),
                report.metric,
                report.mean
            );
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            corpus,
            out,
            batch,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let manifest = CorpusManifest::load(&manifest)?;
            let cache = FrameCache::load(&manifest, &corpus)?;
            let report = evaluate_run(&ck, &manifest, &cache, batch)?;
            let text = toml::to_string(&report).map_err(|e| Error::config(e.to_string()))?;
            match out {
                Some(path) => {
                    std::fs::write(&path, &text)?;
                    write_provenance(&path, "evaluate", &run_config_of(&ck)?)?;
                    println!("{} = {:.4} (written to {})", report.metric, report.mean, path.display());
                }
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Fewshot {
            task,
            manifest,
            corpus,
            pretrained,
            out,
            ks,
            seeds,
            config,
            preset,
            epochs,
            batch,
        } => {
            let task: Task = task.parse()?;
            if !matches!(task, Task::Triplet | Task::PhaseStage1) {
                return Err(Error::config(
                    "fewshot supports tasks triplet and phase-stage1",
                ));
            }
            let cfg = resolve_run_config(task, config.as_deref(), None, preset.as_deref(), epochs, batch)?;
            let ks: Vec<usize> = parse_list(&ks, "ks")?;
            let seeds: Vec<u64> = parse_list(&seeds, "seeds")?;
            let manifest = CorpusManifest::load(&manifest)?;
            let cache = FrameCache::load(&manifest, &corpus)?;
            let pre = Checkpoint::load(&pretrained)?;
            let table = fewshot_grid(&cfg, &manifest, &cache, &pre, &ks, &seeds)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(
                out.join("table.toml"),
                toml::to_string(&table).map_err(|e| Error::config(e.to_string()))?,
            )?;
            write_provenance(&out, "fewshot", &cfg)?;
            print!("{}", format_fewshot_table(&table, &ks));
            Ok(())
        }
        Command::RenderRecon {
            checkpoint,
            manifest,
            corpus,
            out,
            frames,
            count,
            mask_seeds,
            mask_ratio,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model_cfg = run_config_of(&ck)?;
            let vit = model_cfg.vit_config()?;
            let ratio = mask_ratio.unwrap_or(model_cfg.mae.mask_ratio);
            let manifest = CorpusManifest::load(&manifest)?;
            let cache = FrameCache::load(&manifest, &corpus)?;
            let seeds: Vec<u64> = parse_list(&mask_seeds, "mask seeds")?;
            if seeds.is_empty() {
                return Err(Error::config("need at least one mask seed"));
            }
            let refs: Vec<String> = match frames {
                Some(list) => parse_list(&list, "frames")?,
                None => {
                    let mut test: Vec<&FrameRecord> =
                        manifest.in_split(Split::Test).collect();
                    if test.is_empty() {
                        test = manifest.records.iter().collect();
                    }
                    test.iter().take(count).map(|r| r.frame_ref.clone()).collect()
                }
            };
            if refs.is_empty() {
                return Err(Error::contract("no frames selected for rendering"));
            }
            let mut rows = Vec::new();
            for frame_ref in &refs {
                let img = cache.get(frame_ref)?;
                let img = if img.shape()[0] == vit.image_size && img.shape()[1] == vit.image_size
                {
                    img.clone()
                } else {
                    crate::data::resize_bilinear(img, vit.image_size, vit.image_size)?
                };
                for &s in &seeds {
                    rows.push(ReconRow {
                        image: img.clone(),
                        plan: sample_mask(vit.num_patches(), ratio, s)?,
                    });
                }
            }
            let summary = render_recon_grid(&ck, &rows, &out)?;
            write_provenance(&out, "render-recon", &model_cfg)?;
            println!(
                "rendered {} rows to {} (mean masked loss {:.6})",
                rows.len(),
                out.display(),
                summary.scalar_losses.iter().sum::<f64>() / summary.scalar_losses.len() as f64
            );
            Ok(())
        }
    }
}

/// Scan `<input>/<video_id>/` directories into frame records at 1 FPS.
fn ingest_directory(
    input: &Path,
    dataset: &str,
    fps: f64,
    split: Split,
    synthetic: bool,
) -> Result<CorpusManifest> {
    let mut records = Vec::new();
    let mut video_dirs: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    video_dirs.sort();
    if video_dirs.is_empty() {
        return Err(Error::contract(format!(
            "no video directories found under {}",
            input.display()
        )));
    }
    for dir in video_dirs {
        let video_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::contract("video directory has a non-UTF8 name"))?
            .to_string();
        let sidecar = dir.join("timestamps.tsv");
        let mut frames: Vec<(f64, String)> = Vec::new();
        if sidecar.exists() {
            for (ln, line) in std::fs::read_to_string(&sidecar)?.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (name, t) = line.split_once('\t').ok_or_else(|| {
                    Error::contract(format!("{}:{}: expected <file>\\t<time_s>", sidecar.display(), ln + 1))
                })?;
                let t: f64 = t.trim().parse().map_err(|_| {
                    Error::contract(format!("{}:{}: bad timestamp {t:?}", sidecar.display(), ln + 1))
                })?;
                frames.push((t, format!("{video_id}/{}", name.trim())));
            }
        } else {
            for entry in std::fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("png") {
                    continue;
                }
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::contract("frame file has a non-UTF8 name"))?;
                let t: f64 = stem.parse().map_err(|_| {
                    Error::contract(format!(
                        "frame name {stem:?} is not a timestamp; add a timestamps.tsv sidecar"
                    ))
                })?;
                frames.push((
                    t,
                    format!("{video_id}/{}", path.file_name().unwrap().to_str().unwrap()),
                ));
            }
        }
        frames.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let timestamps: Vec<f64> = frames.iter().map(|(t, _)| *t).collect();
        let selected = sample_fps(&timestamps, fps)?;
        for idx in selected {
            records.push(FrameRecord {
                dataset: dataset.to_string(),
                video_id: video_id.clone(),
                frame_ref: frames[idx].1.clone(),
                time_s: frames[idx].0,
                split,
                synthetic,
                labels: None,
                extra: serde_json::Map::new(),
            });
        }
    }
    let manifest = CorpusManifest::new(records);
    manifest.validate()?;
    Ok(manifest)
}

fn format_fewshot_table(table: &FewshotTable, ks: &[usize]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{} few-shot results ({} runs)\n",
        table.task, table.runs
    ));
    out.push_str(&format!("{:<10} {:<22} {:<22}\n", "k", "random", "pretrained"));
    for &k in ks {
        let fmt = |arm: &str| -> String {
            table
                .cell(k, arm)
                .map(|c| format!("{:.4} ± {:.4}", c.report.mean, c.report.std))
                .unwrap_or_else(|| "-".into())
        };
        out.push_str(&format!(
            "{:<10} {:<22} {:<22}\n",
            k,
            fmt("random"),
            fmt("pretrained")
        ));
    }
    out
}
