//! End-to-end orchestration: the pretraining loop with its validation and
//! weight-averaging cadence, downstream finetuning, deterministic
//! evaluation, and the few-shot comparison grid.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::images::load_png;
use crate::data::manifest::{few_shot_select, CorpusManifest, FrameRecord, Split};
use crate::data::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::heads::{
    class_tokens, cross_entropy, focal_loss, linear_head, mean_ap, mstcn_forward,
    average_precision, phase_accuracy, HeadIds, MSTCNConfig, MstcnIds,
};
use crate::mae::{mae_forward, reconstruction_loss, sample_mask, MAEConfig, MaeModel};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::optim::{llrd_multipliers, lr_at, AdamWConfig, AdamWState, SWAState, ScheduleConfig};
use crate::vit::{
    encoder_forward_batch, parameter_layers, patchify, EncoderIds, ParamGroup, PatchGrid,
    ViTConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Pretrain,
    Triplet,
    PhaseStage1,
    PhaseStage2,
    Evaluate,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Task::Pretrain),
            "triplet" => Ok(Task::Triplet),
            "phase-stage1" => Ok(Task::PhaseStage1),
            "phase-stage2" => Ok(Task::PhaseStage2),
            "evaluate" => Ok(Task::Evaluate),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Pretrain => "pretrain",
            Task::Triplet => "triplet",
            Task::PhaseStage1 => "phase-stage1",
            Task::PhaseStage2 => "phase-stage2",
            Task::Evaluate => "evaluate",
        }
    }
}

/// One run's full configuration. Partial TOML files are allowed; missing
/// fields take these defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Task,
    pub preset: String,
    /// Explicit encoder geometry; overrides `preset` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vit_override: Option<ViTConfig>,
    pub schedule: ScheduleConfig,
    pub mae: MAEConfig,
    pub adamw: AdamWConfig,
    pub mstcn_stages: usize,
    pub mstcn_layers: usize,
    pub mstcn_channels: usize,
    pub llrd_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    /// Weight averaging runs over the final `swa_epochs` epochs.
    pub swa_epochs: usize,
    pub validations_per_epoch: usize,
    /// Fraction of pretraining videos held out for validation.
    pub val_fraction_videos: f64,
    pub augment: bool,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Train only the task head for the first N finetune epochs before
    /// unfreezing the backbone.
    pub head_only_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Pretrain,
            preset: "tiny-desk".into(),
            vit_override: None,
            schedule: ScheduleConfig::default(),
            mae: MAEConfig::tiny_desk(),
            adamw: AdamWConfig::default(),
            mstcn_stages: 2,
            mstcn_layers: 8,
            mstcn_channels: 64,
            llrd_decay: 0.65,
            batch_size: 32,
            epochs: 15,
            seeds: vec![0],
            swa_epochs: 5,
            validations_per_epoch: 6,
            val_fraction_videos: 0.05,
            augment: true,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            head_only_epochs: 0,
        }
    }
}

impl RunConfig {
    /// Desk-scale finetuning defaults for a downstream task.
    pub fn finetune_desk(task: Task, epochs: usize) -> Self {
        RunConfig {
            task,
            schedule: ScheduleConfig {
                peak_lr: 1e-3,
                warmup_epochs: 1.0,
                cosine_end_epoch: epochs as f64,
                total_epochs: epochs as f64,
                min_lr: 0.0,
            },
            epochs,
            swa_epochs: 0,
            augment: false,
            ..RunConfig::default()
        }
    }

    pub fn vit_config(&self) -> Result<ViTConfig> {
        match &self.vit_override {
            Some(v) => Ok(v.clone()),
            None => ViTConfig::from_preset(&self.preset),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit_config()?.validate()?;
        self.schedule.validate()?;
        self.mae.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must be non-empty"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be >= 1"));
        }
        if (self.schedule.total_epochs - self.epochs as f64).abs() > 1e-9 {
            return Err(Error::config(format!(
                "schedule.total_epochs {} must equal epochs {}",
                self.schedule.total_epochs, self.epochs
            )));
        }
        if self.swa_epochs > self.epochs {
            return Err(Error::config("swa_epochs exceeds epochs"));
        }
        if self.validations_per_epoch == 0 {
            return Err(Error::config("validations_per_epoch must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction_videos) {
            return Err(Error::config("val_fraction_videos must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn to_toml_value(&self) -> toml::Value {
        toml::Value::try_from(self).expect("config serializes")
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch_fraction: f64,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    pub swa_count: usize,
}

/// Frames of one manifest, decoded once and held in memory.
pub struct FrameCache {
    images: HashMap<String, Tensor>,
}

impl FrameCache {
    pub fn load(manifest: &CorpusManifest, root: &Path) -> Result<Self> {
        let mut images = HashMap::new();
        for r in &manifest.records {
            if !images.contains_key(&r.frame_ref) {
                images.insert(r.frame_ref.clone(), load_png(&root.join(&r.frame_ref))?);
            }
        }
        Ok(FrameCache { images })
    }

    pub fn get(&self, frame_ref: &str) -> Result<&Tensor> {
        self.images
            .get(frame_ref)
            .ok_or_else(|| Error::contract(format!("frame {frame_ref} not cached")))
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// In-epoch validation marks: step indices (1-based) hitting each sixth of
/// the epoch, always `validations_per_epoch` of them when the epoch has at
/// least that many steps.
fn validation_marks(steps_per_epoch: usize, per_epoch: usize) -> BTreeSet<usize> {
    (1..=per_epoch)
        .map(|i| (i * steps_per_epoch).div_ceil(per_epoch))
        .collect()
}

/// Per-parameter LR multipliers from group definitions; parameters outside
/// every group (task heads) get multiplier 1.
fn param_multipliers(store: &ParamStore, groups: &[ParamGroup], decay: f64) -> Result<Vec<f64>> {
    let plan = llrd_multipliers(groups, decay)?;
    let mut by_name: HashMap<&str, f64> = HashMap::new();
    for (g, lg) in groups.iter().zip(&plan.groups) {
        for name in &g.param_names {
            by_name.insert(name, lg.multiplier);
        }
    }
    Ok((0..store.len())
        .map(|i| by_name.get(store.name(i)).copied().unwrap_or(1.0))
        .collect())
}

fn collect_grads(
    grads: &crate::numerics::Gradients,
    vars: &[Var],
    store: &ParamStore,
) -> Vec<Tensor> {
    vars.iter()
        .enumerate()
        .map(|(i, &v)| {
            grads
                .wrt(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.get(i).shape().to_vec()))
        })
        .collect()
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRecord>,
    pub swa_updates: usize,
    /// Validation loss of the running SWA average at each update.
    pub swa_evals: Vec<f64>,
    pub best_swa_val: f64,
    /// Mean training loss over the first epoch.
    pub initial_train_loss: f64,
    /// Mean training loss over the last epoch.
    pub final_train_loss: f64,
}

fn frame_image(cache: &FrameCache, rec: &FrameRecord, target: usize) -> Result<Tensor> {
    let img = cache.get(&rec.frame_ref)?;
    if img.shape()[0] == target && img.shape()[1] == target {
        Ok(img.clone())
    } else {
        crate::data::resize_bilinear(img, target, target)
    }
}

/// Mean masked-reconstruction loss over a frame list with fixed per-frame
/// masks, no augmentation.
fn eval_mae_loss(
    model: &MaeModel,
    store: &ParamStore,
    cache: &FrameCache,
    frames: &[&FrameRecord],
    batch_size: usize,
    mask_seed: u64,
) -> Result<f64> {
    let n = model.vit.num_patches();
    let mut total = 0.0;
    let mut count = 0usize;
    for (bi, chunk) in frames.chunks(batch_size).enumerate() {
        let mut grids = Vec::with_capacity(chunk.len());
        let mut plans = Vec::with_capacity(chunk.len());
        for (j, rec) in chunk.iter().enumerate() {
            let img = frame_image(cache, rec, model.vit.image_size)?;
            grids.push(patchify(&img, model.vit.patch_size)?);
            plans.push(sample_mask(
                n,
                model.mae.mask_ratio,
                mix_seed(mask_seed, (bi * batch_size + j) as u64),
            )?);
        }
        let grid_refs: Vec<&PatchGrid> = grids.iter().collect();
        let plan_refs: Vec<&crate::mae::MaskPlan> = plans.iter().collect();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let pred = mae_forward(&mut tape, &vars, model, &grid_refs, &plan_refs)?;
        let loss = reconstruction_loss(&mut tape, pred, &grid_refs, &plan_refs, model.mae.norm_pix)?;
        total += tape.value(loss).item() * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Pretrain with masked reconstruction.
///
/// Aborts before any training when the manifest overlaps the exclusion set
/// (downstream validation/test videos), naming the leaked videos. Runs the
/// schedule per optimization step, validates `validations_per_epoch` times
/// per epoch, and during the final `swa_epochs` epochs folds the weights
/// into a running average at each validation point, persisting the
/// average with the lowest validation loss.
pub fn pretrain_run(
    cfg: &RunConfig,
    manifest: &CorpusManifest,
    cache: &FrameCache,
    excluded_videos: &BTreeSet<(String, String)>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let leaked: Vec<(String, String)> = manifest
        .videos()
        .intersection(excluded_videos)
        .cloned()
        .collect();
    if !leaked.is_empty() {
        return Err(Error::Leakage { videos: leaked });
    }
    if manifest.records.iter().any(|r| r.synthetic) {
        return Err(Error::contract(
            "pretraining manifest still contains synthetic frames; filter first",
        ));
    }
    let seed = cfg.seeds[0];
    let vit = cfg.vit_config()?;
    let model = MaeModel::build(vit.clone(), cfg.mae.clone(), mix_seed(seed, 1))?;
    let mut store = model.store.clone();

    // Hold out a validation slice by video.
    let mut videos: Vec<(String, String)> = manifest.videos().into_iter().collect();
    let n_val = ((videos.len() as f64 * cfg.val_fraction_videos).ceil() as usize)
        .max(1)
        .min(videos.len().saturating_sub(1));
    let mut vid_rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, 2));
    videos.shuffle(&mut vid_rng);
    let val_videos: BTreeSet<(String, String)> = videos[..n_val].iter().cloned().collect();
    let train_frames: Vec<&FrameRecord> = manifest
        .records
        .iter()
        .filter(|r| !val_videos.contains(&(r.dataset.clone(), r.video_id.clone())))
        .collect();
    let val_frames: Vec<&FrameRecord> = manifest
        .records
        .iter()
        .filter(|r| val_videos.contains(&(r.dataset.clone(), r.video_id.clone())))
        .collect();
    if train_frames.is_empty() || val_frames.is_empty() {
        return Err(Error::config(
            "pretraining needs at least one training and one validation video",
        ));
    }

    let groups = parameter_layers(&vit, cfg.mae.decoder_depth);
    let mults = param_multipliers(&store, &groups, cfg.llrd_decay)?;
    let mut opt = AdamWState::new(store.tensors(), cfg.adamw.clone());
    let mut swa = SWAState::new();
    let mut swa_evals = Vec::new();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut log = Vec::new();
    let mut global_step = 0u64;
    let n_patches = vit.num_patches();
    let steps_per_epoch = train_frames.len().div_ceil(cfg.batch_size);
    let marks = validation_marks(steps_per_epoch, cfg.validations_per_epoch);
    let mut epoch_losses = vec![0.0f64; cfg.epochs];
    let aug_cfg = AugmentConfig::for_size(vit.image_size);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_frames.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, 100 + epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss_sum = 0.0;

        for (step_in_epoch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step1 = step_in_epoch + 1;
            let mut grids = Vec::with_capacity(chunk.len());
            let mut plans = Vec::with_capacity(chunk.len());
            for (j, &fi) in chunk.iter().enumerate() {
                let rec = train_frames[fi];
                let raw = cache.get(&rec.frame_ref)?;
                let img = if cfg.augment {
                    augment(raw, &aug_cfg, mix_seed(seed, 0x5EED ^ (global_step << 8) ^ j as u64))?
                } else {
                    frame_image(cache, rec, vit.image_size)?
                };
                grids.push(patchify(&img, vit.patch_size)?);
                plans.push(sample_mask(
                    n_patches,
                    cfg.mae.mask_ratio,
                    mix_seed(seed, 0xA5C ^ (global_step << 8) ^ j as u64),
                )?);
            }
            let grid_refs: Vec<&PatchGrid> = grids.iter().collect();
            let plan_refs: Vec<&crate::mae::MaskPlan> = plans.iter().collect();

            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let pred = mae_forward(&mut tape, &vars, &model, &grid_refs, &plan_refs)?;
            let loss_var =
                reconstruction_loss(&mut tape, pred, &grid_refs, &plan_refs, cfg.mae.norm_pix)?;
            let loss = tape.value(loss_var).item();
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {loss} at step {global_step} (epoch {epoch}, lr step {step1})"
                )));
            }
            epoch_loss_sum += loss;

            let grads = tape.backward(loss_var)?;
            let grad_list = collect_grads(&grads, &vars, &store);
            let ef = epoch as f64 + (step1 - 1) as f64 / steps_per_epoch as f64;
            let lr = lr_at(ef, &cfg.schedule)?;
            let lrs: Vec<f64> = mults.iter().map(|m| lr * m).collect();
            opt.step(store.tensors_mut(), &grad_list, &lrs)?;
            global_step += 1;

            let mut val_loss = None;
            if marks.contains(&step1) {
                let v = eval_mae_loss(
                    &model,
                    &store,
                    cache,
                    &val_frames,
                    cfg.batch_size,
                    mix_seed(seed, 0x7A11_u64),
                )?;
                val_loss = Some(v);
                if epoch + cfg.swa_epochs >= cfg.epochs {
                    swa.update(store.tensors())?;
                    let mut swa_store = store.clone();
                    for (t, a) in swa_store.tensors_mut().iter_mut().zip(swa.average().unwrap())
                    {
                        *t = a.clone().with_grad();
                    }
                    let sv = eval_mae_loss(
                        &model,
                        &swa_store,
                        cache,
                        &val_frames,
                        cfg.batch_size,
                        mix_seed(seed, 0x7A11_u64),
                    )?;
                    swa_evals.push(sv);
                    if best.as_ref().is_none_or(|(b, _)| sv < *b) {
                        best = Some((sv, swa.average().unwrap().to_vec()));
                    }
                }
            }
            log.push(TrainLogRecord {
                step: global_step,
                epoch_fraction: ef,
                lr,
                loss,
                val_loss,
                swa_count: swa.count(),
            });
        }
        epoch_losses[epoch] = epoch_loss_sum / steps_per_epoch as f64;
    }

    // Persist the best SWA average; fall back to final weights when the
    // window was empty.
    let (best_val, best_weights) = match best {
        Some((v, w)) => (v, w),
        None => {
            let v = eval_mae_loss(
                &model,
                &store,
                cache,
                &val_frames,
                cfg.batch_size,
                mix_seed(seed, 0x7A11_u64),
            )?;
            (v, store.tensors().to_vec())
        }
    };
    let mut final_store = store.clone();
    for (t, w) in final_store.tensors_mut().iter_mut().zip(&best_weights) {
        *t = w.clone().with_grad();
    }
    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), toml::Value::Integer(seed as i64));
    meta.insert("swa_updates".into(), toml::Value::Integer(swa.count() as i64));
    meta.insert("best_swa_val".into(), toml::Value::Float(best_val));
    let checkpoint = Checkpoint::from_store(
        "mae",
        &cfg.preset,
        cfg.to_toml_value(),
        meta,
        &final_store,
    )?;
    Ok(PretrainOutcome {
        checkpoint,
        log,
        swa_updates: swa.count(),
        swa_evals,
        best_swa_val: best_val,
        initial_train_loss: epoch_losses[0],
        final_train_loss: epoch_losses[cfg.epochs - 1],
    })
}

/// Labeled frame lists per task.
struct TaskData<'a> {
    train: Vec<&'a FrameRecord>,
}

fn split_videos<'a>(
    manifest: &'a CorpusManifest,
    split: Split,
) -> Vec<(String, Vec<&'a FrameRecord>)> {
    let mut by_video: BTreeMap<String, Vec<&FrameRecord>> = BTreeMap::new();
    for r in manifest.in_split(split) {
        by_video.entry(r.video_id.clone()).or_default().push(r);
    }
    let mut videos: Vec<(String, Vec<&FrameRecord>)> = by_video.into_iter().collect();
    for (_, frames) in &mut videos {
        frames.sort_by(|a, b| a.time_s.partial_cmp(&b.time_s).unwrap());
    }
    videos
}

fn task_data<'a>(
    manifest: &'a CorpusManifest,
    selected_train_videos: Option<&[String]>,
) -> Result<TaskData<'a>> {
    let train: Vec<&FrameRecord> = manifest
        .in_split(Split::Train)
        .filter(|r| {
            selected_train_videos
                .map(|sel| sel.contains(&r.video_id))
                .unwrap_or(true)
        })
        .collect();
    if train.is_empty() {
        return Err(Error::contract("no training frames selected"));
    }
    Ok(TaskData { train })
}

fn triplet_width(manifest: &CorpusManifest) -> Result<usize> {
    let mut width = None;
    for r in &manifest.records {
        if let Some(t) = r.labels.as_ref().and_then(|l| l.triplets.as_ref()) {
            match width {
                None => width = Some(t.len()),
                Some(w) if w != t.len() => {
                    return Err(Error::contract(format!(
                        "inconsistent triplet widths {w} vs {}",
                        t.len()
                    )))
                }
                _ => {}
            }
        }
    }
    width.ok_or_else(|| Error::contract("manifest has no triplet labels"))
}

fn num_phases(manifest: &CorpusManifest) -> Result<usize> {
    manifest
        .records
        .iter()
        .filter_map(|r| r.labels.as_ref().and_then(|l| l.phase))
        .max()
        .map(|m| m + 1)
        .ok_or_else(|| Error::contract("manifest has no phase labels"))
}

fn record_triplets(rec: &FrameRecord, width: usize) -> Result<Vec<f64>> {
    let t = rec
        .labels
        .as_ref()
        .and_then(|l| l.triplets.as_ref())
        .ok_or_else(|| Error::contract(format!("frame {} lacks triplet labels", rec.frame_ref)))?;
    if t.len() != width {
        return Err(Error::contract("triplet width mismatch"));
    }
    Ok(t.iter().map(|&b| f64::from(b)).collect())
}

fn record_phase(rec: &FrameRecord) -> Result<usize> {
    rec.labels
        .as_ref()
        .and_then(|l| l.phase)
        .ok_or_else(|| Error::contract(format!("frame {} lacks a phase label", rec.frame_ref)))
}

/// Encode a batch of frames with full visibility; returns `[B, D]` class tokens.
fn encode_frames(
    tape: &mut Tape,
    vars: &[Var],
    enc: &EncoderIds,
    vit: &ViTConfig,
    cache: &FrameCache,
    frames: &[&FrameRecord],
) -> Result<Var> {
    let keep: Vec<usize> = (0..vit.num_patches()).collect();
    let mut grids = Vec::with_capacity(frames.len());
    for rec in frames {
        let img = frame_image(cache, rec, vit.image_size)?;
        grids.push(patchify(&img, vit.patch_size)?);
    }
    let grid_refs: Vec<&PatchGrid> = grids.iter().collect();
    let keeps: Vec<&[usize]> = vec![&keep; frames.len()];
    let latent = encoder_forward_batch(tape, vars, enc, vit, &grid_refs, &keeps)?;
    class_tokens(
        tape,
        latent,
        frames.len(),
        1 + vit.num_patches(),
        vit.embed_dim,
    )
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRecord>,
}

/// Train a downstream head (and backbone, for stage-1 tasks) on the
/// manifest's train split.
///
/// `init`: a checkpoint whose matching tensors seed the model (the random
/// arm passes `None`). Stage 2 requires a `phase-stage1` checkpoint and
/// trains only the temporal refiner on frozen features.
pub fn finetune_run(
    cfg: &RunConfig,
    manifest: &CorpusManifest,
    cache: &FrameCache,
    init: Option<&Checkpoint>,
    selected_train_videos: Option<&[String]>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    match cfg.task {
        Task::Triplet | Task::PhaseStage1 => {
            finetune_stage1(cfg, manifest, cache, init, selected_train_videos)
        }
        Task::PhaseStage2 => finetune_stage2(cfg, manifest, cache, init, selected_train_videos),
        other => Err(Error::contract(format!(
            "finetune_run cannot run task {:?}",
            other.name()
        ))),
    }
}

fn finetune_stage1(
    cfg: &RunConfig,
    manifest: &CorpusManifest,
    cache: &FrameCache,
    init: Option<&Checkpoint>,
    selected_train_videos: Option<&[String]>,
) -> Result<FinetuneOutcome> {
    let seed = cfg.seeds[0];
    let vit = cfg.vit_config()?;
    let data = task_data(manifest, selected_train_videos)?;
    let classes = match cfg.task {
        Task::Triplet => triplet_width(manifest)?,
        _ => num_phases(manifest)?,
    };

    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, 3));
    let mut store = ParamStore::new();
    let enc = EncoderIds::build(&mut store, &vit, &mut rng);
    let head_name = match cfg.task {
        Task::Triplet => "head.triplet",
        _ => "head.phase",
    };
    let head = HeadIds::build(&mut store, head_name, vit.embed_dim, classes, &mut rng);
    if let Some(ck) = init {
        let applied = ck.apply_matching(&mut store)?;
        if applied == 0 {
            return Err(Error::Checkpoint(
                "init checkpoint shares no tensors with this model".into(),
            ));
        }
    }

    let mut groups = parameter_layers(&vit, 0);
    groups.push(ParamGroup {
        id: head_name.into(),
        distance: 0,
        param_names: vec![format!("{head_name}.w"), format!("{head_name}.b")],
    });
    let mults = param_multipliers(&store, &groups, cfg.llrd_decay)?;
    let head_mask: Vec<bool> = (0..store.len())
        .map(|i| store.name(i).starts_with("head."))
        .collect();
    let mut opt = AdamWState::new(store.tensors(), cfg.adamw.clone());
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let mut log = Vec::new();
    let mut global_step = 0u64;

    for epoch in 0..cfg.epochs {
        let head_only = epoch < cfg.head_only_epochs;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut erng = ChaCha20Rng::seed_from_u64(mix_seed(seed, 200 + epoch as u64));
        order.shuffle(&mut erng);
        for (step_in_epoch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let frames: Vec<&FrameRecord> = chunk.iter().map(|&i| data.train[i]).collect();
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let tokens = encode_frames(&mut tape, &vars, &enc, &vit, cache, &frames)?;
            let logits = linear_head(&mut tape, &vars, &head, tokens)?;
            let loss_var = match cfg.task {
                Task::Triplet => {
                    let mut labels = Vec::with_capacity(frames.len() * classes);
                    for rec in &frames {
                        labels.extend(record_triplets(rec, classes)?);
                    }
                    let labels = Tensor::new(vec![frames.len(), classes], labels)?;
                    focal_loss(&mut tape, logits, &labels, cfg.focal_alpha, cfg.focal_gamma)?
                }
                _ => {
                    let labels: Vec<usize> = frames
                        .iter()
                        .map(|r| record_phase(r))
                        .collect::<Result<_>>()?;
                    cross_entropy(&mut tape, logits, &labels)?
                }
            };
            let loss = tape.value(loss_var).item();
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {loss} at finetune step {global_step}"
                )));
            }
            let grads = tape.backward(loss_var)?;
            let grad_list = collect_grads(&grads, &vars, &store);
            let ef = epoch as f64 + step_in_epoch as f64 / steps_per_epoch as f64;
            let lr = lr_at(ef, &cfg.schedule)?;
            let lrs: Vec<f64> = mults
                .iter()
                .zip(&head_mask)
                .map(|(m, &is_head)| {
                    if head_only && !is_head {
                        0.0
                    } else {
                        lr * m
                    }
                })
                .collect();
            opt.step(store.tensors_mut(), &grad_list, &lrs)?;
            global_step += 1;
            log.push(TrainLogRecord {
                step: global_step,
                epoch_fraction: ef,
                lr,
                loss,
                val_loss: None,
                swa_count: 0,
            });
        }
    }

    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), toml::Value::Integer(seed as i64));
    meta.insert("classes".into(), toml::Value::Integer(classes as i64));
    let checkpoint = Checkpoint::from_store(
        cfg.task.name(),
        &cfg.preset,
        cfg.to_toml_value(),
        meta,
        &store,
    )?;
    Ok(FinetuneOutcome { checkpoint, log })
}

/// Run configuration embedded in a checkpoint header.
pub fn run_config_of(ck: &Checkpoint) -> Result<RunConfig> {
    ck.config()
        .clone()
        .try_into()
        .map_err(|e| Error::Checkpoint(format!("embedded run config: {e}")))
}

/// Rebuild the stage-1 model (encoder + phase head) from a checkpoint.
fn stage1_model(ck: &Checkpoint) -> Result<(ViTConfig, ParamStore, EncoderIds, HeadIds, usize)> {
    let vit = run_config_of(ck)?.vit_config()?;
    let classes = ck
        .meta()
        .get("classes")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| Error::Checkpoint("stage-1 checkpoint lacks classes meta".into()))?
        as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let enc = EncoderIds::build(&mut store, &vit, &mut rng);
    let head_name = match ck.kind() {
        "triplet" => "head.triplet",
        _ => "head.phase",
    };
    let head = HeadIds::build(&mut store, head_name, vit.embed_dim, classes, &mut rng);
    ck.apply_all(&mut store)?;
    Ok((vit, store, enc, head, classes))
}

/// Frozen per-frame class-token features of one video.
fn extract_features(
    vit: &ViTConfig,
    store: &ParamStore,
    enc: &EncoderIds,
    cache: &FrameCache,
    frames: &[&FrameRecord],
    batch_size: usize,
) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(frames.len() * vit.embed_dim);
    for chunk in frames.chunks(batch_size) {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let tokens = encode_frames(&mut tape, &vars, enc, vit, cache, chunk)?;
        rows.extend_from_slice(tape.value(tokens).data());
    }
    Tensor::new(vec![frames.len(), vit.embed_dim], rows)
}

fn finetune_stage2(
    cfg: &RunConfig,
    manifest: &CorpusManifest,
    cache: &FrameCache,
    init: Option<&Checkpoint>,
    selected_train_videos: Option<&[String]>,
) -> Result<FinetuneOutcome> {
    let stage1 = init.ok_or_else(|| {
        Error::contract("phase-stage2 requires a stage-1 checkpoint as init")
    })?;
    if stage1.kind() != "phase-stage1" {
        return Err(Error::contract(format!(
            "phase-stage2 init must be a phase-stage1 checkpoint, got {:?}",
            stage1.kind()
        )));
    }
    let seed = cfg.seeds[0];
    let (vit, backbone, enc, _head, classes) = stage1_model(stage1)?;

    // Features are extracted once; the backbone never enters the optimizer.
    let mut train_videos = split_videos(manifest, Split::Train);
    if let Some(sel) = selected_train_videos {
        train_videos.retain(|(vid, _)| sel.contains(vid));
    }
    if train_videos.is_empty() {
        return Err(Error::contract("no training videos selected"));
    }
    let mut seqs = Vec::with_capacity(train_videos.len());
    for (_, frames) in &train_videos {
        let feats = extract_features(&vit, &backbone, &enc, cache, frames, cfg.batch_size)?;
        let labels: Vec<usize> = frames.iter().map(|r| record_phase(r)).collect::<Result<_>>()?;
        seqs.push((feats, labels));
    }

    let mstcn_cfg = MSTCNConfig {
        num_stages: cfg.mstcn_stages,
        layers_per_stage: cfg.mstcn_layers,
        channels: cfg.mstcn_channels,
        num_classes: classes,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, 4));
    let mut store = ParamStore::new();
    let ids = MstcnIds::build(&mut store, &mstcn_cfg, vit.embed_dim, &mut rng);
    let mut opt = AdamWState::new(store.tensors(), cfg.adamw.clone());
    let mults = vec![1.0; store.len()];
    let steps_per_epoch = seqs.len();
    let mut log = Vec::new();
    let mut global_step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        let mut erng = ChaCha20Rng::seed_from_u64(mix_seed(seed, 300 + epoch as u64));
        order.shuffle(&mut erng);
        for (step_in_epoch, &si) in order.iter().enumerate() {
            let (feats, labels) = &seqs[si];
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let f = tape.constant(feats.clone());
            let outs = mstcn_forward(&mut tape, &vars, &ids, &mstcn_cfg, f)?;
            let mut loss_var = None;
            for o in outs {
                let ce = cross_entropy(&mut tape, o, labels)?;
                loss_var = Some(match loss_var {
                    None => ce,
                    Some(acc) => tape.add(acc, ce)?,
                });
            }
            let loss_var = loss_var.expect("at least one stage");
            let loss = tape.value(loss_var).item();
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {loss} at stage-2 step {global_step}"
                )));
            }
            let grads = tape.backward(loss_var)?;
            let grad_list = collect_grads(&grads, &vars, &store);
            let ef = epoch as f64 + step_in_epoch as f64 / steps_per_epoch as f64;
            let lr = lr_at(ef, &cfg.schedule)?;
            let lrs: Vec<f64> = mults.iter().map(|m| lr * m).collect();
            opt.step(store.tensors_mut(), &grad_list, &lrs)?;
            global_step += 1;
            log.push(TrainLogRecord {
                step: global_step,
                epoch_fraction: ef,
                lr,
                loss,
                val_loss: None,
                swa_count: 0,
            });
        }
    }

    // Checkpoint carries the frozen stage-1 tensors plus the refiner, so it
    // evaluates standalone.
    let mut combined = std::collections::BTreeMap::new();
    for name in stage1.tensor_names() {
        combined.insert(name.to_string(), stage1.tensor(name).unwrap().clone());
    }
    for (name, t) in store.iter() {
        combined.insert(
            name.to_string(),
            crate::checkpoint::TensorEntry {
                dims: t.shape().iter().map(|&d| d as u64).collect(),
                values: t.data().iter().map(|&v| v as f32).collect(),
            },
        );
    }
    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), toml::Value::Integer(seed as i64));
    meta.insert("classes".into(), toml::Value::Integer(classes as i64));
    meta.insert(
        "mstcn".into(),
        toml::Value::try_from(&mstcn_cfg).expect("mstcn config serializes"),
    );
    let checkpoint = Checkpoint::new(
        "phase-stage2",
        &cfg.preset,
        cfg.to_toml_value(),
        meta,
        combined,
    )?;
    Ok(FinetuneOutcome { checkpoint, log })
}

/// Per-setting metric with its cross-seed aggregate.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub task: String,
    pub metric: String,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    /// Sample standard deviation; 0 when `n == 1`.
    pub std: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn from_values(task: &str, metric: &str, values: Vec<(u64, f64)>) -> Self {
        let n = values.len();
        let mean = values.iter().map(|(_, v)| v).sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|(_, v)| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        MetricReport {
            task: task.into(),
            metric: metric.into(),
            per_seed: values,
            mean,
            std,
            n,
        }
    }

    pub fn merged(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::contract("cannot merge zero reports"));
        }
        let mut values = Vec::new();
        for r in reports {
            values.extend(r.per_seed.iter().cloned());
        }
        Ok(MetricReport::from_values(
            &reports[0].task,
            &reports[0].metric,
            values,
        ))
    }
}

/// Deterministic evaluation of a checkpoint on a manifest's test split.
///
/// Triplet mAP accumulates scores globally across all test frames before
/// ranking (the CholecT45 convention), not per video; classes with no
/// positive anywhere in the test split are excluded from the mean.
pub fn evaluate_run(
    ck: &Checkpoint,
    manifest: &CorpusManifest,
    cache: &FrameCache,
    batch_size: usize,
) -> Result<MetricReport> {
    let seed = ck
        .meta()
        .get("seed")
        .and_then(|v| v.as_integer())
        .unwrap_or(0) as u64;
    match ck.kind() {
        "triplet" => {
            let (vit, store, enc, head, classes) = stage1_model(ck)?;
            let test_videos = split_videos(manifest, Split::Test);
            if test_videos.is_empty() {
                return Err(Error::contract("no test videos in manifest"));
            }
            // Global accumulation across all test frames.
            let mut scores: Vec<Vec<f64>> = vec![Vec::new(); classes];
            let mut labels: Vec<Vec<u8>> = vec![Vec::new(); classes];
            for (_, frames) in &test_videos {
                for chunk in frames.chunks(batch_size) {
                    let mut tape = Tape::new();
                    let vars = store.bind(&mut tape);
                    let tokens = encode_frames(&mut tape, &vars, &enc, &vit, cache, chunk)?;
                    let logits = linear_head(&mut tape, &vars, &head, tokens)?;
                    let probs = tape.sigmoid_op(logits);
                    let p = tape.value(probs);
                    for (j, rec) in chunk.iter().enumerate() {
                        let y = record_triplets(rec, classes)?;
                        for c in 0..classes {
                            scores[c].push(p.data()[j * classes + c]);
                            labels[c].push(y[c] as u8);
                        }
                    }
                }
            }
            let aps: Vec<Option<f64>> = (0..classes)
                .map(|c| average_precision(&scores[c], &labels[c]))
                .collect::<Result<_>>()?;
            let map = mean_ap(&aps)?;
            Ok(MetricReport::from_values("triplet", "mAP", vec![(seed, map)]))
        }
        "phase-stage1" => {
            let (vit, store, enc, head, classes) = stage1_model(ck)?;
            let test_videos = split_videos(manifest, Split::Test);
            let mut preds = Vec::new();
            let mut labs = Vec::new();
            for (_, frames) in &test_videos {
                let mut vp = Vec::with_capacity(frames.len());
                for chunk in frames.chunks(batch_size) {
                    let mut tape = Tape::new();
                    let vars = store.bind(&mut tape);
                    let tokens = encode_frames(&mut tape, &vars, &enc, &vit, cache, chunk)?;
                    let logits = linear_head(&mut tape, &vars, &head, tokens)?;
                    let l = tape.value(logits);
                    for j in 0..chunk.len() {
                        vp.push(argmax(&l.data()[j * classes..(j + 1) * classes]));
                    }
                }
                preds.push(vp);
                labs.push(
                    frames
                        .iter()
                        .map(|r| record_phase(r))
                        .collect::<Result<Vec<usize>>>()?,
                );
            }
            let acc = phase_accuracy(&preds, &labs)?;
            Ok(MetricReport::from_values(
                "phase-stage1",
                "phase_accuracy",
                vec![(seed, acc)],
            ))
        }
        "phase-stage2" => {
            let (vit, backbone, enc, _head, classes) = stage1_model(&stage2_stage1_view(ck)?)?;
            let mstcn_cfg: MSTCNConfig = ck
                .meta()
                .get("mstcn")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("stage-2 checkpoint lacks mstcn meta".into()))?
                .try_into()
                .map_err(|e| Error::Checkpoint(format!("mstcn meta: {e}")))?;
            let mut rng = ChaCha20Rng::seed_from_u64(0);
            let mut store = ParamStore::new();
            let ids = MstcnIds::build(&mut store, &mstcn_cfg, vit.embed_dim, &mut rng);
            ck.apply_matching(&mut store)?;

            let test_videos = split_videos(manifest, Split::Test);
            let mut preds = Vec::new();
            let mut labs = Vec::new();
            for (_, frames) in &test_videos {
                let feats =
                    extract_features(&vit, &backbone, &enc, cache, frames, batch_size)?;
                let mut tape = Tape::new();
                let vars = store.bind(&mut tape);
                let f = tape.constant(feats);
                let outs = mstcn_forward(&mut tape, &vars, &ids, &mstcn_cfg, f)?;
                let last = tape.value(*outs.last().unwrap());
                let mut vp = Vec::with_capacity(frames.len());
                for t in 0..frames.len() {
                    vp.push(argmax(&last.data()[t * classes..(t + 1) * classes]));
                }
                preds.push(vp);
                labs.push(
                    frames
                        .iter()
                        .map(|r| record_phase(r))
                        .collect::<Result<Vec<usize>>>()?,
                );
            }
            let acc = phase_accuracy(&preds, &labs)?;
            Ok(MetricReport::from_values(
                "phase-stage2",
                "phase_accuracy",
                vec![(seed, acc)],
            ))
        }
        other => Err(Error::contract(format!(
            "cannot evaluate checkpoint of kind {other:?}"
        ))),
    }
}

/// Reinterpret a stage-2 checkpoint as its embedded stage-1 model.
fn stage2_stage1_view(ck: &Checkpoint) -> Result<Checkpoint> {
    let mut tensors = std::collections::BTreeMap::new();
    for name in ck.tensor_names() {
        if !name.starts_with("mstcn.") {
            tensors.insert(name.to_string(), ck.tensor(name).unwrap().clone());
        }
    }
    Checkpoint::new(
        "phase-stage1",
        ck.preset(),
        ck.config().clone(),
        ck.meta().clone(),
        tensors,
    )
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// One cell of the few-shot table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FewshotCell {
    pub k: usize,
    pub arm: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FewshotTable {
    pub task: String,
    pub cells: Vec<FewshotCell>,
    pub runs: usize,
}

impl FewshotTable {
    pub fn cell(&self, k: usize, arm: &str) -> Option<&FewshotCell> {
        self.cells.iter().find(|c| c.k == k && c.arm == arm)
    }
}

/// Few-shot comparison: for each video budget and seed, select training
/// videos, finetune each arm (random init vs pretrained init), and evaluate
/// on the unchanged test split.
pub fn fewshot_grid(
    cfg: &RunConfig,
    manifest: &CorpusManifest,
    cache: &FrameCache,
    pretrained: &Checkpoint,
    k_values: &[usize],
    seeds: &[u64],
) -> Result<FewshotTable> {
    let train_videos: Vec<String> = split_videos(manifest, Split::Train)
        .into_iter()
        .map(|(v, _)| v)
        .collect();
    let max_k = *k_values.iter().max().ok_or_else(|| {
        Error::contract("fewshot_grid needs at least one k value")
    })?;
    if max_k > train_videos.len() {
        return Err(Error::contract(format!(
            "k = {max_k} exceeds {} training videos",
            train_videos.len()
        )));
    }
    let mut cells = Vec::new();
    let mut runs = 0usize;
    for &k in k_values {
        for arm in ["random", "pretrained"] {
            let mut values = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let selected = few_shot_select(&train_videos, k, mix_seed(seed, k as u64))?;
                let mut run_cfg = cfg.clone();
                run_cfg.seeds = vec![seed];
                let init = (arm == "pretrained").then_some(pretrained);
                let outcome =
                    finetune_run(&run_cfg, manifest, cache, init, Some(&selected))?;
                let report =
                    evaluate_run(&outcome.checkpoint, manifest, cache, cfg.batch_size)?;
                values.push((seed, report.per_seed[0].1));
                runs += 1;
                log::info!(
                    "fewshot {} k={k} arm={arm} seed={seed}: {:.4}",
                    cfg.task.name(),
                    report.per_seed[0].1
                );
            }
            cells.push(FewshotCell {
                k,
                arm: arm.into(),
                report: MetricReport::from_values(
                    cfg.task.name(),
                    if cfg.task == Task::Triplet { "mAP" } else { "phase_accuracy" },
                    values,
                ),
            });
        }
    }
    Ok(FewshotTable {
        task: cfg.task.name().into(),
        cells,
        runs,
    })
}
