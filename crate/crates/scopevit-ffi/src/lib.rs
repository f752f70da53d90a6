//! C ABI for the pretraining and evaluation pipeline.
//!
//! All functions return a status code; 0 is success. On failure the
//! thread-local error message is readable via [`svt_last_error`]. Handles
//! are opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, c_double, CStr, CString};
use std::path::Path;

use scopevit::checkpoint::Checkpoint;
use scopevit::data::manifest::{CorpusManifest, Split};
use scopevit::data::synth::{write_corpus, SynthCorpusConfig};
use scopevit::mae::sample_mask;
use scopevit::pipeline::{
    evaluate_run, finetune_run, pretrain_run, run_config_of, FrameCache, RunConfig, Task,
};
use scopevit::render::{render_recon_grid, ReconRow};

/// Success.
pub const SVT_OK: i32 = 0;
/// Null pointer, malformed UTF-8 or otherwise unusable argument.
pub const SVT_ERR_INVALID_ARGUMENT: i32 = 1;
/// Domain failure (config validation, leakage gate, io, bad checkpoint...).
pub const SVT_ERR_RUNTIME: i32 = 2;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display, code: i32) -> i32 {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
    code
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::default());
}

/// Copy the thread-local error message into `buf` (NUL-terminated,
/// truncating) and return the full message length in bytes, excluding the
/// terminator. `buf` may be null to query the length.
#[no_mangle]
pub unsafe extern "C" fn svt_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Static library version string.
#[no_mangle]
pub extern "C" fn svt_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

unsafe fn cstr<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, String> {
    if ptr.is_null() {
        return Err(format!("{what} is null"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| format!("{what} is not valid UTF-8"))
}

unsafe fn opt_cstr<'a>(ptr: *const c_char, what: &str) -> Result<Option<&'a str>, String> {
    if ptr.is_null() {
        Ok(None)
    } else {
        cstr(ptr, what).map(Some)
    }
}

fn load_manifest(path: &str) -> Result<CorpusManifest, String> {
    CorpusManifest::load(Path::new(path)).map_err(|e| e.to_string())
}

fn eval_videos(manifest: &CorpusManifest) -> BTreeSet<(String, String)> {
    manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Val || r.split == Split::Test)
        .map(|r| (r.dataset.clone(), r.video_id.clone()))
        .collect()
}

/// Generate the procedural corpus under `out_dir`.
///
/// `config_toml` may be null for defaults or hold a corpus config document.
#[no_mangle]
pub unsafe extern "C" fn svt_synth_generate(
    config_toml: *const c_char,
    out_dir: *const c_char,
) -> i32 {
    clear_error();
    let inner = || -> Result<(), (String, i32)> {
        let out = cstr(out_dir, "out_dir").map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?;
        let cfg: SynthCorpusConfig = match opt_cstr(config_toml, "config_toml")
            .map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?
        {
            Some(text) => toml::from_str(text).map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?,
            None => SynthCorpusConfig::default(),
        };
        std::fs::create_dir_all(out).map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        write_corpus(&cfg, Path::new(out)).map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        Ok(())
    };
    match inner() {
        Ok(()) => SVT_OK,
        Err((msg, code)) => set_error(msg, code),
    }
}

/// Opaque checkpoint handle.
pub struct SvtCheckpoint {
    inner: Checkpoint,
}

/// Open a checkpoint file; on success `*out` owns the handle.
#[no_mangle]
pub unsafe extern "C" fn svt_checkpoint_open(
    path: *const c_char,
    out: *mut *mut SvtCheckpoint,
) -> i32 {
    clear_error();
    if out.is_null() {
        return set_error("out is null", SVT_ERR_INVALID_ARGUMENT);
    }
    *out = std::ptr::null_mut();
    let path = match cstr(path, "path") {
        Ok(p) => p,
        Err(e) => return set_error(e, SVT_ERR_INVALID_ARGUMENT),
    };
    match Checkpoint::load(Path::new(path)) {
        Ok(ck) => {
            *out = Box::into_raw(Box::new(SvtCheckpoint { inner: ck }));
            SVT_OK
        }
        Err(e) => set_error(e, SVT_ERR_RUNTIME),
    }
}

/// Release a checkpoint handle; accepts null.
#[no_mangle]
pub unsafe extern "C" fn svt_checkpoint_free(ck: *mut SvtCheckpoint) {
    if !ck.is_null() {
        drop(Box::from_raw(ck));
    }
}

fn copy_str(s: &str, buf: *mut c_char, cap: usize) -> usize {
    let bytes = s.as_bytes();
    if !buf.is_null() && cap > 0 {
        let n = bytes.len().min(cap - 1);
        unsafe {
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
    }
    bytes.len()
}

/// Checkpoint kind ("mae", "triplet", ...) into `buf`; returns the full
/// length like [`svt_last_error`]. A null handle returns 0.
#[no_mangle]
pub unsafe extern "C" fn svt_checkpoint_kind(
    ck: *const SvtCheckpoint,
    buf: *mut c_char,
    cap: usize,
) -> usize {
    if ck.is_null() {
        return 0;
    }
    copy_str((*ck).inner.kind(), buf, cap)
}

/// Number of tensors in the checkpoint.
#[no_mangle]
pub unsafe extern "C" fn svt_checkpoint_tensor_count(
    ck: *const SvtCheckpoint,
    out: *mut usize,
) -> i32 {
    clear_error();
    if ck.is_null() || out.is_null() {
        return set_error("null argument", SVT_ERR_INVALID_ARGUMENT);
    }
    *out = (*ck).inner.num_tensors();
    SVT_OK
}

/// Name of tensor `index` (canonical order) into `buf`; returns the name
/// length, or 0 when the index is out of range.
#[no_mangle]
pub unsafe extern "C" fn svt_checkpoint_tensor_name(
    ck: *const SvtCheckpoint,
    index: usize,
    buf: *mut c_char,
    cap: usize,
) -> usize {
    if ck.is_null() {
        return 0;
    }
    match (*ck).inner.tensor_names().nth(index) {
        Some(name) => copy_str(name, buf, cap),
        None => 0,
    }
}

/// Dimensions of a named tensor. Writes up to `max_dims` entries and stores
/// the tensor's rank in `*rank_out`.
#[no_mangle]
pub unsafe extern "C" fn svt_checkpoint_tensor_dims(
    ck: *const SvtCheckpoint,
    name: *const c_char,
    dims_out: *mut u64,
    max_dims: usize,
    rank_out: *mut usize,
) -> i32 {
    clear_error();
    if ck.is_null() || rank_out.is_null() {
        return set_error("null argument", SVT_ERR_INVALID_ARGUMENT);
    }
    let name = match cstr(name, "name") {
        Ok(n) => n,
        Err(e) => return set_error(e, SVT_ERR_INVALID_ARGUMENT),
    };
    match (*ck).inner.tensor(name) {
        Some(entry) => {
            *rank_out = entry.dims.len();
            if !dims_out.is_null() {
                for (i, &d) in entry.dims.iter().take(max_dims).enumerate() {
                    *dims_out.add(i) = d;
                }
            }
            SVT_OK
        }
        None => set_error(format!("no tensor named {name:?}"), SVT_ERR_RUNTIME),
    }
}

fn run_config_from(text: Option<&str>, task: Task) -> Result<RunConfig, String> {
    let mut cfg: RunConfig = match text {
        Some(t) => toml::from_str(t).map_err(|e| e.to_string())?,
        None => match task {
            Task::Pretrain => RunConfig::default(),
            t => RunConfig::finetune_desk(t, 6),
        },
    };
    cfg.task = task;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Masked-reconstruction pretraining.
///
/// `exclude_manifest` (nullable) names a manifest whose val/test videos
/// must not appear in the pretraining manifest; overlap aborts the run.
/// Writes `checkpoint.bin` under `out_dir`.
#[no_mangle]
pub unsafe extern "C" fn svt_pretrain(
    config_toml: *const c_char,
    manifest_path: *const c_char,
    corpus_dir: *const c_char,
    exclude_manifest: *const c_char,
    out_dir: *const c_char,
) -> i32 {
    clear_error();
    let inner = || -> Result<(), (String, i32)> {
        let manifest_path =
            cstr(manifest_path, "manifest_path").map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?;
        let corpus = cstr(corpus_dir, "corpus_dir").map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?;
        let out = cstr(out_dir, "out_dir").map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?;
        let cfg_text =
            opt_cstr(config_toml, "config_toml").map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?;
        let cfg = run_config_from(cfg_text, Task::Pretrain).map_err(|e| (e, SVT_ERR_RUNTIME))?;
        let manifest = load_manifest(manifest_path).map_err(|e| (e, SVT_ERR_RUNTIME))?;
        let excluded = match opt_cstr(exclude_manifest, "exclude_manifest")
            .map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?
        {
            Some(p) => eval_videos(&load_manifest(p).map_err(|e| (e, SVT_ERR_RUNTIME))?),
            None => BTreeSet::new(),
        };
        let cache = FrameCache::load(&manifest, Path::new(corpus))
            .map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        let outcome = pretrain_run(&cfg, &manifest, &cache, &excluded)
            .map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        std::fs::create_dir_all(out).map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        outcome
            .checkpoint
            .save(&Path::new(out).join("checkpoint.bin"))
            .map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        Ok(())
    };
    match inner() {
        Ok(()) => SVT_OK,
        Err((msg, code)) => set_error(msg, code),
    }
}

/// Downstream finetuning; `task` is "triplet", "phase-stage1" or
/// "phase-stage2", `init_checkpoint` may be null for random init. Writes
/// `checkpoint.bin` under `out_dir`.
#[no_mangle]
pub unsafe extern "C" fn svt_finetune(
    config_toml: *const c_char,
    task: *const c_char,
    manifest_path: *const c_char,
    corpus_dir: *const c_char,
    init_checkpoint: *const c_char,
    out_dir: *const c_char,
) -> i32 {
    clear_error();
    let inner = || -> Result<(), (String, i32)> {
        let task = cstr(task, "task")
            .map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?
            .parse::<Task>()
            .map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        let manifest_path =
            cstr(manifest_path, "manifest_path").map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?;
        let corpus = cstr(corpus_dir, "corpus_dir").map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?;
        let out = cstr(out_dir, "out_dir").map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?;
        let cfg_text =
            opt_cstr(config_toml, "config_toml").map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?;
        let cfg = run_config_from(cfg_text, task).map_err(|e| (e, SVT_ERR_RUNTIME))?;
        let manifest = load_manifest(manifest_path).map_err(|e| (e, SVT_ERR_RUNTIME))?;
        let cache = FrameCache::load(&manifest, Path::new(corpus))
            .map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        let init = match opt_cstr(init_checkpoint, "init_checkpoint")
            .map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?
        {
            Some(p) => Some(
                Checkpoint::load(Path::new(p)).map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?,
            ),
            None => None,
        };
        let outcome = finetune_run(&cfg, &manifest, &cache, init.as_ref(), None)
            .map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        std::fs::create_dir_all(out).map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        outcome
            .checkpoint
            .save(&Path::new(out).join("checkpoint.bin"))
            .map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        Ok(())
    };
    match inner() {
        Ok(()) => SVT_OK,
        Err((msg, code)) => set_error(msg, code),
    }
}

/// Evaluate a checkpoint on a manifest's test split; the metric's
/// cross-seed mean lands in `*metric_out`.
#[no_mangle]
pub unsafe extern "C" fn svt_evaluate(
    ck: *const SvtCheckpoint,
    manifest_path: *const c_char,
    corpus_dir: *const c_char,
    batch: usize,
    metric_out: *mut c_double,
) -> i32 {
    clear_error();
    if ck.is_null() || metric_out.is_null() {
        return set_error("null argument", SVT_ERR_INVALID_ARGUMENT);
    }
    let inner = || -> Result<f64, (String, i32)> {
        let manifest_path =
            cstr(manifest_path, "manifest_path").map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?;
        let corpus = cstr(corpus_dir, "corpus_dir").map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?;
        let manifest = load_manifest(manifest_path).map_err(|e| (e, SVT_ERR_RUNTIME))?;
        let cache = FrameCache::load(&manifest, Path::new(corpus))
            .map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        let batch = if batch == 0 { 32 } else { batch };
        let report = evaluate_run(&(*ck).inner, &manifest, &cache, batch)
            .map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        Ok(report.mean)
    };
    match inner() {
        Ok(v) => {
            *metric_out = v;
            SVT_OK
        }
        Err((msg, code)) => set_error(msg, code),
    }
}

/// Render a reconstruction grid (one row per frame, seeded masking) to
/// `out_png`, with raw losses in a `.losses.tsv` sidecar.
#[no_mangle]
pub unsafe extern "C" fn svt_render_recon(
    ck: *const SvtCheckpoint,
    manifest_path: *const c_char,
    corpus_dir: *const c_char,
    out_png: *const c_char,
    frame_count: usize,
    mask_seed: u64,
) -> i32 {
    clear_error();
    if ck.is_null() {
        return set_error("null checkpoint", SVT_ERR_INVALID_ARGUMENT);
    }
    let inner = || -> Result<(), (String, i32)> {
        let manifest_path =
            cstr(manifest_path, "manifest_path").map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?;
        let corpus = cstr(corpus_dir, "corpus_dir").map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?;
        let out = cstr(out_png, "out_png").map_err(|e| (e, SVT_ERR_INVALID_ARGUMENT))?;
        let manifest = load_manifest(manifest_path).map_err(|e| (e, SVT_ERR_RUNTIME))?;
        let cache = FrameCache::load(&manifest, Path::new(corpus))
            .map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        let ckpt = &(*ck).inner;
        let cfg = run_config_of(ckpt).map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        let vit = cfg.vit_config().map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        let count = if frame_count == 0 { 4 } else { frame_count };
        let mut rows = Vec::new();
        let mut frames: Vec<_> = manifest.in_split(Split::Test).collect();
        if frames.is_empty() {
            frames = manifest.records.iter().collect();
        }
        for (i, rec) in frames.into_iter().take(count).enumerate() {
            let img = cache
                .get(&rec.frame_ref)
                .map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
            let img = if img.shape()[0] == vit.image_size && img.shape()[1] == vit.image_size {
                img.clone()
            } else {
                scopevit::data::resize_bilinear(img, vit.image_size, vit.image_size)
                    .map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?
            };
            rows.push(ReconRow {
                image: img,
                plan: sample_mask(
                    vit.num_patches(),
                    cfg.mae.mask_ratio,
                    mask_seed.wrapping_add(i as u64),
                )
                .map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?,
            });
        }
        render_recon_grid(ckpt, &rows, Path::new(out))
            .map_err(|e| (e.to_string(), SVT_ERR_RUNTIME))?;
        Ok(())
    };
    match inner() {
        Ok(()) => SVT_OK,
        Err((msg, code)) => set_error(msg, code),
    }
}
