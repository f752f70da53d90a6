//! Corpus manifests: newline-delimited frame records plus the curation
//! rules (1 FPS sampling, leakage exclusion, synthetic exclusion, few-shot
//! video selection).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

/// Downstream labels carried by a frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Labels {
    /// Multi-label action-triplet bitvector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplets: Option<Vec<u8>>,
    /// Surgical phase id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<usize>,
}

/// One curated frame. Unknown fields round-trip through `extra`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub dataset: String,
    pub video_id: String,
    pub frame_ref: String,
    pub time_s: f64,
    pub split: Split,
    pub synthetic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Labels>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// Ordered list of frame records with per-dataset summary counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<FrameRecord>,
}

impl CorpusManifest {
    pub fn new(records: Vec<FrameRecord>) -> Self {
        CorpusManifest { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Frame counts per dataset.
    pub fn summary(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.dataset.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// Distinct (dataset, video_id) pairs.
    pub fn videos(&self) -> BTreeSet<(String, String)> {
        self.records
            .iter()
            .map(|r| (r.dataset.clone(), r.video_id.clone()))
            .collect()
    }

    /// Records restricted to one split.
    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &FrameRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// (dataset, video_id) uniqueness of (dataset, video, time) keys.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            let key = (r.dataset.clone(), r.video_id.clone(), r.time_s.to_bits());
            if !seen.insert(key) {
                return Err(Error::contract(format!(
                    "duplicate frame key ({}, {}, {})",
                    r.dataset, r.video_id, r.time_s
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(CorpusManifest { records })
    }
}

/// Select one frame per whole-second boundary: the frame whose timestamp is
/// nearest each integer second, ties to the earlier frame. Returns sorted,
/// de-duplicated indices into `frame_timestamps`.
pub fn sample_fps(frame_timestamps: &[f64], source_fps: f64) -> Result<Vec<usize>> {
    if source_fps <= 0.0 {
        return Err(Error::config(format!(
            "source_fps must be positive, got {source_fps}"
        )));
    }
    if frame_timestamps.is_empty() {
        return Ok(Vec::new());
    }
    if frame_timestamps.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::contract("timestamps must be non-decreasing"));
    }
    let last = *frame_timestamps.last().unwrap();
    let mut selected = Vec::new();
    let mut cursor = 0usize;
    for s in 0..=(last.floor() as i64) {
        let target = s as f64;
        // Advance to the first timestamp >= target; compare with the one before.
        while cursor + 1 < frame_timestamps.len() && frame_timestamps[cursor] < target {
            cursor += 1;
        }
        let mut best = cursor;
        if cursor > 0 {
            let before = cursor - 1;
            let d_before = (frame_timestamps[before] - target).abs();
            let d_cur = (frame_timestamps[cursor] - target).abs();
            if d_before <= d_cur {
                best = before;
            }
        }
        if selected.last() != Some(&best) {
            selected.push(best);
        }
        // Allow the next second to reconsider from just before the cursor.
        cursor = best;
    }
    Ok(selected)
}

/// Per-dataset counts of removed records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LeakageReport {
    pub removed_per_dataset: BTreeMap<String, usize>,
}

impl LeakageReport {
    pub fn total_removed(&self) -> usize {
        self.removed_per_dataset.values().sum()
    }
}

/// Remove every record whose (dataset, video_id) is in the exclusion set.
pub fn leakage_filter(
    manifest: &CorpusManifest,
    excluded_videos: &BTreeSet<(String, String)>,
) -> (CorpusManifest, LeakageReport) {
    let mut kept = Vec::with_capacity(manifest.records.len());
    let mut report = LeakageReport::default();
    for r in &manifest.records {
        let key = (r.dataset.clone(), r.video_id.clone());
        if excluded_videos.contains(&key) {
            *report.removed_per_dataset.entry(r.dataset.clone()).or_insert(0) += 1;
        } else {
            kept.push(r.clone());
        }
    }
    let filtered = CorpusManifest::new(kept);
    debug_assert!(filtered
        .videos()
        .intersection(excluded_videos)
        .next()
        .is_none());
    (filtered, report)
}

/// Drop every record flagged synthetic.
pub fn synthetic_filter(manifest: &CorpusManifest) -> CorpusManifest {
    CorpusManifest::new(
        manifest
            .records
            .iter()
            .filter(|r| !r.synthetic)
            .cloned()
            .collect(),
    )
}

/// Uniform sample of `k` training videos without replacement, deterministic
/// per seed. Validation/test sets are untouched by construction: the caller
/// passes training videos only.
pub fn few_shot_select(train_videos: &[String], k: usize, seed: u64) -> Result<Vec<String>> {
    if k == 0 || k > train_videos.len() {
        return Err(Error::contract(format!(
            "cannot select {k} of {} training videos",
            train_videos.len()
        )));
    }
    let mut order: Vec<usize> = (0..train_videos.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut picked: Vec<String> = order[..k]
        .iter()
        .map(|&i| train_videos[i].clone())
        .collect();
    picked.sort();
    Ok(picked)
}
