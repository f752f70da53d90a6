//! Procedural stand-in corpus: per-video phase state machines drive scenes
//! of elliptical anatomy blobs and line-segment tools with bright tips.
//! Triplet labels fire from tip-to-blob contact geometry, so every label is
//! exact by construction, and generation is bit-deterministic per seed.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::images::save_png;
use crate::data::manifest::{CorpusManifest, FrameRecord, Labels, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthCorpusConfig {
    pub seed: u64,
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub num_phases: usize,
    pub num_tools: usize,
    pub num_anatomies: usize,
    pub num_actions: usize,
    pub num_triplet_classes: usize,
    /// Tip-to-blob-center contact distance in normalized image coordinates.
    pub contact_radius: f64,
    /// Leading train-split videos flagged `synthetic: true` for filter tests.
    pub synthetic_videos: usize,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        SynthCorpusConfig {
            seed: 0,
            num_videos: 20,
            frames_per_video: 60,
            image_size: 64,
            num_phases: 4,
            num_tools: 4,
            num_anatomies: 3,
            num_actions: 2,
            num_triplet_classes: 20,
            contact_radius: 0.2,
            synthetic_videos: 0,
        }
    }
}

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_videos", self.num_videos),
            ("frames_per_video", self.frames_per_video),
            ("image_size", self.image_size),
            ("num_phases", self.num_phases),
            ("num_tools", self.num_tools),
            ("num_anatomies", self.num_anatomies),
            ("num_actions", self.num_actions),
            ("num_triplet_classes", self.num_triplet_classes),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.num_triplet_classes > self.num_tools * self.num_anatomies * self.num_actions {
            return Err(Error::config(format!(
                "num_triplet_classes {} exceeds tools*anatomies*actions = {}",
                self.num_triplet_classes,
                self.num_tools * self.num_anatomies * self.num_actions
            )));
        }
        if self.num_phases > self.frames_per_video {
            return Err(Error::config(format!(
                "num_phases {} exceeds frames_per_video {}",
                self.num_phases, self.frames_per_video
            )));
        }
        Ok(())
    }

    /// Triplet class id of a (tool, anatomy, action-band) combination, when
    /// it falls inside the labeled class range.
    pub fn triplet_class(&self, tool: usize, anatomy: usize, action: usize) -> Option<usize> {
        let id = (tool * self.num_anatomies + anatomy) * self.num_actions + action;
        (id < self.num_triplet_classes).then_some(id)
    }
}

/// One rendered frame with its exact labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFrame {
    pub time_s: f64,
    /// 8-bit RGB, `image_size^2 * 3` bytes.
    pub rgb: Vec<u8>,
    pub phase: usize,
    pub triplets: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub video_id: String,
    pub split: Split,
    pub synthetic: bool,
    pub frames: Vec<SynthFrame>,
}

pub const SYNTH_DATASET: &str = "synthdesk";

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Downstream split of video `v` out of `n`: the tail fifth is test, the
/// tenth before it val, the rest train.
pub fn video_split(v: usize, n: usize) -> Split {
    let n_test = if n >= 5 { n / 5 } else { usize::from(n >= 2) };
    let n_val = if n >= 10 { n / 10 } else { usize::from(n >= 4) };
    if v >= n - n_test {
        Split::Test
    } else if v >= n - n_test - n_val {
        Split::Val
    } else {
        Split::Train
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
    wobble_phase: f64,
}

impl Blob {
    fn center_at(&self, t: f64, frames: f64) -> (f64, f64) {
        let arg = 2.0 * std::f64::consts::PI * t / frames + self.wobble_phase;
        (self.cx + 0.015 * arg.sin(), self.cy + 0.015 * (1.3 * arg).cos())
    }
}

struct Tool {
    anchor: (f64, f64),
    target_anatomy: usize,
    freq: f64,
    osc_phase: f64,
    color: [f64; 3],
}

const ANATOMY_PALETTE: [[f64; 3]; 6] = [
    [0.78, 0.42, 0.38],
    [0.62, 0.55, 0.30],
    [0.45, 0.30, 0.52],
    [0.80, 0.60, 0.45],
    [0.38, 0.52, 0.48],
    [0.70, 0.35, 0.55],
];

const TOOL_PALETTE: [[f64; 3]; 6] = [
    [0.72, 0.74, 0.80],
    [0.30, 0.34, 0.40],
    [0.55, 0.58, 0.35],
    [0.25, 0.45, 0.60],
    [0.65, 0.45, 0.25],
    [0.50, 0.25, 0.30],
];

fn phase_tint(p: usize) -> [f64; 3] {
    let f = p as f64;
    [
        0.10 * (2.1 * f).sin(),
        0.10 * (1.3 * f + 1.0).sin(),
        0.10 * (0.7 * f + 2.0).sin(),
    ]
}

/// Whether tool `i` is on screen during phase `p`.
fn tool_active(i: usize, p: usize, num_tools: usize) -> bool {
    (i + p) % num_tools < num_tools.div_ceil(2)
}

/// Contiguous left-to-right phase segments with jittered boundaries.
fn phase_boundaries(frames: usize, phases: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    // boundaries[p] = first frame of phase p+1; len = phases - 1.
    let mut bounds = Vec::with_capacity(phases.saturating_sub(1));
    for p in 1..phases {
        let base = p * frames / phases;
        let jitter = (frames / (4 * phases)) as i64;
        let off = if jitter > 0 {
            rng.gen_range(-jitter..=jitter)
        } else {
            0
        };
        bounds.push((base as i64 + off).clamp(1, frames as i64 - 1) as usize);
    }
    // Enforce strictly increasing, at least one frame per phase.
    for p in 1..bounds.len() {
        if bounds[p] <= bounds[p - 1] {
            bounds[p] = (bounds[p - 1] + 1).min(frames - 1);
        }
    }
    bounds
}

fn phase_of(t: usize, bounds: &[usize]) -> usize {
    bounds.iter().take_while(|&&b| t >= b).count()
}

fn dist_point_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Generate all videos of the corpus in memory.
pub fn generate_synth_corpus(cfg: &SynthCorpusConfig) -> Result<(CorpusManifest, Vec<SynthVideo>)> {
    cfg.validate()?;
    let s = cfg.image_size;
    let mut videos = Vec::with_capacity(cfg.num_videos);
    let mut records = Vec::new();

    let mut train_seen = 0usize;
    for v in 0..cfg.num_videos {
        let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(cfg.seed, v as u64 + 1));
        let video_id = format!("video_{v:03}");
        let split = video_split(v, cfg.num_videos);
        let synthetic = split == Split::Train && {
            train_seen += 1;
            train_seen <= cfg.synthetic_videos
        };

        let base_bg = [
            rng.gen_range(0.32..0.48),
            rng.gen_range(0.14..0.26),
            rng.gen_range(0.18..0.30),
        ];
        let blobs: Vec<Blob> = (0..cfg.num_anatomies)
            .map(|j| {
                let pal = ANATOMY_PALETTE[j % ANATOMY_PALETTE.len()];
                Blob {
                    cx: rng.gen_range(0.25..0.75),
                    cy: rng.gen_range(0.25..0.75),
                    rx: rng.gen_range(0.10..0.20),
                    ry: rng.gen_range(0.10..0.20),
                    color: [
                        (pal[0] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0),
                        (pal[1] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0),
                        (pal[2] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0),
                    ],
                    wobble_phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        let tools: Vec<Tool> = (0..cfg.num_tools)
            .map(|i| {
                let edge = i % 4;
                let along = rng.gen_range(0.15..0.85);
                let anchor = match edge {
                    0 => (0.0, along),
                    1 => (along, 0.0),
                    2 => (1.0, along),
                    _ => (along, 1.0),
                };
                Tool {
                    anchor,
                    target_anatomy: rng.gen_range(0..cfg.num_anatomies),
                    freq: rng.gen_range(0.35..1.1),
                    osc_phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    color: TOOL_PALETTE[i % TOOL_PALETTE.len()],
                }
            })
            .collect();
        let bounds = phase_boundaries(cfg.frames_per_video, cfg.num_phases, &mut rng);

        let mut frames = Vec::with_capacity(cfg.frames_per_video);
        for t in 0..cfg.frames_per_video {
            let tf = t as f64;
            let frames_f = cfg.frames_per_video as f64;
            let phase = phase_of(t, &bounds);
            let tint = phase_tint(phase);

            // Tool tips approach and retreat from their target blobs.
            let mut tips: Vec<Option<(f64, f64)>> = vec![None; cfg.num_tools];
            for (i, tool) in tools.iter().enumerate() {
                if !tool_active(i, phase, cfg.num_tools) {
                    continue;
                }
                let (bx, by) = blobs[tool.target_anatomy].center_at(tf, frames_f);
                let osc = (std::f64::consts::TAU * tool.freq * tf / frames_f + tool.osc_phase)
                    .sin();
                let d = 0.12 + 0.45 * (1.0 + osc) / 2.0;
                tips[i] = Some((
                    bx + (tool.anchor.0 - bx) * d,
                    by + (tool.anchor.1 - by) * d,
                ));
            }

            // Exact labels from contact geometry. Contacts also render as
            // glows at the interaction point, so the label-bearing event is
            // visible in pixels.
            let mut triplets = vec![0u8; cfg.num_triplet_classes];
            let mut glows: Vec<(f64, f64, [f64; 3], f64)> = Vec::new();
            if cfg.contact_radius > 0.0 {
                for (i, tip) in tips.iter().enumerate() {
                    let Some((tx, ty)) = tip else { continue };
                    for (j, blob) in blobs.iter().enumerate() {
                        let (bx, by) = blob.center_at(tf, frames_f);
                        let dist = ((tx - bx) * (tx - bx) + (ty - by) * (ty - by)).sqrt();
                        if dist <= cfg.contact_radius {
                            let band = ((dist / cfg.contact_radius) * cfg.num_actions as f64)
                                .floor() as usize;
                            let band = band.min(cfg.num_actions - 1);
                            if let Some(c) = cfg.triplet_class(i, j, band) {
                                triplets[c] = 1;
                                let strength = if cfg.num_actions > 1 {
                                    1.0 - 0.45 * band as f64 / (cfg.num_actions - 1) as f64
                                } else {
                                    1.0
                                };
                                glows.push((
                                    tx + 0.3 * (bx - tx),
                                    ty + 0.3 * (by - ty),
                                    blob.color,
                                    strength,
                                ));
                            }
                        }
                    }
                }
            }

            // Render.
            let mut buf = vec![0.0f64; s * s * 3];
            let flicker = 1.0 + 0.02 * (0.37 * tf).sin();
            for y in 0..s {
                let fy = (y as f64 + 0.5) / s as f64;
                for x in 0..s {
                    let fx = (x as f64 + 0.5) / s as f64;
                    let vign = 1.0
                        - 0.55 * (((fx - 0.5) * (fx - 0.5) + (fy - 0.5) * (fy - 0.5)) * 2.0);
                    let mut px = [0.0f64; 3];
                    for c in 0..3 {
                        px[c] = (base_bg[c] * (0.7 + 0.3 * fy) + tint[c]) * vign * flicker;
                    }
                    for (j, blob) in blobs.iter().enumerate() {
                        let (bx, by) = blob.center_at(tf, frames_f);
                        let q = ((fx - bx) / blob.rx).powi(2) + ((fy - by) / blob.ry).powi(2);
                        if q < 1.0 {
                            let alpha = (1.0 - q).sqrt().min(1.0) * 0.9;
                            for c in 0..3 {
                                px[c] = px[c] * (1.0 - alpha) + blob.color[c] * alpha;
                            }
                            let _ = j;
                        }
                    }
                    let line_w = 1.4 / s as f64;
                    let tip_r = 2.4 / s as f64;
                    for (i, tip) in tips.iter().enumerate() {
                        let Some((tx, ty)) = tip else { continue };
                        let tool = &tools[i];
                        let dseg = dist_point_segment(fx, fy, tool.anchor.0, tool.anchor.1, *tx, *ty);
                        if dseg < line_w {
                            let alpha = 1.0 - dseg / line_w;
                            for c in 0..3 {
                                px[c] = px[c] * (1.0 - alpha) + tool.color[c] * alpha;
                            }
                        }
                        let dtip = ((fx - tx) * (fx - tx) + (fy - ty) * (fy - ty)).sqrt();
                        if dtip < tip_r {
                            let alpha = (1.0 - dtip / tip_r).powf(0.5);
                            let bright = [0.95, 0.93, 0.82];
                            for c in 0..3 {
                                px[c] = px[c] * (1.0 - alpha) + bright[c] * alpha;
                            }
                        }
                    }
                    let glow_r = 3.5 / s as f64;
                    for &(gx, gy, tint, strength) in &glows {
                        let dg = ((fx - gx) * (fx - gx) + (fy - gy) * (fy - gy)).sqrt();
                        if dg < glow_r {
                            let alpha = strength * (1.0 - dg / glow_r).powf(0.7) * 0.85;
                            for c in 0..3 {
                                let target = 0.65 + 0.35 * tint[c];
                                px[c] = px[c] * (1.0 - alpha) + target * alpha;
                            }
                        }
                    }
                    let o = (y * s + x) * 3;
                    for c in 0..3 {
                        buf[o + c] = px[c].clamp(0.0, 1.0);
                    }
                }
            }
            let rgb: Vec<u8> = buf.iter().map(|&v| (v * 255.0).round() as u8).collect();

            records.push(FrameRecord {
                dataset: SYNTH_DATASET.into(),
                video_id: video_id.clone(),
                frame_ref: format!("{video_id}/{t:06}.png"),
                time_s: t as f64,
                split,
                synthetic,
                labels: Some(Labels {
                    triplets: Some(triplets.clone()),
                    phase: Some(phase),
                }),
                extra: serde_json::Map::new(),
            });
            frames.push(SynthFrame {
                time_s: t as f64,
                rgb,
                phase,
                triplets,
            });
        }
        videos.push(SynthVideo {
            video_id,
            split,
            synthetic,
            frames,
        });
    }
    let manifest = CorpusManifest::new(records);
    manifest.validate()?;
    Ok((manifest, videos))
}

/// Generate and write the corpus under `root`: one PNG per frame at
/// `<video_id>/<seconds>.png` plus `manifest.jsonl`.
pub fn write_corpus(cfg: &SynthCorpusConfig, root: &Path) -> Result<CorpusManifest> {
    let (manifest, videos) = generate_synth_corpus(cfg)?;
    for video in &videos {
        let dir = root.join(&video.video_id);
        std::fs::create_dir_all(&dir)?;
        for (t, frame) in video.frames.iter().enumerate() {
            save_png(
                &dir.join(format!("{t:06}.png")),
                cfg.image_size,
                cfg.image_size,
                &frame.rgb,
            )?;
        }
    }
    manifest.save(&root.join("manifest.jsonl"))?;
    Ok(manifest)
}
