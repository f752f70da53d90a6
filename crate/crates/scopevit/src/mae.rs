//! Masked-image-modeling objective: per-sample random masking, a light
//! decoder that reconstructs every patch position in pixel space, and a
//! per-patch MSE computed on the masked patches only.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::vit::{
    encoder_forward_batch, pos_embed_with_cls, transformer_block, BlockIds, EncoderIds, PatchGrid,
    ViTConfig, LAYER_NORM_EPS,
};

/// Per-patch standardization epsilon used when `norm_pix` is on.
pub const NORM_PIX_EPS: f64 = 1e-6;

/// Partition of patch indices into visible and masked sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub keep_indices: Vec<usize>,
    pub mask_indices: Vec<usize>,
    pub mask_ratio: f64,
}

impl MaskPlan {
    pub fn num_patches(&self) -> usize {
        self.keep_indices.len() + self.mask_indices.len()
    }

    pub fn validate(&self, n_patches: usize) -> Result<()> {
        if self.num_patches() != n_patches {
            return Err(Error::contract(format!(
                "mask plan covers {} patches, image has {n_patches}",
                self.num_patches()
            )));
        }
        let mut seen = vec![false; n_patches];
        for &i in self.keep_indices.iter().chain(&self.mask_indices) {
            if i >= n_patches || seen[i] {
                return Err(Error::contract(format!(
                    "mask plan is not a partition of 0..{n_patches} (index {i})"
                )));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// Position of each patch in the keep list, or None when masked.
    fn keep_slot(&self, n_patches: usize) -> Vec<Option<usize>> {
        let mut slot = vec![None; n_patches];
        for (m, &p) in self.keep_indices.iter().enumerate() {
            slot[p] = Some(m);
        }
        slot
    }
}

/// Uniformly random visible/masked partition via a seeded shuffle.
///
/// `|keep| = floor(n * (1 - mask_ratio))`; both index lists come back
/// sorted. Deterministic per seed.
pub fn sample_mask(n_patches: usize, mask_ratio: f64, rng_seed: u64) -> Result<MaskPlan> {
    if n_patches < 2 {
        return Err(Error::contract(format!(
            "need at least 2 patches to mask, got {n_patches}"
        )));
    }
    if !(0.0..1.0).contains(&mask_ratio) || mask_ratio == 0.0 {
        return Err(Error::config(format!(
            "mask_ratio must lie in (0, 1), got {mask_ratio}"
        )));
    }
    let keep_count = (n_patches as f64 * (1.0 - mask_ratio)).floor() as usize;
    if keep_count == 0 {
        return Err(Error::config(format!(
            "mask_ratio {mask_ratio} leaves no visible patches for n = {n_patches}"
        )));
    }
    let mut order: Vec<usize> = (0..n_patches).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    order.shuffle(&mut rng);
    let mut keep: Vec<usize> = order[..keep_count].to_vec();
    let mut mask: Vec<usize> = order[keep_count..].to_vec();
    keep.sort_unstable();
    mask.sort_unstable();
    Ok(MaskPlan {
        keep_indices: keep,
        mask_indices: mask,
        mask_ratio,
    })
}

/// Masking-objective configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MAEConfig {
    pub mask_ratio: f64,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    /// Standardize each target patch over its own pixels before comparison.
    pub norm_pix: bool,
}

impl MAEConfig {
    pub fn tiny_desk() -> Self {
        MAEConfig {
            mask_ratio: 0.75,
            decoder_dim: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            norm_pix: false,
        }
    }

    pub fn base_paper() -> Self {
        MAEConfig {
            mask_ratio: 0.75,
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            norm_pix: false,
        }
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "tiny-desk" => Ok(Self::tiny_desk()),
            "base-paper" => Ok(Self::base_paper()),
            other => Err(Error::config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) || self.mask_ratio == 0.0 {
            return Err(Error::config(format!(
                "mask_ratio must lie in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return Err(Error::config(format!(
                "decoder_dim {} not divisible by decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            )));
        }
        Ok(())
    }
}

/// Parameter ids of the reconstruction decoder.
#[derive(Clone, Debug)]
pub struct DecoderIds {
    pub embed_w: usize,
    pub embed_b: usize,
    pub mask_token: usize,
    pub blocks: Vec<BlockIds>,
    pub norm_g: usize,
    pub norm_b: usize,
    pub pred_w: usize,
    pub pred_b: usize,
}

impl DecoderIds {
    pub fn build(
        store: &mut ParamStore,
        vit: &ViTConfig,
        mae: &MAEConfig,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let dd = mae.decoder_dim;
        let std = 0.02;
        let embed_w = store.add_normal("decoder.embed.w", vec![vit.embed_dim, dd], std, rng);
        let embed_b = store.add_zeros("decoder.embed.b", vec![dd]);
        let mask_token = store.add_normal("decoder.mask_token", vec![1, dd], std, rng);
        let blocks = (1..=mae.decoder_depth)
            .map(|i| {
                BlockIds::build(
                    store,
                    &format!("decoder.block{i}"),
                    dd,
                    (dd as f64 * vit.mlp_ratio).round() as usize,
                    rng,
                )
            })
            .collect();
        let norm_g = store.add_ones("decoder.norm.g", vec![dd]);
        let norm_b = store.add_zeros("decoder.norm.b", vec![dd]);
        let pred_w = store.add_normal("decoder.pred.w", vec![dd, vit.patch_pixels()], std, rng);
        let pred_b = store.add_zeros("decoder.pred.b", vec![vit.patch_pixels()]);
        DecoderIds {
            embed_w,
            embed_b,
            mask_token,
            blocks,
            norm_g,
            norm_b,
            pred_w,
            pred_b,
        }
    }
}

/// Encoder + decoder with a shared parameter store.
pub struct MaeModel {
    pub vit: ViTConfig,
    pub mae: MAEConfig,
    pub store: ParamStore,
    pub enc: EncoderIds,
    pub dec: DecoderIds,
}

impl MaeModel {
    pub fn build(vit: ViTConfig, mae: MAEConfig, seed: u64) -> Result<Self> {
        vit.validate()?;
        mae.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = EncoderIds::build(&mut store, &vit, &mut rng);
        let dec = DecoderIds::build(&mut store, &vit, &mae, &mut rng);
        Ok(MaeModel {
            vit,
            mae,
            store,
            enc,
            dec,
        })
    }
}

/// Full masked forward pass: encode visible patches, decode every position.
///
/// Returns per-patch pixel predictions shaped `[B, N, patch_pixels]`. The
/// decoder sees the projected latent tokens at visible positions and a
/// shared learned mask token elsewhere, each with its fixed positional
/// embedding.
pub fn mae_forward(
    tape: &mut Tape,
    vars: &[Var],
    model: &MaeModel,
    patches: &[&PatchGrid],
    plans: &[&MaskPlan],
) -> Result<Var> {
    let batch = patches.len();
    if batch == 0 || plans.len() != batch {
        return Err(Error::contract(
            "mae_forward: empty batch or plan list length mismatch",
        ));
    }
    let n = model.vit.num_patches();
    for plan in plans {
        plan.validate(n)?;
        if plan.keep_indices.len() != plans[0].keep_indices.len() {
            return Err(Error::contract(
                "all plans in a batch must keep the same number of patches",
            ));
        }
    }
    let keeps: Vec<&[usize]> = plans.iter().map(|p| p.keep_indices.as_slice()).collect();
    let latent = encoder_forward_batch(tape, vars, &model.enc, &model.vit, patches, &keeps)?;

    let dd = model.mae.decoder_dim;
    let k = plans[0].keep_indices.len();
    let proj = tape.linear(latent, vars[model.dec.embed_w], vars[model.dec.embed_b])?;

    // Row sources: projected tokens [B*(1+K), dd] then the mask token row.
    let stacked = tape.concat_rows(&[proj, vars[model.dec.mask_token]])?;
    let mask_row = batch * (1 + k);
    let mut order = Vec::with_capacity(batch * (1 + n) * dd);
    for (b, plan) in plans.iter().enumerate() {
        let cls_row = b * (1 + k);
        order.extend(cls_row * dd..(cls_row + 1) * dd);
        let slot = plan.keep_slot(n);
        for s in slot.iter().take(n) {
            let row = match s {
                Some(m) => cls_row + 1 + m,
                None => mask_row,
            };
            order.extend(row * dd..(row + 1) * dd);
        }
    }
    let mut x = tape.index_select(stacked, order, vec![batch * (1 + n), dd])?;

    // Fixed positional embeddings for all 1+N decoder positions, per sample.
    let pos = pos_embed_with_cls(model.vit.grid(), dd)?;
    let mut pos_data = Vec::with_capacity(batch * pos.numel());
    for _ in 0..batch {
        pos_data.extend_from_slice(pos.data());
    }
    let pos = tape.constant(Tensor::new(vec![batch * (1 + n), dd], pos_data)?);
    x = tape.add(x, pos)?;

    for block in &model.dec.blocks {
        x = transformer_block(
            tape,
            vars,
            block,
            x,
            batch,
            1 + n,
            dd,
            model.mae.decoder_heads,
        )?;
    }
    x = tape.layer_norm(x, vars[model.dec.norm_g], vars[model.dec.norm_b], LAYER_NORM_EPS)?;
    let pred = tape.linear(x, vars[model.dec.pred_w], vars[model.dec.pred_b])?;

    // Drop the class row of each sample.
    let pp = model.vit.patch_pixels();
    let mut keep_rows = Vec::with_capacity(batch * n * pp);
    for b in 0..batch {
        let start = (b * (1 + n) + 1) * pp;
        keep_rows.extend(start..start + n * pp);
    }
    tape.index_select(pred, keep_rows, vec![batch, n, pp])
}

fn normalized_target(patch: &[f64]) -> Vec<f64> {
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + NORM_PIX_EPS).sqrt();
    patch.iter().map(|v| (v - mean) * inv).collect()
}

/// Mean over masked patches of the per-patch mean squared pixel error.
///
/// Visible patches contribute exactly zero: their prediction rows are never
/// read, so perturbing them cannot change the value or the gradient.
pub fn reconstruction_loss(
    tape: &mut Tape,
    pred: Var,
    targets: &[&PatchGrid],
    plans: &[&MaskPlan],
    norm_pix: bool,
) -> Result<Var> {
    let batch = targets.len();
    if batch == 0 || plans.len() != batch {
        return Err(Error::contract("reconstruction_loss: batch mismatch"));
    }
    let shape = tape.value(pred).shape().to_vec();
    if shape.len() != 3 || shape[0] != batch {
        return Err(Error::contract(format!(
            "predictions must be [B, N, patch_pixels], got {shape:?}"
        )));
    }
    let (n, pp) = (shape[1], shape[2]);
    let total_masked: usize = plans.iter().map(|p| p.mask_indices.len()).sum();
    if total_masked == 0 {
        return Err(Error::contract("reconstruction_loss: empty mask set"));
    }

    let mut rows = Vec::with_capacity(total_masked * pp);
    let mut tgt = Vec::with_capacity(total_masked * pp);
    for (b, (pg, plan)) in targets.iter().zip(plans).enumerate() {
        plan.validate(n)?;
        if pg.patches.shape() != [n, pp] {
            return Err(Error::contract(format!(
                "target patches {:?} do not match predictions [{n}, {pp}]",
                pg.patches.shape()
            )));
        }
        for &m in &plan.mask_indices {
            let start = (b * n + m) * pp;
            rows.extend(start..start + pp);
            let patch = &pg.patches.data()[m * pp..(m + 1) * pp];
            if norm_pix {
                tgt.extend(normalized_target(patch));
            } else {
                tgt.extend_from_slice(patch);
            }
        }
    }
    let pred_masked = tape.index_select(pred, rows, vec![total_masked, pp])?;
    let tgt = tape.constant(Tensor::new(vec![total_masked, pp], tgt)?);
    let diff = tape.sub(pred_masked, tgt)?;
    let sq = tape.mul(diff, diff)?;
    let per_patch = tape.mean_last(sq);
    let sum = tape.sum_all(per_patch);
    Ok(tape.scale(sum, 1.0 / total_masked as f64))
}

/// Per-patch MSE for one sample: masked positions carry their loss term,
/// visible positions are zero. Matches the terms averaged by
/// [`reconstruction_loss`].
pub fn patch_losses(
    pred: &Tensor,
    target: &PatchGrid,
    plan: &MaskPlan,
    norm_pix: bool,
) -> Result<Vec<f64>> {
    let n = target.num_patches();
    plan.validate(n)?;
    let pp = target.patches.last_dim();
    if pred.shape() != [n, pp] {
        return Err(Error::contract(format!(
            "prediction shape {:?} does not match targets [{n}, {pp}]",
            pred.shape()
        )));
    }
    let mut losses = vec![0.0; n];
    for &m in &plan.mask_indices {
        let p = &pred.data()[m * pp..(m + 1) * pp];
        let raw = &target.patches.data()[m * pp..(m + 1) * pp];
        let t = if norm_pix {
            normalized_target(raw)
        } else {
            raw.to_vec()
        };
        let mse = p
            .iter()
            .zip(&t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / pp as f64;
        losses[m] = mse;
    }
    Ok(losses)
}

/// Qualitative views of one sample's reconstruction.
pub struct ReconPanels {
    /// Visible patches with masked positions filled by sentinel gray.
    pub masked_view: Tensor,
    /// Predictions at masked positions, ground truth at visible ones.
    pub reconstruction_view: Tensor,
    /// Per-patch MSE at masked positions, zero elsewhere.
    pub per_patch_loss: Vec<f64>,
}

/// Sentinel value for masked patches in the masked-input panel.
pub const MASK_SENTINEL: f64 = 0.5;

/// Compose the masked-input and reconstruction views plus the loss map for
/// one sample. `patch_size` recovers image geometry from the grid.
pub fn compose_reconstruction(
    pred: &Tensor,
    target: &PatchGrid,
    plan: &MaskPlan,
    patch_size: usize,
    norm_pix: bool,
) -> Result<ReconPanels> {
    let n = target.num_patches();
    plan.validate(n)?;
    let pp = target.patches.last_dim();
    if pred.shape() != [n, pp] {
        return Err(Error::contract(format!(
            "prediction shape {:?} does not match targets [{n}, {pp}]",
            pred.shape()
        )));
    }
    let mut masked = target.patches.data().to_vec();
    let mut recon = target.patches.data().to_vec();
    for &m in &plan.mask_indices {
        masked[m * pp..(m + 1) * pp].fill(MASK_SENTINEL);
        recon[m * pp..(m + 1) * pp].copy_from_slice(&pred.data()[m * pp..(m + 1) * pp]);
    }
    let to_image = |data: Vec<f64>| -> Result<Tensor> {
        let pg = PatchGrid {
            patches: Tensor::new(vec![n, pp], data)?,
            grid: target.grid,
        };
        crate::vit::unpatchify(&pg, patch_size)
    };
    Ok(ReconPanels {
        masked_view: to_image(masked)?,
        reconstruction_view: to_image(recon)?,
        per_patch_loss: patch_losses(pred, target, plan, norm_pix)?,
    })
}
