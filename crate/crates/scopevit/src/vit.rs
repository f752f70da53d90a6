//! Vision-transformer encoder: patch handling, fixed positional embeddings,
//! pre-norm attention blocks, and the ordered layer listing consumed by
//! layer-wise learning-rate decay.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Encoder geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
}

impl ViTConfig {
    /// Desk-scale preset used by the test suite: trains in minutes on a CPU.
    pub fn tiny_desk() -> Self {
        ViTConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 96,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
        }
    }

    /// Full-scale preset; expressible in configs but only smoke-tested.
    pub fn base_paper() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4.0,
        }
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "tiny-desk" => Ok(Self::tiny_desk()),
            "base-paper" => Ok(Self::base_paper()),
            other => Err(Error::config(format!(
                "unknown preset {other:?}; expected tiny-desk or base-paper"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// Patch grid as (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        let side = self.image_size / self.patch_size;
        (side, side)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Flattened pixels per patch (RGB).
    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// An image split into non-overlapping flattened patches, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    /// `[N, patch_size^2 * 3]`
    pub patches: Tensor,
    /// (rows, cols) with `N = rows * cols`.
    pub grid: (usize, usize),
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Split an `[H, W, 3]` image into flattened patches. Lossless; patches are
/// ordered row-major over the grid, pixels row-major within each patch.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<PatchGrid> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::contract(format!(
            "patchify expects [H, W, 3], got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::config(format!(
            "image {h}x{w} not divisible by patch_size {patch_size}"
        )));
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let pp = patch_size * patch_size * 3;
    let src = image.data();
    let mut data = Vec::with_capacity(rows * cols * pp);
    for gr in 0..rows {
        for gc in 0..cols {
            for py in 0..patch_size {
                let y = gr * patch_size + py;
                let x0 = gc * patch_size;
                let row = &src[(y * w + x0) * 3..(y * w + x0 + patch_size) * 3];
                data.extend_from_slice(row);
            }
        }
    }
    Ok(PatchGrid {
        patches: Tensor::new(vec![rows * cols, pp], data)?,
        grid: (rows, cols),
    })
}

/// Inverse of [`patchify`]; exact.
pub fn unpatchify(grid: &PatchGrid, patch_size: usize) -> Result<Tensor> {
    let (rows, cols) = grid.grid;
    let pp = patch_size * patch_size * 3;
    if grid.patches.shape() != [rows * cols, pp] {
        return Err(Error::contract(format!(
            "patch tensor {:?} does not match grid {:?} at patch_size {patch_size}",
            grid.patches.shape(),
            grid.grid
        )));
    }
    let (h, w) = (rows * patch_size, cols * patch_size);
    let mut data = vec![0.0; h * w * 3];
    let src = grid.patches.data();
    for gr in 0..rows {
        for gc in 0..cols {
            let p = gr * cols + gc;
            for py in 0..patch_size {
                let y = gr * patch_size + py;
                let x0 = gc * patch_size;
                let dst = &mut data[(y * w + x0) * 3..(y * w + x0 + patch_size) * 3];
                dst.copy_from_slice(&src[p * pp + py * patch_size * 3..p * pp + (py + 1) * patch_size * 3]);
            }
        }
    }
    Tensor::new(vec![h, w, 3], data)
}

/// Fixed 2-D sine-cosine positional embedding, one row per grid position.
///
/// The first half of each row encodes the grid row, the second half the
/// grid column, each as interleaved sin/cos banks over geometric
/// frequencies. Deterministic in its arguments.
pub fn sincos_pos_embed(grid: (usize, usize), embed_dim: usize) -> Result<Tensor> {
    if embed_dim == 0 || embed_dim % 4 != 0 {
        return Err(Error::config(format!(
            "embed_dim {embed_dim} must be divisible by 4 for 2-D sin-cos embeddings"
        )));
    }
    let (rows, cols) = grid;
    let half = embed_dim / 2;
    let banks = half / 2;
    let omegas: Vec<f64> = (0..banks)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / banks as f64))
        .collect();
    let axis_embed = |pos: f64, out: &mut Vec<f64>| {
        for &om in &omegas {
            out.push((pos * om).sin());
        }
        for &om in &omegas {
            out.push((pos * om).cos());
        }
    };
    let mut data = Vec::with_capacity(rows * cols * embed_dim);
    for r in 0..rows {
        for c in 0..cols {
            axis_embed(r as f64, &mut data);
            axis_embed(c as f64, &mut data);
        }
    }
    Tensor::new(vec![rows * cols, embed_dim], data)
}

/// Positional table with a leading all-zero row for the class token.
pub fn pos_embed_with_cls(grid: (usize, usize), embed_dim: usize) -> Result<Tensor> {
    let base = sincos_pos_embed(grid, embed_dim)?;
    let mut data = vec![0.0; embed_dim];
    data.extend_from_slice(base.data());
    Tensor::new(vec![grid.0 * grid.1 + 1, embed_dim], data)
}

/// Parameter ids of one pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct BlockIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

impl BlockIds {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        mlp_dim: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let std = 0.02;
        BlockIds {
            ln1_g: store.add_ones(format!("{prefix}.ln1.g"), vec![dim]),
            ln1_b: store.add_zeros(format!("{prefix}.ln1.b"), vec![dim]),
            wq: store.add_normal(format!("{prefix}.attn.wq"), vec![dim, dim], std, rng),
            bq: store.add_zeros(format!("{prefix}.attn.bq"), vec![dim]),
            wk: store.add_normal(format!("{prefix}.attn.wk"), vec![dim, dim], std, rng),
            bk: store.add_zeros(format!("{prefix}.attn.bk"), vec![dim]),
            wv: store.add_normal(format!("{prefix}.attn.wv"), vec![dim, dim], std, rng),
            bv: store.add_zeros(format!("{prefix}.attn.bv"), vec![dim]),
            wo: store.add_normal(format!("{prefix}.attn.wo"), vec![dim, dim], std, rng),
            bo: store.add_zeros(format!("{prefix}.attn.bo"), vec![dim]),
            ln2_g: store.add_ones(format!("{prefix}.ln2.g"), vec![dim]),
            ln2_b: store.add_zeros(format!("{prefix}.ln2.b"), vec![dim]),
            fc1_w: store.add_normal(format!("{prefix}.mlp.fc1.w"), vec![dim, mlp_dim], std, rng),
            fc1_b: store.add_zeros(format!("{prefix}.mlp.fc1.b"), vec![mlp_dim]),
            fc2_w: store.add_normal(format!("{prefix}.mlp.fc2.w"), vec![mlp_dim, dim], std, rng),
            fc2_b: store.add_zeros(format!("{prefix}.mlp.fc2.b"), vec![dim]),
        }
    }

    fn param_names(prefix: &str) -> Vec<String> {
        [
            "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
            "attn.wo", "attn.bo", "ln2.g", "ln2.b", "mlp.fc1.w", "mlp.fc1.b", "mlp.fc2.w",
            "mlp.fc2.b",
        ]
        .iter()
        .map(|s| format!("{prefix}.{s}"))
        .collect()
    }
}

/// Multi-head self-attention + MLP with pre-norm residuals, over tokens laid
/// out sample-major as `[batch * tokens, dim]`.
pub fn transformer_block(
    tape: &mut Tape,
    vars: &[Var],
    ids: &BlockIds,
    x: Var,
    batch: usize,
    tokens: usize,
    dim: usize,
    heads: usize,
) -> Result<Var> {
    let hd = dim / heads;
    let h = tape.layer_norm(x, vars[ids.ln1_g], vars[ids.ln1_b], LAYER_NORM_EPS)?;
    let q = tape.linear(h, vars[ids.wq], vars[ids.bq])?;
    let k = tape.linear(h, vars[ids.wk], vars[ids.bk])?;
    let v = tape.linear(h, vars[ids.wv], vars[ids.bv])?;

    // [B*T, D] -> [B*H, T, hd]
    let mut split = Vec::with_capacity(batch * heads * tokens * hd);
    for b in 0..batch {
        for hh in 0..heads {
            for t in 0..tokens {
                let base = (b * tokens + t) * dim + hh * hd;
                for j in 0..hd {
                    split.push(base + j);
                }
            }
        }
    }
    let qh = tape.index_select(q, split.clone(), vec![batch * heads, tokens, hd])?;
    let vh = tape.index_select(v, split, vec![batch * heads, tokens, hd])?;
    // [B*T, D] -> [B*H, hd, T] (transposed for the score product)
    let mut split_t = Vec::with_capacity(batch * heads * tokens * hd);
    for b in 0..batch {
        for hh in 0..heads {
            for j in 0..hd {
                for t in 0..tokens {
                    split_t.push((b * tokens + t) * dim + hh * hd + j);
                }
            }
        }
    }
    let kt = tape.index_select(k, split_t, vec![batch * heads, hd, tokens])?;

    let scores = tape.bmm(qh, kt)?;
    let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt());
    let attn = tape.softmax(scaled);
    let ctx = tape.bmm(attn, vh)?;

    // [B*H, T, hd] -> [B*T, D]
    let mut merge = Vec::with_capacity(batch * tokens * dim);
    for b in 0..batch {
        for t in 0..tokens {
            for hh in 0..heads {
                let base = (b * heads + hh) * tokens * hd + t * hd;
                for j in 0..hd {
                    merge.push(base + j);
                }
            }
        }
    }
    let merged = tape.index_select(ctx, merge, vec![batch * tokens, dim])?;
    let attn_out = tape.linear(merged, vars[ids.wo], vars[ids.bo])?;
    let x = tape.add(x, attn_out)?;

    let h2 = tape.layer_norm(x, vars[ids.ln2_g], vars[ids.ln2_b], LAYER_NORM_EPS)?;
    let m = tape.linear(h2, vars[ids.fc1_w], vars[ids.fc1_b])?;
    let m = tape.gelu(m);
    let m = tape.linear(m, vars[ids.fc2_w], vars[ids.fc2_b])?;
    tape.add(x, m)
}

/// Parameter ids of the full encoder.
#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub patch_w: usize,
    pub patch_b: usize,
    pub cls: usize,
    pub blocks: Vec<BlockIds>,
    pub norm_g: usize,
    pub norm_b: usize,
}

impl EncoderIds {
    pub fn build(store: &mut ParamStore, cfg: &ViTConfig, rng: &mut ChaCha20Rng) -> Self {
        let d = cfg.embed_dim;
        let patch_w = store.add_normal("encoder.patch.w", vec![cfg.patch_pixels(), d], 0.02, rng);
        let patch_b = store.add_zeros("encoder.patch.b", vec![d]);
        let cls = store.add_normal("encoder.cls", vec![1, d], 0.02, rng);
        let blocks = (1..=cfg.depth)
            .map(|i| BlockIds::build(store, &format!("encoder.block{i}"), d, cfg.mlp_dim(), rng))
            .collect();
        let norm_g = store.add_ones("encoder.norm.g", vec![d]);
        let norm_b = store.add_zeros("encoder.norm.b", vec![d]);
        EncoderIds {
            patch_w,
            patch_b,
            cls,
            blocks,
            norm_g,
            norm_b,
        }
    }
}

/// Class token plus encoded patch tokens for one image.
#[derive(Clone, Debug)]
pub struct LatentTokens {
    /// `[(1 + K), embed_dim]`
    pub tokens: Tensor,
}

impl LatentTokens {
    pub fn class_token(&self) -> &[f64] {
        let d = self.tokens.last_dim();
        &self.tokens.data()[..d]
    }
}

fn validate_keep(keep: &[usize], n: usize) -> Result<()> {
    if keep.is_empty() {
        return Err(Error::contract("keep_indices must be non-empty"));
    }
    let mut seen = vec![false; n];
    for &i in keep {
        if i >= n {
            return Err(Error::contract(format!(
                "keep index {i} out of range for {n} patches"
            )));
        }
        if seen[i] {
            return Err(Error::contract(format!("duplicate keep index {i}")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Encode a batch of images, attending only to the kept patches of each.
///
/// All samples must keep the same number of patches. Returns tokens laid out
/// sample-major as `[batch * (1 + K), embed_dim]`, class token first within
/// each sample, patch tokens in `keep` order with their positional
/// embeddings attached before attention.
pub fn encoder_forward_batch(
    tape: &mut Tape,
    vars: &[Var],
    ids: &EncoderIds,
    cfg: &ViTConfig,
    patches: &[&PatchGrid],
    keeps: &[&[usize]],
) -> Result<Var> {
    cfg.validate()?;
    let batch = patches.len();
    if batch == 0 || keeps.len() != batch {
        return Err(Error::contract(
            "encoder_forward_batch: empty batch or keep list length mismatch",
        ));
    }
    let n = cfg.num_patches();
    let k = keeps[0].len();
    for (pg, keep) in patches.iter().zip(keeps) {
        if pg.num_patches() != n || pg.patches.shape() != [n, cfg.patch_pixels()] {
            return Err(Error::contract(format!(
                "patch grid {:?} incompatible with config grid {:?}",
                pg.grid,
                cfg.grid()
            )));
        }
        validate_keep(keep, n)?;
        if keep.len() != k {
            return Err(Error::contract(
                "all samples in a batch must keep the same number of patches",
            ));
        }
    }
    let d = cfg.embed_dim;
    let pp = cfg.patch_pixels();

    // Stack kept patches: [B*K, pp].
    let mut vis = Vec::with_capacity(batch * k * pp);
    for (pg, keep) in patches.iter().zip(keeps) {
        for &p in keep.iter() {
            vis.extend_from_slice(&pg.patches.data()[p * pp..(p + 1) * pp]);
        }
    }
    let vis = tape.constant(Tensor::new(vec![batch * k, pp], vis)?);
    let emb = tape.linear(vis, vars[ids.patch_w], vars[ids.patch_b])?;

    // Positional embedding rows for the kept patches.
    let pos = sincos_pos_embed(cfg.grid(), d)?;
    let mut pos_rows = Vec::with_capacity(batch * k * d);
    for keep in keeps {
        for &p in keep.iter() {
            pos_rows.extend_from_slice(&pos.data()[p * d..(p + 1) * d]);
        }
    }
    let pos_rows = tape.constant(Tensor::new(vec![batch * k, d], pos_rows)?);
    let emb = tape.add(emb, pos_rows)?;

    // Interleave the class token (positional embedding zero) per sample:
    // rows [cls_0..cls_{B-1}, emb...] -> (b, [cls_b, emb_b*K..]).
    let cls_rows: Vec<usize> = (0..batch).flat_map(|_| 0..d).collect();
    let cls = tape.index_select(vars[ids.cls], cls_rows, vec![batch, d])?;
    let stacked = tape.concat_rows(&[cls, emb])?;
    let t = k + 1;
    let mut order = Vec::with_capacity(batch * t * d);
    for b in 0..batch {
        order.extend((b * d)..(b + 1) * d);
        let start = (batch + b * k) * d;
        order.extend(start..start + k * d);
    }
    let mut x = tape.index_select(stacked, order, vec![batch * t, d])?;

    for block in &ids.blocks {
        x = transformer_block(tape, vars, block, x, batch, t, d, cfg.num_heads)?;
    }
    tape.layer_norm(x, vars[ids.norm_g], vars[ids.norm_b], LAYER_NORM_EPS)
}

/// Single-image encoder pass on an existing tape.
pub fn encoder_forward(
    tape: &mut Tape,
    vars: &[Var],
    ids: &EncoderIds,
    cfg: &ViTConfig,
    patches: &PatchGrid,
    keep: &[usize],
) -> Result<Var> {
    encoder_forward_batch(tape, vars, ids, cfg, &[patches], &[keep])
}

/// Convenience: encode one image eagerly and return the token values.
pub fn encode(
    store: &ParamStore,
    ids: &EncoderIds,
    cfg: &ViTConfig,
    patches: &PatchGrid,
    keep: &[usize],
) -> Result<LatentTokens> {
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let out = encoder_forward(&mut tape, &vars, ids, cfg, patches, keep)?;
    Ok(LatentTokens {
        tokens: tape.value(out).clone(),
    })
}

/// One entry of the layer ordering used for layer-wise LR decay.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub id: String,
    /// Steps away from the encoder/decoder boundary ("latent space").
    pub distance: usize,
    pub param_names: Vec<String>,
}

/// Ordered parameter groups with integer distance from the latent boundary.
///
/// Encoder: `[patch-embed, block1..blockL]` at distances `[L..0]`; the class
/// token travels with patch-embed and the final norm with the last block.
/// Decoder (when `decoder_depth > 0`): `[block1..blockD, prediction-head]`
/// at distances `[0..D]`; the latent projection and mask token travel with
/// block 1, the decoder norm with the prediction head.
pub fn parameter_layers(cfg: &ViTConfig, decoder_depth: usize) -> Vec<ParamGroup> {
    let mut groups = Vec::new();
    groups.push(ParamGroup {
        id: "encoder.patch_embed".into(),
        distance: cfg.depth,
        param_names: vec![
            "encoder.patch.w".into(),
            "encoder.patch.b".into(),
            "encoder.cls".into(),
        ],
    });
    for i in 1..=cfg.depth {
        let mut names = BlockIds::param_names(&format!("encoder.block{i}"));
        if i == cfg.depth {
            names.push("encoder.norm.g".into());
            names.push("encoder.norm.b".into());
        }
        groups.push(ParamGroup {
            id: format!("encoder.block{i}"),
            distance: cfg.depth - i,
            param_names: names,
        });
    }
    if decoder_depth > 0 {
        for i in 1..=decoder_depth {
            let mut names = BlockIds::param_names(&format!("decoder.block{i}"));
            if i == 1 {
                names.insert(0, "decoder.embed.w".into());
                names.insert(1, "decoder.embed.b".into());
                names.insert(2, "decoder.mask_token".into());
            }
            groups.push(ParamGroup {
                id: format!("decoder.block{i}"),
                distance: i - 1,
                param_names: names,
            });
        }
        groups.push(ParamGroup {
            id: "decoder.pred".into(),
            distance: decoder_depth,
            param_names: vec![
                "decoder.norm.g".into(),
                "decoder.norm.b".into(),
                "decoder.pred.w".into(),
                "decoder.pred.b".into(),
            ],
        });
    }
    groups
}
