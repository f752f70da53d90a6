//! Qualitative reconstruction grids: per sample a 4-panel row of masked
//! input, reconstruction, ground truth, and a per-patch loss heatmap
//! (red high, blue low), with raw loss values in a sidecar table so tests
//! never parse pixels.

use std::io::Write;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::data::images::{rgb8_from_tensor, save_png};
use crate::error::{Error, Result};
use crate::mae::{compose_reconstruction, mae_forward, MaeModel, MaskPlan};
use crate::numerics::{Tape, Tensor};
use crate::pipeline::run_config_of;
use crate::vit::patchify;

/// One rendered row's inputs.
pub struct ReconRow {
    pub image: Tensor,
    pub plan: MaskPlan,
}

#[derive(Debug)]
pub struct RenderSummary {
    /// Per row, per patch MSE (zero at visible positions).
    pub per_patch_losses: Vec<Vec<f64>>,
    /// Per row, the masked-mean scalar loss.
    pub scalar_losses: Vec<f64>,
}

const GAP: usize = 2;

fn heat_color(t: f64) -> [f64; 3] {
    // Linear blue -> red.
    [t, 0.0, 1.0 - t]
}

fn heatmap_image(losses: &[f64], grid: (usize, usize), patch_size: usize) -> Tensor {
    let (rows, cols) = grid;
    let max = losses.iter().cloned().fold(0.0f64, f64::max);
    let (h, w) = (rows * patch_size, cols * patch_size);
    let mut data = vec![0.0; h * w * 3];
    for gr in 0..rows {
        for gc in 0..cols {
            let t = if max > 0.0 {
                losses[gr * cols + gc] / max
            } else {
                0.0
            };
            let c = heat_color(t);
            for py in 0..patch_size {
                for px in 0..patch_size {
                    let y = gr * patch_size + py;
                    let x = gc * patch_size + px;
                    data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
                }
            }
        }
    }
    Tensor::new(vec![h, w, 3], data).unwrap()
}

/// Rebuild the MAE model a checkpoint holds.
pub fn mae_model_of(ck: &Checkpoint) -> Result<MaeModel> {
    if ck.kind() != "mae" {
        return Err(Error::contract(format!(
            "render-recon requires an mae checkpoint, got {:?}",
            ck.kind()
        )));
    }
    let cfg = run_config_of(ck)?;
    let mut model = MaeModel::build(cfg.vit_config()?, cfg.mae.clone(), 0)?;
    ck.apply_all(&mut model.store)?;
    Ok(model)
}

/// Render rows into one grid PNG at `out_path`, plus `<out_path>.losses.tsv`
/// carrying raw per-patch losses and each row's masked-mean scalar.
pub fn render_recon_grid(
    ck: &Checkpoint,
    rows: &[ReconRow],
    out_path: &Path,
) -> Result<RenderSummary> {
    if rows.is_empty() {
        return Err(Error::contract("render_recon_grid: no rows"));
    }
    let model = mae_model_of(ck)?;
    let ps = model.vit.patch_size;
    let side = model.vit.image_size;

    let mut panels_per_row = Vec::new();
    let mut per_patch = Vec::new();
    let mut scalars = Vec::new();
    for row in rows {
        if row.image.shape() != [side, side, 3] {
            return Err(Error::contract(format!(
                "image shape {:?} does not match model input {side}",
                row.image.shape()
            )));
        }
        let grid = patchify(&row.image, ps)?;
        row.plan.validate(grid.num_patches())?;
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape);
        let pred = mae_forward(&mut tape, &vars, &model, &[&grid], &[&row.plan])?;
        let pred = tape
            .value(pred)
            .clone()
            .reshape(vec![grid.num_patches(), model.vit.patch_pixels()])?;
        let panels = compose_reconstruction(&pred, &grid, &row.plan, ps, model.mae.norm_pix)?;
        let masked_mean = if row.plan.mask_indices.is_empty() {
            0.0
        } else {
            row.plan
                .mask_indices
                .iter()
                .map(|&m| panels.per_patch_loss[m])
                .sum::<f64>()
                / row.plan.mask_indices.len() as f64
        };
        let heat = heatmap_image(&panels.per_patch_loss, grid.grid, ps);
        panels_per_row.push([
            panels.masked_view,
            panels.reconstruction_view,
            row.image.clone(),
            heat,
        ]);
        per_patch.push(panels.per_patch_loss);
        scalars.push(masked_mean);
    }

    // Assemble: rows of 4 panels separated by white gaps.
    let total_w = 4 * side + 3 * GAP;
    let total_h = rows.len() * side + (rows.len() - 1) * GAP;
    let mut canvas = vec![1.0f64; total_h * total_w * 3];
    for (ri, panels) in panels_per_row.iter().enumerate() {
        let y0 = ri * (side + GAP);
        for (pi, panel) in panels.iter().enumerate() {
            let x0 = pi * (side + GAP);
            for y in 0..side {
                for x in 0..side {
                    let src = (y * side + x) * 3;
                    let dst = ((y0 + y) * total_w + x0 + x) * 3;
                    canvas[dst..dst + 3].copy_from_slice(&panel.data()[src..src + 3]);
                }
            }
        }
    }
    let canvas = Tensor::new(vec![total_h, total_w, 3], canvas)?;
    let (h, w, rgb) = rgb8_from_tensor(&canvas);
    save_png(out_path, h, w, &rgb)?;

    // Sidecar with raw values.
    let sidecar = out_path.with_extension("losses.tsv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&sidecar)?);
    writeln!(f, "# row\tpatch\tloss")?;
    for (ri, losses) in per_patch.iter().enumerate() {
        for (pi, loss) in losses.iter().enumerate() {
            writeln!(f, "{ri}\t{pi}\t{loss}")?;
        }
        writeln!(f, "{ri}\tmean\t{}", scalars[ri])?;
    }
    f.flush()?;
    Ok(RenderSummary {
        per_patch_losses: per_patch,
        scalar_losses: scalars,
    })
}
