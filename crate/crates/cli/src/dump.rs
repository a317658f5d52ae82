//! Layer dumps for `derain --dump-layers`.
//!
//! Files written for a network with `S` scales:
//!
//! - `input.png`, `background.png`, `rain.png` (RGB, clamped to [0, 1]) and
//!   `rain_luma.png` (luma of the total rain, min-max normalized);
//! - per scale `d` and color channel `c`: `scale{d}_rain_{c}.png`, that
//!   channel of the scale's rain layer, and `scale{d}_{c}_feat{k}.png` for
//!   the three feature channels whose rain-head filters into `c` have the
//!   largest L1 norm.
//!
//! That is `4 + 3 * S * (1 + 3)` files. Grayscale images are min-max
//! normalized per channel.

use std::path::Path;

use anyhow::Result;

use srnet::io::{crop_back, save_gray_normalized, save_image};
use srnet::metrics::rgb_to_luma;
use srnet::train::Derained;
use srnet::{Srnet, Tensor};

const COLORS: [&str; 3] = ["r", "g", "b"];
pub const FEATURES_PER_CHANNEL: usize = 3;

/// Feature channels ranked by the L1 norm of their head filter into `color`.
fn top_features(head: &Tensor<f32>, color: usize, k: usize) -> Vec<usize> {
    let s = head.shape();
    let mut score: Vec<(usize, f32)> =
        (0..s.channels).map(|ch| (ch, head.plane(color, ch).iter().map(|v| v.abs()).sum())).collect();
    score.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    score.into_iter().take(k).map(|(ch, _)| ch).collect()
}

/// Writes the dump and returns the number of files.
pub fn write_layers(model: &Srnet<f32>, input: &Tensor<f32>, d: &Derained<f32>, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = d.extent;
    let mut n = 0;
    let mut gray = |plane: &[f32], name: String| -> Result<()> {
        save_gray_normalized(plane, h, w, dir.join(name))?;
        n += 1;
        Ok(())
    };
    save_image(input, dir.join("input.png"))?;
    save_image(&d.background, dir.join("background.png"))?;
    save_image(&d.rain, dir.join("rain.png"))?;
    gray(rgb_to_luma(&d.rain)?.plane(0, 0), "rain_luma.png".into())?;
    for (i, scale) in d.output.scales.iter().enumerate() {
        let rain = crop_back(&scale.rain, d.extent)?;
        let feats = crop_back(&scale.features, d.extent)?;
        let head = model.head_weight(i);
        for (c, color) in COLORS.iter().enumerate() {
            gray(rain.plane(0, c), format!("scale{}_rain_{color}.png", scale.dilation))?;
            for (k, ch) in top_features(head, c, FEATURES_PER_CHANNEL).into_iter().enumerate() {
                gray(feats.plane(0, ch), format!("scale{}_{color}_feat{k}.png", scale.dilation))?;
            }
        }
    }
    Ok(n + 3)
}
