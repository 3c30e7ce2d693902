//! Pruned-patch overlays: one image per pruning stage, pruned cells at 25%
//! brightness, retained cells untouched.

use std::collections::HashSet;

use patchprune::io::ImageRGB;
use patchprune::model::{ModelConfig, StageMask};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    pub block: usize,
    pub image: ImageRGB,
    pub darkened_cells: usize,
}

fn darken(v: u8) -> u8 {
    ((v as u16 + 2) / 4) as u8
}

/// Builds one overlay per stage from the stage's retained grid cells.
pub fn overlays(
    image: &ImageRGB,
    cfg: &ModelConfig,
    stages: &[StageMask],
) -> Result<Vec<Overlay>, CliError> {
    if cfg.is_overlapping() {
        return Err(CliError::Usage(
            "visualize needs non-overlapping patches: with stride < patch size a pixel \
             belongs to several patches, so pruned cells have no disjoint footprint"
                .into(),
        ));
    }
    let side = cfg.grid_side();
    let p = cfg.patch_size;
    let mut out = Vec::with_capacity(stages.len());
    for stage in stages {
        let retained: HashSet<(usize, usize)> = stage.retained_cells().into_iter().collect();
        let mut img = image.clone();
        let mut darkened = 0;
        for row in 0..side {
            for col in 0..side {
                if retained.contains(&(row, col)) {
                    continue;
                }
                darkened += 1;
                for y in row * p..(row + 1) * p {
                    for x in col * p..(col + 1) * p {
                        let px = img.pixel(x, y);
                        img.set_pixel(x, y, px.map(darken));
                    }
                }
            }
        }
        out.push(Overlay {
            block: stage.block,
            image: img,
            darkened_cells: darkened,
        });
    }
    Ok(out)
}
