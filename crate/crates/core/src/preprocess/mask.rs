use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::atlas::{AtlasTable, Coord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskVoxel {
    pub coord: Coord,
    pub probability: f64,
}

/// Ordered ROI voxel selection; position `j` feeds feature dim `3 + j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiMask {
    pub voxels: Vec<MaskVoxel>,
    pub threshold: f64,
    /// How many union voxels met the threshold before resizing.
    pub n_above_threshold: usize,
    pub n_atlas_voxels: usize,
}

impl RoiMask {
    pub fn n_active(&self) -> usize {
        self.voxels.len()
    }

    pub fn n_padded(&self) -> usize {
        self.n_active().saturating_sub(self.n_above_threshold)
    }

    pub fn n_trimmed(&self) -> usize {
        self.n_above_threshold.saturating_sub(self.n_active())
    }
}

/// Threshold the union of anterior and posterior probabilities and resize
/// the selection to exactly `target_voxels`: surplus voxels are dropped
/// from the low-probability end, a shortfall is filled with the most
/// probable voxels under the threshold.
///
/// Voxels are ranked by probability (descending) then coordinate
/// (ascending), so both resizing rules reduce to keeping the first
/// `target_voxels` ranked entries.
pub fn build_roi_mask(atlas: &AtlasTable, threshold: f64, target_voxels: usize) -> Result<RoiMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    if target_voxels == 0 {
        return Err(Error::Config("target voxel count must be at least 1".into()));
    }
    let union = atlas.union();
    if union.len() < target_voxels {
        return Err(Error::InsufficientAtlas {
            needed: target_voxels,
            available: union.len(),
        });
    }
    let mut ranked: Vec<MaskVoxel> = union
        .into_iter()
        .map(|(coord, probability)| MaskVoxel { coord, probability })
        .collect();
    ranked.sort_by(|a, b| {
        b.probability
            .partial_cmp(&a.probability)
            .unwrap_or(Ordering::Equal)
            .then(a.coord.cmp(&b.coord))
    });
    let n_above_threshold = ranked.iter().filter(|v| v.probability >= threshold).count();
    let n_atlas_voxels = ranked.len();
    ranked.truncate(target_voxels);
    Ok(RoiMask {
        voxels: ranked,
        threshold,
        n_above_threshold,
        n_atlas_voxels,
    })
}
