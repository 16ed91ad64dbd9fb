//! ROI selection and per-voxel signal conditioning: whole-ROI raw runs in,
//! fixed-width images with reserved token dims out.

mod atlas;
mod mask;
pub(crate) mod run;
mod signal;
pub mod vxts;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use atlas::{AtlasEntry, AtlasTable, Coord, Region, GRID};
pub use mask::{build_roi_mask, MaskVoxel, RoiMask};
pub use run::{
    assemble_run, list_vxts, load_runs, ClipEntry, RunKind, RunMeta, RunTimeseries, CLIP_TRS,
};
pub use signal::{linear_detrend, standardize, DEGENERATE_SD};
pub use vxts::VxtsMatrix;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.23;
pub const DEFAULT_TARGET_VOXELS: usize = 417;

/// Summary written next to preprocessed runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub threshold: f64,
    pub target_voxels: usize,
    pub atlas_voxels: usize,
    pub above_threshold: usize,
    pub padded: usize,
    pub trimmed: usize,
    pub n_voxels: usize,
    pub image_dims: usize,
    pub min_included_probability: f64,
    pub runs: Vec<String>,
}

/// Raw runs store one column per atlas coordinate, in ascending coordinate
/// order. Returns the column index of every mask voxel, in mask order.
pub fn mask_columns(atlas: &AtlasTable, mask: &RoiMask) -> Vec<usize> {
    let index: HashMap<Coord, usize> = atlas
        .union()
        .keys()
        .enumerate()
        .map(|(i, c)| (*c, i))
        .collect();
    mask.voxels.iter().map(|v| index[&v.coord]).collect()
}

/// Pick the mask columns out of a raw whole-atlas run.
pub fn select_columns(raw: &VxtsMatrix, columns: &[usize]) -> Result<VxtsMatrix> {
    if let Some(&c) = columns.iter().find(|&&c| c >= raw.cols) {
        return Err(Error::Shape(format!(
            "column {c} requested from a {}-column run",
            raw.cols
        )));
    }
    let mut data = Vec::with_capacity(raw.rows * columns.len());
    for t in 0..raw.rows {
        let row = raw.row(t);
        data.extend(columns.iter().map(|&c| row[c]));
    }
    VxtsMatrix::new(raw.rows, columns.len(), data)
}

/// Preprocess every raw run in `raw_dir` into `out_dir`.
pub fn preprocess_dir(
    atlas: &AtlasTable,
    raw_dir: &Path,
    out_dir: &Path,
    threshold: f64,
    target_voxels: usize,
) -> Result<MaskReport> {
    let mask = build_roi_mask(atlas, threshold, target_voxels)?;
    let columns = mask_columns(atlas, &mask);
    let n_atlas = atlas.union().len();
    let mut runs = Vec::new();
    for path in list_vxts(raw_dir)? {
        let (meta, raw) = run::load_matrix_with_meta(&path)?;
        if raw.cols != n_atlas {
            return Err(Error::Format(format!(
                "{} has {} columns but the atlas lists {n_atlas} voxels",
                path.display(),
                raw.cols
            )));
        }
        let selected = select_columns(&raw, &columns)?;
        let run = assemble_run(&selected, &mask, meta)?;
        let out = run.save(out_dir)?;
        runs.push(out.file_name().unwrap().to_string_lossy().into_owned());
    }
    if runs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no raw .vxts runs in {}",
            raw_dir.display()
        )));
    }
    let report = MaskReport {
        threshold,
        target_voxels,
        atlas_voxels: mask.n_atlas_voxels,
        above_threshold: mask.n_above_threshold,
        padded: mask.n_padded(),
        trimmed: mask.n_trimmed(),
        n_voxels: mask.n_active(),
        image_dims: mask.n_active() + crate::TOKEN_DIMS,
        min_included_probability: mask
            .voxels
            .last()
            .map_or(f64::NAN, |v| v.probability),
        runs,
    };
    let path = out_dir.join("mask_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
