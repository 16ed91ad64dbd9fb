use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mask::RoiMask;
use super::signal::{linear_detrend, standardize};
use super::vxts::VxtsMatrix;
use crate::error::{Error, Result};
use crate::TOKEN_DIMS;

/// Images per music clip.
pub const CLIP_TRS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Training,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub clip_index: u32,
    pub genre_id: u32,
    pub start_timepoint: u32,
}

/// Sidecar metadata stored next to every VXTS run file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub subject_id: String,
    pub run_id: u32,
    pub run_kind: RunKind,
    pub clip_table: Vec<ClipEntry>,
}

impl RunMeta {
    /// Clips must tile the run back to back, `CLIP_TRS` images each, with
    /// no clip index repeated inside a training run.
    pub fn validate(&self, n_timepoints: usize) -> Result<()> {
        if n_timepoints % CLIP_TRS != 0 {
            return Err(Error::ClipStructure(format!(
                "run {} of {} has {n_timepoints} timepoints, not a multiple of {CLIP_TRS}",
                self.run_id, self.subject_id
            )));
        }
        if self.clip_table.len() * CLIP_TRS != n_timepoints {
            return Err(Error::ClipStructure(format!(
                "run {} of {}: {} clips cannot tile {n_timepoints} timepoints",
                self.run_id,
                self.subject_id,
                self.clip_table.len()
            )));
        }
        for (i, c) in self.clip_table.iter().enumerate() {
            if c.start_timepoint as usize != i * CLIP_TRS {
                return Err(Error::ClipStructure(format!(
                    "run {} of {}: clip {} starts at {}, expected {}",
                    self.run_id,
                    self.subject_id,
                    i,
                    c.start_timepoint,
                    i * CLIP_TRS
                )));
            }
        }
        if self.run_kind == RunKind::Training {
            let mut seen = HashSet::new();
            if let Some(c) = self.clip_table.iter().find(|c| !seen.insert(c.clip_index)) {
                return Err(Error::ClipStructure(format!(
                    "training run {} of {} repeats clip {}",
                    self.run_id, self.subject_id, c.clip_index
                )));
            }
        }
        Ok(())
    }

    pub fn file_stem(&self) -> String {
        format!("sub-{}_run-{:02}", self.subject_id, self.run_id)
    }
}

/// One run of per-timepoint images, each `TOKEN_DIMS + n_voxels` wide
/// with the token dims zero.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTimeseries {
    pub meta: RunMeta,
    pub images: VxtsMatrix,
}

impl RunTimeseries {
    pub fn new(meta: RunMeta, images: VxtsMatrix) -> Result<Self> {
        meta.validate(images.rows)?;
        if images.cols <= TOKEN_DIMS {
            return Err(Error::Shape(format!(
                "images of width {} leave no voxel dims",
                images.cols
            )));
        }
        if (0..images.rows).any(|t| images.row(t)[..TOKEN_DIMS].iter().any(|&v| v != 0.0)) {
            return Err(Error::Format(format!(
                "run {} of {} has nonzero values in the reserved token dims",
                meta.run_id, meta.subject_id
            )));
        }
        Ok(Self { meta, images })
    }

    pub fn n_timepoints(&self) -> usize {
        self.images.rows
    }

    pub fn width(&self) -> usize {
        self.images.cols
    }

    pub fn image(&self, t: usize) -> &[f32] {
        self.images.row(t)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        save_matrix_with_meta(dir, &self.meta, &self.images)
    }

    pub fn load(vxts_path: &Path) -> Result<Self> {
        let (meta, images) = load_matrix_with_meta(vxts_path)?;
        Self::new(meta, images)
    }
}

pub(crate) fn save_matrix_with_meta(dir: &Path, meta: &RunMeta, m: &VxtsMatrix) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = meta.file_stem();
    let path = dir.join(format!("{stem}.vxts"));
    m.save(&path)?;
    let side = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(path)
}

pub(crate) fn load_matrix_with_meta(vxts_path: &Path) -> Result<(RunMeta, VxtsMatrix)> {
    let images = VxtsMatrix::load(vxts_path)?;
    let side = vxts_path.with_extension("json");
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: RunMeta = serde_json::from_str(&text)?;
    Ok((meta, images))
}

/// Every `*.vxts` file in `dir`, sorted by file name.
pub fn list_vxts(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "vxts") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Load every assembled run in a directory.
pub fn load_runs(dir: &Path) -> Result<Vec<RunTimeseries>> {
    let runs = list_vxts(dir)?
        .iter()
        .map(|p| RunTimeseries::load(p))
        .collect::<Result<Vec<_>>>()?;
    if runs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no .vxts runs found in {}",
            dir.display()
        )));
    }
    Ok(runs)
}

/// Turn a `T × n_active` matrix of ROI voxel values (columns in mask
/// order) into a run of `TOKEN_DIMS + n_active` wide images. Each voxel is
/// linearly detrended, then standardized, across the whole run.
pub fn assemble_run(raw: &VxtsMatrix, mask: &RoiMask, meta: RunMeta) -> Result<RunTimeseries> {
    let n = mask.n_active();
    if raw.cols != n {
        return Err(Error::Shape(format!(
            "raw run has {} voxel columns, mask selects {n}",
            raw.cols
        )));
    }
    meta.validate(raw.rows)?;
    let t_len = raw.rows;
    let width = TOKEN_DIMS + n;
    let mut images = vec![0f32; t_len * width];
    let mut column = vec![0f64; t_len];
    for j in 0..n {
        for (t, c) in column.iter_mut().enumerate() {
            *c = raw.data[t * n + j] as f64;
        }
        let z = standardize(&linear_detrend(&column)?);
        for (t, v) in z.into_iter().enumerate() {
            images[t * width + TOKEN_DIMS + j] = v as f32;
        }
    }
    RunTimeseries::new(meta, VxtsMatrix::new(t_len, width, images)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{AtlasTable, build_roi_mask};

    pub(crate) fn meta(kind: RunKind, clips: usize) -> RunMeta {
        RunMeta {
            subject_id: "01".into(),
            run_id: 0,
            run_kind: kind,
            clip_table: (0..clips)
                .map(|i| ClipEntry {
                    clip_index: i as u32,
                    genre_id: (i % 10) as u32,
                    start_timepoint: (i * CLIP_TRS) as u32,
                })
                .collect(),
        }
    }

    fn mask(n: usize) -> RoiMask {
        let text: String = (0..n).map(|i| format!("{i} 0 0 A 0.5\n")).collect();
        build_roi_mask(&AtlasTable::parse(&text).unwrap(), 0.23, n).unwrap()
    }

    #[test]
    fn constants_assemble_to_zero_images() {
        let raw = VxtsMatrix::new(10, 3, vec![7.5; 30]).unwrap();
        let run = assemble_run(&raw, &mask(3), meta(RunKind::Training, 1)).unwrap();
        assert_eq!(run.width(), 6);
        assert!(run.images.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn timepoints_must_tile_clips() {
        let raw = VxtsMatrix::new(15, 2, vec![0.0; 30]).unwrap();
        let mut m = meta(RunKind::Training, 1);
        assert!(matches!(
            assemble_run(&raw, &mask(2), m.clone()),
            Err(Error::ClipStructure(_))
        ));
        m.clip_table[0].start_timepoint = 3;
        let raw = VxtsMatrix::new(10, 2, vec![0.0; 20]).unwrap();
        assert!(matches!(
            assemble_run(&raw, &mask(2), m),
            Err(Error::ClipStructure(_))
        ));
    }

    #[test]
    fn training_runs_reject_repeated_clips() {
        let mut m = meta(RunKind::Training, 2);
        m.clip_table[1].clip_index = 0;
        assert!(m.validate(20).is_err());
        m.run_kind = RunKind::Test;
        assert!(m.validate(20).is_ok());
    }

    #[test]
    fn token_dims_stay_zero() {
        let raw = VxtsMatrix::new(20, 4, (0..80).map(|i| ((i * 37) % 11) as f32).collect()).unwrap();
        let run = assemble_run(&raw, &mask(4), meta(RunKind::Training, 2)).unwrap();
        for t in 0..20 {
            assert_eq!(&run.image(t)[..3], &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let raw = VxtsMatrix::new(10, 2, (0..20).map(|i| i as f32 * 0.5).collect()).unwrap();
        let run = assemble_run(&raw, &mask(2), meta(RunKind::Test, 1)).unwrap();
        let path = run.save(dir.path()).unwrap();
        assert!(path.ends_with("sub-01_run-00.vxts"));
        assert_eq!(RunTimeseries::load(&path).unwrap(), run);
        assert_eq!(load_runs(dir.path()).unwrap().len(), 1);
    }
}
