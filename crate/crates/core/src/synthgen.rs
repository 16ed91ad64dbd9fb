//! Genre-structured synthetic voxel timeseries.
//!
//! Each genre owns a fixed spatial pattern. A clip's images are the
//! pattern scaled by `genre_signal_strength`, plus an AR(1) drift that runs
//! continuously through the whole run (so neighbouring sequences are
//! temporally dependent), plus white noise, on top of a per-voxel baseline
//! and linear scanner drift. Raw runs cover every atlas voxel and go
//! through the regular preprocessing path.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{
    assemble_run, build_roi_mask, mask_columns, select_columns, AtlasEntry, AtlasTable,
    ClipEntry, Coord, Region, RoiMask, RunKind, RunMeta, RunTimeseries, VxtsMatrix, CLIP_TRS,
    DEFAULT_THRESHOLD,
};
use crate::rng::{self, tag};

/// How often a presentation of the test-run clip block repeats.
pub const TEST_REPEATS: usize = 4;

/// Voxels below the threshold that the padding rule pulls into the mask.
const PADDED_VOXELS: usize = 4;
/// Extra sub-threshold atlas voxels that stay outside the mask.
const OUTSIDE_VOXELS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_training_runs: usize,
    pub n_test_runs: usize,
    pub clips_per_training_run: usize,
    pub genres: usize,
    pub trs_per_clip: usize,
    pub n_voxels: usize,
    pub genre_signal_strength: f64,
    pub temporal_corr: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 1,
            n_training_runs: 12,
            n_test_runs: 6,
            clips_per_training_run: 40,
            genres: 10,
            trs_per_clip: CLIP_TRS,
            n_voxels: 417,
            genre_signal_strength: 1.0,
            temporal_corr: 0.9,
            noise_sd: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_subjects == 0 {
            return bad("n_subjects must be at least 1".into());
        }
        if self.trs_per_clip != CLIP_TRS {
            return bad(format!("trs_per_clip must be {CLIP_TRS}"));
        }
        if self.genres < 2 {
            return bad("at least two genres are needed".into());
        }
        if self.clips_per_training_run < 2 {
            return bad("training runs need at least two clips".into());
        }
        if self.n_voxels <= PADDED_VOXELS {
            return bad(format!("n_voxels must exceed {PADDED_VOXELS}"));
        }
        if !(0.0..1.0).contains(&self.temporal_corr) {
            return bad(format!(
                "temporal_corr must lie in [0, 1), got {}",
                self.temporal_corr
            ));
        }
        if !(self.noise_sd >= 0.0 && self.genre_signal_strength >= 0.0) {
            return bad("noise_sd and genre_signal_strength must be non-negative".into());
        }
        if self.n_training_runs == 0 {
            return bad("at least one training run is needed".into());
        }
        Ok(())
    }
}

pub struct SynthOutput {
    pub atlas: AtlasTable,
    pub mask: RoiMask,
    /// Whole-atlas runs, columns in ascending coordinate order.
    pub raw: Vec<(RunMeta, VxtsMatrix)>,
    /// The same runs after preprocessing.
    pub runs: Vec<RunTimeseries>,
}

impl SynthOutput {
    /// Writes `atlas.txt`, `raw/` and preprocessed `data/` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.atlas.save(&dir.join("atlas.txt"))?;
        let raw_dir = dir.join("raw");
        for (meta, m) in &self.raw {
            crate::preprocess::run::save_matrix_with_meta(&raw_dir, meta, m)?;
        }
        let data_dir = dir.join("data");
        for run in &self.runs {
            run.save(&data_dir)?;
        }
        Ok(())
    }
}

fn coord_for(i: usize) -> Coord {
    Coord::new(
        30 + (i % 20) as u32,
        40 + ((i / 20) % 20) as u32,
        30 + (i / 400) as u32,
    )
}

/// Atlas whose thresholded union falls `PADDED_VOXELS` short of
/// `n_voxels`, so the mask has to be padded from below the threshold.
/// Every seventh voxel is listed in both regions.
pub fn synth_atlas(n_voxels: usize, seed: u64) -> Result<AtlasTable> {
    let mut rng = rng::stream(seed, &[tag::SYNTH, 1]);
    let n_above = n_voxels - PADDED_VOXELS;
    let total = n_voxels + OUTSIDE_VOXELS;
    let mut entries = Vec::with_capacity(total + total / 7);
    for i in 0..total {
        let p: f64 = if i < n_above {
            DEFAULT_THRESHOLD + 0.7 * rng.gen::<f64>()
        } else if i < n_voxels {
            // just under the threshold, above everything outside the mask
            0.20 + 0.029 * rng.gen::<f64>()
        } else {
            0.02 + 0.17 * rng.gen::<f64>()
        };
        let p = (p * 1e6).round() / 1e6;
        let coord = coord_for(i);
        let (primary, secondary) = if i % 2 == 0 {
            (Region::Anterior, Region::Posterior)
        } else {
            (Region::Posterior, Region::Anterior)
        };
        entries.push(AtlasEntry {
            coord,
            region: primary,
            probability: p,
        });
        if i % 7 == 0 {
            entries.push(AtlasEntry {
                coord,
                region: secondary,
                probability: (p * 0.5 * 1e6).round() / 1e6,
            });
        }
    }
    AtlasTable::new(entries)
}

/// `n_clips` genre labels, each genre as evenly represented as possible,
/// never the same genre twice in a row.
fn genre_sequence(rng: &mut rng::Rng, n_clips: usize, genres: usize) -> Vec<u32> {
    loop {
        let mut remaining: Vec<usize> = (0..genres)
            .map(|g| n_clips / genres + usize::from(g < n_clips % genres))
            .collect();
        let mut seq: Vec<u32> = Vec::with_capacity(n_clips);
        let mut stuck = false;
        for _ in 0..n_clips {
            let prev = seq.last().map(|&g| g as usize);
            let total: usize = remaining
                .iter()
                .enumerate()
                .filter(|(g, _)| Some(*g) != prev)
                .map(|(_, &c)| c)
                .sum();
            if total == 0 {
                stuck = true;
                break;
            }
            let mut k = rng.gen_range(0..total);
            let g = (0..genres)
                .filter(|&g| Some(g) != prev)
                .find(|&g| {
                    if k < remaining[g] {
                        true
                    } else {
                        k -= remaining[g];
                        false
                    }
                })
                .unwrap();
            remaining[g] -= 1;
            seq.push(g as u32);
        }
        if !stuck {
            return seq;
        }
    }
}

fn normal_vec(rng: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let atlas = synth_atlas(spec.n_voxels, spec.seed)?;
    let mask = build_roi_mask(&atlas, DEFAULT_THRESHOLD, spec.n_voxels)?;
    let columns = mask_columns(&atlas, &mask);
    let n_atlas = atlas.union().len();

    let patterns: Vec<Vec<f64>> = (0..spec.genres)
        .map(|g| normal_vec(&mut rng::stream(spec.seed, &[tag::SYNTH, 2, g as u64]), spec.n_voxels))
        .collect();

    let phi = spec.temporal_corr;
    let innov = (1.0 - phi * phi).sqrt();
    let mut raw = Vec::new();
    for s in 0..spec.n_subjects {
        let subject_id = format!("{:02}", s + 1);
        let n_runs = spec.n_training_runs + spec.n_test_runs;
        for r in 0..n_runs {
            let mut rng = rng::stream(spec.seed, &[tag::SYNTH, 3, s as u64, r as u64]);
            let (kind, clip_table) = if r < spec.n_training_runs {
                let genres = genre_sequence(&mut rng, spec.clips_per_training_run, spec.genres);
                let table = genres
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| ClipEntry {
                        clip_index: i as u32,
                        genre_id: g,
                        start_timepoint: (i * CLIP_TRS) as u32,
                    })
                    .collect::<Vec<_>>();
                (RunKind::Training, table)
            } else {
                let mut perm: Vec<u32> = (0..spec.genres as u32).collect();
                perm.shuffle(&mut rng);
                let table = (0..spec.genres * TEST_REPEATS)
                    .map(|i| ClipEntry {
                        clip_index: (i % spec.genres) as u32,
                        genre_id: perm[i % spec.genres],
                        start_timepoint: (i * CLIP_TRS) as u32,
                    })
                    .collect::<Vec<_>>();
                (RunKind::Test, table)
            };
            let t_len = clip_table.len() * CLIP_TRS;
            let baseline: Vec<f64> = (0..n_atlas).map(|_| 100.0 + 20.0 * rng.gen::<f64>()).collect();
            let slope: Vec<f64> = (0..n_atlas).map(|_| 0.02 * (rng.gen::<f64>() - 0.5)).collect();
            let mut state = normal_vec(&mut rng, spec.n_voxels);
            let mut data = vec![0f32; t_len * n_atlas];
            for t in 0..t_len {
                let genre = clip_table[t / CLIP_TRS].genre_id as usize;
                if t > 0 {
                    for a in &mut state {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        *a = phi * *a + innov * e;
                    }
                }
                let row = &mut data[t * n_atlas..(t + 1) * n_atlas];
                for (c, v) in row.iter_mut().enumerate() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v = (baseline[c] + slope[c] * t as f64 + spec.noise_sd * e) as f32;
                }
                for (j, &c) in columns.iter().enumerate() {
                    let signal = spec.genre_signal_strength * patterns[genre][j] + state[j];
                    row[c] += signal as f32;
                }
            }
            let meta = RunMeta {
                subject_id: subject_id.clone(),
                run_id: r as u32,
                run_kind: kind,
                clip_table,
            };
            raw.push((meta, VxtsMatrix::new(t_len, n_atlas, data)?));
        }
    }
    let runs = raw
        .iter()
        .map(|(meta, m)| assemble_run(&select_columns(m, &columns)?, &mask, meta.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthOutput {
        atlas,
        mask,
        raw,
        runs,
    })
}

/// Nearest-centroid genre decoding of clip-mean images: centroids come
/// from even-numbered training runs, accuracy is measured on odd ones.
/// Chance level is `1 / genres`.
pub fn centroid_genre_accuracy(runs: &[RunTimeseries]) -> f64 {
    let clip_means = |run: &RunTimeseries| -> Vec<(u32, Vec<f64>)> {
        run.meta
            .clip_table
            .iter()
            .map(|c| {
                let mut m = vec![0.0; run.width()];
                for t in c.start_timepoint as usize..c.start_timepoint as usize + CLIP_TRS {
                    for (a, &v) in m.iter_mut().zip(run.image(t)) {
                        *a += v as f64 / CLIP_TRS as f64;
                    }
                }
                (c.genre_id, m)
            })
            .collect()
    };
    let training: Vec<&RunTimeseries> = runs
        .iter()
        .filter(|r| r.meta.run_kind == RunKind::Training)
        .collect();
    let mut centroids: std::collections::BTreeMap<u32, (Vec<f64>, usize)> = Default::default();
    for run in training.iter().filter(|r| r.meta.run_id % 2 == 0) {
        for (g, m) in clip_means(run) {
            let e = centroids.entry(g).or_insert_with(|| (vec![0.0; m.len()], 0));
            e.0.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
    }
    let centroids: Vec<(u32, Vec<f64>)> = centroids
        .into_iter()
        .map(|(g, (s, n))| (g, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for run in training.iter().filter(|r| r.meta.run_id % 2 == 1) {
        for (g, m) in clip_means(run) {
            let best = centroids
                .iter()
                .map(|(cg, c)| {
                    let d: f64 = c.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, *cg)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, cg)| cg);
            hits += usize::from(best == Some(g));
            total += 1;
        }
    }
    hits as f64 / total.max(1) as f64
}
