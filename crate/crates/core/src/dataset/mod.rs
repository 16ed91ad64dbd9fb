//! Five-image sequences, labelled sequence pairs and cross-validation
//! splits.

mod manifest;

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use manifest::{ManifestEntry, SeqRef, Split};

use crate::error::{Error, Result};
use crate::preprocess::{RunKind, RunTimeseries, CLIP_TRS};
use crate::rng::{self, tag};

/// Images per sequence: each clip yields two non-overlapping windows.
pub const SEQ_LEN: usize = CLIP_TRS / 2;

/// Number of training runs a subject has; folds hold out one of them.
pub const N_TRAINING_RUNS: u32 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// Timesteps 1–5 of a clip.
    First,
    /// Timesteps 6–10 of a clip.
    Second,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Yes,
    No,
    Undefined,
}

impl Label {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Label::Yes
        } else {
            Label::No
        }
    }

    /// Class index used by the output blocks: "No" is 0, "Yes" is 1.
    pub fn class_index(self) -> Option<usize> {
        match self {
            Label::No => Some(0),
            Label::Yes => Some(1),
            Label::Undefined => None,
        }
    }
}

/// Five consecutive images from one half of a music clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FiveSeq {
    pub subject_id: String,
    pub run_id: u32,
    pub run_kind: RunKind,
    pub clip_index: u32,
    pub window: Window,
    pub genre_id: u32,
    pub start_timepoint: usize,
    pub width: usize,
    /// `SEQ_LEN × width`, row-major.
    pub images: Vec<f32>,
    pub has_successor: bool,
}

impl FiveSeq {
    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.width..(i + 1) * self.width]
    }

    pub fn seq_ref(&self) -> SeqRef {
        SeqRef {
            run_id: self.run_id,
            clip_index: self.clip_index,
            window: self.window,
        }
    }
}

/// Two sequences from the same subject plus task labels. `seq1`/`seq2`
/// index the sequence list the pair was built from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedSample {
    pub seq1: usize,
    pub seq2: usize,
    pub ntp_label: Label,
    pub sg_label: Label,
    pub subject_id: String,
}

/// Which label a pair set is balanced on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Does seq2 immediately follow seq1?
    Ntp,
    /// Do seq1 and seq2 share a genre?
    Sg,
}

impl Task {
    pub fn label(self, p: &PairedSample) -> Label {
        match self {
            Task::Ntp => p.ntp_label,
            Task::Sg => p.sg_label,
        }
    }
}

/// Cut every retained clip into its two windows. In test runs only the
/// first presentation of each clip is kept.
pub fn extract_5seqs(runs: &[RunTimeseries]) -> Result<Vec<FiveSeq>> {
    let mut out = Vec::new();
    for run in runs {
        let meta = &run.meta;
        meta.validate(run.n_timepoints())?;
        let width = run.width();
        let mut seen_clips = HashSet::new();
        let first = out.len();
        for clip in &meta.clip_table {
            if !seen_clips.insert(clip.clip_index) {
                if meta.run_kind == RunKind::Test {
                    continue;
                }
                return Err(Error::ClipStructure(format!(
                    "training run {} of {} repeats clip {}",
                    meta.run_id, meta.subject_id, clip.clip_index
                )));
            }
            for (k, window) in [Window::First, Window::Second].into_iter().enumerate() {
                let start = clip.start_timepoint as usize + k * SEQ_LEN;
                let mut images = Vec::with_capacity(SEQ_LEN * width);
                for t in start..start + SEQ_LEN {
                    images.extend_from_slice(run.image(t));
                }
                out.push(FiveSeq {
                    subject_id: meta.subject_id.clone(),
                    run_id: meta.run_id,
                    run_kind: meta.run_kind,
                    clip_index: clip.clip_index,
                    window,
                    genre_id: clip.genre_id,
                    start_timepoint: start,
                    width,
                    images,
                    has_successor: false,
                });
            }
        }
        let starts: HashSet<usize> = out[first..].iter().map(|s| s.start_timepoint).collect();
        for s in &mut out[first..] {
            s.has_successor = starts.contains(&(s.start_timepoint + SEQ_LEN));
        }
    }
    Ok(out)
}

fn subject_tag(subject: &str) -> u64 {
    // FNV-1a, stable across platforms and releases
    subject.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn group_by_subject<'a>(seqs: &'a [FiveSeq], pool: &[usize]) -> BTreeMap<&'a str, Vec<usize>> {
    let mut by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in pool {
        by.entry(seqs[i].subject_id.as_str()).or_default().push(i);
    }
    by
}

/// Uniform draw from `candidates` skipping anything in `exclude`.
fn draw_excluding(rng: &mut rng::Rng, candidates: &[usize], exclude: &[usize]) -> Option<usize> {
    let allowed = candidates.iter().filter(|c| !exclude.contains(c)).count();
    if allowed == 0 {
        return None;
    }
    let k = rng.gen_range(0..allowed);
    candidates.iter().copied().filter(|c| !exclude.contains(c)).nth(k)
}

/// Next-sequence pairs over the sequences listed in `pool`. Every sequence
/// whose successor is also in the pool contributes one positive (its
/// successor) and one negative (a uniform draw from the same subject's
/// pool, excluding itself and the successor). Sequences without a
/// successor contribute nothing.
pub fn build_ntp_pairs(seqs: &[FiveSeq], pool: &[usize], seed: u64) -> Result<Vec<PairedSample>> {
    let mut out = Vec::new();
    for (subject, members) in group_by_subject(seqs, pool) {
        if members.len() < 3 {
            return Err(Error::InsufficientData(format!(
                "subject {subject} has {} sequences; next-sequence pairs need at least 3",
                members.len()
            )));
        }
        let mut rng = rng::stream(seed, &[tag::PAIRS, Task::Ntp as u64, subject_tag(subject)]);
        let successor: HashMap<(u32, usize), usize> = members
            .iter()
            .map(|&i| ((seqs[i].run_id, seqs[i].start_timepoint), i))
            .collect();
        for &i in &members {
            let s = &seqs[i];
            if !s.has_successor {
                continue;
            }
            let Some(&next) = successor.get(&(s.run_id, s.start_timepoint + SEQ_LEN)) else {
                continue;
            };
            let neg = draw_excluding(&mut rng, &members, &[i, next])
                .expect("pool of three or more always leaves a negative");
            for (seq2, ntp) in [(next, Label::Yes), (neg, Label::No)] {
                out.push(PairedSample {
                    seq1: i,
                    seq2,
                    ntp_label: ntp,
                    sg_label: Label::from_bool(s.genre_id == seqs[seq2].genre_id),
                    subject_id: s.subject_id.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Same-genre pairs over the sequences listed in `pool`: one positive
/// (same subject, same genre, not itself) and one negative (same subject,
/// other genre) per sequence. A sequence that is the only one of its genre
/// for its subject yields no pairs.
pub fn build_sg_pairs(seqs: &[FiveSeq], pool: &[usize], seed: u64) -> Result<Vec<PairedSample>> {
    let mut out = Vec::new();
    for (subject, members) in group_by_subject(seqs, pool) {
        let mut by_genre: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in &members {
            by_genre.entry(seqs[i].genre_id).or_default().push(i);
        }
        if by_genre.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "subject {subject} has sequences from {} genre(s); same-genre pairs need at least 2",
                by_genre.len()
            )));
        }
        let mut rng = rng::stream(seed, &[tag::PAIRS, Task::Sg as u64, subject_tag(subject)]);
        for &i in &members {
            let genre = seqs[i].genre_id;
            let same = &by_genre[&genre];
            let Some(pos) = draw_excluding(&mut rng, same, &[i]) else {
                log::warn!(
                    "subject {subject}: sequence {:?} is alone in genre {genre}; skipped",
                    seqs[i].seq_ref()
                );
                continue;
            };
            let others: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&j| seqs[j].genre_id != genre)
                .collect();
            let neg = others[rng.gen_range(0..others.len())];
            for (seq2, sg) in [(pos, Label::Yes), (neg, Label::No)] {
                out.push(PairedSample {
                    seq1: i,
                    seq2,
                    ntp_label: Label::Undefined,
                    sg_label: sg,
                    subject_id: seqs[i].subject_id.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// One cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldSpec {
    pub heldout_run_id: u32,
    pub seed: u64,
    pub n_train_cap: usize,
    pub n_val_cap: usize,
}

impl FoldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.heldout_run_id >= N_TRAINING_RUNS {
            return Err(Error::Config(format!(
                "heldout run {} is not one of the {N_TRAINING_RUNS} training runs",
                self.heldout_run_id
            )));
        }
        for (name, cap) in [("training", self.n_train_cap), ("validation", self.n_val_cap)] {
            if cap == 0 || cap % 2 != 0 {
                return Err(Error::Config(format!(
                    "{name} cap must be a positive even number for exact label balance, got {cap}"
                )));
            }
        }
        Ok(())
    }
}

/// Pairs for one fold, plus which sequences each side drew from.
#[derive(Clone, Debug)]
pub struct FoldData {
    pub task: Task,
    pub fold: FoldSpec,
    pub train: Vec<PairedSample>,
    pub val: Vec<PairedSample>,
    pub train_pool: Vec<usize>,
    pub val_pool: Vec<usize>,
}

impl FoldData {
    pub fn manifest(&self, seqs: &[FiveSeq]) -> Vec<ManifestEntry> {
        let entry = |p: &PairedSample, split| ManifestEntry {
            seq1_ref: seqs[p.seq1].seq_ref(),
            seq2_ref: seqs[p.seq2].seq_ref(),
            ntp_label: p.ntp_label,
            sg_label: p.sg_label,
            subject: p.subject_id.clone(),
            fold: self.fold.heldout_run_id,
            split,
        };
        self.train
            .iter()
            .map(|p| entry(p, Split::Train))
            .chain(self.val.iter().map(|p| entry(p, Split::Val)))
            .collect()
    }
}

/// Keep `cap / 2` pairs of each label, chosen uniformly, then shuffle.
pub fn balanced_cap(
    pairs: Vec<PairedSample>,
    task: Task,
    cap: usize,
    split: &'static str,
    rng: &mut rng::Rng,
) -> Result<Vec<PairedSample>> {
    let (yes, no): (Vec<_>, Vec<_>) = pairs
        .into_iter()
        .filter(|p| task.label(p) != Label::Undefined)
        .partition(|p| task.label(p) == Label::Yes);
    let available = 2 * yes.len().min(no.len());
    if cap > available {
        return Err(Error::Cap {
            split,
            requested: cap,
            available,
        });
    }
    let half = cap / 2;
    let mut pick = |v: Vec<PairedSample>| {
        let mut idx = index::sample(rng, v.len(), half).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| v[i].clone()).collect::<Vec<_>>()
    };
    let mut out = pick(yes);
    out.extend(pick(no));
    out.shuffle(rng);
    Ok(out)
}

/// Split pairs by run: validation pairs take both sequences from the
/// held-out run, training pairs never touch it. Pairs are regenerated per
/// side, then balanced and capped.
pub fn build_fold(seqs: &[FiveSeq], task: Task, fold: &FoldSpec) -> Result<FoldData> {
    fold.validate()?;
    let heldout = |s: &FiveSeq| s.run_kind == RunKind::Training && s.run_id == fold.heldout_run_id;
    let (val_pool, train_pool): (Vec<usize>, Vec<usize>) =
        (0..seqs.len()).partition(|&i| heldout(&seqs[i]));
    if val_pool.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no sequences come from held-out training run {}",
            fold.heldout_run_id
        )));
    }
    let build = |pool: &[usize], side: u64| {
        let seed = rng::derive_seed(fold.seed, &[side]);
        match task {
            Task::Ntp => build_ntp_pairs(seqs, pool, seed),
            Task::Sg => build_sg_pairs(seqs, pool, seed),
        }
    };
    let train_all = build(&train_pool, 0)?;
    let val_all = build(&val_pool, 1)?;
    let mut cap_rng = rng::stream(fold.seed, &[tag::CAP]);
    let train = balanced_cap(train_all, task, fold.n_train_cap, "training", &mut cap_rng)?;
    let val = balanced_cap(val_all, task, fold.n_val_cap, "validation", &mut cap_rng)?;
    Ok(FoldData {
        task,
        fold: fold.clone(),
        train,
        val,
        train_pool,
        val_pool,
    })
}

/// Largest even caps a fold can satisfy as `(train, val)`.
pub fn available_caps(seqs: &[FiveSeq], task: Task, fold: &FoldSpec) -> Result<(usize, usize)> {
    let heldout = |s: &FiveSeq| s.run_kind == RunKind::Training && s.run_id == fold.heldout_run_id;
    let (val_pool, train_pool): (Vec<usize>, Vec<usize>) =
        (0..seqs.len()).partition(|&i| heldout(&seqs[i]));
    let count = |pool: &[usize], side: u64| -> Result<usize> {
        let seed = rng::derive_seed(fold.seed, &[side]);
        let pairs = match task {
            Task::Ntp => build_ntp_pairs(seqs, pool, seed)?,
            Task::Sg => build_sg_pairs(seqs, pool, seed)?,
        };
        let yes = pairs.iter().filter(|p| task.label(p) == Label::Yes).count();
        let no = pairs.iter().filter(|p| task.label(p) == Label::No).count();
        Ok(2 * yes.min(no))
    };
    Ok((count(&train_pool, 0)?, count(&val_pool, 1)?))
}
