//! Cross-validation over held-out runs and the hyperparameter sweep.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{Regimen, TrainConfig};
use super::rundir::{RunContext, RunDir};
use super::run::{finetune_run, pretrain_run, FinetuneInit, RunData, RunOutcome};
use crate::dataset::{FiveSeq, N_TRAINING_RUNS};
use crate::error::{Error, Result};
use crate::parallel;

/// One fold's line of a summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub heldout_run: u32,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub mbm_val_loss: Option<f64>,
}

impl FoldRow {
    pub fn from_outcome(o: &RunOutcome) -> Self {
        Self {
            heldout_run: o.heldout,
            best_val_acc: o.best_val_acc,
            best_epoch: o.best_epoch,
            mbm_val_loss: o.best_mbm_val_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub regimen: Regimen,
    pub n_layers: usize,
    pub rows: Vec<FoldRow>,
}

/// Column means of a summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Averages {
    pub best_val_acc: f64,
    pub best_epoch: f64,
    pub mbm_val_loss: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

impl Summary {
    pub fn averages(&self) -> Averages {
        let mbm: Option<Vec<f64>> = self.rows.iter().map(|r| r.mbm_val_loss).collect();
        Averages {
            best_val_acc: mean(self.rows.iter().map(|r| r.best_val_acc)),
            best_epoch: mean(self.rows.iter().map(|r| r.best_epoch as f64)),
            mbm_val_loss: mbm.filter(|m| !m.is_empty()).map(|m| mean(m.into_iter())),
        }
    }

    /// One row per fold plus an `average` row. Pretraining tables carry
    /// the layer count and reconstruction loss; same-genre tables do not.
    pub fn to_csv(&self) -> String {
        let pre = self.regimen.is_pretrain();
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: &[&str] = if pre {
            &["heldout_run", "n_layers", "best_val_acc", "best_epoch", "mbm_val_loss"]
        } else {
            &["heldout_run", "best_val_acc", "best_epoch"]
        };
        w.write_record(header).unwrap();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![r.heldout_run.to_string()];
            if pre {
                rec.push(self.n_layers.to_string());
            }
            rec.push(r.best_val_acc.to_string());
            rec.push(r.best_epoch.to_string());
            if pre {
                rec.push(opt(r.mbm_val_loss));
            }
            w.write_record(&rec).unwrap();
        }
        let a = self.averages();
        let mut rec = vec!["average".to_string()];
        if pre {
            rec.push(self.n_layers.to_string());
        }
        rec.push(a.best_val_acc.to_string());
        rec.push(a.best_epoch.to_string());
        if pre {
            rec.push(opt(a.mbm_val_loss));
        }
        w.write_record(&rec).unwrap();
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

/// Where each fold's weights come from.
#[derive(Clone, Debug)]
pub enum CrossvalInit {
    /// Pretraining regimens: seeded random init.
    Random,
    Fresh,
    /// `<dir>/<fold>/best.ckpt` from an earlier pretraining cross-validation.
    CheckpointDir(PathBuf),
    /// One checkpoint for every fold.
    CheckpointFile(PathBuf),
}

impl CrossvalInit {
    /// Path of the checkpoint a fold starts from, if any.
    pub fn checkpoint_path(&self, heldout: u32) -> Option<PathBuf> {
        match self {
            CrossvalInit::Random | CrossvalInit::Fresh => None,
            CrossvalInit::CheckpointDir(dir) => Some(dir.join(heldout.to_string()).join("best.ckpt")),
            CrossvalInit::CheckpointFile(p) => Some(p.clone()),
        }
    }
}

/// One training run on one fold, optionally recorded in a run directory.
pub fn run_fold(
    seqs: Arc<Vec<FiveSeq>>,
    cfg: &TrainConfig,
    heldout: u32,
    init: &CrossvalInit,
    ctx: Option<&RunContext>,
) -> Result<RunOutcome> {
    let data = RunData::build(seqs, cfg, heldout)?;
    let finetune = match (init, init.checkpoint_path(heldout)) {
        (CrossvalInit::Random, _) => None,
        (_, Some(p)) => Some(FinetuneInit::Checkpoint(
            std::fs::read(&p).map_err(|e| Error::io(&p, e))?,
        )),
        (_, None) => Some(FinetuneInit::Fresh),
    };
    let ckpt_bytes = match &finetune {
        Some(FinetuneInit::Checkpoint(b)) => Some(b.as_slice()),
        _ => None,
    };
    let dir = ctx.map(|c| RunDir::start(c, cfg, &data, ckpt_bytes)).transpose()?;
    let outcome = match &finetune {
        None => pretrain_run(&data, cfg)?,
        Some(f) => finetune_run(&data, cfg, f)?,
    };
    if let Some(dir) = dir {
        dir.finish(cfg, &outcome)?;
    }
    Ok(outcome)
}

/// Train one model per held-out run and tabulate the best epochs.
pub fn crossval(
    seqs: Arc<Vec<FiveSeq>>,
    cfg: &TrainConfig,
    folds: &[u32],
    init: &CrossvalInit,
    jobs: usize,
    ctx: Option<&RunContext>,
) -> Result<Summary> {
    cfg.validate()?;
    if let Some(&bad) = folds.iter().find(|&&f| f >= N_TRAINING_RUNS) {
        return Err(Error::Config(format!("fold {bad} is not a training run")));
    }
    let results = parallel::map_with_jobs(folds, jobs, |&f| {
        run_fold(seqs.clone(), cfg, f, init, ctx).map(|o| FoldRow::from_outcome(&o))
    });
    Ok(Summary {
        regimen: cfg.regimen,
        n_layers: cfg.model.n_layers,
        rows: results.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

/// Every training run as a fold.
pub fn all_folds() -> Vec<u32> {
    (0..N_TRAINING_RUNS).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpace {
    pub alphas: Vec<(f64, f64)>,
    pub lrs: Vec<f64>,
    pub n_heads: Vec<usize>,
    pub forward_expansion: Vec<usize>,
    pub n_layers: Vec<usize>,
}

impl Default for GridSpace {
    fn default() -> Self {
        Self {
            alphas: vec![(0.1, 0.9), (0.3, 0.7), (0.5, 0.5)],
            lrs: vec![1e-4, 1e-5],
            n_heads: vec![2, 3, 4],
            forward_expansion: vec![2, 4],
            n_layers: vec![3, 4],
        }
    }
}

impl GridSpace {
    /// The Cartesian product applied to `base`, plus a notice for every
    /// combination that fails validation. Loss weights are not swept for
    /// the next-sequence-only regimen.
    pub fn expand(&self, base: &TrainConfig) -> (Vec<TrainConfig>, Vec<String>) {
        let alphas = if base.regimen == Regimen::NtpOnly {
            vec![(1.0, 0.0)]
        } else {
            self.alphas.clone()
        };
        let (mut ok, mut skipped) = (Vec::new(), Vec::new());
        for &(a1, a2) in &alphas {
            for &lr in &self.lrs {
                for &h in &self.n_heads {
                    for &e in &self.forward_expansion {
                        for &l in &self.n_layers {
                            let mut c = base.clone();
                            (c.alpha1, c.alpha2, c.lr) = (a1, a2, lr);
                            c.model.n_heads = h;
                            c.model.forward_expansion = e;
                            c.model.n_layers = l;
                            match c.validate() {
                                Ok(()) => ok.push(c),
                                Err(err) => skipped.push(format!(
                                    "skipped alphas ({a1}, {a2}), lr {lr}, heads {h}, expansion {e}, layers {l}: {err}"
                                )),
                            }
                        }
                    }
                }
            }
        }
        (ok, skipped)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub alpha1: f64,
    pub alpha2: f64,
    pub lr: f64,
    pub n_heads: usize,
    pub forward_expansion: usize,
    pub n_layers: usize,
    pub best_val_acc: f64,
    pub best_epoch: usize,
}

/// Train every configuration on one fold and rank by best validation
/// accuracy, descending; ties go to the earlier best epoch, then to sweep
/// order.
pub fn grid_search(
    seqs: Arc<Vec<FiveSeq>>,
    base: &TrainConfig,
    space: &GridSpace,
    heldout: u32,
    jobs: usize,
) -> Result<(Vec<GridResult>, Vec<String>)> {
    if !base.regimen.is_pretrain() {
        return Err(Error::Config("grid search runs a pretraining regimen".into()));
    }
    let (configs, skipped) = space.expand(base);
    for s in &skipped {
        log::warn!("{s}");
    }
    let results = parallel::map_with_jobs(&configs, jobs, |c| {
        run_fold(seqs.clone(), c, heldout, &CrossvalInit::Random, None).map(|o| GridResult {
            alpha1: c.alpha1,
            alpha2: c.alpha2,
            lr: c.lr,
            n_heads: c.model.n_heads,
            forward_expansion: c.model.forward_expansion,
            n_layers: c.model.n_layers,
            best_val_acc: o.best_val_acc,
            best_epoch: o.best_epoch,
        })
    });
    let mut ranked = results.into_iter().collect::<Result<Vec<_>>>()?;
    rank(&mut ranked);
    Ok((ranked, skipped))
}

pub fn rank(results: &mut [GridResult]) {
    results.sort_by(|a, b| {
        b.best_val_acc
            .total_cmp(&a.best_val_acc)
            .then(a.best_epoch.cmp(&b.best_epoch))
    });
}
