use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::config::{Regimen, TrainConfig};
use super::loss::{batch_loss, Batch, Head, Objective};
use crate::dataset::{build_fold, FiveSeq, FoldData, FoldSpec, PairedSample};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, plan_mask, ImagePool};
use crate::model::{assemble_input, positional_encode, CheckpointMeta, ModelConfig, ModelParams};
use crate::numerics::{adam_step, Real, Tape, Tensor};
use crate::rng::{self, tag};

const EVAL_BATCH: usize = 64;

/// Sequences plus one fold's pairs and its random-replacement pool.
#[derive(Clone, Debug)]
pub struct RunData {
    pub seqs: Arc<Vec<FiveSeq>>,
    pub fold: FoldData,
    pub pool: ImagePool,
}

impl RunData {
    /// The fold's dataset, seeded by regimen phase and fold index.
    pub fn build(seqs: Arc<Vec<FiveSeq>>, cfg: &TrainConfig, heldout: u32) -> Result<Self> {
        let spec = FoldSpec {
            heldout_run_id: heldout,
            seed: cfg.regimen.dataset_seed(cfg.seed, heldout),
            n_train_cap: cfg.n_train_cap,
            n_val_cap: cfg.n_val_cap,
        };
        let fold = build_fold(&seqs, cfg.regimen.task(), &spec)?;
        let pool = ImagePool::from_seqs(&seqs, &fold.train_pool);
        Ok(Self { seqs, fold, pool })
    }

    pub fn heldout(&self) -> u32 {
        self.fold.fold.heldout_run_id
    }
}

/// Seed for everything model-side in one run (init, shuffles, dropout,
/// training masks).
pub fn run_seed(cfg: &TrainConfig, heldout: u32) -> u64 {
    rng::derive_seed(cfg.seed, &[heldout as u64])
}

/// Where mask plans for a batch come from.
#[derive(Clone, Copy, Debug)]
pub enum MaskSource {
    None,
    /// Redrawn every epoch.
    Train { run_seed: u64, epoch: usize },
    /// Fixed per sample for the whole run.
    Fixed { seed: u64 },
}

impl MaskSource {
    fn seed(self, sample: usize) -> Option<u64> {
        match self {
            MaskSource::None => None,
            MaskSource::Train { run_seed, epoch } => Some(rng::derive_seed(
                run_seed,
                &[tag::TRAIN_MASK, epoch as u64, sample as u64],
            )),
            MaskSource::Fixed { seed } => {
                Some(rng::derive_seed(seed, &[tag::VAL_MASK, sample as u64]))
            }
        }
    }
}

/// Assemble, mask and position-encode the listed pairs. `samples[i]` is
/// the index of `pairs[i]` within its split, which keys its mask stream.
pub fn prepare_batch<T: Real>(
    cfg: &ModelConfig,
    data: &RunData,
    pairs: &[&PairedSample],
    samples: &[usize],
    head: Head,
    masks: MaskSource,
) -> Result<Batch<T>> {
    let p = cfg.positions();
    let d = cfg.d_model;
    let b = pairs.len();
    let mut x = Vec::with_capacity(b * p * d);
    let mut labels = Vec::with_capacity(b);
    let (mut rows, mut targets, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for (k, (&pair, &sample)) in pairs.iter().zip(samples).enumerate() {
        let mut xi: Tensor<T> = assemble_input(cfg, &data.seqs[pair.seq1], &data.seqs[pair.seq2])?;
        if let Some(seed) = masks.seed(sample) {
            let mut r = rng::Rng::seed_from_u64(seed);
            let plan = plan_mask(cfg, &mut r);
            let out = apply_mask(&mut xi, &plan, &data.pool, &data.seqs, &mut r)?;
            let w = T::from_f64_lossy(1.0 / (plan.slots.len() * b) as f64);
            for pos in plan.positions() {
                rows.push(k * p + pos);
                weights.push(w);
            }
            targets.extend_from_slice(out.targets.data());
        }
        positional_encode(&mut xi, p)?;
        x.extend_from_slice(xi.data());
        let label = match head {
            Head::Ntp => pair.ntp_label,
            Head::Sg => pair.sg_label,
        };
        labels.push(
            label
                .class_index()
                .ok_or_else(|| Error::State("training pair without a label for its task".into()))?,
        );
    }
    let mbm_targets = if rows.is_empty() {
        None
    } else {
        Some(Tensor::new(vec![rows.len(), d], targets)?)
    };
    Ok(Batch {
        x: Tensor::new(vec![b * p, d], x)?,
        size: b,
        labels,
        mbm_rows: rows,
        mbm_targets,
        mbm_weights: weights,
    })
}

fn head_of(cfg: &TrainConfig) -> Head {
    if cfg.regimen.is_pretrain() {
        Head::Ntp
    } else {
        Head::Sg
    }
}

fn objective(cfg: &TrainConfig) -> Objective {
    if cfg.regimen.is_pretrain() {
        Objective {
            head: Head::Ntp,
            class_weight: cfg.alpha1,
            mbm_weight: cfg.alpha2,
        }
    } else {
        Objective {
            head: Head::Sg,
            class_weight: 1.0,
            mbm_weight: 0.0,
        }
    }
}

/// One row of a run's metrics table. Columns that do not apply to the
/// regimen are empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_ntp: Option<f64>,
    pub train_mbm: Option<f64>,
    pub train_sg: Option<f64>,
    pub train_total: f64,
    pub val_ntp_acc: Option<f64>,
    pub val_mbm_loss: Option<f64>,
    pub val_sg_acc: Option<f64>,
    pub seconds: f64,
}

impl EpochMetrics {
    /// The accuracy that selects the best epoch.
    pub fn selection_accuracy(&self) -> f64 {
        self.val_ntp_acc.or(self.val_sg_acc).unwrap_or(0.0)
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("metrics serialize");
    }
    if rows.is_empty() {
        w.write_record([
            "epoch",
            "train_ntp",
            "train_mbm",
            "train_sg",
            "train_total",
            "val_ntp_acc",
            "val_mbm_loss",
            "val_sg_acc",
            "seconds",
        ])
        .expect("header writes");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub class_loss: Option<f64>,
    pub mbm_loss: Option<f64>,
    pub total: f64,
}

/// One pass over the training pairs in a seeded order: dropout on,
/// masks redrawn for this epoch, one optimizer step per batch. A zero
/// learning rate skips the step.
pub fn train_epoch(
    params: &mut ModelParams<f32>,
    data: &RunData,
    cfg: &TrainConfig,
    run_seed: u64,
    epoch: usize,
) -> Result<TrainStats> {
    let obj = objective(cfg);
    let masks = if obj.mbm_weight > 0.0 {
        MaskSource::Train { run_seed, epoch }
    } else {
        MaskSource::None
    };
    let train = &data.fold.train;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng::stream(run_seed, &[tag::SHUFFLE, epoch as u64]));
    let adam = cfg.adam();
    let (mut sum_class, mut sum_mbm, mut sum_total) = (0.0, 0.0, 0.0);
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let pairs: Vec<&PairedSample> = chunk.iter().map(|&i| &train[i]).collect();
        let batch = prepare_batch(&params.config, data, &pairs, chunk, obj.head, masks)?;
        let mut tape = Tape::new();
        let mut drop_rng = rng::stream(run_seed, &[tag::DROPOUT, epoch as u64, bi as u64]);
        let vars = batch_loss(params, &mut tape, &batch, obj, Some(&mut drop_rng))?;
        let value = |v: Option<crate::numerics::Var>| v.map(|v| tape.value(v).item() as f64);
        let (class, mbm, total) = (value(vars.class_loss), value(vars.mbm), value(Some(vars.total)).unwrap());
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {epoch}, batch {bi}: class {class:?}, reconstruction {mbm:?}, total {total}"
            )));
        }
        params.store.zero_grads();
        tape.backward(vars.total, &mut params.store)?;
        if cfg.lr > 0.0 {
            adam_step(&mut params.store, &adam)?;
        }
        let n = chunk.len() as f64;
        sum_class += class.unwrap_or(0.0) * n;
        sum_mbm += mbm.unwrap_or(0.0) * n;
        sum_total += total * n;
    }
    let n = train.len().max(1) as f64;
    Ok(TrainStats {
        class_loss: (obj.class_weight > 0.0).then_some(sum_class / n),
        mbm_loss: (obj.mbm_weight > 0.0).then_some(sum_mbm / n),
        total: sum_total / n,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalStats {
    pub accuracy: f64,
    /// Mean per-sample cross-entropy of the classification head.
    pub class_loss: f64,
    /// Mean per-sample reconstruction loss under fixed masks.
    pub mbm_loss: Option<f64>,
}

/// Dropout off. Accuracy and classification loss use unmasked inputs;
/// the reconstruction loss uses masks fixed by `mask_seed`. Ties in the
/// two probabilities count as "No".
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    data: &RunData,
    pairs: &[PairedSample],
    head: Head,
    with_mbm: bool,
    mask_seed: u64,
) -> Result<EvalStats> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("evaluation set is empty".into()));
    }
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let (mut hits, mut class_sum, mut mbm_sum) = (0usize, 0.0, 0.0);
    for chunk in idx.chunks(EVAL_BATCH) {
        let ps: Vec<&PairedSample> = chunk.iter().map(|&i| &pairs[i]).collect();
        let batch = prepare_batch::<T>(&params.config, data, &ps, chunk, head, MaskSource::None)?;
        let mut tape = Tape::new();
        let obj = Objective {
            head,
            class_weight: 1.0,
            mbm_weight: 0.0,
        };
        let vars = batch_loss(params, &mut tape, &batch, obj, None)?;
        let probs = tape.value(vars.probs.expect("class head active"));
        for (r, &label) in batch.labels.iter().enumerate() {
            let row = probs.row(r);
            let pred = usize::from(row[1] > row[0]);
            hits += usize::from(pred == label);
        }
        class_sum += tape.value(vars.class_loss.unwrap()).item().as_f64() * chunk.len() as f64;
        if with_mbm {
            let batch = prepare_batch::<T>(
                &params.config,
                data,
                &ps,
                chunk,
                head,
                MaskSource::Fixed { seed: mask_seed },
            )?;
            let mut tape = Tape::new();
            let obj = Objective {
                head,
                class_weight: 0.0,
                mbm_weight: 1.0,
            };
            let vars = batch_loss(params, &mut tape, &batch, obj, None)?;
            mbm_sum += tape.value(vars.mbm.unwrap()).item().as_f64() * chunk.len() as f64;
        }
    }
    let n = pairs.len() as f64;
    let stats = EvalStats {
        accuracy: hits as f64 / n,
        class_loss: class_sum / n,
        mbm_loss: with_mbm.then_some(mbm_sum / n),
    };
    if !stats.class_loss.is_finite() || stats.mbm_loss.is_some_and(|m| !m.is_finite()) {
        return Err(Error::Numeric(format!("non-finite evaluation loss: {stats:?}")));
    }
    Ok(stats)
}

/// Validation metrics of `params` on the fold, as logged during a run.
pub fn evaluate_validation(
    params: &ModelParams<f32>,
    data: &RunData,
    cfg: &TrainConfig,
) -> Result<EvalStats> {
    evaluate(
        params,
        data,
        &data.fold.val,
        head_of(cfg),
        cfg.uses_mbm(),
        data.fold.fold.seed,
    )
}

/// A finished run: per-epoch metrics and the weights after the best epoch
/// (highest validation accuracy, earliest on ties).
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub heldout: u32,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best_mbm_val_loss: Option<f64>,
    pub best_params: ModelParams<f32>,
}

impl RunOutcome {
    pub fn checkpoint_meta(&self, cfg: &TrainConfig) -> CheckpointMeta {
        CheckpointMeta {
            regimen: cfg.regimen.name().to_string(),
            fold: Some(self.heldout),
            epoch: Some(self.best_epoch),
            seed: cfg.seed,
            val_accuracy: Some(self.best_val_acc),
        }
    }
}

/// Train `params` for `cfg.epochs` epochs, evaluating after each.
pub fn train_run(
    mut params: ModelParams<f32>,
    data: &RunData,
    cfg: &TrainConfig,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if !params.config.same_shapes(&cfg.model) {
        return Err(Error::Config(
            "model parameters do not match the configured architecture".into(),
        ));
    }
    let seed = run_seed(cfg, data.heldout());
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Option<f64>, ModelParams<f32>)> = None;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let stats = train_epoch(&mut params, data, cfg, seed, epoch)?;
        let val = evaluate_validation(&params, data, cfg)?;
        let seconds = if cfg.record_timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let pre = cfg.regimen.is_pretrain();
        let row = EpochMetrics {
            epoch,
            train_ntp: if pre { stats.class_loss } else { None },
            train_mbm: stats.mbm_loss,
            train_sg: if pre { None } else { stats.class_loss },
            train_total: stats.total,
            val_ntp_acc: pre.then_some(val.accuracy),
            val_mbm_loss: val.mbm_loss,
            val_sg_acc: (!pre).then_some(val.accuracy),
            seconds,
        };
        log::info!(
            "fold {} epoch {epoch}: train {:.5} val acc {:.4}",
            data.heldout(),
            stats.total,
            val.accuracy
        );
        if best.as_ref().map_or(true, |b| val.accuracy > b.1) {
            best = Some((epoch, val.accuracy, val.mbm_loss, params.clone()));
        }
        metrics.push(row);
    }
    let (best_epoch, best_val_acc, best_mbm_val_loss, best_params) =
        best.expect("at least one epoch");
    Ok(RunOutcome {
        heldout: data.heldout(),
        metrics,
        best_epoch,
        best_val_acc,
        best_mbm_val_loss,
        best_params,
    })
}

/// Pretraining from a seeded random init.
pub fn pretrain_run(data: &RunData, cfg: &TrainConfig) -> Result<RunOutcome> {
    if !cfg.regimen.is_pretrain() {
        return Err(Error::Config(format!(
            "{} is not a pretraining regimen",
            cfg.regimen.name()
        )));
    }
    let params = ModelParams::init(&cfg.model, run_seed(cfg, data.heldout()))?;
    train_run(params, data, cfg)
}

/// How a same-genre run starts.
#[derive(Clone, Debug)]
pub enum FinetuneInit {
    /// `PSTX` bytes of a pretrained model; the same-genre block is redrawn.
    Checkpoint(Vec<u8>),
    Fresh,
}

/// Same-genre training with every parameter updated.
pub fn finetune_run(data: &RunData, cfg: &TrainConfig, init: &FinetuneInit) -> Result<RunOutcome> {
    let expected = match init {
        FinetuneInit::Checkpoint(_) => Regimen::FinetuneSg,
        FinetuneInit::Fresh => Regimen::FreshSg,
    };
    if cfg.regimen != expected {
        return Err(Error::Config(format!(
            "regimen {} does not match the {} initialization",
            cfg.regimen.name(),
            expected.name()
        )));
    }
    let params = initial_params(data.heldout(), cfg, init)?;
    train_run(params, data, cfg)
}

/// Weights a same-genre run starts from, before any step.
pub fn initial_params(heldout: u32, cfg: &TrainConfig, init: &FinetuneInit) -> Result<ModelParams<f32>> {
    let seed = run_seed(cfg, heldout);
    match init {
        FinetuneInit::Checkpoint(bytes) => ModelParams::for_finetune(bytes, &cfg.model, seed),
        FinetuneInit::Fresh => ModelParams::init(&cfg.model, seed),
    }
}
