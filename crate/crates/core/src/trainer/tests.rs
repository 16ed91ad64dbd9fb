use std::sync::Arc;

use super::*;
use crate::dataset::{extract_5seqs, FiveSeq};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use crate::numerics::Tape;
use crate::synthgen::{generate, SynthSpec};

fn seqs() -> Arc<Vec<FiveSeq>> {
    let runs = generate(&SynthSpec {
        n_subjects: 2,
        n_voxels: 9,
        seed: 5,
        ..Default::default()
    })
    .unwrap()
    .runs;
    Arc::new(extract_5seqs(&runs).unwrap())
}

fn small(regimen: Regimen) -> TrainConfig {
    let mut c = TrainConfig::for_regimen(regimen);
    c.model = ModelConfig {
        d_model: 12,
        n_layers: 1,
        n_heads: 2,
        forward_expansion: 2,
        mbm_hidden: 16,
        ..ModelConfig::default()
    };
    c.epochs = 3;
    c.batch_size = 16;
    c.n_train_cap = 64;
    c.n_val_cap = 32;
    c.lr = 1e-3;
    c.seed = 3;
    c.record_timing = false;
    c
}

fn same_params(a: &ModelParams<f32>, b: &ModelParams<f32>) -> bool {
    a.store.ids().all(|id| a.store.value(id).data() == b.store.value(id).data())
}

#[test]
fn runs_are_deterministic() {
    let s = seqs();
    let cfg = small(Regimen::Multitask);
    let data = RunData::build(s.clone(), &cfg, 2).unwrap();
    let a = pretrain_run(&data, &cfg).unwrap();
    let b = pretrain_run(&RunData::build(s, &cfg, 2).unwrap(), &cfg).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert!(same_params(&a.best_params, &b.best_params));
    assert!(a.metrics.iter().all(|m| m.train_mbm.is_some() && m.val_sg_acc.is_none()));
}

#[test]
fn different_seed_changes_the_run() {
    let s = seqs();
    let cfg = small(Regimen::Multitask);
    let mut other = cfg.clone();
    other.seed = 4;
    let a = pretrain_run(&RunData::build(s.clone(), &cfg, 0).unwrap(), &cfg).unwrap();
    let b = pretrain_run(&RunData::build(s, &other, 0).unwrap(), &other).unwrap();
    assert_ne!(a.metrics, b.metrics);
}

#[test]
fn zero_lr_freezes_weights_and_earliest_epoch_wins() {
    let s = seqs();
    let mut cfg = small(Regimen::Multitask);
    cfg.lr = 0.0;
    let data = RunData::build(s, &cfg, 1).unwrap();
    let init = ModelParams::init(&cfg.model, run_seed(&cfg, 1)).unwrap();
    let out = pretrain_run(&data, &cfg).unwrap();
    assert!(same_params(&init, &out.best_params));
    let accs: Vec<f64> = out.metrics.iter().map(|m| m.val_ntp_acc.unwrap()).collect();
    assert!(accs.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(out.best_epoch, 0);
}

fn grads_after_one_batch(cfg: &TrainConfig) -> ModelParams<f32> {
    let data = RunData::build(seqs(), cfg, 0).unwrap();
    let mut params = ModelParams::init(&cfg.model, 9).unwrap();
    let pairs: Vec<_> = data.fold.train.iter().take(4).collect();
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let head = if cfg.regimen.is_pretrain() { Head::Ntp } else { Head::Sg };
    let obj = Objective {
        head,
        class_weight: if cfg.regimen.is_pretrain() { cfg.alpha1 } else { 1.0 },
        mbm_weight: if cfg.regimen.is_pretrain() { cfg.alpha2 } else { 0.0 },
    };
    let masks = if obj.mbm_weight > 0.0 {
        MaskSource::Train { run_seed: 1, epoch: 0 }
    } else {
        MaskSource::None
    };
    let batch = prepare_batch(&cfg.model, &data, &pairs, &idx, head, masks).unwrap();
    let mut tape = Tape::new();
    let vars = batch_loss(&params, &mut tape, &batch, obj, None).unwrap();
    params.store.zero_grads();
    tape.backward(vars.total, &mut params.store).unwrap();
    params
}

fn block_grad_norm(p: &ModelParams<f32>, block: usize) -> f32 {
    p.block_ids(block)
        .into_iter()
        .flat_map(|id| p.store.grad(id).data().to_vec())
        .map(|g| g * g)
        .sum()
}

#[test]
fn inactive_heads_receive_no_gradient() {
    let ntp = grads_after_one_batch(&small(Regimen::NtpOnly));
    assert!(block_grad_norm(&ntp, 1) > 0.0);
    assert_eq!(block_grad_norm(&ntp, 2), 0.0);
    assert_eq!(block_grad_norm(&ntp, 3), 0.0);

    let multi = grads_after_one_batch(&small(Regimen::Multitask));
    assert!(block_grad_norm(&multi, 1) > 0.0);
    assert!(block_grad_norm(&multi, 2) > 0.0);
    assert_eq!(block_grad_norm(&multi, 3), 0.0);

    let sg = grads_after_one_batch(&small(Regimen::FreshSg));
    assert_eq!(block_grad_norm(&sg, 1), 0.0);
    assert_eq!(block_grad_norm(&sg, 2), 0.0);
    assert!(block_grad_norm(&sg, 3) > 0.0);
    let enc: f32 = sg
        .encoder_ids()
        .into_iter()
        .flat_map(|id| sg.store.grad(id).data().to_vec())
        .map(|g| g.abs())
        .sum();
    assert!(enc > 0.0);
}

#[test]
fn checkpoint_reproduces_best_validation_accuracy() {
    let cfg = small(Regimen::Multitask);
    let data = RunData::build(seqs(), &cfg, 4).unwrap();
    let out = pretrain_run(&data, &cfg).unwrap();
    let bytes = save_checkpoint(&out.best_params, &out.checkpoint_meta(&cfg));
    let (loaded, meta) = load_checkpoint(&bytes).unwrap();
    assert_eq!(meta.epoch, Some(out.best_epoch));
    let stats = evaluate_validation(&loaded, &data, &cfg).unwrap();
    assert_eq!(stats.accuracy, out.best_val_acc);
    assert_eq!(stats.mbm_loss, out.best_mbm_val_loss);
    assert_eq!(out.metrics[out.best_epoch].val_ntp_acc, Some(out.best_val_acc));
    let max = out.metrics.iter().map(|m| m.selection_accuracy()).fold(0.0, f64::max);
    assert_eq!(out.best_val_acc, max);
}

#[test]
fn finetune_keeps_encoder_and_redraws_sg_block() {
    let pre_cfg = small(Regimen::Multitask);
    let pre = ModelParams::init(&pre_cfg.model, 77).unwrap();
    let bytes = save_checkpoint(&pre, &Default::default());
    let cfg = small(Regimen::FinetuneSg);
    let init = initial_params(0, &cfg, &FinetuneInit::Checkpoint(bytes.clone())).unwrap();
    for id in init.encoder_ids() {
        assert_eq!(init.store.value(id).data(), pre.store.value(id).data());
    }
    let b3 = init.block_ids(3)[0];
    assert_ne!(init.store.value(b3).data(), pre.store.value(b3).data());

    let data = RunData::build(seqs(), &cfg, 0).unwrap();
    let out = finetune_run(&data, &cfg, &FinetuneInit::Checkpoint(bytes)).unwrap();
    assert!(out.metrics.iter().all(|m| m.val_sg_acc.is_some() && m.train_ntp.is_none()));
    assert!(finetune_run(&data, &cfg, &FinetuneInit::Fresh).is_err());
}

#[test]
fn finetune_rejects_mismatched_checkpoint() {
    let mut other = small(Regimen::Multitask).model;
    other.n_layers = 2;
    let bytes = save_checkpoint(&ModelParams::init(&other, 1).unwrap(), &Default::default());
    let cfg = small(Regimen::FinetuneSg);
    assert!(initial_params(0, &cfg, &FinetuneInit::Checkpoint(bytes)).is_err());
}

#[test]
fn crossval_writes_run_directories() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Regimen::NtpOnly);
    cfg.epochs = 1;
    let ctx = RunContext {
        root: dir.path().to_path_buf(),
        command: "test".into(),
        inputs: vec![],
    };
    let s = seqs();
    let summary = crossval(s.clone(), &cfg, &[0, 5], &CrossvalInit::Random, 2, Some(&ctx)).unwrap();
    assert_eq!(summary.rows.len(), 2);
    assert_eq!(summary.rows[1].heldout_run, 5);
    let run = dir.path().join("ntp_only").join("5");
    for f in ["config.json", "manifest.json", "dataset.json", "metrics.csv", "best.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let m = load_manifest(&run).unwrap();
    assert!(m.finished_unix.is_some());
    assert_eq!(m.seeds.run, run_seed(&cfg, 5));
    assert_eq!(m.seeds.dataset, 8);

    let mut sg = small(Regimen::FinetuneSg);
    sg.epochs = 1;
    let init = CrossvalInit::CheckpointDir(dir.path().join("ntp_only"));
    let fine = crossval(s.clone(), &sg, &[5], &init, 1, None).unwrap();
    assert_eq!(fine.rows.len(), 1);
    assert!(crossval(s.clone(), &sg, &[3], &init, 1, None).is_err());
    assert!(crossval(s, &cfg, &[12], &CrossvalInit::Random, 1, None).is_err());
}

#[test]
fn parallel_jobs_match_sequential() {
    let mut cfg = small(Regimen::Multitask);
    cfg.epochs = 1;
    let s = seqs();
    let a = crossval(s.clone(), &cfg, &[0, 1, 2], &CrossvalInit::Random, 1, None).unwrap();
    let b = crossval(s, &cfg, &[0, 1, 2], &CrossvalInit::Random, 3, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tiny_grid_search_ranks_all_configs() {
    let mut cfg = small(Regimen::Multitask);
    cfg.epochs = 1;
    let space = GridSpace {
        alphas: vec![(0.1, 0.9), (0.5, 0.5)],
        lrs: vec![1e-3],
        n_heads: vec![2, 5],
        forward_expansion: vec![2],
        n_layers: vec![1],
    };
    let (ranked, skipped) = grid_search(seqs(), &cfg, &space, 0, 1).unwrap();
    assert_eq!(ranked.len(), 2);
    assert_eq!(skipped.len(), 2);
    assert!(ranked[0].best_val_acc >= ranked[1].best_val_acc);
}
