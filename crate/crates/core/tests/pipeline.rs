//! End to end through the library: generate, write, preprocess from disk,
//! build pairs, train.

use std::sync::Arc;

use pairseq::dataset::extract_5seqs;
use pairseq::model::ModelConfig;
use pairseq::preprocess::{load_runs, preprocess_dir, AtlasTable};
use pairseq::synthgen::{generate, SynthSpec};
use pairseq::trainer::{pretrain_run, Regimen, RunData, TrainConfig};

fn spec() -> SynthSpec {
    SynthSpec {
        n_subjects: 2,
        n_voxels: 9,
        seed: 21,
        ..Default::default()
    }
}

#[test]
fn preprocessing_from_disk_matches_the_generator() {
    let tmp = tempfile::tempdir().unwrap();
    let out = generate(&spec()).unwrap();
    out.write(tmp.path()).unwrap();

    let atlas = AtlasTable::load(&tmp.path().join("atlas.txt")).unwrap();
    let again = tmp.path().join("again");
    let report = preprocess_dir(&atlas, &tmp.path().join("raw"), &again, 0.23, 9).unwrap();
    assert_eq!(report.runs.len(), out.runs.len());

    let mut expected = out.runs.clone();
    expected.sort_by(|a, b| a.meta.file_stem().cmp(&b.meta.file_stem()));
    let mut got = load_runs(&again).unwrap();
    got.sort_by(|a, b| a.meta.file_stem().cmp(&b.meta.file_stem()));
    assert_eq!(got, expected);
    assert_eq!(load_runs(&tmp.path().join("data")).unwrap().len(), expected.len());
}

#[test]
fn next_sequence_prediction_is_learnable() {
    let runs = generate(&SynthSpec { n_voxels: 21, ..spec() }).unwrap().runs;
    let seqs = Arc::new(extract_5seqs(&runs).unwrap());
    let mut cfg = TrainConfig::for_regimen(Regimen::NtpOnly);
    cfg.model = ModelConfig {
        d_model: 24,
        n_layers: 1,
        forward_expansion: 2,
        mbm_hidden: 16,
        dropout_p: 0.0,
        ..ModelConfig::default()
    };
    (cfg.n_train_cap, cfg.n_val_cap) = (1000, 200);
    (cfg.epochs, cfg.batch_size, cfg.lr) = (30, 16, 1e-3);
    cfg.record_timing = false;
    let data = RunData::build(seqs, &cfg, 4).unwrap();
    let out = pretrain_run(&data, &cfg).unwrap();
    let first = out.metrics[0].train_total;
    let last = out.metrics.last().unwrap().train_total;
    assert!(last < first, "training loss {first} -> {last}");
    // Chance is 0.5 with a standard error of 0.035 over 200 balanced pairs.
    assert!(out.best_val_acc >= 0.6, "best validation accuracy {}", out.best_val_acc);
}
