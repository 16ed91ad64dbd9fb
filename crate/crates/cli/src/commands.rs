use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use pairseq::dataset::{build_fold, extract_5seqs, FiveSeq, FoldSpec, Task};
use pairseq::gradcheck::{run_all, GradCheckConfig};
use pairseq::model::ModelParams;
use pairseq::preprocess::{list_vxts, load_runs, preprocess_dir, AtlasTable};
use pairseq::synthgen::{centroid_genre_accuracy, generate, SynthSpec};
use pairseq::trainer::{
    self, all_folds, digest_files, evaluate_validation, load_manifest, CrossvalInit, FoldRow,
    GridSpace, Regimen, RunContext, RunData, RunDir, Summary, TrainConfig,
};
use pairseq::{Error, Result};

use crate::config::{layered, train_config};
use crate::*;

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn run_root(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_seqs(data: &Path) -> Result<Arc<Vec<FiveSeq>>> {
    let runs = load_runs(data)?;
    Ok(Arc::new(extract_5seqs(&runs)?))
}

fn parse_regimen(s: &str) -> Result<Regimen> {
    match s {
        "multitask" => Ok(Regimen::Multitask),
        "ntp-only" | "ntp_only" => Ok(Regimen::NtpOnly),
        "finetune" | "finetune_sg" => Ok(Regimen::FinetuneSg),
        "fresh" | "fresh_sg" => Ok(Regimen::FreshSg),
        other => Err(Error::Config(format!(
            "unknown regimen {other:?}; expected multitask, ntp-only, finetune or fresh"
        ))),
    }
}

impl From<PretrainRegimen> for Regimen {
    fn from(r: PretrainRegimen) -> Self {
        match r {
            PretrainRegimen::Multitask => Regimen::Multitask,
            PretrainRegimen::NtpOnly => Regimen::NtpOnly,
        }
    }
}

fn config_for(t: &TrainFlags, regimen: Regimen) -> Result<TrainConfig> {
    train_config(regimen, t.config.as_deref(), t.seed, t.lr, t.epochs)
}

/// Digests of the data runs, the config file and any checkpoints, in
/// that order.
fn run_context(t: &TrainFlags, argv: &str, extra: &[PathBuf]) -> Result<RunContext> {
    let mut paths = list_vxts(&t.data)?;
    paths.extend(t.config.iter().cloned());
    paths.extend(extra.iter().cloned());
    Ok(RunContext {
        root: run_root(&t.out),
        command: argv.to_string(),
        inputs: digest_files(&paths)?,
    })
}

/// A rerun into an existing run directory notes inputs that changed since
/// its manifest was written.
fn check_previous(ctx: &RunContext, cfg: &TrainConfig, fold: u32) {
    let dir = RunDir::path_for(&ctx.root, cfg, fold);
    if let Ok(m) = load_manifest(&dir) {
        match m.changed_inputs() {
            Ok(c) if !c.is_empty() => {
                log::warn!("{}: inputs changed since the previous run: {c:?}", dir.display())
            }
            Ok(_) => log::info!("{}: overwriting a run over unchanged inputs", dir.display()),
            Err(e) => log::warn!("{}: previous inputs unreadable: {e}", dir.display()),
        }
    }
}

/// Rows without the average line.
fn print_rows(summary: &Summary) {
    let csv = summary.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    for l in &lines[..lines.len() - 1] {
        println!("{l}");
    }
}

pub fn preprocess(a: PreprocessArgs) -> Result<u8> {
    let atlas = AtlasTable::load(&a.atlas)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let report = preprocess_dir(&atlas, &a.raw, &a.out, a.threshold, a.target_voxels)?;
    print!("{}", json(&report)?);
    Ok(0)
}

pub fn synth_gen(a: SynthArgs) -> Result<u8> {
    let mut spec: SynthSpec = layered(&SynthSpec::default(), a.config.as_deref())?;
    if let Some(v) = a.subjects {
        spec.n_subjects = v;
    }
    if let Some(v) = a.voxels {
        spec.n_voxels = v;
    }
    if let Some(v) = a.strength {
        spec.genre_signal_strength = v;
    }
    if let Some(v) = a.noise {
        spec.noise_sd = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    spec.validate()?;
    if a.print_config {
        print!("{}", json(&spec)?);
        return Ok(0);
    }
    let out = generate(&spec)?;
    out.write(&a.out)?;
    write(&a.out.join("synth_spec.json"), &json(&spec)?)?;
    println!(
        "{} runs, {} voxels, centroid genre accuracy {:.4}",
        out.runs.len(),
        spec.n_voxels,
        centroid_genre_accuracy(&out.runs)
    );
    Ok(0)
}

pub fn build_dataset(a: DatasetArgs) -> Result<u8> {
    let seqs = load_seqs(&a.data)?;
    let task = match a.task {
        TaskArg::Ntp => Task::Ntp,
        TaskArg::Sg => Task::Sg,
    };
    let spec = FoldSpec {
        heldout_run_id: a.fold,
        seed: a.seed,
        n_train_cap: a.train_cap,
        n_val_cap: a.val_cap,
    };
    let fold = build_fold(&seqs, task, &spec)?;
    write(&a.out, &json(&fold.manifest(&seqs))?)?;
    println!(
        "{} sequences, {} train pairs, {} validation pairs",
        seqs.len(),
        fold.train.len(),
        fold.val.len()
    );
    Ok(0)
}

fn single_run(
    t: &TrainFlags,
    cfg: &TrainConfig,
    fold: u32,
    init: CrossvalInit,
    argv: &str,
) -> Result<u8> {
    let ckpt: Vec<PathBuf> = init.checkpoint_path(fold).into_iter().collect();
    if let Some(p) = ckpt.first() {
        if !p.exists() {
            return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
        }
    }
    let ctx = run_context(t, argv, &ckpt)?;
    check_previous(&ctx, cfg, fold);
    let seqs = load_seqs(&t.data)?;
    let outcome = trainer::run_fold(seqs, cfg, fold, &init, Some(&ctx))?;
    print_rows(&Summary {
        regimen: cfg.regimen,
        n_layers: cfg.model.n_layers,
        rows: vec![FoldRow::from_outcome(&outcome)],
    });
    log::info!(
        "run directory {}",
        RunDir::path_for(&ctx.root, cfg, fold).display()
    );
    Ok(0)
}

pub fn pretrain(a: PretrainArgs, argv: &str) -> Result<u8> {
    let cfg = config_for(&a.train, a.regimen.into())?;
    if a.train.print_config {
        print!("{}", cfg.to_json());
        return Ok(0);
    }
    single_run(&a.train, &cfg, a.fold, CrossvalInit::Random, argv)
}

fn parse_init(s: &str) -> Result<(Regimen, CrossvalInit)> {
    if s == "fresh" {
        Ok((Regimen::FreshSg, CrossvalInit::Fresh))
    } else if let Some(p) = s.strip_prefix("checkpoint:") {
        Ok((Regimen::FinetuneSg, CrossvalInit::CheckpointFile(p.into())))
    } else {
        Err(Error::Config(format!(
            "--init must be checkpoint:PATH or fresh, got {s:?}"
        )))
    }
}

pub fn finetune(a: FinetuneArgs, argv: &str) -> Result<u8> {
    let (regimen, init) = parse_init(&a.init)?;
    let cfg = config_for(&a.train, regimen)?;
    if a.train.print_config {
        print!("{}", cfg.to_json());
        return Ok(0);
    }
    single_run(&a.train, &cfg, a.fold, init, argv)
}

pub fn crossval(a: CrossvalArgs, argv: &str) -> Result<u8> {
    let regimen = parse_regimen(&a.regimen)?;
    let cfg = config_for(&a.train, regimen)?;
    if a.train.print_config {
        print!("{}", cfg.to_json());
        return Ok(0);
    }
    let init = match (regimen, &a.checkpoints) {
        (Regimen::FinetuneSg, Some(dir)) => CrossvalInit::CheckpointDir(dir.clone()),
        (Regimen::FinetuneSg, None) => {
            return Err(Error::Config("finetune crossval needs --checkpoints DIR".into()))
        }
        (Regimen::FreshSg, _) => CrossvalInit::Fresh,
        _ => CrossvalInit::Random,
    };
    let folds = a.folds.clone().unwrap_or_else(all_folds);
    let ckpts: Vec<PathBuf> = folds.iter().filter_map(|&f| init.checkpoint_path(f)).collect();
    if let Some(p) = ckpts.iter().find(|p| !p.exists()) {
        return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
    }
    let ctx = run_context(&a.train, argv, &ckpts)?;
    for &f in &folds {
        check_previous(&ctx, &cfg, f);
    }
    let seqs = load_seqs(&a.train.data)?;
    let summary = trainer::crossval(seqs, &cfg, &folds, &init, a.jobs, Some(&ctx))?;
    let csv = summary.to_csv();
    let path = ctx.root.join(regimen.name()).join("summary.csv");
    write(&path, &csv)?;
    print!("{csv}");
    log::info!("summary written to {}", path.display());
    Ok(0)
}

pub fn grid_search(a: GridArgs) -> Result<u8> {
    let cfg = config_for(&a.train, a.regimen.into())?;
    let space: GridSpace = layered(&GridSpace::default(), a.space.as_deref())?;
    if a.train.print_config {
        print!("{}", json(&serde_json::json!({ "config": cfg, "space": space }))?);
        return Ok(0);
    }
    let seqs = load_seqs(&a.train.data)?;
    let (ranked, skipped) = trainer::grid_search(seqs, &cfg, &space, a.fold, a.jobs)?;
    for s in &skipped {
        eprintln!("notice: {s}");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &ranked {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let text = String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
        .expect("utf-8 csv");
    let path = run_root(&a.train.out)
        .join("grid")
        .join(format!("{}_fold{}.csv", cfg.regimen.name(), a.fold));
    write(&path, &text)?;
    print!("{text}");
    Ok(0)
}

pub fn grad_check(a: GradCheckArgs) -> Result<u8> {
    let mut cfg: GradCheckConfig = layered(&GradCheckConfig::default(), a.config.as_deref())?;
    if let Some(t) = a.tolerance {
        cfg.tolerance = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if a.print_config {
        print!("{}", json(&cfg)?);
        return Ok(0);
    }
    let reports = run_all(&cfg)?;
    // per check: (tensors, coordinates, kinks skipped, worst error, all passed)
    let mut by_check: BTreeMap<&str, (usize, usize, usize, f64, bool)> = BTreeMap::new();
    let order: Vec<&str> = reports.iter().fold(Vec::new(), |mut v, r| {
        if !v.contains(&r.check.as_str()) {
            v.push(&r.check);
        }
        v
    });
    for r in &reports {
        let e = by_check.entry(&r.check).or_insert((0, 0, 0, 0.0, true));
        e.0 += 1;
        e.1 += r.coordinates;
        e.2 += r.kinks_skipped;
        e.3 = e.3.max(r.max_rel_error);
        e.4 &= r.passed;
        if !r.passed {
            eprintln!(
                "FAIL {} {}: max relative error {:.3e} over {} coordinates",
                r.check, r.tensor, r.max_rel_error, r.coordinates
            );
        }
    }
    println!("check,tensors,coordinates,kinks_skipped,max_rel_error,passed");
    for name in order {
        let (t, c, k, err, ok) = by_check[name];
        println!("{name},{t},{c},{k},{err:.3e},{ok}");
    }
    let all = reports.iter().all(|r| r.passed);
    println!(
        "{} (tolerance {:e}, step {:e})",
        if all { "all checks passed" } else { "gradient check FAILED" },
        cfg.tolerance,
        cfg.step
    );
    Ok(if all { 0 } else { 4 })
}

pub fn eval(a: EvalArgs) -> Result<u8> {
    let regimen = parse_regimen(&a.regimen)?;
    let cfg = config_for(&a.train, regimen)?;
    if a.train.print_config {
        print!("{}", cfg.to_json());
        return Ok(0);
    }
    let bytes = std::fs::read(&a.checkpoint).map_err(|e| Error::io(&a.checkpoint, e))?;
    let (params, meta) = ModelParams::load_matching(&bytes, &cfg.model)?;
    let data = RunData::build(load_seqs(&a.train.data)?, &cfg, a.fold)?;
    let stats = evaluate_validation(&params, &data, &cfg)?;
    print!(
        "{}",
        json(&serde_json::json!({
            "checkpoint": meta,
            "fold": a.fold,
            "regimen": cfg.regimen,
            "val_accuracy": stats.accuracy,
            "val_class_loss": stats.class_loss,
            "val_mbm_loss": stats.mbm_loss,
        }))?
    );
    Ok(0)
}
