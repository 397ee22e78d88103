//! Training runs and their on-disk reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use card_core::model::{load_checkpoint, save_checkpoint, train_step, Model, Sample, Sgd, StepMetrics};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::{Dataset, Example};
use crate::error::{read_file, write_file, Error, Result};
use crate::maps::{class_dependency_map, DependencyMap};
use crate::metrics::{eval_miou, MiouReport, SplitEval};

/// Trains a fresh model on `train` with CAR on or off per `cfg`.
pub fn train(cfg: &RunConfig, train: &[Example]) -> Result<(Model, Vec<StepMetrics>)> {
    if train.is_empty() {
        return Err(Error::config("empty training split"));
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Sgd::new();
    let car = cfg.effective_car();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c4);
    let mut order: Vec<usize> = Vec::new();
    let bs = cfg.train.batch_size.min(train.len());
    let mut log = Vec::with_capacity(cfg.train.max_iter);
    for it in 0..cfg.train.max_iter {
        if order.len() < bs {
            let mut epoch: Vec<usize> = (0..train.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let batch: Vec<Sample> = order.drain(..bs).map(|i| train[i].sample.clone()).collect();
        log.push(train_step(&mut model, &mut opt, &batch, &car, &cfg.train, it)?);
    }
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub losses: Vec<StepMetrics>,
    pub eval: SplitEval,
    pub dependency: DependencyMap,
}

/// Train, then evaluate mIOU and the class dependency map on the test
/// split.
pub fn experiment(cfg: &RunConfig, ds: &Dataset) -> Result<(Model, RunReport)> {
    let (model, losses) = train(cfg, &ds.train)?;
    let eval = eval_miou(&model, &ds.test)?;
    let dependency = class_dependency_map(&model, &ds.test)?;
    Ok((
        model,
        RunReport {
            losses,
            eval,
            dependency,
        },
    ))
}

pub fn losses_csv(log: &[StepMetrics]) -> String {
    let mut s = String::from("iter,lr,ce,intra,c2c,c2p,total\n");
    for m in log {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", m.iter, m.lr, m.ce, m.intra, m.c2c, m.c2p, m.total);
    }
    s
}

pub fn eval_csv(eval: &SplitEval) -> String {
    let mut s = String::from("subset,class,iou\n");
    let mut rows = |name: &str, r: &MiouReport| {
        for (k, iou) in r.per_class.iter().enumerate() {
            let v = iou.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(s, "{name},{k},{v}");
        }
        let _ = writeln!(s, "{name},mean,{}", r.mean);
    };
    rows("all", &eval.all);
    if let Some(r) = &eval.train_combos {
        rows("train_combos", r);
    }
    if let Some(r) = &eval.held_out {
        rows("held_out", r);
    }
    s
}

/// Flat `key = value` summary in the config file syntax.
pub fn summary(report: &RunReport, artifacts: &[PathBuf]) -> String {
    let mut s = String::new();
    let last = report.losses.last();
    let opt = |r: &Option<MiouReport>| r.as_ref().map_or(String::from("nan"), |r| r.mean.to_string());
    let _ = writeln!(s, "iterations = {}", report.losses.len());
    if let Some(m) = last {
        let _ = writeln!(s, "final_ce = {}", m.ce);
        let _ = writeln!(s, "final_total = {}", m.total);
    }
    let _ = writeln!(s, "miou_all = {}", report.eval.all.mean);
    let _ = writeln!(s, "miou_train_combos = {}", opt(&report.eval.train_combos));
    let _ = writeln!(s, "miou_held_out = {}", opt(&report.eval.held_out));
    let _ = writeln!(s, "dependency_off_diagonal = {}", report.dependency.off_diagonal_mean());
    let names: Vec<String> = artifacts
        .iter()
        .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
        .collect();
    let _ = writeln!(s, "artifacts = {}", names.join(","));
    s
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";

pub fn write_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    save_checkpoint(model, &mut buf)?;
    write_file(path, &buf)
}

pub fn read_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Model> {
    let bytes = read_file(path)?;
    load_checkpoint(&mut bytes.as_slice(), &cfg.model).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Writes the resolved config, loss stream, evaluation, dependency map,
/// checkpoint and summary into `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, model: &Model, report: &RunReport) -> Result<Vec<PathBuf>> {
    let files: Vec<(&str, Vec<u8>)> = vec![
        ("config.txt", cfg.to_kv().into_bytes()),
        ("losses.csv", losses_csv(&report.losses).into_bytes()),
        ("eval.csv", eval_csv(&report.eval).into_bytes()),
        ("dependency.csv", report.dependency.to_csv().into_bytes()),
        ("dependency.pgm", crate::pnm::encode(&report.dependency.to_pgm(16))),
    ];
    let mut written = Vec::new();
    for (name, bytes) in files {
        let p = dir.join(name);
        write_file(&p, &bytes)?;
        written.push(p);
    }
    let ckpt = dir.join(CHECKPOINT_FILE);
    write_checkpoint(model, &ckpt)?;
    written.push(ckpt);
    let summary_path = dir.join("summary.txt");
    write_file(&summary_path, summary(report, &written).as_bytes())?;
    written.push(summary_path);
    Ok(written)
}
