//! Confusion-matrix mIOU.

use card_core::centers::IGNORE;
use card_core::model::Model;
use card_core::Tensor;

use crate::dataset::Example;
use crate::error::{Error, Result};

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_class: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_class: usize) -> Self {
        ConfusionMatrix {
            n_class,
            counts: vec![0; n_class * n_class],
        }
    }

    /// Accumulates one label map; ignored ground-truth pixels are skipped.
    pub fn add(&mut self, gt: &[u8], pred: &[u8]) {
        for (&g, &p) in gt.iter().zip(pred) {
            if g != IGNORE {
                self.counts[g as usize * self.n_class + p as usize] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_class + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` for a class absent from both
    /// ground truth and prediction.
    pub fn iou(&self, k: usize) -> Option<f64> {
        let tp = self.get(k, k);
        let fnn: u64 = (0..self.n_class).map(|p| self.get(k, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.n_class).map(|g| self.get(g, k)).sum::<u64>() - tp;
        let denom = tp + fp + fnn;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn report(&self) -> Result<MiouReport> {
        let per_class: Vec<Option<f64>> = (0..self.n_class).map(|k| self.iou(k)).collect();
        let seen: Vec<f64> = per_class.iter().flatten().copied().collect();
        if seen.is_empty() {
            return Err(Error::config("mIOU of an empty split"));
        }
        Ok(MiouReport {
            mean: seen.iter().sum::<f64>() / seen.len() as f64,
            per_class,
            pixels: self.total(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub pixels: u64,
}

/// mIOU over the whole split and over its train-combination and held-out
/// subsets.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEval {
    pub all: MiouReport,
    pub train_combos: Option<MiouReport>,
    pub held_out: Option<MiouReport>,
}

const EVAL_BATCH: usize = 8;

pub fn eval_miou(model: &Model, split: &[Example]) -> Result<SplitEval> {
    if split.is_empty() {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    let n = model.cfg.n_class;
    let (mut seen, mut held) = (ConfusionMatrix::new(n), ConfusionMatrix::new(n));
    for chunk in split.chunks(EVAL_BATCH) {
        let images: Vec<Tensor> = chunk.iter().map(|e| e.sample.image.clone()).collect();
        let preds = model.predict(&images)?;
        for (ex, pred) in chunk.iter().zip(&preds) {
            let target = if ex.held_out { &mut held } else { &mut seen };
            target.add(ex.sample.labels.raw(), pred);
        }
    }
    let mut all = seen.clone();
    all.merge(&held);
    let sub = |m: &ConfusionMatrix| if m.total() > 0 { m.report().ok() } else { None };
    Ok(SplitEval {
        all: all.report()?,
        train_combos: sub(&seen),
        held_out: sub(&held),
    })
}
