use std::collections::BTreeMap;

use super::{ce_loss, stack, ForwardOutput, Model};
use crate::autodiff::{Graph, Var};
use crate::car::{car_parts, car_total, CarConfig, CarParts};
use crate::centers::{flatten_batch, LabelField};
use crate::error::{Error, Result};
use crate::nn::{Binder, Mode};
use crate::tensor::Tensor;

/// One image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]`.
    pub image: Tensor,
    pub labels: LabelField,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    /// Compare upsampled logits with full-resolution labels; otherwise the
    /// labels are downsampled to the logit grid.
    pub ce_full_res: bool,
    pub norm_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            poly_power: 0.9,
            max_iter: 300,
            batch_size: 8,
            ce_full_res: true,
            norm_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.base_lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.poly_power >= 0.0
            && self.max_iter > 0
            && self.batch_size > 0
            && (0.0..=1.0).contains(&self.norm_momentum);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("train_config", format!("out-of-range value in {self:?}")))
        }
    }
}

/// `base · (1 − iter/max)^power`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    let frac = 1.0 - (iter.min(max_iter) as f64) / max_iter as f64;
    base * frac.powf(power)
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>, lr: f64, tc: &TrainConfig) -> Result<()> {
        for (name, grad) in grads {
            let p = model.params.get_mut(name)?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            for ((vi, &gi), pi) in v.data_mut().iter_mut().zip(grad.data()).zip(p.data_mut()) {
                *vi = tc.momentum * *vi + gi + tc.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub iter: usize,
    pub lr: f64,
    pub ce: f64,
    pub intra: f64,
    pub c2c: f64,
    pub c2p: f64,
    pub total: f64,
}

/// The training graph of one batch: forward pass, CE, and (when enabled)
/// CAR on the mixer features.
pub struct LossGraph {
    pub graph: Graph,
    pub forward: ForwardOutput,
    pub ce: Var,
    pub car: Option<CarParts>,
    pub total: Var,
}

pub fn build_loss_graph(
    model: &Model,
    b: &mut Binder<'_>,
    batch: &[Sample],
    car: &CarConfig,
    tc: &TrainConfig,
) -> Result<LossGraph> {
    let first = batch.first().ok_or_else(|| Error::invalid("train_step", "empty batch"))?;
    let images: Vec<Tensor> = batch.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<LabelField> = batch.iter().map(|s| s.labels.clone()).collect();
    let (h, w) = (first.labels.height(), first.labels.width());

    let mut g = Graph::new();
    let x = g.constant(stack(&images)?);
    let forward = model.forward(&mut g, b, x)?;
    let logits = if tc.ce_full_res {
        g.bilinear_resize(forward.logits, h, w)?
    } else {
        forward.logits
    };
    let ce = ce_loss(&mut g, logits, &labels)?.value;
    let mut total = ce;
    let mut parts = None;
    if car.is_enabled() {
        let pair = flatten_batch(&mut g, forward.features, &labels)?;
        let (_, p) = car_parts(&mut g, &pair, car)?;
        let reg = car_total(&mut g, &p, car)?;
        total = g.add(total, reg)?;
        parts = Some(p);
    }
    Ok(LossGraph {
        graph: g,
        forward,
        ce,
        car: parts,
        total,
    })
}

/// One optimizer step on `batch`. CAR is applied to the mixer features
/// when any of its weights is non-zero.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    batch: &[Sample],
    car: &CarConfig,
    tc: &TrainConfig,
    iter: usize,
) -> Result<StepMetrics> {
    let mut b = Binder::new(&model.params, true, Mode::Train);
    let lg = build_loss_graph(model, &mut b, batch, car, tc)?;
    let g = &lg.graph;
    let [intra, c2c, c2p] = lg.car.map_or([0.0; 3], |p| p.values(g));
    let metrics = StepMetrics {
        iter,
        lr: poly_lr(tc.base_lr, iter, tc.max_iter, tc.poly_power),
        ce: g.value(lg.ce).item(),
        intra,
        c2c,
        c2p,
        total: g.value(lg.total).item(),
    };
    if !metrics.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at iteration {iter}: ce={} intra={} c2c={} c2p={}",
            metrics.ce, metrics.intra, metrics.c2c, metrics.c2p
        )));
    }

    let grads = g.backward(lg.total)?;
    let named = b.gradients(g, &grads);
    if let Some((name, _)) = named.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{name}` at iteration {iter}")));
    }
    let stats = b.take_stats();
    drop(b);
    opt.step(model, &named, metrics.lr, tc)?;
    model.params.update_running_stats(&stats, tc.norm_momentum)?;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0.01, 0, 100, 0.9), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100, 0.9), 0.0);
        assert!((poly_lr(1.0, 50, 100, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_update() {
        let mut m = Model::new(ModelConfig::toy(2), 0).unwrap();
        let before = m.params.get("head.bias").unwrap().clone();
        let grads = BTreeMap::from([("head.bias".to_string(), Tensor::ones(&[2]))]);
        let tc = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = Sgd::new();
        opt.step(&mut m, &grads, 0.1, &tc).unwrap();
        opt.step(&mut m, &grads, 0.1, &tc).unwrap();
        // v1 = 1, v2 = 1.9 → total step 0.29
        let after = m.params.get("head.bias").unwrap();
        for (a, b) in after.data().iter().zip(before.data()) {
            assert!((b - a - 0.29).abs() < 1e-12);
        }
    }

    #[test]
    fn train_step_reduces_loss_on_fixed_batch() {
        let mut m = Model::new(ModelConfig::toy(2), 3).unwrap();
        let mut labels = vec![0u8; 32 * 32];
        for (i, l) in labels.iter_mut().enumerate() {
            if i % 32 >= 16 {
                *l = 1;
            }
        }
        let image = Tensor::new(
            &[32, 32, 3],
            labels.iter().flat_map(|&l| [l as f64, 0.5, 1.0 - l as f64]).collect(),
        )
        .unwrap();
        let batch = vec![Sample {
            image,
            labels: LabelField::new(32, 32, 2, labels).unwrap(),
        }];
        let tc = TrainConfig {
            max_iter: 40,
            base_lr: 0.05,
            ..TrainConfig::default()
        };
        let car = CarConfig::default();
        let mut opt = Sgd::new();
        let first = train_step(&mut m, &mut opt, &batch, &car, &tc, 0).unwrap();
        let mut last = first.clone();
        for it in 1..tc.max_iter {
            last = train_step(&mut m, &mut opt, &batch, &car, &tc, it).unwrap();
        }
        assert!(last.total < first.total, "{} vs {}", last.total, first.total);
    }
}
