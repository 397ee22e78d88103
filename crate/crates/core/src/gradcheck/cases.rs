//! The standard gradient suite: every differentiable primitive plus the
//! composite losses and modules, each on small random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check, project, GradCheckConfig, GradCheckReport};
use crate::autodiff::{Graph, Var};
use crate::car::{car_parts, car_total, CarConfig};
use crate::centers::{batch_centers, distribute_centers, flatten_pair, LabelField, IGNORE};
use crate::ejpu::{self, EjpuConfig, FeaturePyramid};
use crate::error::Result;
use crate::model::{ce_loss, Model, ModelConfig};
use crate::nn::{Binder, Mode, ParamStore};
use crate::saa::{saa_forward, AttentionConfig, SaaWeights};
use crate::tensor::Tensor;

type Runner = fn(u64, &GradCheckConfig) -> Result<GradCheckReport>;

/// A named check, parameterised by the seed of its random inputs.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub run: Runner,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseSummary {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uni(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Magnitudes in [0.2, 1] with random sign; keeps kinked ops off their kink.
fn off_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, 0.2, 1.0, r);
    for v in t.data_mut() {
        if r.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

fn positive(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 0.5, 1.5, r)
}

fn labels(h: usize, w: usize, n_class: usize, r: &mut ChaCha8Rng) -> LabelField {
    let mut l: Vec<u8> = (0..h * w)
        .map(|_| if r.random::<f64>() < 0.15 { IGNORE } else { r.random_range(0..n_class) as u8 })
        .collect();
    // every class present at least once
    for (k, slot) in l.iter_mut().take(n_class).enumerate() {
        *slot = k as u8;
    }
    LabelField::new(h, w, n_class, l).expect("valid labels")
}

/// Checks `f(inputs)` after projecting its output to a scalar.
fn projected<F>(inputs: Vec<Tensor>, seed: u64, cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check(
        &inputs,
        |g, v| {
            let out = f(g, v)?;
            project(g, out, seed)
        },
        cfg,
    )
}

macro_rules! case {
    ($name:literal, |$seed:ident, $cfg:ident| $body:expr) => {
        GradCase {
            name: $name,
            run: |$seed, $cfg| $body,
        }
    };
}

fn car_case(seed: u64, cfg: &GradCheckConfig, pick: fn(&crate::car::CarParts) -> Var) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = Tensor::uniform(&[4, 4, 3], -1.5, 1.5, &mut r);
    let field = labels(4, 4, 3, &mut r);
    check(
        &[x],
        |g, v| {
            let pair = flatten_pair(g, v[0], &field)?;
            let (_, parts) = car_parts(g, &pair, &CarConfig::default())?;
            Ok(pick(&parts))
        },
        cfg,
    )
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        stage_channels: [2, 2, 3, 3],
        decoder_width: 2,
        out_channels: 4,
        heads: 2,
        n_class: 3,
        ..ModelConfig::toy(3)
    }
}

fn ejpu_case(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let ecfg = EjpuConfig {
        width: 2,
        out_channels: 6,
        dilations: vec![1, 2],
        calibration_std: 0.5,
    };
    let mut store = ParamStore::new();
    ejpu::init(&mut store, "e", &[2, 3, 4], &ecfg, &mut r);
    let top = uni(&[2, 1, 1, 4], &mut r);
    let names = ["e.calib.conv", "e.level0.conv", "e.sep1.depthwise", "e.cpm.proj"];
    let mut inputs = vec![uni(&[2, 4, 4, 2], &mut r), uni(&[2, 2, 2, 3], &mut r)];
    inputs.extend(names.iter().map(|n| store.get(n).cloned().expect("initialised")));
    // The top level is held constant: its JPU path is cut on purpose, so a
    // finite difference would see a dependency the adjoint deliberately drops.
    projected(inputs, seed, cfg, |g, v| {
        let mut b = Binder::new(&store, false, Mode::Train);
        for (name, &var) in names.iter().zip(&v[2..]) {
            b.bind(*name, var);
        }
        let t = g.constant(top.clone());
        let pyr = FeaturePyramid {
            levels: vec![v[0], v[1], t],
        };
        ejpu::ejpu_forward(g, &mut b, "e", &pyr, &ecfg)
    })
}

fn saa_case(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let acfg = AttentionConfig::new(4, 2)?;
    let mut inputs = vec![uni(&[1, 3, 4, 4], &mut r), Tensor::uniform(&[3, 3, 1, 4], -0.5, 0.5, &mut r)];
    for _ in 0..4 {
        inputs.push(uni(&[1, 1, 4, 4], &mut r));
    }
    projected(inputs, seed, cfg, |g, v| {
        let w = SaaWeights {
            cpe: v[1],
            query: v[2],
            key: v[3],
            value: v[4],
            out: v[5],
        };
        Ok(saa_forward(g, v[0], &w, &acfg)?.out)
    })
}

fn backbone_case(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let model = Model::new(tiny_model_config(), seed)?;
    let names = ["backbone.stage2.weight", "backbone.stage3.weight", "backbone.stage4.bias"];
    let mut inputs = vec![uni(&[1, 32, 32, 3], &mut r)];
    inputs.extend(names.iter().map(|n| model.params.get(n).cloned().expect("initialised")));
    projected(inputs, seed, cfg, |g, v| {
        let mut b = Binder::new(&model.params, false, Mode::Eval);
        for (name, &var) in names.iter().zip(&v[1..]) {
            b.bind(*name, var);
        }
        let levels = model.backbone_forward(g, &mut b, v[0])?;
        let flat: Vec<Var> = levels
            .iter()
            .map(|&l| {
                let n = g.value(l).len();
                g.reshape(l, &[n])
            })
            .collect::<Result<_>>()?;
        g.concat(&flat, 0)
    })
}

fn head_case(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let model = Model::new(tiny_model_config(), seed)?;
    let inputs = vec![uni(&[2, 2, 3, 4], &mut r), uni(&[1, 1, 4, 3], &mut r), uni(&[3], &mut r)];
    projected(inputs, seed, cfg, |g, v| {
        let mut b = Binder::new(&model.params, false, Mode::Eval);
        b.bind("head.weight", v[1]);
        b.bind("head.bias", v[2]);
        model.head_logits(g, &mut b, v[0])
    })
}

/// CE plus CAR on the full network in training mode, w.r.t. mixer and head
/// weights. Kernels feeding a batch norm are left to the module cases: the
/// norm makes the loss scale-invariant in them, so at their small init a
/// fixed step moves post-norm ReLUs across their kink.
fn model_case(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let model = Model::new(tiny_model_config(), seed)?;
    let image = uni(&[2, 32, 32, 3], &mut r);
    let fields = [labels(32, 32, 3, &mut r), labels(32, 32, 3, &mut r)];
    let names = ["head.weight", "saa.query", "saa.value", "saa.cpe"];
    let inputs: Vec<Tensor> = names.iter().map(|n| model.params.get(n).cloned().expect("initialised")).collect();
    check(
        &inputs,
        |g, v| {
            let mut b = Binder::new(&model.params, false, Mode::Train);
            for (name, &var) in names.iter().zip(v) {
                b.bind(*name, var);
            }
            let x = g.constant(image.clone());
            let out = model.forward(g, &mut b, x)?;
            let logits = g.bilinear_resize(out.logits, 32, 32)?;
            let ce = ce_loss(g, logits, &fields)?;
            let pair = crate::centers::flatten_batch(g, out.features, &fields)?;
            let car = CarConfig::default();
            let (_, parts) = car_parts(g, &pair, &car)?;
            let reg = car_total(g, &parts, &car)?;
            g.add(ce.value, reg)
        },
        cfg,
    )
}

pub fn cases() -> Vec<GradCase> {
    vec![
        case!("add", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[3, 4], &mut r), uni(&[4], &mut r)], s, c, |g, v| g.add(v[0], v[1]))
        }),
        case!("sub", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[2, 3], &mut r), uni(&[2, 1], &mut r)], s, c, |g, v| g.sub(v[0], v[1]))
        }),
        case!("mul", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[2, 3, 2], &mut r), uni(&[3, 1], &mut r)], s, c, |g, v| g.mul(v[0], v[1]))
        }),
        case!("div", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[3, 2], &mut r), positive(&[2], &mut r)], s, c, |g, v| g.div(v[0], v[1]))
        }),
        case!("scale", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[5], &mut r)], s, c, |g, v| Ok(g.scale(v[0], -1.7)))
        }),
        case!("add_scalar", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[5], &mut r)], s, c, |g, v| Ok(g.add_scalar(v[0], 0.3)))
        }),
        case!("abs", |s, c| {
            let mut r = rng(s);
            projected(vec![off_zero(&[6], &mut r)], s, c, |g, v| Ok(g.abs(v[0])))
        }),
        case!("relu", |s, c| {
            let mut r = rng(s);
            projected(vec![off_zero(&[6], &mut r)], s, c, |g, v| Ok(g.relu(v[0])))
        }),
        case!("hinge", |s, c| {
            let mut r = rng(s);
            let x = off_zero(&[6], &mut r).map(|v| v + 0.25);
            projected(vec![x], s, c, |g, v| Ok(g.hinge(v[0], 0.25)))
        }),
        case!("pow", |s, c| {
            let mut r = rng(s);
            projected(vec![positive(&[5], &mut r)], s, c, |g, v| Ok(g.powf(v[0], -0.5)))
        }),
        case!("square", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[5], &mut r)], s, c, |g, v| Ok(g.square(v[0])))
        }),
        case!("sum_axis", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[2, 3, 4], &mut r)], s, c, |g, v| g.sum_axis(v[0], 1))
        }),
        case!("mean_axis", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[2, 3, 4], &mut r)], s, c, |g, v| g.mean_axis(v[0], 2))
        }),
        case!("sum_mean", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[3, 3], &mut r)], s, c, |g, v| {
                let a = g.sum(v[0]);
                let b = g.mean(v[0]);
                g.mul(a, b)
            })
        }),
        case!("reshape", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[2, 6], &mut r)], s, c, |g, v| g.reshape(v[0], &[3, 4]))
        }),
        case!("permute", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[2, 3, 4], &mut r)], s, c, |g, v| g.permute(v[0], &[2, 0, 1]))
        }),
        case!("transpose", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[3, 5], &mut r)], s, c, |g, v| g.transpose(v[0]))
        }),
        case!("broadcast_to", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[3, 1], &mut r)], s, c, |g, v| g.broadcast_to(v[0], &[2, 3, 4]))
        }),
        case!("matmul", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[4, 5], &mut r), uni(&[5, 3], &mut r)], s, c, |g, v| g.matmul(v[0], v[1]))
        }),
        case!("bmm", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[2, 3, 4], &mut r), uni(&[2, 4, 2], &mut r)], s, c, |g, v| g.bmm(v[0], v[1]))
        }),
        case!("softmax", |s, c| {
            let mut r = rng(s);
            projected(vec![Tensor::uniform(&[3, 4], -2.0, 2.0, &mut r)], s, c, |g, v| g.softmax(v[0], 1))
        }),
        case!("log_softmax", |s, c| {
            let mut r = rng(s);
            projected(vec![Tensor::uniform(&[3, 4], -2.0, 2.0, &mut r)], s, c, |g, v| g.log_softmax(v[0], 0))
        }),
        case!("conv2d", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[1, 4, 5, 2], &mut r), uni(&[3, 3, 2, 3], &mut r)], s, c, |g, v| {
                g.conv2d(v[0], v[1], 1, 1, 1)
            })
        }),
        case!("conv2d_strided", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[2, 5, 4, 2], &mut r), uni(&[3, 3, 2, 2], &mut r)], s, c, |g, v| {
                g.conv2d(v[0], v[1], 2, 1, 1)
            })
        }),
        case!("conv2d_dilated", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[1, 6, 6, 2], &mut r), uni(&[3, 3, 2, 2], &mut r)], s, c, |g, v| {
                g.conv2d(v[0], v[1], 1, 2, 1)
            })
        }),
        case!("conv2d_grouped", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[1, 4, 4, 4], &mut r), uni(&[3, 3, 2, 4], &mut r)], s, c, |g, v| {
                g.conv2d(v[0], v[1], 1, 1, 2)
            })
        }),
        case!("bilinear_up", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[1, 2, 3, 2], &mut r)], s, c, |g, v| g.bilinear_resize(v[0], 5, 7))
        }),
        case!("bilinear_down", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[2, 6, 5, 1], &mut r)], s, c, |g, v| g.bilinear_resize(v[0], 3, 2))
        }),
        case!("concat", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[2, 2, 1], &mut r), uni(&[2, 2, 3], &mut r)], s, c, |g, v| g.concat(&[v[0], v[1]], 2))
        }),
        case!("index_select", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[4, 3], &mut r)], s, c, |g, v| g.index_select(v[0], 0, &[3, 1, 1]))
        }),
        case!("global_avg_pool", |s, c| {
            let mut r = rng(s);
            projected(vec![uni(&[2, 3, 2, 3], &mut r)], s, c, |g, v| g.global_avg_pool(v[0]))
        }),
        case!("batch_norm", |s, c| {
            let mut r = rng(s);
            let mut store = ParamStore::new();
            store.init_norm("bn", 3);
            projected(vec![uni(&[2, 2, 2, 3], &mut r), positive(&[3], &mut r)], s, c, |g, v| {
                let mut b = Binder::new(&store, false, Mode::Train);
                b.bind("bn.gamma", v[1]);
                b.batch_norm(g, v[0], "bn")
            })
        }),
        case!("class_centers", |s, c| {
            let mut r = rng(s);
            let field = labels(3, 4, 3, &mut r);
            projected(vec![uni(&[3, 4, 2], &mut r)], s, c, |g, v| {
                let pair = flatten_pair(g, v[0], &field)?;
                let centers = batch_centers(g, std::slice::from_ref(&pair), false)?;
                let spread = distribute_centers(g, &pair, &centers)?;
                let ms = g.sum(centers.mu);
                g.add(spread, ms)
            })
        }),
        case!("intra_c2p", |s, c| car_case(s, c, |p| p.intra.value)),
        case!("inter_c2c", |s, c| car_case(s, c, |p| p.c2c.value)),
        case!("inter_c2p", |s, c| car_case(s, c, |p| p.c2p.value)),
        case!("cross_entropy", |s, c| {
            let mut r = rng(s);
            let field = labels(3, 3, 3, &mut r);
            check(
                &[Tensor::uniform(&[1, 3, 3, 3], -2.0, 2.0, &mut r)],
                |g, v| Ok(ce_loss(g, v[0], std::slice::from_ref(&field))?.value),
                c,
            )
        }),
        GradCase { name: "saa", run: saa_case },
        GradCase { name: "ejpu", run: ejpu_case },
        GradCase { name: "head", run: head_case },
        GradCase { name: "backbone", run: backbone_case },
        GradCase { name: "model", run: model_case },
    ]
}

/// Runs every case over `seeds`, keeping the worst error per case.
pub fn run_cases(seeds: &[u64], cfg: &GradCheckConfig) -> Result<Vec<CaseSummary>> {
    cases()
        .into_iter()
        .map(|case| {
            let mut worst = 0.0f64;
            for &s in seeds {
                worst = worst.max((case.run)(s, cfg)?.max_rel_error());
            }
            Ok(CaseSummary {
                name: case.name,
                seeds: seeds.len(),
                max_rel_error: worst,
                passed: worst < cfg.tolerance,
            })
        })
        .collect()
}
