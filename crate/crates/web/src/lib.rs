//! Browser demo for `card-core`. The plain functions here do the work and
//! are tested natively; the `#[wasm_bindgen]` wrappers only flatten their
//! results into `Float64Array`s for the page in `www/`.

use card_core::car::{car_parts, car_total, CarConfig};
use card_core::centers::{flatten_pair, LabelField};
use card_core::saa::{attention_flops, dense_attention_core, synced_axial_core, AttentionConfig, AttentionVariant};
use card_core::{Graph, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Classes in the loss explorer; features are 2-D so they can be drawn.
pub const EXPLORER_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExplorerParams {
    /// Radius of the circle the class means sit on.
    pub separation: f64,
    /// Per-class standard deviation around its mean.
    pub spread: f64,
    /// Moves class 1 toward class 0 (0 = apart, 1 = same mean).
    pub overlap: f64,
    pub points_per_class: usize,
    pub eps0: f64,
    pub eps1: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Explorer {
    /// `(intra, c2c, c2p, weighted total)`.
    pub losses: [f64; 4],
    /// Row-softmaxed center similarities, row-major.
    pub dependency: Vec<f64>,
    pub centers: Vec<[f64; 2]>,
    /// `(x, y, class, dx, dy)` with `(dx, dy)` the negative gradient of
    /// the total CAR loss at that point.
    pub points: Vec<[f64; 5]>,
}

/// Samples 2-D features for three classes and evaluates CAR on them.
pub fn explore(p: &ExplorerParams) -> Result<Explorer> {
    let n = p.points_per_class.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noise = Tensor::randn(&[EXPLORER_CLASSES * n, 2], 1.0, &mut rng);
    let mut means: Vec<[f64; 2]> = (0..EXPLORER_CLASSES)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / EXPLORER_CLASSES as f64;
            [p.separation * a.cos(), p.separation * a.sin()]
        })
        .collect();
    let t = p.overlap.clamp(0.0, 1.0);
    means[1] = [
        (1.0 - t) * means[1][0] + t * means[0][0],
        (1.0 - t) * means[1][1] + t * means[0][1],
    ];
    let mut feats = Vec::with_capacity(EXPLORER_CLASSES * n * 2);
    let mut labels = Vec::with_capacity(EXPLORER_CLASSES * n);
    for i in 0..EXPLORER_CLASSES * n {
        let k = i / n;
        feats.push(means[k][0] + p.spread * noise.data()[2 * i]);
        feats.push(means[k][1] + p.spread * noise.data()[2 * i + 1]);
        labels.push(k as u8);
    }

    let cfg = CarConfig {
        eps0: p.eps0,
        eps1: p.eps1,
        ..CarConfig::default()
    };
    cfg.validate()?;
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[1, labels.len(), 2], feats.clone())?);
    let field = LabelField::new(1, labels.len(), EXPLORER_CLASSES, labels.clone())?;
    let pair = flatten_pair(&mut g, x, &field)?;
    let (centers, parts) = car_parts(&mut g, &pair, &cfg)?;
    let total = car_total(&mut g, &parts, &cfg)?;
    let grads = g.backward(total)?;
    let gx = grads.get_or_zeros(x, &[1, labels.len(), 2]);

    let [intra, c2c, c2p] = parts.values(&g);
    let mu = g.value(centers.mu).clone();
    let centers: Vec<[f64; 2]> = mu.data().chunks(2).map(|c| [c[0], c[1]]).collect();
    let dependency = dependency_matrix(&centers);
    let points = labels
        .iter()
        .enumerate()
        .map(|(i, &k)| [feats[2 * i], feats[2 * i + 1], k as f64, -gx.data()[2 * i], -gx.data()[2 * i + 1]])
        .collect();
    Ok(Explorer {
        losses: [intra, c2c, c2p, g.value(total).item()],
        dependency,
        centers,
        points,
    })
}

fn dependency_matrix(centers: &[[f64; 2]]) -> Vec<f64> {
    let scale = 1.0 / 2f64.sqrt();
    let mut out = Vec::with_capacity(centers.len() * centers.len());
    for a in centers {
        let logits: Vec<f64> = centers.iter().map(|b| (a[0] * b[0] + a[1] * b[1]) * scale).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// How much every source position contributes to the output at
/// `(row, col)`, for synced axial attention and for dense attention with
/// the same random queries and keys. Each field is `h·w` long and sums to 1.
///
/// Values are one-hot position codes, so the output channels of the target
/// pixel read off its effective weights directly.
pub fn reach(h: usize, w: usize, row: usize, col: usize, sharpness: f64, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if row >= h || col >= w {
        return Err(card_core::Error::InvalidArgument {
            op: "reach",
            msg: format!("({row},{col}) outside {h}x{w}"),
        });
    }
    let c = h * w;
    let cfg = AttentionConfig {
        heads: 1,
        d_model: c,
        column_first: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let q = g.constant(Tensor::randn(&[1, h, w, c], sharpness, &mut rng));
    let k = g.constant(Tensor::randn(&[1, h, w, c], sharpness, &mut rng));
    let mut eye = Tensor::zeros(&[1, h, w, c]);
    for i in 0..c {
        eye.data_mut()[i * c + i] = 1.0;
    }
    let v = g.constant(eye);
    let saa = synced_axial_core(&mut g, q, k, v, &cfg)?;
    let dense = dense_attention_core(&mut g, q, k, v, &cfg)?;
    let at = (row * w + col) * c;
    Ok((
        g.value(saa.out).data()[at..at + c].to_vec(),
        g.value(dense).data()[at..at + c].to_vec(),
    ))
}

/// `(size, dense, saa)` attention-core multiply-adds for square maps of
/// side `sizes[i]` with `c` channels.
pub fn flop_curve(sizes: &[usize], c: usize) -> Result<Vec<[f64; 3]>> {
    sizes
        .iter()
        .map(|&s| {
            Ok([
                s as f64,
                attention_flops(s, s, c, AttentionVariant::Dense)? as f64,
                attention_flops(s, s, c, AttentionVariant::Saa)? as f64,
            ])
        })
        .collect()
}

fn js_err(e: card_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Flat layout: 4 losses, 9 dependency entries, 6 center coordinates, then
/// 5 numbers per point.
#[wasm_bindgen(js_name = carExplorer)]
pub fn car_explorer(
    separation: f64,
    spread: f64,
    overlap: f64,
    points_per_class: usize,
    eps0: f64,
    eps1: f64,
    seed: u32,
) -> std::result::Result<Vec<f64>, JsValue> {
    let e = explore(&ExplorerParams {
        separation,
        spread,
        overlap,
        points_per_class,
        eps0,
        eps1,
        seed: seed as u64,
    })
    .map_err(js_err)?;
    let mut out = e.losses.to_vec();
    out.extend(&e.dependency);
    out.extend(e.centers.iter().flatten());
    out.extend(e.points.iter().flatten());
    Ok(out)
}

/// SAA field followed by the dense field.
#[wasm_bindgen(js_name = saaReach)]
pub fn saa_reach(h: usize, w: usize, row: usize, col: usize, sharpness: f64, seed: u32) -> std::result::Result<Vec<f64>, JsValue> {
    let (mut saa, dense) = reach(h, w, row, col, sharpness, seed as u64).map_err(js_err)?;
    saa.extend(dense);
    Ok(saa)
}

/// Triples `(size, dense, saa)` for sides `step, 2·step, …, max`.
#[wasm_bindgen(js_name = flopCurve)]
pub fn flop_curve_js(max: usize, step: usize, c: usize) -> std::result::Result<Vec<f64>, JsValue> {
    let step = step.max(1);
    let sizes: Vec<usize> = (1..=max / step).map(|i| i * step).collect();
    Ok(flop_curve(&sizes, c).map_err(js_err)?.into_iter().flatten().collect())
}
