//! Enhanced joint pyramid upsampling (EJPU).
//!
//! Two branches produce an output-stride-8 map:
//!
//! * residual: the top backbone level, bilinearly upsampled to OS8 and
//!   channel-padded by [`cpm_pad`] when it is narrower than the output;
//! * JPU: every level is reduced to `width` channels and upsampled to OS8,
//!   concatenated, passed through parallel dilated depthwise-separable
//!   convolutions, and calibrated by a `1×1` conv + norm + ReLU.
//!
//! The top level enters the JPU branch behind a stop-gradient, so the
//! backbone's last stage only learns through the residual branch.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Binder, ParamStore};
use crate::tensor::Tensor;

/// Backbone levels ordered by increasing output stride (8, 16, 32, ...).
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    /// Checks rank and that extents halve (rounding up) between levels.
    pub fn validate(&self, g: &Graph) -> Result<()> {
        let first = *self
            .levels
            .first()
            .ok_or_else(|| Error::invalid("feature_pyramid", "no levels"))?;
        let mut prev = g.shape(first).to_vec();
        if prev.len() != 4 {
            return Err(Error::invalid("feature_pyramid", format!("expected [N,H,W,C] levels, got {prev:?}")));
        }
        for &lv in &self.levels[1..] {
            let s = g.shape(lv).to_vec();
            let ok = s.len() == 4 && s[0] == prev[0] && s[1] == prev[1].div_ceil(2) && s[2] == prev[2].div_ceil(2);
            if !ok {
                return Err(Error::shape("feature_pyramid", &prev, &s));
            }
            prev = s;
        }
        Ok(())
    }

    pub fn top(&self) -> Var {
        *self.levels.last().expect("validated pyramid")
    }

    pub fn base(&self) -> Var {
        self.levels[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EjpuConfig {
    /// Per-level reduced width inside the JPU branch.
    pub width: usize,
    pub out_channels: usize,
    pub dilations: Vec<usize>,
    /// Standard deviation of the calibration conv initialization.
    pub calibration_std: f64,
}

impl Default for EjpuConfig {
    fn default() -> Self {
        EjpuConfig {
            width: 16,
            out_channels: 64,
            dilations: vec![1, 2, 4, 8],
            calibration_std: 1e-2,
        }
    }
}

impl EjpuConfig {
    pub fn branch_channels(&self) -> usize {
        self.width * self.dilations.len()
    }
}

pub fn init<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    level_channels: &[usize],
    cfg: &EjpuConfig,
    rng: &mut R,
) {
    let w = cfg.width;
    for (i, &c) in level_channels.iter().enumerate() {
        store.init_conv(&format!("{prefix}.level{i}.conv"), 3, c, w, rng);
        store.init_norm(&format!("{prefix}.level{i}.norm"), w);
    }
    let fused = w * level_channels.len();
    for (j, _) in cfg.dilations.iter().enumerate() {
        store.init_conv(&format!("{prefix}.sep{j}.depthwise"), 3, 1, fused, rng);
        store.init_conv(&format!("{prefix}.sep{j}.pointwise"), 1, fused, w, rng);
        store.init_norm(&format!("{prefix}.sep{j}.norm"), w);
    }
    store.insert(
        format!("{prefix}.calib.conv"),
        Tensor::randn(&[1, 1, cfg.branch_channels(), cfg.out_channels], cfg.calibration_std, rng),
    );
    store.init_norm(&format!("{prefix}.calib.norm"), cfg.out_channels);
    if let Some(&top) = level_channels.last() {
        if top < cfg.out_channels {
            init_cpm(store, &format!("{prefix}.cpm"), top, cfg.out_channels, rng);
        }
    }
}

/// CPM parameters: a `Cin × (C_t − Cin)` projection of the pooled feature
/// and a `1×1` conv over all `C_t` channels, initialised to the identity so
/// the original channels pass through untouched.
pub fn init_cpm<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cin: usize, target: usize, rng: &mut R) {
    let pad = target - cin;
    store.insert(
        format!("{prefix}.proj"),
        Tensor::randn(&[cin, pad], (1.0 / cin as f64).sqrt(), rng),
    );
    let mut eye = Tensor::zeros(&[1, 1, target, target]);
    for i in 0..target {
        eye.set(&[0, 0, i, i], 1.0);
    }
    store.insert(format!("{prefix}.conv"), eye);
}

fn conv_norm_relu(
    g: &mut Graph,
    b: &mut Binder<'_>,
    x: Var,
    kernel: &str,
    norm: &str,
    dilation: usize,
) -> Result<Var> {
    let w = b.param(g, kernel)?;
    let y = g.conv2d(x, w, 1, dilation, 1)?;
    let y = b.batch_norm(g, y, norm)?;
    Ok(g.relu(y))
}

/// Multi-scale multi-level branch; output is `[N, h8, w8, width·|dilations|]`.
pub fn jpu_branch(
    g: &mut Graph,
    b: &mut Binder<'_>,
    prefix: &str,
    pyr: &FeaturePyramid,
    cfg: &EjpuConfig,
) -> Result<Var> {
    if pyr.levels.len() < 2 {
        return Err(Error::invalid("jpu_branch", format!("need at least 2 levels, got {}", pyr.levels.len())));
    }
    pyr.validate(g)?;
    let base = g.shape(pyr.base()).to_vec();
    let (h, w) = (base[1], base[2]);
    let last = pyr.levels.len() - 1;
    let mut reduced = Vec::with_capacity(pyr.levels.len());
    for (i, &lv) in pyr.levels.iter().enumerate() {
        let input = if i == last { g.stop_gradient(lv) } else { lv };
        let y = conv_norm_relu(
            g,
            b,
            input,
            &format!("{prefix}.level{i}.conv"),
            &format!("{prefix}.level{i}.norm"),
            1,
        )?;
        let y = if i == 0 { y } else { g.bilinear_resize(y, h, w)? };
        reduced.push(y);
    }
    let fused = g.concat(&reduced, 3)?;
    let channels = g.shape(fused)[3];
    let mut branches = Vec::with_capacity(cfg.dilations.len());
    for (j, &d) in cfg.dilations.iter().enumerate() {
        let dw = b.param(g, &format!("{prefix}.sep{j}.depthwise"))?;
        let y = g.conv2d(fused, dw, 1, d, channels)?;
        let y = conv_norm_relu(
            g,
            b,
            y,
            &format!("{prefix}.sep{j}.pointwise"),
            &format!("{prefix}.sep{j}.norm"),
            1,
        )?;
        branches.push(y);
    }
    g.concat(&branches, 3)
}

/// Pads `x` to `target` channels with a broadcast projection of its global
/// average, then mixes all channels with one `1×1` conv. Identity when the
/// channel counts already match.
pub fn cpm_pad(g: &mut Graph, b: &mut Binder<'_>, prefix: &str, x: Var, target: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [n, h, w, cin] = shape[..] else {
        return Err(Error::invalid("cpm_pad", format!("expected [N,H,W,C], got {shape:?}")));
    };
    if cin == target {
        return Ok(x);
    }
    if cin > target {
        return Err(Error::invalid("cpm_pad", format!("cannot reduce {cin} channels to {target}")));
    }
    let pooled = g.global_avg_pool(x)?;
    let proj = b.param(g, &format!("{prefix}.proj"))?;
    let projected = g.matmul(pooled, proj)?;
    let projected = g.reshape(projected, &[n, 1, 1, target - cin])?;
    let padding = g.broadcast_to(projected, &[n, h, w, target - cin])?;
    let padded = g.concat(&[x, padding], 3)?;
    let conv = b.param(g, &format!("{prefix}.conv"))?;
    g.conv2d(padded, conv, 1, 1, 1)
}

/// Residual upsampled backbone feature plus calibrated JPU feature, with
/// exactly `cfg.out_channels` channels at the base level's resolution.
pub fn ejpu_forward(
    g: &mut Graph,
    b: &mut Binder<'_>,
    prefix: &str,
    pyr: &FeaturePyramid,
    cfg: &EjpuConfig,
) -> Result<Var> {
    pyr.validate(g)?;
    let base = g.shape(pyr.base()).to_vec();
    let top = pyr.top();
    if g.shape(top)[3] > cfg.out_channels {
        return Err(Error::invalid(
            "ejpu",
            format!("top level has {} channels, more than output {}", g.shape(top)[3], cfg.out_channels),
        ));
    }
    let up = g.bilinear_resize(top, base[1], base[2])?;
    let residual = cpm_pad(g, b, &format!("{prefix}.cpm"), up, cfg.out_channels)?;
    let jpu = jpu_branch(g, b, prefix, pyr, cfg)?;
    let calibrated = conv_norm_relu(
        g,
        b,
        jpu,
        &format!("{prefix}.calib.conv"),
        &format!("{prefix}.calib.norm"),
        1,
    )?;
    g.add(residual, calibrated)
}
