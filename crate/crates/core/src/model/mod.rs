//! Toy segmentation network: strided CNN backbone, EJPU (or a dilated
//! OS8 backbone), SAA mixer, and a `1×1` classification head.
//!
//! CAR attaches to the mixer output, the tensor that feeds the head. It is
//! a training-time loss only: inference builds the same graph whether or
//! not it was used.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{build_loss_graph, poly_lr, train_step, LossGraph, Sample, Sgd, StepMetrics, TrainConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, TraceEntry, Var};
use crate::car::LossTerm;
use crate::centers::LabelField;
use crate::ejpu::{self, EjpuConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{Binder, Mode, ParamStore};
use crate::saa::{saa_forward, AttentionConfig, SaaWeights};
use crate::tensor::{one_hot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsampler {
    /// Strided backbone to OS32, EJPU back to OS8.
    Ejpu,
    /// Last two stages keep OS8 with dilations 2 and 4.
    DilatedOs8,
}

impl Upsampler {
    pub fn as_str(self) -> &'static str {
        match self {
            Upsampler::Ejpu => "ejpu",
            Upsampler::DilatedOs8 => "dilated",
        }
    }
}

impl std::str::FromStr for Upsampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ejpu" => Ok(Upsampler::Ejpu),
            "dilated" | "dilated-os8" => Ok(Upsampler::DilatedOs8),
            other => Err(Error::invalid("upsampler", format!("unknown upsampler `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels at strides 4, 8, 16, 32.
    pub stage_channels: [usize; 4],
    pub decoder_width: usize,
    pub out_channels: usize,
    pub heads: usize,
    pub n_class: usize,
    pub upsampler: Upsampler,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: [16, 32, 64, 64],
            decoder_width: 16,
            out_channels: 64,
            heads: 4,
            n_class: 4,
            upsampler: Upsampler::Ejpu,
        }
    }
}

impl ModelConfig {
    /// Small enough for quick single-core CPU experiments (under 60k
    /// parameters).
    pub fn toy(n_class: usize) -> Self {
        ModelConfig {
            stage_channels: [8, 16, 32, 32],
            decoder_width: 8,
            out_channels: 32,
            heads: 4,
            n_class,
            upsampler: Upsampler::Ejpu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.decoder_width == 0 || self.n_class < 2 {
            return Err(Error::invalid("model_config", "channel and class counts must be positive (n_class >= 2)"));
        }
        if self.stage_channels[3] > self.out_channels {
            return Err(Error::invalid(
                "model_config",
                format!("top stage has {} channels, more than decoder output {}", self.stage_channels[3], self.out_channels),
            ));
        }
        AttentionConfig::new(self.out_channels, self.heads).map(|_| ())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            d_model: self.out_channels,
            column_first: true,
        }
    }

    pub fn ejpu(&self) -> EjpuConfig {
        EjpuConfig {
            width: self.decoder_width,
            out_channels: self.out_channels,
            ..EjpuConfig::default()
        }
    }

    /// Canonical `key = value` lines.
    pub fn to_kv(&self) -> String {
        let s = self.stage_channels;
        format!(
            "stage_channels = {},{},{},{}\ndecoder_width = {}\nout_channels = {}\nheads = {}\nn_class = {}\nupsampler = {}\n",
            s[0],
            s[1],
            s[2],
            s[3],
            self.decoder_width,
            self.out_channels,
            self.heads,
            self.n_class,
            self.upsampler.as_str()
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_kv().as_bytes()).into()
    }
}

/// Forward-pass products of interest.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Backbone levels at OS 8, 16, 32 (all OS8 in dilated mode).
    pub pyramid: Vec<Var>,
    /// Mixer output `[N, h8, w8, C]`; the CAR attachment point.
    pub features: Var,
    /// `[N, h8, w8, N_class]`.
    pub logits: Var,
}

/// Detached results of an inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub features: Tensor,
    pub logits: Tensor,
    pub trace: Vec<TraceEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

fn conv_bias_relu(g: &mut Graph, b: &mut Binder<'_>, x: Var, name: &str, stride: usize, dilation: usize) -> Result<Var> {
    let w = b.param(g, &format!("{name}.weight"))?;
    let bias = b.param(g, &format!("{name}.bias"))?;
    let y = g.conv2d(x, w, stride, dilation, 1)?;
    let y = g.add(y, bias)?;
    Ok(g.relu(y))
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let [c1, c2, c3, c4] = cfg.stage_channels;
        let convs = [("stem0", 3, c1), ("stem1", c1, c1), ("stage2", c1, c2), ("stage3", c2, c3), ("stage4", c3, c4)];
        for (name, cin, cout) in convs {
            p.init_conv(&format!("backbone.{name}.weight"), 3, cin, cout, &mut rng);
            p.insert(format!("backbone.{name}.bias"), Tensor::zeros(&[cout]));
        }
        match cfg.upsampler {
            Upsampler::Ejpu => ejpu::init(&mut p, "ejpu", &[c2, c3, c4], &cfg.ejpu(), &mut rng),
            Upsampler::DilatedOs8 => {
                if c4 != cfg.out_channels {
                    p.init_conv("decoder.proj", 1, c4, cfg.out_channels, &mut rng);
                }
            }
        }
        SaaWeights::init(&mut p, "saa", &cfg.attention(), &mut rng);
        p.insert(
            "head.weight",
            Tensor::randn(&[1, 1, cfg.out_channels, cfg.n_class], (1.0 / cfg.out_channels as f64).sqrt(), &mut rng),
        );
        p.insert("head.bias", Tensor::zeros(&[cfg.n_class]));
        Ok(Model { cfg, params: p })
    }

    /// Three feature levels from an `[N, H, W, 3]` image batch. Extents must
    /// be divisible by 32.
    pub fn backbone_forward(&self, g: &mut Graph, b: &mut Binder<'_>, images: Var) -> Result<Vec<Var>> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[3] != 3 {
            return Err(Error::invalid("backbone", format!("expected [N,H,W,3] images, got {shape:?}")));
        }
        if shape[1] % 32 != 0 || shape[2] % 32 != 0 {
            return Err(Error::invalid(
                "backbone",
                format!("image extents {}x{} not divisible by 32", shape[1], shape[2]),
            ));
        }
        let x = conv_bias_relu(g, b, images, "backbone.stem0", 2, 1)?;
        let x = conv_bias_relu(g, b, x, "backbone.stem1", 2, 1)?;
        let os8 = conv_bias_relu(g, b, x, "backbone.stage2", 2, 1)?;
        let (s3, s4, d3, d4) = match self.cfg.upsampler {
            Upsampler::Ejpu => (2, 2, 1, 1),
            Upsampler::DilatedOs8 => (1, 1, 2, 4),
        };
        let l3 = conv_bias_relu(g, b, os8, "backbone.stage3", s3, d3)?;
        let l4 = conv_bias_relu(g, b, l3, "backbone.stage4", s4, d4)?;
        Ok(vec![os8, l3, l4])
    }

    /// Per-pixel linear classifier (`1×1` conv with bias).
    pub fn head_logits(&self, g: &mut Graph, b: &mut Binder<'_>, features: Var) -> Result<Var> {
        let w = b.param(g, "head.weight")?;
        let bias = b.param(g, "head.bias")?;
        let y = g.conv2d(features, w, 1, 1, 1)?;
        g.add(y, bias)
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, images: Var) -> Result<ForwardOutput> {
        let pyramid = self.backbone_forward(g, b, images)?;
        let decoded = match self.cfg.upsampler {
            Upsampler::Ejpu => {
                let pyr = FeaturePyramid { levels: pyramid.clone() };
                ejpu::ejpu_forward(g, b, "ejpu", &pyr, &self.cfg.ejpu())?
            }
            Upsampler::DilatedOs8 => {
                let top = pyramid[2];
                if g.shape(top)[3] == self.cfg.out_channels {
                    top
                } else {
                    let w = b.param(g, "decoder.proj")?;
                    g.conv2d(top, w, 1, 1, 1)?
                }
            }
        };
        let saa = SaaWeights::bind(b, g, "saa")?;
        let features = saa_forward(g, decoded, &saa, &self.cfg.attention())?.out;
        let logits = self.head_logits(g, b, features)?;
        Ok(ForwardOutput {
            pyramid,
            features,
            logits,
        })
    }

    /// Evaluation-mode forward on a stack of `[H, W, 3]` images.
    pub fn infer(&self, images: &[Tensor]) -> Result<Inference> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false, Mode::Eval);
        let x = g.constant(stack(images)?);
        let out = self.forward(&mut g, &mut b, x)?;
        Ok(Inference {
            features: g.value(out.features).clone(),
            logits: g.value(out.logits).clone(),
            trace: g.trace(),
        })
    }

    /// Full-resolution argmax labels, one `Vec` per image.
    pub fn predict(&self, images: &[Tensor]) -> Result<Vec<Vec<u8>>> {
        let inf = self.infer(images)?;
        let (h, w) = (images[0].shape()[0], images[0].shape()[1]);
        let mut g = Graph::new();
        let l = g.constant(inf.logits);
        let up = g.bilinear_resize(l, h, w)?;
        Ok(argmax_labels(g.value(up)))
    }
}

/// Class index of the largest logit at every pixel of `[N, H, W, K]`.
pub fn argmax_labels(logits: &Tensor) -> Vec<Vec<u8>> {
    let shape = logits.shape();
    let k = shape[3];
    let per_image = shape[1] * shape[2];
    logits
        .data()
        .chunks(k)
        .map(|px| {
            px.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0 as u8
        })
        .collect::<Vec<u8>>()
        .chunks(per_image)
        .map(<[u8]>::to_vec)
        .collect()
}

/// Stacks equal-shape `[H, W, C]` tensors into `[N, H, W, C]`.
pub fn stack(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("stack", "no images"))?;
    let mut data = Vec::with_capacity(first.len() * images.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::shape("stack", first.shape(), im.shape()));
        }
        data.extend_from_slice(im.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(&shape, data)
}

/// Softmax cross-entropy of `[N, h, w, K]` logits, averaged over
/// non-ignored pixels. Label fields are nearest-downsampled when larger
/// than the logits.
pub fn ce_loss(g: &mut Graph, logits: Var, labels: &[LabelField]) -> Result<LossTerm> {
    let shape = g.shape(logits).to_vec();
    let [n, h, w, k] = shape[..] else {
        return Err(Error::invalid("ce_loss", format!("expected [N,H,W,K] logits, got {shape:?}")));
    };
    if labels.len() != n {
        return Err(Error::invalid("ce_loss", format!("{n} logit maps but {} label fields", labels.len())));
    }
    let mut flat = Vec::with_capacity(n * h * w);
    for field in labels {
        let field = if (field.height(), field.width()) == (h, w) {
            field.clone()
        } else {
            field.downsample_nearest(h, w)?
        };
        flat.extend(field.class_indices());
    }
    let valid = flat.iter().filter(|l| l.is_some()).count();
    if valid == 0 {
        return Ok(LossTerm {
            value: g.constant(Tensor::scalar(0.0)),
            vacuous: true,
        });
    }
    let logp = g.log_softmax(logits, 3)?;
    let logp = g.reshape(logp, &[n * h * w, k])?;
    let y = g.constant(one_hot(&flat, k)?);
    let picked = g.mul(logp, y)?;
    let total = g.sum(picked);
    Ok(LossTerm {
        value: g.scale(total, -1.0 / valid as f64),
        vacuous: false,
    })
}
