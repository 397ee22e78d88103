//! Synced axial attention (SAA) token mixer.
//!
//! Queries, keys and values are projected once from the positionally
//! encoded input. Column attention aggregates values along each column;
//! row attention, built from the *same* queries and keys, then aggregates
//! the column output along each row. Heads split the channel axis.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Binder, ParamStore};
#[cfg(test)]
use crate::nn::Mode;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_model: usize,
    /// Column pass before row pass.
    pub column_first: bool,
}

impl AttentionConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            heads,
            d_model,
            column_first: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(
                "attention_config",
                format!("d_model {} not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.d_head() as f64).sqrt()
    }
}

/// Graph nodes of the mixer's weights: depthwise positional kernel
/// `[3,3,1,C]` and bias-free `1×1` projections `[1,1,C,C]`.
#[derive(Clone, Copy, Debug)]
pub struct SaaWeights {
    pub cpe: Var,
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub out: Var,
}

impl SaaWeights {
    const NAMES: [&'static str; 5] = ["cpe", "query", "key", "value", "out"];

    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut R) {
        let c = cfg.d_model;
        store.init_conv(&format!("{prefix}.cpe"), 3, 1, c, rng);
        for name in &Self::NAMES[1..] {
            store.init_conv(&format!("{prefix}.{name}"), 1, c, c, rng);
        }
    }

    pub fn bind(binder: &mut Binder<'_>, g: &mut Graph, prefix: &str) -> Result<Self> {
        let mut get = |n: &str| binder.param(g, &format!("{prefix}.{n}"));
        Ok(SaaWeights {
            cpe: get("cpe")?,
            query: get("query")?,
            key: get("key")?,
            value: get("value")?,
            out: get("out")?,
        })
    }
}

/// Conditional positional encoding: `x + depthwise3x3(x)`, no normalization.
pub fn cpe(g: &mut Graph, x: Var, kernel: Var) -> Result<Var> {
    let channels = *g.shape(x).last().unwrap_or(&0);
    let pos = g.conv2d(x, kernel, 1, 1, channels)?;
    g.add(x, pos)
}

pub struct SaaOutput {
    pub out: Var,
    /// `[N·W·heads, H, H]` column attention.
    pub column_attention: Var,
    /// `[N·H·heads, W, W]` row attention.
    pub row_attention: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Column,
    Row,
}

impl Axis {
    /// Moves the attended spatial axis of `[N, H, W, heads, d]` to position 3.
    fn to_sequence(self) -> [usize; 5] {
        match self {
            Axis::Column => [0, 2, 3, 1, 4],
            Axis::Row => [0, 1, 3, 2, 4],
        }
    }

    fn from_sequence(self) -> [usize; 5] {
        match self {
            Axis::Column => [0, 3, 1, 2, 4],
            Axis::Row => [0, 1, 3, 2, 4],
        }
    }
}

/// Multi-head attention along one spatial axis of `[N, H, W, heads, d]`
/// tensors. Returns the aggregated values in the same layout and the
/// attention rows.
pub fn axis_attention(g: &mut Graph, q: Var, k: Var, v: Var, axis: Axis, scale: f64) -> Result<(Var, Var)> {
    let shape = g.shape(q).to_vec();
    let perm = axis.to_sequence();
    let seq_shape: Vec<usize> = perm.iter().map(|&a| shape[a]).collect();
    let batch = seq_shape[..3].iter().product::<usize>();
    let (len, d) = (seq_shape[3], seq_shape[4]);

    let to_seq = |g: &mut Graph, t: Var| -> Result<Var> {
        let p = g.permute(t, &perm)?;
        g.reshape(p, &[batch, len, d])
    };
    let qs = to_seq(g, q)?;
    let ks = to_seq(g, k)?;
    let vs = to_seq(g, v)?;
    let kt = g.transpose(ks)?;
    let scores = g.bmm(qs, kt)?;
    let scores = g.scale(scores, scale);
    let attn = g.softmax(scores, 2)?;
    let agg = g.bmm(attn, vs)?;
    let agg = g.reshape(agg, &seq_shape)?;
    let out = g.permute(agg, &axis.from_sequence())?;
    Ok((out, attn))
}

/// Attention core of SAA on already projected `[N, H, W, C]` queries, keys
/// and values.
pub fn synced_axial_core(g: &mut Graph, q: Var, k: Var, v: Var, cfg: &AttentionConfig) -> Result<SaaOutput> {
    let shape = g.shape(q).to_vec();
    let [n, h, w, c] = shape[..] else {
        return Err(Error::invalid("saa", format!("expected [N,H,W,C], got {shape:?}")));
    };
    if c != cfg.d_model {
        return Err(Error::shape("saa", &[c], &[cfg.d_model]));
    }
    let split = [n, h, w, cfg.heads, cfg.d_head()];
    let q = g.reshape(q, &split)?;
    let k = g.reshape(k, &split)?;
    let v = g.reshape(v, &split)?;
    let (first, second) = if cfg.column_first {
        (Axis::Column, Axis::Row)
    } else {
        (Axis::Row, Axis::Column)
    };
    let (mid, a1) = axis_attention(g, q, k, v, first, cfg.scale())?;
    let (out, a2) = axis_attention(g, q, k, mid, second, cfg.scale())?;
    let out = g.reshape(out, &shape)?;
    let (column_attention, row_attention) = if cfg.column_first { (a1, a2) } else { (a2, a1) };
    Ok(SaaOutput {
        out,
        column_attention,
        row_attention,
    })
}

fn batched(g: &mut Graph, x: Var) -> Result<(Var, bool)> {
    let shape = g.shape(x).to_vec();
    match shape.len() {
        3 => Ok((g.reshape(x, &[1, shape[0], shape[1], shape[2]])?, true)),
        4 => Ok((x, false)),
        _ => Err(Error::invalid("saa", format!("expected [H,W,C] or [N,H,W,C], got {shape:?}"))),
    }
}

/// Full mixer: CPE, shared Q/K/V projections, synced axial attention,
/// output projection. Accepts `[H, W, C]` or `[N, H, W, C]`.
pub fn saa_forward(g: &mut Graph, x: Var, w: &SaaWeights, cfg: &AttentionConfig) -> Result<SaaOutput> {
    cfg.validate()?;
    let in_shape = g.shape(x).to_vec();
    let (x, squeeze) = batched(g, x)?;
    let xp = cpe(g, x, w.cpe)?;
    let q = g.conv2d(xp, w.query, 1, 1, 1)?;
    let k = g.conv2d(xp, w.key, 1, 1, 1)?;
    let v = g.conv2d(xp, w.value, 1, 1, 1)?;
    let mut res = synced_axial_core(g, q, k, v, cfg)?;
    let mut out = g.conv2d(res.out, w.out, 1, 1, 1)?;
    if squeeze {
        out = g.reshape(out, &in_shape)?;
    }
    res.out = out;
    Ok(res)
}

/// Full-grid multi-head attention over all `H·W` positions of projected
/// `[N, H, W, C]` tensors. Reference for cost and single-axis comparisons;
/// the mixer never uses it.
pub fn dense_attention_core(g: &mut Graph, q: Var, k: Var, v: Var, cfg: &AttentionConfig) -> Result<Var> {
    let shape = g.shape(q).to_vec();
    let [n, h, w, c] = shape[..] else {
        return Err(Error::invalid("dense_attention", format!("expected [N,H,W,C], got {shape:?}")));
    };
    let (heads, d) = (cfg.heads, cfg.d_head());
    let seq = |g: &mut Graph, t: Var| -> Result<Var> {
        let t = g.reshape(t, &[n, h * w, heads, d])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[n * heads, h * w, d])
    };
    let qs = seq(g, q)?;
    let ks = seq(g, k)?;
    let vs = seq(g, v)?;
    let kt = g.transpose(ks)?;
    let scores = g.bmm(qs, kt)?;
    let scores = g.scale(scores, cfg.scale());
    let attn = g.softmax(scores, 2)?;
    let agg = g.bmm(attn, vs)?;
    let agg = g.reshape(agg, &[n, heads, h * w, d])?;
    let agg = g.permute(agg, &[0, 2, 1, 3])?;
    g.reshape(agg, &[n, h, w, c])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    Dense,
    Saa,
}

/// Multiply-adds of the attention core (scores plus aggregation), excluding
/// the projections both variants share.
pub fn attention_flops(h: usize, w: usize, c: usize, variant: AttentionVariant) -> Result<u64> {
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::invalid("attention_flops", "dimensions must be positive"));
    }
    let (h, w, c) = (h as u64, w as u64, c as u64);
    let hw = h * w;
    Ok(match variant {
        AttentionVariant::Dense => 2 * hw * hw * c,
        AttentionVariant::Saa => 2 * hw * (h + w) * c,
    })
}
