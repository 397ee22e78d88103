//! Class-aware regularization (CAR) losses.
//!
//! All three terms take flattened batch features and ground-truth centers:
//!
//! * intra-c2p pulls every pixel toward its own class center;
//! * inter-c2c pushes softmax-normalized center similarities below
//!   `eps0 / (N_class - 1)`;
//! * inter-c2p pushes each pixel's similarity to other classes' centers
//!   below `eps1 / (N_class - 1)`, with the own-class score replaced by the
//!   center's self product.
//!
//! Absent classes are dropped from both inter terms, but the margin keeps
//! the full `N_class` in its denominator.

use crate::autodiff::{Graph, Var};
use crate::centers::{batch_centers, distribute_centers, ClassCenters, FlatPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the squared per-row excesses are averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MseReduction {
    /// Mean over present classes (inter-c2c) and non-ignored pixels
    /// (intra-c2p, inter-c2p).
    #[default]
    Present,
    /// Mean over all `N_class` rows and all pixels, absent or ignored rows
    /// counting as zero.
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CarConfig {
    pub eps0: f64,
    pub eps1: f64,
    pub w_intra: f64,
    pub w_c2c: f64,
    pub w_c2p: f64,
    /// Let gradients flow from the losses through the centers into features.
    pub grad_through_centers: bool,
    pub reduction: MseReduction,
}

impl Default for CarConfig {
    fn default() -> Self {
        CarConfig {
            eps0: 0.5,
            eps1: 0.25,
            w_intra: 1.0,
            w_c2c: 1.0,
            w_c2p: 1.0,
            grad_through_centers: true,
            reduction: MseReduction::Present,
        }
    }
}

impl CarConfig {
    /// All weights zero: the regularizer contributes nothing.
    pub fn disabled() -> Self {
        CarConfig {
            w_intra: 0.0,
            w_c2c: 0.0,
            w_c2p: 0.0,
            ..Self::default()
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.w_intra != 0.0 || self.w_c2c != 0.0 || self.w_c2p != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("eps0", self.eps0),
            ("eps1", self.eps1),
            ("w_intra", self.w_intra),
            ("w_c2c", self.w_c2c),
            ("w_c2p", self.w_c2p),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("car_config", format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A scalar loss node. `vacuous` marks terms that had nothing to measure
/// (every pixel ignored, fewer than two classes) and evaluate to zero.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub value: Var,
    pub vacuous: bool,
}

impl LossTerm {
    fn vacuous(g: &mut Graph) -> Self {
        LossTerm {
            value: g.constant(Tensor::scalar(0.0)),
            vacuous: true,
        }
    }
}

fn margin(eps: f64, n_class: usize) -> f64 {
    eps / (n_class - 1) as f64
}

pub fn intra_c2p_loss(g: &mut Graph, pair: &FlatPair, centers: &ClassCenters, cfg: &CarConfig) -> Result<LossTerm> {
    let valid = pair.valid_rows().len();
    if valid == 0 {
        return Ok(LossTerm::vacuous(g));
    }
    let channels = g.shape(pair.x)[1];
    let spread = distribute_centers(g, pair, centers)?;
    let diff = g.sub(spread, pair.x)?;
    let dist = g.abs(diff);
    let keep = pair.sigma.map(|s| 1.0 - s).reshape(&[pair.pixels(), 1])?;
    let keep = g.constant(keep);
    let masked = g.mul(dist, keep)?;
    let sq = g.square(masked);
    let total = g.sum(sq);
    let rows = match cfg.reduction {
        MseReduction::Present => valid,
        MseReduction::All => pair.pixels(),
    };
    Ok(LossTerm {
        value: g.scale(total, 1.0 / (rows * channels) as f64),
        vacuous: false,
    })
}

pub fn inter_c2c_loss(g: &mut Graph, centers: &ClassCenters, cfg: &CarConfig) -> Result<LossTerm> {
    let present = centers.present_indices();
    if present.len() < 2 {
        return Ok(LossTerm::vacuous(g));
    }
    let n_class = centers.n_class();
    let channels = g.shape(centers.mu)[1];
    let mu = g.index_select(centers.mu, 0, &present)?;
    let mut_ = g.transpose(mu)?;
    let dots = g.matmul(mu, mut_)?;
    let logits = g.scale(dots, 1.0 / (channels as f64).sqrt());
    let sim = g.softmax(logits, 1)?;
    let p = present.len();
    let off_diag = Tensor::new(
        &[p, p],
        (0..p * p).map(|i| if i / p == i % p { 0.0 } else { 1.0 }).collect(),
    )?;
    let off_diag = g.constant(off_diag);
    let off = g.mul(sim, off_diag)?;
    let excess = g.hinge(off, margin(cfg.eps0, n_class));
    let per_class = g.sum_axis(excess, 1)?;
    let sq = g.square(per_class);
    let total = g.sum(sq);
    let rows = match cfg.reduction {
        MseReduction::Present => p,
        MseReduction::All => n_class,
    };
    Ok(LossTerm {
        value: g.scale(total, 1.0 / rows as f64),
        vacuous: false,
    })
}

/// Center-to-pixel scores `X_flat · μᵀ` (`P × N_class`). This is the
/// shape-consistent orientation of the `μᵀ · X_flat` product.
pub fn inter_c2p_loss(g: &mut Graph, pair: &FlatPair, centers: &ClassCenters, cfg: &CarConfig) -> Result<LossTerm> {
    let n_class = centers.n_class();
    let valid = pair.valid_rows();
    if n_class < 2 || valid.is_empty() {
        return Ok(LossTerm::vacuous(g));
    }
    let present = centers.present_indices();
    let x = g.index_select(pair.x, 0, &valid)?;
    let y = g.index_select(pair.y, 0, &valid)?;
    let mu_t = g.transpose(centers.mu)?;
    let scores = g.matmul(x, mu_t)?;

    // Own-class entries become diag(μ μᵀ); no √C scaling here.
    let y_val = g.value(y).clone();
    let not_y = g.constant(y_val.map(|v| 1.0 - v));
    let others = g.mul(scores, not_y)?;
    let mu_sq = g.square(centers.mu);
    let self_dot = g.sum_axis(mu_sq, 1)?;
    let own = g.mul(y, self_dot)?;
    let replaced = g.add(others, own)?;

    let replaced = g.index_select(replaced, 1, &present)?;
    let sim = g.softmax(replaced, 1)?;
    let not_y_present = g.index_select(not_y, 1, &present)?;
    let off = g.mul(sim, not_y_present)?;
    let excess = g.hinge(off, margin(cfg.eps1, n_class));
    let per_pixel = g.sum_axis(excess, 1)?;
    let sq = g.square(per_pixel);
    let total = g.sum(sq);
    let rows = match cfg.reduction {
        MseReduction::Present => valid.len(),
        MseReduction::All => pair.pixels(),
    };
    Ok(LossTerm {
        value: g.scale(total, 1.0 / rows as f64),
        vacuous: false,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct CarParts {
    pub intra: LossTerm,
    pub c2c: LossTerm,
    pub c2p: LossTerm,
}

impl CarParts {
    /// `(intra, c2c, c2p)` values.
    pub fn values(&self, g: &Graph) -> [f64; 3] {
        [
            g.value(self.intra.value).item(),
            g.value(self.c2c.value).item(),
            g.value(self.c2p.value).item(),
        ]
    }
}

/// Computes batch centers from `pair` and all three terms.
pub fn car_parts(g: &mut Graph, pair: &FlatPair, cfg: &CarConfig) -> Result<(ClassCenters, CarParts)> {
    let centers = batch_centers(g, std::slice::from_ref(pair), !cfg.grad_through_centers)?;
    let parts = CarParts {
        intra: intra_c2p_loss(g, pair, &centers, cfg)?,
        c2c: inter_c2c_loss(g, &centers, cfg)?,
        c2p: inter_c2p_loss(g, pair, &centers, cfg)?,
    };
    Ok((centers, parts))
}

/// `w_intra·L_intra + w_c2c·L_c2c + w_c2p·L_c2p`.
pub fn car_total(g: &mut Graph, parts: &CarParts, cfg: &CarConfig) -> Result<Var> {
    let a = g.scale(parts.intra.value, cfg.w_intra);
    let b = g.scale(parts.c2c.value, cfg.w_c2c);
    let c = g.scale(parts.c2p.value, cfg.w_c2p);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}
