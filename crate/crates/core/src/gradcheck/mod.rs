//! Central finite-difference gradient checking.
//!
//! `check` differentiates a scalar-valued graph builder with respect to each
//! of its inputs and compares against central differences. Non-scalar
//! outputs can be reduced with [`project`], which contracts against a fixed
//! random tensor so every output element carries a distinct weight.

mod cases;

pub use cases::{cases, run_cases, CaseSummary, GradCase};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Relative error a check must stay under.
    pub tolerance: f64,
    /// Norm floor of the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per input: `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, floor)`.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.rel_errors.iter().all(|e| *e < self.tolerance)
    }
}

/// Reduces `out` to a scalar as `Σ out ⊙ R` with `R` drawn from `seed`.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let weights = Tensor::uniform(g.shape(out), -1.0, 1.0, &mut rng);
    let r = g.constant(weights);
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

pub fn check<F>(inputs: &[Tensor], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_finite() {
        return Err(Error::NonFinite("gradcheck objective".into()));
    }
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        rel_errors: Vec::new(),
        analytic: Vec::new(),
        numeric: Vec::new(),
        tolerance: cfg.tolerance,
    };
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[k].shape());
        let mut numeric = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + cfg.step;
            let plus = evaluate(&f, &probe)?;
            probe[k].data_mut()[i] = orig - cfg.step;
            let minus = evaluate(&f, &probe)?;
            probe[k].data_mut()[i] = orig;
            numeric.data_mut()[i] = (plus - minus) / (2.0 * cfg.step);
        }
        let diff = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let denom = analytic.norm().max(numeric.norm()).max(cfg.floor);
        report.rel_errors.push(diff / denom);
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}
