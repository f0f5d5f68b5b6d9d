//! Five-point finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it is independent of
//! the backward rules it validates.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::layers::Module;
use crate::tensor::Tensor;

/// Relative step: `h = STEP * max(1, |x|)`.
pub const STEP: f64 = 1e-5;

/// Gradient norm below which errors are measured absolutely.
pub const SCALE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Report {
    /// Largest per-tensor relative error `|a - n| / max(|a|, |n|, SCALE_FLOOR)`.
    pub max_rel_error: f64,
    pub checked: usize,
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    // Gradients that vanish analytically (e.g. a bias feeding a normalisation)
    // leave only round-off in the numeric estimate; the floor keeps those from
    // reading as a 100% error.
    diff / na.max(nn).max(SCALE_FLOOR)
}

/// Fourth-order central stencil from values at `x - 2h, x - h, x + h, x + 2h`.
fn stencil(f: [f64; 4], h: f64) -> f64 {
    (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * h)
}

const OFFSETS: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];

fn sample_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(l) if l < n => (0..l).map(|i| i * n / l).collect(),
        _ => (0..n).collect(),
    }
}

fn eval_scalar<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    Ok(g.value(y).data()[0])
}

/// Compares backward-pass gradients of `f` with respect to every input against
/// finite differences. `limit` caps the coordinates probed per input.
pub fn check_inputs<F>(inputs: &[Tensor], limit: Option<usize>, f: F) -> Result<Report>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let grads = g.backward(y)?;
    let mut report = Report { max_rel_error: 0.0, checked: 0 };
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic_full = grads.of(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let idx = sample_indices(inputs[k].numel(), limit);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let x0 = inputs[k].data()[i];
            let h = STEP * x0.abs().max(1.0);
            let mut vals = [0.0; 4];
            for (v, o) in vals.iter_mut().zip(OFFSETS) {
                probe[k].data_mut()[i] = x0 + o * h;
                *v = eval_scalar(&probe, &f)?;
            }
            probe[k].data_mut()[i] = x0;
            numeric.push(stencil(vals, h));
            analytic.push(analytic_full[i]);
        }
        report.checked += idx.len();
        report.max_rel_error = report.max_rel_error.max(rel_error(&analytic, &numeric));
    }
    Ok(report)
}

/// Like [`check_inputs`] but differentiates with respect to the parameters of
/// `module`; `inputs` are held constant.
pub fn check_module<M, F>(module: &mut M, inputs: &[Tensor], limit: Option<usize>, f: F) -> Result<Report>
where
    M: Module,
    F: Fn(&M, &mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = f(m, &mut g, &vars)?;
        Ok(g.value(y).data()[0])
    };
    let analytic_all: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = f(module, &mut g, &vars)?;
        let grads = g.backward(y)?;
        module
            .params()
            .iter()
            .map(|p| grads.param(p).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; p.value.numel()]))
            .collect()
    };
    let mut report = Report { max_rel_error: 0.0, checked: 0 };
    let n_params = analytic_all.len();
    for k in 0..n_params {
        let numel = module.params()[k].value.numel();
        let idx = sample_indices(numel, limit);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let x0 = module.params()[k].value.data()[i];
            let h = STEP * x0.abs().max(1.0);
            let mut vals = [0.0; 4];
            for (v, o) in vals.iter_mut().zip(OFFSETS) {
                module.params_mut()[k].value.data_mut()[i] = x0 + o * h;
                *v = eval(module)?;
            }
            module.params_mut()[k].value.data_mut()[i] = x0;
            numeric.push(stencil(vals, h));
            analytic.push(analytic_all[k][i]);
        }
        report.checked += idx.len();
        report.max_rel_error = report.max_rel_error.max(rel_error(&analytic, &numeric));
    }
    Ok(report)
}

/// Fixed random weights for [`project`].
pub fn projection<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Reduces `y` to the scalar `sum(y * weights)`, so a single backward pass
/// exercises every output coordinate.
pub fn project(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.input(weights.clone());
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}
