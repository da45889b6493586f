//! Central finite-difference gradient checking.
//!
//! Rebuilds the graph from perturbed copies of the leaf tensors, so the
//! check stays independent of the backward implementation it verifies. Run
//! in f64: the f32 noise floor would swamp a 1e-4 step.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Worst element found by [`check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub elements_checked: usize,
}

/// Builds the scalar loss with `f` once per perturbed input element and
/// compares `(f(x+h) − f(x−h)) / 2h` against the analytic gradient of every
/// leaf. The relative error denominator is floored at 1e-3 so that
/// near-zero gradients are compared absolutely.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone(), true)).collect();
    let loss = f(&mut graph, &vars)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| {
            graph
                .grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; graph.value(*v).numel()])
        })
        .collect();

    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &vs)?;
        Ok(g.scalar_value(loss))
    };

    let mut max_rel_error = 0.0f64;
    let mut elements_checked = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        for (e, &an) in analytic[i].iter().enumerate().take(input.numel()) {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= step;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let denom = fd.abs().max(an.abs()).max(1e-3);
            let rel = (fd - an).abs() / denom;
            if rel > max_rel_error {
                max_rel_error = rel;
            }
            elements_checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        elements_checked,
    })
}
