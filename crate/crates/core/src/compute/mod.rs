//! Dense tensors and a define-by-run reverse-mode differentiation graph.
//!
//! Everything runs in `f64`. Models build a fresh [`Graph`] per step, bind
//! parameters as named differentiable inputs, and read gradients back by
//! name after [`Graph::backward`].

pub mod ctc;
mod graph;
mod tensor;

use std::collections::HashMap;

use thiserror::Error;

pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use graph::matmul_nn;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComputeError {
    #[error("invalid tensor shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have differing lengths")]
    RaggedRows,
    #[error("node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({op}): index {index} out of range {bound}")]
    IndexOutOfRange {
        node: usize,
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("no input named `{0}`")]
    UnknownInput(String),
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("name `{0}` already used")]
    DuplicateName(String),
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
}

/// Per-input outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct InputCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &InputCheck> {
        self.inputs.iter().filter(|c| !c.passed)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares [`Graph::backward`] against central differences for every
/// differentiable input. The graph is restored to its original inputs.
pub fn finite_diff_check(
    graph: &mut Graph,
    loss: NodeId,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport, ComputeError> {
    let analytic = graph.backward(loss)?;
    let mut inputs = Vec::new();
    for (name, id) in graph.grad_inputs() {
        let original = graph.value(id).clone();
        let grad = analytic
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(original.shape()));
        let mut check = InputCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for k in 0..original.len() {
            let mut eval_at = |delta: f64| -> Result<f64, ComputeError> {
                let mut t = original.clone();
                t.data_mut()[k] += delta;
                graph.set_input_value(id, t);
                graph.reevaluate()?;
                Ok(graph.value(loss).data()[0])
            };
            let plus = eval_at(epsilon)?;
            let minus = eval_at(-epsilon)?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[k];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || !err.is_finite() {
                check.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                check.worst_index = k;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_error < tolerance;
        graph.set_input_value(id, original);
        inputs.push(check);
    }
    graph.reevaluate()?;
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        inputs,
    })
}

/// Convenience wrapper that rebinds inputs by name before checking.
pub fn finite_diff_check_with(
    graph: &mut Graph,
    inputs: &HashMap<String, Tensor>,
    loss: NodeId,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport, ComputeError> {
    graph.forward(inputs)?;
    finite_diff_check(graph, loss, epsilon, tolerance)
}
