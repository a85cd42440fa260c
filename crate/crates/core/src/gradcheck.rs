//! Finite-difference verification of reverse-mode gradients.
//!
//! The checker rebuilds a user-provided loss graph with each parameter
//! element nudged by ±step, forms the central-difference quotient, and
//! compares it against the gradient reported by [`crate::autodiff`]. Errors
//! are relative with a floored denominator,
//! `|a - n| / max(1, |a|, |n|)`, so that near-zero gradients are judged on
//! absolute error instead of blowing up the ratio.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Relative error with a floored denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Largest relative error seen.
    pub max_rel_err: f64,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// Entries whose relative error exceeded the tolerance.
    pub failures: usize,
    /// Tolerance the sweep was run with.
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Sweeps every element of every parameter.
///
/// `build` must construct the loss from the given parameter nodes inside the
/// supplied graph; it is invoked once per perturbed evaluation, so it must be
/// deterministic. Parameters are registered in the order given, and the
/// returned node must be a scalar.
pub fn check_gradients<S: Scalar>(
    params: &[Tensor<S>],
    step: f64,
    tolerance: f64,
    mut build: impl FnMut(&mut Graph<S>, &[NodeId]) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    let eval = |tensors: &[Tensor<S>],
                build: &mut dyn FnMut(&mut Graph<S>, &[NodeId]) -> Result<NodeId>|
     -> Result<(Graph<S>, Vec<NodeId>, NodeId)> {
        let mut graph = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| graph.parameter(t.clone())).collect();
        let loss = build(&mut graph, &ids)?;
        if graph.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "gradient check requires a scalar loss, got {:?}",
                graph.value(loss).shape()
            )));
        }
        Ok((graph, ids, loss))
    };

    // Analytic gradients at the unperturbed point.
    let (graph, ids, loss) = eval(params, &mut build)?;
    let grads = graph.backward(loss)?;

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: 0,
        tolerance,
    };

    let mut work: Vec<Tensor<S>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.get(ids[pi]);
        for ei in 0..param.numel() {
            let a = analytic.map_or(0.0, |t| t.data()[ei].to_f64());
            let original = param.data()[ei];

            work[pi].data_mut()[ei] = S::from_f64(original.to_f64() + step);
            let (gp, _, lp) = eval(&work, &mut build)?;
            let f_plus = gp.value(lp).item()?.to_f64();

            work[pi].data_mut()[ei] = S::from_f64(original.to_f64() - step);
            let (gm, _, lm) = eval(&work, &mut build)?;
            let f_minus = gm.value(lm).item()?.to_f64();

            work[pi].data_mut()[ei] = original;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((pi, ei));
            }
            if err > tolerance {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}
