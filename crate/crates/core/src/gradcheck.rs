//! Finite-difference gradient checking.
//!
//! This module is an *independent oracle* for the tape: it never looks at
//! analytic gradients to compute its reference, only at forward evaluations
//! of a user-supplied graph builder. Tests freeze its verdicts: every tape
//! primitive and every composed loss must match central differences.

use crate::error::Result;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error over all checked elements.
    pub max_rel_err: f64,
    /// Largest absolute error over all checked elements.
    pub max_abs_err: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    /// Number of elements compared.
    pub checked: usize,
}

impl GradCheck {
    /// True when the worst relative error is at or below `tol`.
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with a unit floor, so gradients near zero are judged by
/// absolute difference instead of exploding ratios.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Compare tape gradients of a scalar-valued graph against central finite
/// differences with the given `step`.
///
/// `build` must be a pure function of the input values: called repeatedly
/// with perturbed copies, it has to construct the same graph every time (any
/// randomness inside must be re-derived from fixed keys, not drawn from a
/// shared generator). The inputs are registered as params in order and
/// passed to `build` as node ids; `build` returns the scalar loss node.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).at(0, 0))
    };

    // Analytic gradients from one taped pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();

    let mut report = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, worst: (0, 0), checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for t_idx in 0..inputs.len() {
        for e_idx in 0..inputs[t_idx].len() {
            let orig = work[t_idx].data()[e_idx];
            work[t_idx].data_mut()[e_idx] = orig + step;
            let up = eval(&work)?;
            work[t_idx].data_mut()[e_idx] = orig - step;
            let down = eval(&work)?;
            work[t_idx].data_mut()[e_idx] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic[t_idx].data()[e_idx];
            let rel = rel_err(a, numeric);
            let abs = (a - numeric).abs();
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (t_idx, e_idx);
            }
            report.max_abs_err = report.max_abs_err.max(abs);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // Build a graph whose analytic gradient is deliberately broken by
        // treating x as constant on the analytic side: grad(x) stays zero
        // because the loss is computed from a detached copy.
        let x = Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let report = check(&[x], 1e-5, |tape, ids| {
            let detached = tape.input(tape.value(ids[0]).clone());
            let sq = tape.mul(detached, detached)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        // Numeric sees d(x^2)/dx = 2x, analytic sees 0: a must fail.
        assert!(report.max_rel_err > 0.5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn passes_a_correct_gradient() {
        let x = Tensor::from_vec(1, 3, vec![0.3, -0.7, 1.1]).unwrap();
        let report = check(&[x], 1e-5, |tape, ids| {
            let t = tape.tanh(ids[0]);
            let sq = tape.mul(t, t)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(report.within(1e-4), "rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 3);
    }
}
