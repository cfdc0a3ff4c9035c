//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward function, so it is an
//! independent oracle for the analytic gradients produced by
//! [`Tape::backward`](crate::Tape::backward).

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Lower bound of the relative-error denominator. Central differences
    /// carry roughly `1e-16 / step` of round-off, so gradients far below this
    /// floor cannot be resolved.
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            abs_floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// Compares analytic and numeric gradients of the scalar `f(inputs)` with
    /// respect to every entry of every input.
    ///
    /// Relative error is `|a − n| / max(|a|, |n|, abs_floor)`.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let eval = |vals: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let out = f(&mut tape, &vars)?;
            Ok(tape.value(out).item())
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        tape.backward(out)?;

        let mut report = GradReport {
            max_rel_error: 0.0,
            worst_input: 0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let mut perturbed = inputs.to_vec();
        for (which, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[which]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            for k in 0..input.len() {
                let orig = input.data()[k];
                perturbed[which].data_mut()[k] = orig + self.step;
                let up = eval(&perturbed)?;
                perturbed[which].data_mut()[k] = orig - self.step;
                let down = eval(&perturbed)?;
                perturbed[which].data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * self.step);
                let a = analytic.data()[k];
                let denom = a.abs().max(numeric.abs()).max(self.abs_floor);
                let rel = (a - numeric).abs() / denom;
                if rel > report.max_rel_error {
                    report = GradReport {
                        max_rel_error: rel,
                        worst_input: which,
                        worst_index: k,
                        analytic: a,
                        numeric,
                    };
                }
            }
        }
        Ok(report)
    }
}
