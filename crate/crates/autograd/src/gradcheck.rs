//! Central finite-difference checks of reverse-mode gradients.
//!
//! The numerical side only ever evaluates the forward pass, so it is an
//! independent oracle for the backward rules.

use crate::error::Result;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of [`relative_error`], so that gradients that are zero
/// on both sides compare as equal.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Worst element of one checked input.
#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    pub input: usize,
    pub max_rel_err: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl InputCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compares `backward()` against central differences with step `h` for every
/// element of every input. `f` builds a scalar from leaves it receives in the
/// same order as `inputs`.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    corrupted: Option<OpKind>,
    f: F,
) -> Result<Vec<InputCheck>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = match corrupted {
        Some(kind) => Tape::with_corrupted_backward(kind),
        None => Tape::new(),
    };
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &leaves)?;
        Ok(tape.value(loss).item())
    };

    let mut work = inputs.to_vec();
    let mut report = Vec::with_capacity(inputs.len());
    for (k, grad) in analytic.iter().enumerate() {
        let mut worst = InputCheck {
            input: k,
            max_rel_err: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..inputs[k].numel() {
            let original = inputs[k].data()[e];
            work[k].data_mut()[e] = original + h;
            let up = eval(&work)?;
            work[k].data_mut()[e] = original - h;
            let down = eval(&work)?;
            work[k].data_mut()[e] = original;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(grad.data()[e], numeric);
            if err > worst.max_rel_err || e == 0 {
                worst = InputCheck {
                    input: k,
                    max_rel_err: err,
                    worst_element: e,
                    analytic: grad.data()[e],
                    numeric,
                };
            }
        }
        report.push(worst);
    }
    Ok(report)
}
