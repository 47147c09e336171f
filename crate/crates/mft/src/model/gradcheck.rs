use mft_autograd::gradcheck::check_gradients;
use mft_autograd::{OpKind, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::MftConfig;
use super::forward::{forward_on_tape, Bound};
use super::params::MftParameters;
use crate::error::Result;
use crate::ingest::ClipSample;

/// Worst finite-difference disagreement within one parameter tensor.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl ParamCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Central-difference check of d(loss)/d(parameter) for every parameter,
/// with the weighted BCE loss of the clips in evaluation mode, in 64-bit.
pub fn check_model_gradients(
    config: &MftConfig,
    params: &MftParameters<f64>,
    clips: &[ClipSample],
    pos_weight: f64,
    h: f64,
    corrupted: Option<OpKind>,
) -> Result<Vec<ParamCheck>> {
    params.check_against(config)?;
    let inputs: Vec<_> = params.iter().map(|(_, t)| t.clone()).collect();
    let labels: Vec<f64> = clips.iter().map(|c| f64::from(c.label)).collect();
    let loss = |tape: &mut Tape<f64>, leaves: &[Var]| -> mft_autograd::Result<Var> {
        let bound = Bound::from_vars(config, leaves).map_err(to_tensor_error)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let mut probs = Vec::with_capacity(clips.len());
        for clip in clips {
            let (p, _) = forward_on_tape(tape, config, &bound, clip, false, &mut unused)
                .map_err(to_tensor_error)?;
            probs.push(p);
        }
        let probs = tape.concat(&probs, 0)?;
        tape.weighted_bce(probs, &labels, pos_weight)
    };
    let report = check_gradients(&inputs, h, corrupted, loss)?;
    Ok(params
        .names()
        .zip(report)
        .map(|(name, r)| ParamCheck {
            name: name.clone(),
            max_rel_err: r.max_rel_err,
            worst_element: r.worst_element,
            analytic: r.analytic,
            numeric: r.numeric,
        })
        .collect())
}

fn to_tensor_error(e: crate::error::MftError) -> mft_autograd::TensorError {
    match e {
        crate::error::MftError::Tensor(t) => t,
        other => mft_autograd::TensorError::Contract(other.to_string()),
    }
}
