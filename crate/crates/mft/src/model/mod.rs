//! Multi-context fusion transformer.
//!
//! Each enabled context is embedded, prefixed with its own context token and
//! mixed by self-attention (ICF). The context tokens and a global token are
//! fused across contexts (CCF), each context token is refined against its own
//! sequence (ICR), and the global token is refined against all refined
//! context tokens (CCR) before the prediction head.

mod config;
mod forward;
mod gradcheck;
mod params;
mod trace;

pub use config::{param_count, CcrMode, MftConfig, LAYER_NORM_EPS};
pub use forward::{forward, forward_on_tape, positional_encoding, predict, Bound, Stages};
#[cfg(test)]
pub(crate) use forward::forward_ordered;
pub use gradcheck::{check_model_gradients, ParamCheck};
pub use params::MftParameters;
pub use trace::{shape, AttentionTrace, Matrix};
