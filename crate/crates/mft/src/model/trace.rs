use serde::{Deserialize, Serialize};

/// Row-major matrix of attention weights.
pub type Matrix = Vec<Vec<f64>>;

/// Attention weights captured during one forward pass.
///
/// `mi` and `gi` are indexed `[context][head]` with contexts listed in
/// `contexts`; `mc` and `gc` are indexed by head over the tokens in `tokens`.
/// Mean-pool and modality-attention refinement record a single pseudo-head
/// holding the token weights they apply.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub tokens: Vec<String>,
    pub contexts: Vec<String>,
    pub mi: Vec<Vec<Matrix>>,
    pub mc: Vec<Matrix>,
    pub gi: Vec<Vec<Matrix>>,
    pub gc: Vec<Matrix>,
}

impl AttentionTrace {
    pub fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.mi
            .iter()
            .flatten()
            .chain(&self.mc)
            .chain(self.gi.iter().flatten())
            .chain(&self.gc)
    }

    /// Largest deviation of any row sum from 1, or of any weight below 0.
    pub fn max_stochastic_error(&self) -> f64 {
        self.matrices()
            .flatten()
            .map(|row| {
                let sum_err = (row.iter().sum::<f64>() - 1.0).abs();
                let neg = row.iter().fold(0.0f64, |m, &x| m.max(-x));
                sum_err.max(neg)
            })
            .fold(0.0, f64::max)
    }
}

pub fn shape(m: &Matrix) -> (usize, usize) {
    (m.len(), m.first().map_or(0, Vec::len))
}
