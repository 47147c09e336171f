use mft_autograd::Real;
use serde::{Deserialize, Serialize};

use super::score_with_traces;
use crate::error::{MftError, Result};
use crate::ingest::ClipSample;
use crate::model::{AttentionTrace, Matrix, MftConfig, MftParameters};

/// Fusion (`mc`) and refinement (`gc`) attention averaged over clips, per
/// head and averaged over heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub tokens: Vec<String>,
    pub clips: usize,
    pub mc: Vec<Matrix>,
    pub mc_head_mean: Matrix,
    pub gc: Vec<Matrix>,
    pub gc_head_mean: Matrix,
}

fn mean_of(mats: &[&Matrix]) -> Matrix {
    let mut acc = mats[0].clone();
    for m in &mats[1..] {
        for (ra, rb) in acc.iter_mut().zip(m.iter()) {
            ra.iter_mut().zip(rb).for_each(|(a, b)| *a += b);
        }
    }
    let n = mats.len() as f64;
    acc.iter_mut().flatten().for_each(|a| *a /= n);
    acc
}

fn per_head_mean(traces: &[AttentionTrace], pick: fn(&AttentionTrace) -> &Vec<Matrix>) -> Vec<Matrix> {
    (0..pick(&traces[0]).len())
        .map(|h| mean_of(&traces.iter().map(|t| &pick(t)[h]).collect::<Vec<_>>()))
        .collect()
}

/// Elementwise means of already captured traces, which must share one layout.
pub fn summarize_traces(traces: &[AttentionTrace]) -> Result<AttentionSummary> {
    let first = traces
        .first()
        .ok_or_else(|| MftError::Contract("attention summary needs at least one clip".into()))?;
    if traces.iter().any(|t| {
        t.tokens != first.tokens || t.mc.len() != first.mc.len() || t.gc.len() != first.gc.len()
    }) {
        return Err(MftError::Contract("traces come from different model layouts".into()));
    }
    let mc = per_head_mean(traces, |t| &t.mc);
    let gc = per_head_mean(traces, |t| &t.gc);
    Ok(AttentionSummary {
        tokens: first.tokens.clone(),
        clips: traces.len(),
        mc_head_mean: mean_of(&mc.iter().collect::<Vec<_>>()),
        gc_head_mean: mean_of(&gc.iter().collect::<Vec<_>>()),
        mc,
        gc,
    })
}

pub fn attention_summary<T: Real>(
    model: &MftConfig,
    params: &MftParameters<T>,
    clips: &[ClipSample],
) -> Result<AttentionSummary> {
    if clips.is_empty() {
        return Err(MftError::Contract("attention summary needs at least one clip".into()));
    }
    let traces: Vec<AttentionTrace> = score_with_traces(model, params, clips)?
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    summarize_traces(&traces)
}
