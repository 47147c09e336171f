//! Metrics, the ablation grid and attention summaries.

mod ablation;
mod metrics;
mod summary;

pub use ablation::{ablation_run, AblationRow, AblationTable, Variant};
pub use metrics::{compute_metrics, roc_auc, MetricsReport};
pub use summary::{attention_summary, summarize_traces, AttentionSummary};

use mft_autograd::{Real, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ingest::ClipSample;
use crate::model::{forward_on_tape, AttentionTrace, Bound, MftConfig, MftParameters};

/// Clips scored on one tape before it is discarded.
const SCORE_CHUNK: usize = 32;

/// Evaluation-mode probabilities and traces of every clip, in order.
pub fn score_with_traces<T: Real>(
    model: &MftConfig,
    params: &MftParameters<T>,
    clips: &[ClipSample],
) -> Result<Vec<(f64, AttentionTrace)>> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(SCORE_CHUNK) {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, false);
        for clip in chunk {
            let (p, trace) = forward_on_tape(&mut tape, model, &bound, clip, false, &mut unused)?;
            out.push((tape.value(p).item().as_f64(), trace));
        }
    }
    Ok(out)
}

pub fn score_clips<T: Real>(
    model: &MftConfig,
    params: &MftParameters<T>,
    clips: &[ClipSample],
) -> Result<Vec<f64>> {
    Ok(score_with_traces(model, params, clips)?
        .into_iter()
        .map(|(p, _)| p)
        .collect())
}

pub fn evaluate<T: Real>(
    model: &MftConfig,
    params: &MftParameters<T>,
    clips: &[ClipSample],
    threshold: f64,
) -> Result<MetricsReport> {
    let scores = score_clips(model, params, clips)?;
    let labels: Vec<u8> = clips.iter().map(|c| c.label).collect();
    compute_metrics(&scores, &labels, threshold)
}
