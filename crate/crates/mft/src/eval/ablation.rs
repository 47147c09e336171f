use mft_autograd::Real;
use serde::{Deserialize, Serialize};

use super::{evaluate, MetricsReport};
use crate::error::{MftError, Result};
use crate::ingest::ClipSample;
use crate::model::{param_count, CcrMode, MftConfig};
use crate::train::{train, TrainConfig};

/// The full model and its five ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    /// Environment context removed.
    V1,
    /// Behavior context removed.
    V2,
    /// Behavior and environment removed.
    V3,
    /// Global refinement replaced by mean pooling.
    V4,
    /// Global refinement replaced by modality attention.
    V5,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::V1,
        Variant::V2,
        Variant::V3,
        Variant::V4,
        Variant::V5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "MFT",
            Variant::V1 => "MFT-v1",
            Variant::V2 => "MFT-v2",
            Variant::V3 => "MFT-v3",
            Variant::V4 => "MFT-v4",
            Variant::V5 => "MFT-v5",
        }
    }

    /// Accepts `full`, `v1`..`v5` and the display names, case-insensitively.
    pub fn parse(s: &str) -> Result<Variant> {
        let lower = s.to_ascii_lowercase();
        let key = lower.strip_prefix("mft-").unwrap_or(&lower);
        Ok(match key {
            "full" | "mft" => Variant::Full,
            "v1" => Variant::V1,
            "v2" => Variant::V2,
            "v3" => Variant::V3,
            "v4" => Variant::V4,
            "v5" => Variant::V5,
            _ => return Err(MftError::Config(format!("unknown variant {s:?}"))),
        })
    }

    pub fn apply(self, base: &MftConfig) -> MftConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::V1 => c.use_e = false,
            Variant::V2 => c.use_p = false,
            Variant::V3 => {
                c.use_p = false;
                c.use_e = false;
            }
            Variant::V4 => c.ccr_mode = CcrMode::MeanPool,
            Variant::V5 => c.ccr_mode = CcrMode::ModalityAttn,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub param_count: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v.name())
    }

    /// `Variant,Acc,AUC,F1,Precision,Recall`; an undefined AUC is left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Variant,Acc,AUC,F1,Precision,Recall\n");
        for r in &self.rows {
            let m = &r.metrics;
            let auc = m.auc.map(|a| format!("{a:.4}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.4},{},{:.4},{:.4},{:.4}\n",
                r.variant, m.acc, auc, m.f1, m.precision, m.recall
            ));
        }
        out
    }
}

/// Trains every variant with the same seed and data, keeps the
/// best-validation parameters and scores them on `test`.
pub fn ablation_run<T: Real>(
    base: &MftConfig,
    variants: &[Variant],
    train_clips: &[ClipSample],
    val_clips: &[ClipSample],
    test_clips: &[ClipSample],
    config: &TrainConfig,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let cfg = v.apply(base);
        let outcome = train::<T>(&cfg, train_clips, val_clips, config)?;
        rows.push(AblationRow {
            variant: v.name().to_string(),
            param_count: param_count(&cfg),
            metrics: evaluate(&cfg, &outcome.best_params, test_clips, 0.5)?,
        });
    }
    Ok(AblationTable { rows })
}
